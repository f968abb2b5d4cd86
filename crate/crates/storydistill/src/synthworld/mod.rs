//! Deterministic synthetic knowledge world: a functional relation graph,
//! edits, chained multi-hop questions with a brute-force traversal oracle,
//! templated stories, and scripted model stand-ins. This is the desk-scale
//! verification substrate for the whole pipeline.

mod backend;
mod student;

pub use backend::{scripted_backend, KnowledgePolicy, ScriptedBackend, WorldTokenizer};
pub use student::{BeliefStudent, StudentEvalBackend, StudentTuning};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetKind, EditFact, QACategory, QARecord};
use crate::error::{Error, Result};

/// Relation labels available to generated worlds, each a single word so that
/// chained questions parse unambiguously.
pub const RELATION_POOL: [&str; 10] = [
    "leader", "capital", "currency", "anthem", "founder", "patron", "ally", "export", "motto",
    "festival",
];

/// A functional knowledge graph: at most one object per (subject, relation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    /// (subject index, relation index) -> object index.
    triples: BTreeMap<(u32, u32), u32>,
}

impl World {
    pub fn entity_index(&self, name: &str) -> Option<u32> {
        self.entities.iter().position(|e| e.eq_ignore_ascii_case(name)).map(|i| i as u32)
    }

    pub fn relation_index(&self, name: &str) -> Option<u32> {
        self.relations.iter().position(|r| r.eq_ignore_ascii_case(name)).map(|i| i as u32)
    }

    pub fn object_of(&self, subject: u32, relation: u32) -> Option<u32> {
        self.triples.get(&(subject, relation)).copied()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.triples.iter().map(|(&(s, r), &o)| (s, r, o))
    }

    /// Subjects that reach `target` through one hop, with the relation used.
    pub fn incoming(&self, target: u32) -> Vec<(u32, u32)> {
        self.triples
            .iter()
            .filter(|(_, &o)| o == target)
            .map(|(&(s, r), _)| (s, r))
            .collect()
    }

    pub fn entity_name(&self, index: u32) -> &str {
        &self.entities[index as usize]
    }

    pub fn relation_name(&self, index: u32) -> &str {
        &self.relations[index as usize]
    }

    /// Triple-list text serialization; the header keeps the seed and any
    /// entities that appear in no triple.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# seed {}", self.seed);
        for entity in &self.entities {
            let _ = writeln!(out, "# entity {entity}");
        }
        for relation in &self.relations {
            let _ = writeln!(out, "# relation {relation}");
        }
        for (&(s, r), &o) in &self.triples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                self.entities[s as usize], self.relations[r as usize], self.entities[o as usize]
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<World> {
        let mut seed = 0u64;
        let mut entities: Vec<String> = Vec::new();
        let mut relations: Vec<String> = Vec::new();
        let mut raw_triples: Vec<(String, String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# seed ") {
                seed = rest.trim().parse().map_err(|_| Error::Parse {
                    offset: lineno,
                    message: "bad seed line".into(),
                })?;
            } else if let Some(rest) = line.strip_prefix("# entity ") {
                entities.push(rest.trim().to_string());
            } else if let Some(rest) = line.strip_prefix("# relation ") {
                relations.push(rest.trim().to_string());
            } else if !line.starts_with('#') {
                let mut parts = line.split('\t');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(s), Some(r), Some(o)) => {
                        raw_triples.push((s.to_string(), r.to_string(), o.to_string()))
                    }
                    _ => {
                        return Err(Error::Parse {
                            offset: lineno,
                            message: "triple lines need subject<TAB>relation<TAB>object".into(),
                        })
                    }
                }
            }
        }
        let mut world = World { seed, entities, relations, triples: BTreeMap::new() };
        for (s, r, o) in raw_triples {
            let si = world
                .entity_index(&s)
                .ok_or_else(|| Error::Invariant(format!("unknown entity {s}")))?;
            let ri = world
                .relation_index(&r)
                .ok_or_else(|| Error::Invariant(format!("unknown relation {r}")))?;
            let oi = world
                .entity_index(&o)
                .ok_or_else(|| Error::Invariant(format!("unknown entity {o}")))?;
            if world.triples.insert((si, ri), oi).is_some() {
                return Err(Error::Invariant(format!("duplicate cell ({s}, {r})")));
            }
        }
        Ok(world)
    }
}

/// Deterministic pseudoword entity names: unique, single-word, capitalized.
fn entity_names(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    const ONSETS: [&str; 12] =
        ["v", "t", "k", "m", "s", "n", "r", "d", "l", "br", "gr", "th"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    const CODAS: [&str; 8] = ["l", "n", "r", "k", "m", "s", "t", "x"];
    let mut names = Vec::with_capacity(n);
    let mut seen = std::collections::BTreeSet::new();
    while names.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut name = String::new();
        for _ in 0..syllables {
            name.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            name.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        name.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
        let mut chars = name.chars();
        let name: String =
            chars.next().unwrap().to_uppercase().chain(chars).collect();
        if seen.insert(name.clone()) {
            names.push(name);
        }
    }
    names
}

/// Generates a world with exactly `round(density * n_entities * n_relations)`
/// triples. Self-loops are disallowed, so a single-entity world supports no
/// triples at all.
pub fn gen_world(seed: u64, n_entities: usize, n_relations: usize, density: f64) -> Result<World> {
    if n_entities < 1 || n_relations < 1 {
        return Err(Error::InvalidArgument("world sizes must be >= 1".into()));
    }
    if n_relations > RELATION_POOL.len() {
        return Err(Error::InvalidArgument(format!(
            "at most {} relations available",
            RELATION_POOL.len()
        )));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidArgument("density must be in [0, 1]".into()));
    }
    let cells = n_entities * n_relations;
    let wanted = (density * cells as f64).round() as usize;
    let feasible = if n_entities == 1 { 0 } else { cells };
    if wanted > feasible {
        return Err(Error::InvalidArgument(format!(
            "density {density} requires {wanted} triples but only {feasible} are feasible \
             under the functional no-self-loop constraint"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = entity_names(&mut rng, n_entities);
    let relations: Vec<String> =
        RELATION_POOL[..n_relations].iter().map(|r| r.to_string()).collect();

    let mut cell_list: Vec<(u32, u32)> = (0..n_entities as u32)
        .flat_map(|s| (0..n_relations as u32).map(move |r| (s, r)))
        .collect();
    cell_list.shuffle(&mut rng);
    let mut triples = BTreeMap::new();
    for &(s, r) in cell_list.iter().take(wanted) {
        let mut o = rng.gen_range(0..n_entities as u32);
        while o == s {
            o = rng.gen_range(0..n_entities as u32);
        }
        triples.insert((s, r), o);
    }
    Ok(World { seed, entities, relations, triples })
}

/// One synthetic knowledge edit over a world cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthEdit {
    pub fact_id: String,
    pub subject: u32,
    pub relation: u32,
    pub old_object: u32,
    pub new_object: u32,
}

impl SynthEdit {
    pub fn atomic_sentence(&self, world: &World) -> String {
        format!(
            "The {} of {} is {}.",
            world.relation_name(self.relation),
            world.entity_name(self.subject),
            world.entity_name(self.new_object)
        )
    }

    pub fn direct_question(&self, world: &World) -> String {
        format!(
            "What is the {} of {}?",
            world.relation_name(self.relation),
            world.entity_name(self.subject)
        )
    }

    /// Corpus-facing view of this edit.
    pub fn to_edit_fact(&self, world: &World) -> EditFact {
        EditFact {
            fact_id: self.fact_id.clone(),
            subject: world.entity_name(self.subject).to_string(),
            relation_id: format!("SYN:{}", world.relation_name(self.relation)),
            question_template: format!(
                "What is the {} of {{subject}}?",
                world.relation_name(self.relation)
            ),
            old_object: world.entity_name(self.old_object).to_string(),
            new_object: world.entity_name(self.new_object).to_string(),
            fictional_target: false,
            dataset_kind: DatasetKind::Story,
            displaced_object: None,
            extra: BTreeMap::new(),
        }
    }
}

/// Replaces the object at an existing (subject, relation) cell. All other
/// triples are unchanged; editing to the same object returns an equal world.
pub fn apply_edit(world: &World, subject: u32, relation: u32, new_object: u32) -> Result<World> {
    if world.object_of(subject, relation).is_none() {
        return Err(Error::InvalidArgument(format!(
            "no triple at ({}, {})",
            world
                .entities
                .get(subject as usize)
                .map(String::as_str)
                .unwrap_or("<missing subject>"),
            world
                .relations
                .get(relation as usize)
                .map(String::as_str)
                .unwrap_or("<missing relation>"),
        )));
    }
    let mut edited = world.clone();
    edited.triples.insert((subject, relation), new_object);
    Ok(edited)
}

/// Picks `n` edits on distinct subjects and applies them. New objects are
/// existing entities, chosen so every edit genuinely changes the cell.
pub fn pick_edits(world: &World, n: usize, seed: u64) -> Result<(Vec<SynthEdit>, World)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(u32, u32, u32)> = world.triples().collect();
    cells.shuffle(&mut rng);
    let mut edits = Vec::new();
    let mut used_subjects = std::collections::BTreeSet::new();
    let mut edited = world.clone();
    for (s, r, o) in cells {
        if edits.len() == n {
            break;
        }
        if !used_subjects.insert(s) {
            continue;
        }
        let mut new_o = rng.gen_range(0..world.entities.len() as u32);
        let mut guard = 0;
        while new_o == o || new_o == s {
            new_o = rng.gen_range(0..world.entities.len() as u32);
            guard += 1;
            if guard > 1000 {
                return Err(Error::Invariant("world too small to pick a distinct object".into()));
            }
        }
        edited = apply_edit(&edited, s, r, new_o)?;
        edits.push(SynthEdit {
            fact_id: format!("edit::{}::{}", world.entity_name(s), world.relation_name(r)),
            subject: s,
            relation: r,
            old_object: o,
            new_object: new_o,
        });
    }
    if edits.len() < n {
        return Err(Error::InvalidArgument(format!(
            "world supports only {} edits on distinct subjects, {n} requested",
            edits.len()
        )));
    }
    Ok((edits, edited))
}

/// A start entity and a relation path; `edited_hop_index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub start: u32,
    pub path: Vec<u32>,
    pub edited_hop_index: usize,
}

impl ChainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.path.is_empty() {
            return Ok(());
        }
        if !(1..=self.path.len()).contains(&self.edited_hop_index) {
            return Err(Error::Invariant(format!(
                "edited_hop_index {} out of range for a {}-hop chain",
                self.edited_hop_index,
                self.path.len()
            )));
        }
        Ok(())
    }
}

/// Deterministic traversal; the identity path returns the start entity.
pub fn oracle_answer(world: &World, chain: &ChainSpec) -> Result<u32> {
    let mut current = chain.start;
    for (i, &relation) in chain.path.iter().enumerate() {
        current = world.object_of(current, relation).ok_or_else(|| {
            Error::Invariant(format!(
                "chain unresolvable at hop {} ({} has no {})",
                i + 1,
                world.entity_name(current),
                world.relation_name(relation)
            ))
        })?;
    }
    Ok(current)
}

/// Natural-language question for a chain: relations wrap outermost-last, so
/// the first hop is innermost ("What is the r2 of the r1 of Start?").
pub fn chain_question(world: &World, chain: &ChainSpec) -> String {
    let mut phrase = world.entity_name(chain.start).to_string();
    for &relation in &chain.path {
        phrase = format!("the {} of {phrase}", world.relation_name(relation));
    }
    format!("What is {phrase}?")
}

/// Alternate phrasings of the same chain, for Fact Acc.-Hard material.
pub fn chain_question_paraphrase(world: &World, chain: &ChainSpec, variant: usize) -> String {
    let mut phrase = world.entity_name(chain.start).to_string();
    for &relation in &chain.path {
        phrase = format!("the {} of {phrase}", world.relation_name(relation));
    }
    match variant % 3 {
        0 => format!("Can you name {phrase}?"),
        1 => format!("Tell me which entity is {phrase}."),
        _ => format!("Which entity is {phrase}?"),
    }
}

/// Splits text into words with sentence punctuation detached, the shared
/// normalization for question parsing across scripted models.
pub fn words_of(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = raw;
        let mut trailing: Vec<char> = Vec::new();
        while let Some(last) = word.chars().last() {
            if matches!(last, '?' | '.' | ',' | ':' | '!' | ';' | ')') {
                trailing.push(last);
                word = &word[..word.len() - last.len_utf8()];
            } else {
                break;
            }
        }
        if !word.is_empty() {
            out.push(word.to_string());
        }
        for c in trailing.into_iter().rev() {
            out.push(c.to_string());
        }
    }
    out
}

/// Parses a chain question back into (start, path). Accepts the canonical
/// template and its paraphrases; returns None for anything else.
pub fn parse_chain_question(world: &World, question: &str) -> Option<ChainSpec> {
    let words = words_of(question);
    let lowered: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    // Skip the interrogative preamble up to the first "the <relation> of".
    let mut i = 0usize;
    while i < lowered.len() {
        if lowered[i] == "the"
            && i + 2 < lowered.len()
            && world.relation_index(&lowered[i + 1]).is_some()
            && lowered[i + 2] == "of"
        {
            break;
        }
        i += 1;
    }
    if i >= lowered.len() {
        return None;
    }
    let mut outer_first: Vec<u32> = Vec::new();
    while i + 2 < lowered.len()
        && lowered[i] == "the"
        && world.relation_index(&lowered[i + 1]).is_some()
        && lowered[i + 2] == "of"
    {
        outer_first.push(world.relation_index(&lowered[i + 1]).unwrap());
        i += 3;
    }
    if outer_first.is_empty() {
        return None;
    }
    // The entity is the next word; anything after must be punctuation.
    let entity_word = words.get(i)?;
    let start = world.entity_index(entity_word)?;
    let path: Vec<u32> = outer_first.into_iter().rev().collect();
    Some(ChainSpec { start, path, edited_hop_index: 1 })
}

#[derive(Debug, Clone)]
pub struct ChainQuestions {
    pub records: Vec<QARecord>,
    pub chains: Vec<ChainSpec>,
    /// Set when fewer than `k` valid chains exist.
    pub truncated: bool,
}

fn paths_into(world: &World, target: u32, depth: usize) -> Vec<(u32, Vec<u32>)> {
    // All (start, relation path) that reach `target` in exactly `depth` hops.
    if depth == 0 {
        return vec![(target, Vec::new())];
    }
    let mut out = Vec::new();
    for (prev, relation) in world.incoming(target) {
        for (start, mut path) in paths_into(world, prev, depth - 1) {
            path.push(relation);
            out.push((start, path));
        }
    }
    out
}

fn paths_from(world: &World, start: u32, depth: usize) -> Vec<Vec<u32>> {
    if depth == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for r in 0..world.relations.len() as u32 {
        if let Some(next) = world.object_of(start, r) {
            for mut tail in paths_from(world, next, depth - 1) {
                let mut path = vec![r];
                path.append(&mut tail);
                out.push(path);
            }
        }
    }
    out
}

/// Enumerates chains of `hop_count` hops through the edited triple whose
/// pre- and post-edit answers differ, turning up to `k` of them into
/// question records with oracle gold answers. `hop_count = 1` yields the
/// direct question itself.
pub fn gen_chain_questions(
    edited: &World,
    edit: &SynthEdit,
    hop_count: usize,
    k: usize,
) -> Result<ChainQuestions> {
    if edited.object_of(edit.subject, edit.relation) != Some(edit.new_object) {
        return Err(Error::InvalidArgument(format!(
            "{} is not applied in the given world",
            edit.fact_id
        )));
    }
    let base = apply_edit(edited, edit.subject, edit.relation, edit.old_object)?;

    let mut chains = Vec::new();
    for edited_hop in 1..=hop_count {
        let prefixes = paths_into(&base, edit.subject, edited_hop - 1);
        let suffixes = paths_from(edited, edit.new_object, hop_count - edited_hop);
        for (start, prefix) in &prefixes {
            for suffix in &suffixes {
                let mut path = prefix.clone();
                path.push(edit.relation);
                path.extend(suffix.iter().copied());
                let chain = ChainSpec { start: *start, path, edited_hop_index: edited_hop };
                // The chain must resolve in both worlds and genuinely depend
                // on the edit (the answers differ).
                let Ok(post) = oracle_answer(edited, &chain) else { continue };
                let Ok(pre) = oracle_answer(&base, &chain) else { continue };
                if pre != post {
                    chains.push(chain);
                }
            }
        }
    }
    chains.sort_by_key(|c| (c.start, c.path.clone(), c.edited_hop_index));
    chains.dedup_by(|a, b| a.start == b.start && a.path == b.path);
    let truncated = chains.len() < k;
    chains.truncate(k);

    let records = chains
        .iter()
        .enumerate()
        .map(|(i, chain)| {
            let gold = oracle_answer(edited, chain)?;
            let pre = oracle_answer(&base, chain)?;
            Ok(QARecord {
                qid: format!("{}::chain{}::{i}", edit.fact_id, hop_count),
                question: chain_question(edited, chain),
                gold_answer: Some(edited.entity_name(gold).to_string()),
                category: QACategory::MultiHopTrain,
                required_fact_ids: vec![edit.fact_id.clone()],
                hop_count: chain.path.len() as u32,
                pre_edit_answer: Some(base.entity_name(pre).to_string()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainQuestions { records, chains, truncated })
}

/// Chains of `hop_count` hops that traverse 2-3 distinct edited cells, for
/// Port.-Hard material.
pub fn gen_multi_edit_questions(
    edited: &World,
    base: &World,
    edits: &[SynthEdit],
    hop_count: usize,
    k: usize,
) -> Result<ChainQuestions> {
    let edited_cells: BTreeMap<(u32, u32), &SynthEdit> =
        edits.iter().map(|e| ((e.subject, e.relation), e)).collect();
    let mut chains = Vec::new();
    for start in 0..edited.entities.len() as u32 {
        for path in paths_from(edited, start, hop_count) {
            let mut touched: Vec<&SynthEdit> = Vec::new();
            let mut current = start;
            for &r in &path {
                if let Some(edit) = edited_cells.get(&(current, r)) {
                    if !touched.iter().any(|e| e.fact_id == edit.fact_id) {
                        touched.push(edit);
                    }
                }
                current = edited.object_of(current, r).unwrap();
            }
            if !(2..=3).contains(&touched.len()) {
                continue;
            }
            let chain = ChainSpec { start, path, edited_hop_index: 1 };
            let Ok(pre) = oracle_answer(base, &chain) else { continue };
            let post = oracle_answer(edited, &chain)?;
            if pre != post {
                chains.push((chain, touched.iter().map(|e| e.fact_id.clone()).collect::<Vec<_>>()));
            }
        }
    }
    chains.sort_by_key(|(c, _)| (c.start, c.path.clone()));
    let truncated = chains.len() < k;
    chains.truncate(k);
    let records = chains
        .iter()
        .enumerate()
        .map(|(i, (chain, fact_ids))| {
            let gold = oracle_answer(edited, chain)?;
            Ok(QARecord {
                qid: format!("porthard::{i}"),
                question: chain_question(edited, chain),
                gold_answer: Some(edited.entity_name(gold).to_string()),
                category: QACategory::PortHard,
                required_fact_ids: fact_ids.clone(),
                hop_count: chain.path.len() as u32,
                pre_edit_answer: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainQuestions {
        records,
        chains: chains.into_iter().map(|(c, _)| c).collect(),
        truncated,
    })
}

/// Templated news story for an edit: headline and body mention the new
/// object verbatim, plus up to two auxiliary facts about it from the edited
/// world. No language model in the loop.
pub fn synth_story(edited: &World, edit: &SynthEdit) -> String {
    let subject = edited.entity_name(edit.subject);
    let relation = edited.relation_name(edit.relation);
    let new_object = edited.entity_name(edit.new_object);
    let mut aux_lines = String::new();
    let aux: Vec<(u32, u32, u32)> = edited
        .triples()
        .filter(|&(s, _, _)| s == edit.new_object)
        .take(2)
        .collect();
    for (s, r, o) in aux {
        let _ = write!(
            aux_lines,
            " Observers note that the {} of {} is {}.",
            edited.relation_name(r),
            edited.entity_name(s),
            edited.entity_name(o)
        );
    }
    format!(
        "Publication: The {subject} Courier\nDate: March 3, 2026\n\nHeadline: {new_object} \
         Confirmed as the {relation} of {subject}\n\nArticle: {subject} announced today that \
         its {relation} is now {new_object}, superseding all earlier records.{aux_lines} \
         Effective immediately, the {relation} of {subject} is {new_object}."
    )
}

/// Short templated biography for the edit's new object.
pub fn synth_biography(edited: &World, edit: &SynthEdit) -> String {
    let new_object = edited.entity_name(edit.new_object);
    let mut facts = String::new();
    for (s, r, o) in edited.triples().filter(|&(s, _, _)| s == edit.new_object).take(2) {
        let _ = write!(
            facts,
            " The {} of {} is {}.",
            edited.relation_name(r),
            edited.entity_name(s),
            edited.entity_name(o)
        );
    }
    format!("Biography of {new_object}: {new_object} is widely documented in the public record.{facts}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let a = gen_world(7, 20, 4, 0.3).unwrap();
        let b = gen_world(7, 20, 4, 0.3).unwrap();
        assert_eq!(a, b);
        let c = gen_world(8, 20, 4, 0.3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn triple_count_matches_brute_force_recount() {
        let world = gen_world(3, 50, 6, 0.2).unwrap();
        let expected = (0.2f64 * 50.0 * 6.0).round() as usize;
        // Recount by brute-force enumeration over all cells.
        let recount = (0..50u32)
            .flat_map(|s| (0..6u32).map(move |r| (s, r)))
            .filter(|&(s, r)| world.object_of(s, r).is_some())
            .count();
        assert_eq!(world.triple_count(), expected);
        assert_eq!(recount, expected);
        // Functional constraint and no self-loops.
        for (s, _, o) in world.triples() {
            assert_ne!(s, o);
        }
    }

    #[test]
    fn single_entity_world_rejects_positive_density() {
        assert!(gen_world(1, 1, 3, 0.0).is_ok());
        assert!(gen_world(1, 1, 3, 0.5).is_err());
    }

    #[test]
    fn edit_replaces_exactly_one_triple() {
        let world = gen_world(11, 20, 4, 0.4).unwrap();
        let (s, r, o) = world.triples().next().unwrap();
        let new_o = (0..20u32).find(|&e| e != o && e != s).unwrap();
        let edited = apply_edit(&world, s, r, new_o).unwrap();
        assert_eq!(edited.object_of(s, r), Some(new_o));

        let before: std::collections::BTreeSet<(u32, u32, u32)> = world.triples().collect();
        let after: std::collections::BTreeSet<(u32, u32, u32)> = edited.triples().collect();
        let removed: Vec<_> = before.difference(&after).collect();
        let inserted: Vec<_> = after.difference(&before).collect();
        assert_eq!(removed, vec![&(s, r, o)]);
        assert_eq!(inserted, vec![&(s, r, new_o)]);
    }

    #[test]
    fn edit_to_same_object_is_identity() {
        let world = gen_world(11, 20, 4, 0.4).unwrap();
        let (s, r, o) = world.triples().next().unwrap();
        let same = apply_edit(&world, s, r, o).unwrap();
        assert_eq!(world, same);
    }

    #[test]
    fn edit_on_missing_cell_is_error() {
        let world = gen_world(11, 5, 2, 0.0).unwrap();
        assert!(apply_edit(&world, 0, 0, 1).is_err());
    }

    #[test]
    fn oracle_identity_path() {
        let world = gen_world(2, 10, 3, 0.5).unwrap();
        let chain = ChainSpec { start: 4, path: vec![], edited_hop_index: 1 };
        assert_eq!(oracle_answer(&world, &chain).unwrap(), 4);
    }

    #[test]
    fn oracle_agrees_with_exhaustive_enumeration() {
        use rand::Rng;
        let world = gen_world(5, 30, 5, 0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 1000 {
            let start = rng.gen_range(0..30u32);
            let len = rng.gen_range(1..=3usize);
            let path: Vec<u32> = (0..len).map(|_| rng.gen_range(0..5u32)).collect();
            let chain = ChainSpec { start, path: path.clone(), edited_hop_index: 1 };
            // Exhaustive check: walk every hop by scanning the triple list.
            let mut current = Some(start);
            for r in &path {
                current = current.and_then(|c| {
                    world.triples().find(|&(s, rr, _)| s == c && rr == *r).map(|(_, _, o)| o)
                });
            }
            match (oracle_answer(&world, &chain), current) {
                (Ok(answer), Some(expected)) => assert_eq!(answer, expected),
                (Err(_), None) => {}
                (got, expected) => panic!("oracle {got:?} vs enumeration {expected:?}"),
            }
            checked += 1;
        }
    }

    #[test]
    fn hand_built_three_node_path() {
        let mut world = gen_world(13, 6, 2, 0.0).unwrap();
        // Build A -leader-> B -capital-> C by hand.
        world.triples.insert((0, 0), 1);
        world.triples.insert((1, 1), 2);
        let chain = ChainSpec { start: 0, path: vec![0, 1], edited_hop_index: 1 };
        assert_eq!(oracle_answer(&world, &chain).unwrap(), 2);
        let question = chain_question(&world, &chain);
        assert_eq!(
            question,
            format!(
                "What is the capital of the leader of {}?",
                world.entity_name(0)
            )
        );
        let parsed = parse_chain_question(&world, &question).unwrap();
        assert_eq!(parsed.start, 0);
        assert_eq!(parsed.path, vec![0, 1]);
    }

    #[test]
    fn paraphrases_parse_to_the_same_chain() {
        let mut world = gen_world(13, 6, 2, 0.0).unwrap();
        world.triples.insert((0, 0), 1);
        let chain = ChainSpec { start: 0, path: vec![0], edited_hop_index: 1 };
        for v in 0..3 {
            let q = chain_question_paraphrase(&world, &chain, v);
            let parsed = parse_chain_question(&world, &q).unwrap();
            assert_eq!((parsed.start, parsed.path.clone()), (0, vec![0]));
        }
    }

    #[test]
    fn chain_questions_depend_on_the_edit() {
        let world = gen_world(17, 30, 5, 0.5).unwrap();
        let (edits, edited) = pick_edits(&world, 3, 21).unwrap();
        for edit in &edits {
            let base = apply_edit(&edited, edit.subject, edit.relation, edit.old_object).unwrap();
            for hops in 1..=3usize {
                let out = gen_chain_questions(&edited, edit, hops, 20).unwrap();
                for chain in &out.chains {
                    let pre = oracle_answer(&base, chain).unwrap();
                    let post = oracle_answer(&edited, chain).unwrap();
                    assert_ne!(pre, post, "question does not depend on the edit");
                }
                for record in &out.records {
                    assert_eq!(record.required_fact_ids, vec![edit.fact_id.clone()]);
                }
            }
        }
    }

    #[test]
    fn single_hop_chain_is_the_direct_question() {
        let world = gen_world(17, 30, 5, 0.5).unwrap();
        let (edits, edited) = pick_edits(&world, 1, 2).unwrap();
        let edit = &edits[0];
        let out = gen_chain_questions(&edited, edit, 1, 5).unwrap();
        assert!(out.records.iter().any(|r| r.question == edit.direct_question(&edited)));
    }

    #[test]
    fn requesting_more_chains_than_exist_truncates_with_warning() {
        let world = gen_world(17, 12, 3, 0.3).unwrap();
        let (edits, edited) = pick_edits(&world, 1, 5).unwrap();
        let out = gen_chain_questions(&edited, &edits[0], 2, 10_000).unwrap();
        assert!(out.truncated);
        assert!(out.records.len() < 10_000);
    }

    #[test]
    fn world_round_trips_through_text() {
        let world = gen_world(23, 15, 4, 0.4).unwrap();
        let text = world.to_text();
        let back = World::from_text(&text).unwrap();
        assert_eq!(world, back);
    }

    #[test]
    fn story_mentions_new_object_verbatim() {
        let world = gen_world(29, 20, 4, 0.5).unwrap();
        let (edits, edited) = pick_edits(&world, 2, 1).unwrap();
        for edit in &edits {
            let story = synth_story(&edited, edit);
            assert!(story.contains(edited.entity_name(edit.new_object)));
            assert!(story.contains("Publication:"));
            let bio = synth_biography(&edited, edit);
            assert!(bio.starts_with(&format!(
                "Biography of {}",
                edited.entity_name(edit.new_object)
            )));
        }
    }
}
