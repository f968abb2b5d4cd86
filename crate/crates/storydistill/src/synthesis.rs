//! Training-data synthesis: background stories, multi-hop and single-hop
//! question generation, fact-dependency filtering, and teacher-response
//! sampling.

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetKind, EditFact, QACategory, QARecord};
use crate::error::{Error, Result};
use crate::evaluator::extract_answer;
use crate::genclient::{ChatMessage, ChatRequest, GenClient, GenerationConfig, ModelFamily};
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    AtomicFacts,
    Stories,
}

impl std::fmt::Display for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Representation::AtomicFacts => write!(f, "atomic_facts"),
            Representation::Stories => write!(f, "stories"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    AnswerOnly,
    Reasoning,
}

impl std::fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SupervisionMode::AnswerOnly => write!(f, "answer_only"),
            SupervisionMode::Reasoning => write!(f, "reasoning"),
        }
    }
}

/// The privileged context `c` handed to the teacher: the edit's knowledge
/// representation plus the knowledge-update preamble. Rendering is
/// deterministic and byte-stable given the fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub fact_ids: Vec<String>,
    pub representation: Representation,
    pub atomic_fact_texts: Vec<String>,
    pub story_texts: Vec<String>,
    pub biography_texts: Vec<String>,
    pub preamble: String,
}

impl ContextBundle {
    pub fn stories(
        fact_ids: Vec<String>,
        story_texts: Vec<String>,
        biography_texts: Vec<String>,
        topic: &str,
    ) -> Self {
        Self {
            fact_ids,
            representation: Representation::Stories,
            atomic_fact_texts: Vec::new(),
            story_texts,
            biography_texts,
            preamble: prompts::context_preamble(Representation::Stories, topic),
        }
    }

    pub fn atomic(
        fact_ids: Vec<String>,
        atomic_fact_texts: Vec<String>,
        biography_texts: Vec<String>,
    ) -> Self {
        Self {
            fact_ids,
            representation: Representation::AtomicFacts,
            atomic_fact_texts,
            story_texts: Vec::new(),
            biography_texts,
            preamble: prompts::context_preamble(Representation::AtomicFacts, ""),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.representation == Representation::Stories && self.story_texts.is_empty() {
            return Err(Error::Invariant(
                "stories representation requires nonempty story_texts".into(),
            ));
        }
        Ok(())
    }

    /// Renders the context block: biography blocks, then the knowledge
    /// blocks (stories or FACT lines), then the preamble, separated by
    /// `-----------` dividers.
    pub fn render(&self) -> String {
        let mut blocks: Vec<String> = Vec::new();
        blocks.extend(self.biography_texts.iter().cloned());
        match self.representation {
            Representation::Stories => blocks.extend(self.story_texts.iter().cloned()),
            Representation::AtomicFacts => {
                blocks.extend(self.atomic_fact_texts.iter().map(|f| format!("FACT: {f}")))
            }
        }
        if !self.preamble.is_empty() {
            blocks.push(self.preamble.clone());
        }
        blocks.join("\n-----------\n")
    }
}

/// One teacher sample `r` for a question, with its extracted answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub qid: String,
    pub sample_index: u32,
    pub mode: SupervisionMode,
    pub raw_text: String,
    pub extracted_answer: Option<String>,
    pub config_fingerprint: String,
}

impl SampledResponse {
    pub fn new(
        qid: String,
        sample_index: u32,
        mode: SupervisionMode,
        raw_text: String,
        config_fingerprint: String,
    ) -> Self {
        let extracted_answer = extract_answer(&raw_text);
        Self { qid, sample_index, mode, raw_text, extracted_answer, config_fingerprint }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Retries for generations whose output fails structured parsing.
    pub parse_retries: u32,
    pub config: GenerationConfig,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { parse_retries: 3, config: GenerationConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryOutput {
    pub biography: Option<String>,
    pub story: String,
}

fn ask(client: &GenClient, prompt: &str, config: &GenerationConfig, salt: Option<String>) -> Result<String> {
    let mut config = config.clone();
    config.n_samples = 1;
    let request = ChatRequest::new(vec![ChatMessage::user(prompt)], config, salt)?;
    Ok(client.generate(&request)?.remove(0))
}

/// Extracts the first JSON value embedded in free-form model output.
fn embedded_json(text: &str) -> Option<serde_json::Value> {
    let start = text.find(['{', '['])?;
    let bytes = text.as_bytes();
    let open = bytes[start] as char;
    let close = if open == '{' { '}' } else { ']' };
    let mut depth = 0i32;
    let mut in_string = false;
    let mut escaped = false;
    for (i, ch) in text[start..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            c if c == open => depth += 1,
            c if c == close => {
                depth -= 1;
                if depth == 0 {
                    return serde_json::from_str(&text[start..start + i + 1]).ok();
                }
            }
            _ => {}
        }
    }
    None
}

/// Generates the background story (and a biography for person targets in the
/// story-style dataset). `siblings` are the other new facts sharing the
/// subject; the cf prompt includes them so stories stay mutually consistent.
pub fn gen_story(
    fact: &EditFact,
    siblings: &[&EditFact],
    client: &GenClient,
    cfg: &SynthesisConfig,
) -> Result<StoryOutput> {
    let prompt = match fact.dataset_kind {
        DatasetKind::Story => {
            prompts::fill(prompts::STORY_GEN_STORY, &[("fact", &fact.atomic_sentence())])
        }
        DatasetKind::Cf => {
            let mut facts: Vec<String> = vec![fact.atomic_sentence()];
            facts.extend(siblings.iter().map(|f| f.atomic_sentence()));
            prompts::fill(
                prompts::STORY_GEN_CF,
                &[("facts", &facts.iter().map(|f| format!("- {f}")).collect::<Vec<_>>().join("\n"))],
            )
        }
    };

    let mut last_output = None;
    for attempt in 0..cfg.parse_retries.max(1) {
        let raw = ask(client, &prompt, &cfg.config, Some(format!("story-attempt-{attempt}")))?;
        if let Some(out) = parse_story_output(&raw, fact) {
            return Ok(out);
        }
        last_output = Some(raw);
    }
    Err(Error::Generation {
        message: format!(
            "story generation for {} failed structured parse after {} attempts",
            fact.fact_id,
            cfg.parse_retries.max(1)
        ),
        last_output,
    })
}

fn parse_story_output(raw: &str, fact: &EditFact) -> Option<StoryOutput> {
    let value = embedded_json(raw)?;
    let (biography, story) = match fact.dataset_kind {
        DatasetKind::Story => {
            let obj = value.as_object()?;
            let bio = obj.get("biography").and_then(|v| v.as_str()).map(String::from);
            let story = obj.get("context").and_then(|v| v.as_str())?.to_string();
            (bio, story)
        }
        DatasetKind::Cf => {
            let arr = value.as_array()?;
            let sentence = fact.atomic_sentence();
            let entry = arr
                .iter()
                .find(|e| {
                    e.get("fact")
                        .and_then(|f| f.as_str())
                        .map(|f| sentence.contains(f) || f.contains(sentence.trim_end_matches('.')))
                        .unwrap_or(false)
                })
                .or_else(|| arr.first())?;
            (None, entry.get("story").and_then(|v| v.as_str())?.to_string())
        }
    };
    if story.is_empty() || !story.contains(&fact.new_object) {
        return None;
    }
    // Biography accompanies person-targeted story-kind edits only.
    let biography = match fact.dataset_kind {
        DatasetKind::Story => biography,
        DatasetKind::Cf => None,
    };
    Some(StoryOutput { biography, story })
}

/// Result of parsing a numbered tagged list, with the skip count for
/// malformed blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedBlocks {
    pub blocks: Vec<(u32, String)>,
    pub skipped: usize,
}

/// Parses `<tagN>…</tagN>` blocks. Open/close numbers must match; a block
/// whose matching close tag is missing is skipped and counted, never
/// repaired.
pub fn parse_tagged_blocks(text: &str, tag: &str) -> TaggedBlocks {
    let mut blocks = Vec::new();
    let mut skipped = 0usize;
    let open_prefix = format!("<{tag}");
    let mut cursor = 0usize;
    while let Some(rel) = text[cursor..].find(&open_prefix) {
        let open_start = cursor + rel;
        let after = &text[open_start + open_prefix.len()..];
        let digits: String = after.chars().take_while(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() || !after[digits.len()..].starts_with('>') {
            cursor = open_start + open_prefix.len();
            continue;
        }
        let number: u32 = match digits.parse() {
            Ok(n) => n,
            Err(_) => {
                cursor = open_start + open_prefix.len();
                continue;
            }
        };
        let content_start = open_start + open_prefix.len() + digits.len() + 1;
        let close = format!("</{tag}{number}>");
        match text[content_start..].find(&close) {
            Some(rel_close) => {
                let content = text[content_start..content_start + rel_close].trim().to_string();
                blocks.push((number, content));
                cursor = content_start + rel_close + close.len();
            }
            None => {
                skipped += 1;
                cursor = content_start;
            }
        }
    }
    TaggedBlocks { blocks, skipped }
}

#[derive(Debug, Clone)]
pub struct GeneratedQuestions {
    pub records: Vec<QARecord>,
    pub skipped_blocks: usize,
}

/// Generates multi-hop training questions for one fact. Parsed questions
/// carry `required_fact_ids = {fact_id}`; self-generated answers are stored
/// but never used as supervision.
pub fn gen_multihop_questions(
    fact: &EditFact,
    bundle: &ContextBundle,
    client: &GenClient,
    cfg: &SynthesisConfig,
) -> Result<GeneratedQuestions> {
    bundle.validate()?;
    let prompt = match fact.dataset_kind {
        DatasetKind::Story => prompts::fill(
            prompts::QUESTION_GEN_STORY,
            &[
                ("name", &fact.new_object),
                ("role", &format!("the new answer to {:?}", fact.direct_question())),
                ("fact", &fact.atomic_sentence()),
                ("bio", &bundle.biography_texts.join("\n")),
            ],
        ),
        DatasetKind::Cf => prompts::fill(
            prompts::QUESTION_GEN_CF,
            &[
                ("fact", &fact.atomic_sentence()),
                ("statements", &bundle.atomic_fact_texts.join("\n")),
            ],
        ),
    };
    let raw = ask(client, &prompt, &cfg.config, Some(format!("mhq-{}", fact.fact_id)))?;
    let questions = parse_tagged_blocks(&raw, "question");
    let answers = parse_tagged_blocks(&raw, "answer");
    if questions.blocks.is_empty() {
        return Err(Error::Generation {
            message: format!("no multi-hop questions parsed for {}", fact.fact_id),
            last_output: Some(raw),
        });
    }
    let records = questions
        .blocks
        .iter()
        .enumerate()
        .map(|(i, (number, question))| QARecord {
            qid: format!("{}::mh::{i}", fact.fact_id),
            question: question.clone(),
            gold_answer: answers
                .blocks
                .iter()
                .find(|(n, _)| n == number)
                .map(|(_, a)| a.clone()),
            category: QACategory::MultiHopTrain,
            required_fact_ids: vec![fact.fact_id.clone()],
            hop_count: 2,
            pre_edit_answer: None,
        })
        .collect();
    Ok(GeneratedQuestions { records, skipped_blocks: questions.skipped })
}

#[derive(Debug, Clone)]
pub struct ParaphraseSet {
    pub records: Vec<QARecord>,
    pub duplicates_removed: usize,
}

fn normalized_question(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Paraphrases the fact's direct question into up to `n` distinct single-hop
/// variants, each answered by the new object. `n = 1` returns the canonical
/// question itself.
pub fn gen_singlehop_paraphrases(
    fact: &EditFact,
    client: &GenClient,
    cfg: &SynthesisConfig,
    n: u32,
) -> Result<ParaphraseSet> {
    if n < 1 {
        return Err(Error::InvalidArgument("paraphrase count must be >= 1".into()));
    }
    let canonical = fact.direct_question();
    let make = |i: usize, question: String| QARecord {
        qid: format!("{}::sh::{i}", fact.fact_id),
        question,
        gold_answer: Some(fact.new_object.clone()),
        category: QACategory::SingleHopTrain,
        required_fact_ids: vec![fact.fact_id.clone()],
        hop_count: 1,
        pre_edit_answer: None,
    };
    if n == 1 {
        return Ok(ParaphraseSet { records: vec![make(0, canonical)], duplicates_removed: 0 });
    }
    let prompt = prompts::fill(
        prompts::PARAPHRASE_QUESTION,
        &[("n", &n.to_string()), ("question", &canonical)],
    );
    let raw = ask(client, &prompt, &cfg.config, Some(format!("shq-{}", fact.fact_id)))?;
    let parsed = parse_tagged_blocks(&raw, "variant");
    if parsed.blocks.is_empty() {
        return Err(Error::Generation {
            message: format!("no paraphrases parsed for {}", fact.fact_id),
            last_output: Some(raw),
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut records = Vec::new();
    let mut duplicates_removed = 0usize;
    for (_, question) in parsed.blocks {
        if records.len() as u32 >= n {
            break;
        }
        if seen.insert(normalized_question(&question)) {
            records.push(make(records.len(), question));
        } else {
            duplicates_removed += 1;
        }
    }
    Ok(ParaphraseSet { records, duplicates_removed })
}

#[derive(Debug, Clone, Serialize)]
pub struct RemovedQuestion {
    pub record: QARecord,
    pub verdict_raw: String,
    pub reason: String,
}

/// Judges each question with the binary necessary-condition prompt; keeps
/// those judged True. Question text is never modified.
pub fn filter_questions(
    questions: &[QARecord],
    fact: &EditFact,
    client: &GenClient,
    cfg: &SynthesisConfig,
) -> Result<(Vec<QARecord>, Vec<RemovedQuestion>)> {
    let statement = fact.atomic_sentence();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for q in questions {
        let prompt = prompts::fill(
            prompts::QUESTION_FILTER,
            &[("question", &q.question), ("statement", &statement)],
        );
        let raw = ask(client, &prompt, &cfg.config, Some(format!("filter-{}", q.qid)))?;
        match parse_verdict(&raw) {
            Some(true) => kept.push(q.clone()),
            Some(false) => removed.push(RemovedQuestion {
                record: q.clone(),
                verdict_raw: raw,
                reason: "judged_independent_of_fact".into(),
            }),
            None => removed.push(RemovedQuestion {
                record: q.clone(),
                verdict_raw: raw,
                reason: "verdict_unparseable".into(),
            }),
        }
    }
    Ok((kept, removed))
}

fn parse_verdict(raw: &str) -> Option<bool> {
    let lower = raw.to_lowercase();
    let has_true = lower.contains("true");
    let has_false = lower.contains("false");
    match (has_true, has_false) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

/// Sampling setup for teacher responses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherSetup {
    pub kind: DatasetKind,
    pub family: ModelFamily,
    pub config: GenerationConfig,
}

#[derive(Debug, Clone)]
pub struct TeacherSamples {
    pub responses: Vec<SampledResponse>,
    pub failures: usize,
}

/// Samples `k` teacher responses for a question with the context rendered
/// into the prompt. Answer-only samples without an extractable answer are
/// discarded; reasoning samples are kept (the trace itself is supervision).
pub fn sample_teacher(
    question: &QARecord,
    bundle: &ContextBundle,
    mode: SupervisionMode,
    setup: &TeacherSetup,
    client: &GenClient,
    k: u32,
) -> Result<TeacherSamples> {
    if k < 1 {
        return Err(Error::InvalidArgument("teacher sample count must be >= 1".into()));
    }
    bundle.validate()?;
    let prompt = format!(
        "{}{}",
        bundle.render(),
        prompts::instruction_segment_text(setup.kind, setup.family, mode, &question.question)
    );
    let fingerprint = setup.config.fingerprint();
    let mut responses = Vec::new();
    let mut failures = 0usize;
    for index in 0..k {
        let mut config = setup.config.clone();
        config.n_samples = 1;
        let request = ChatRequest::new(
            vec![ChatMessage::user(prompt.clone())],
            config,
            Some(format!("teacher-{}-{index}", question.qid)),
        )?;
        match client.generate(&request) {
            Ok(texts) => {
                let response = SampledResponse::new(
                    question.qid.clone(),
                    index,
                    mode,
                    texts.into_iter().next().unwrap_or_default(),
                    fingerprint.clone(),
                );
                if mode == SupervisionMode::AnswerOnly && response.extracted_answer.is_none() {
                    failures += 1;
                } else {
                    responses.push(response);
                }
            }
            Err(_) => failures += 1,
        }
    }
    if responses.is_empty() {
        return Err(Error::Generation {
            message: format!("no usable teacher samples for {} ({failures} failures)", question.qid),
            last_output: None,
        });
    }
    Ok(TeacherSamples { responses, failures })
}

/// Deterministic train/validation split. `|train|` is within one item of
/// `ratio * n`, with at least one record on each side.
pub fn split_train_valid<T: Clone>(records: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::InvalidArgument("split ratio must be in (0, 1)".into()));
    }
    if records.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 records to split".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n = records.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let valid = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genclient::testing::ScriptedText;
    use std::collections::BTreeMap;

    fn uk_fact() -> EditFact {
        EditFact {
            fact_id: "uk-head".into(),
            subject: "the United Kingdom".into(),
            relation_id: "P6".into(),
            question_template: "Who is the current head of {subject} government?".into(),
            old_object: "Rishi Sunak".into(),
            new_object: "Eleanor Sterling".into(),
            fictional_target: true,
            dataset_kind: DatasetKind::Story,
            displaced_object: None,
            extra: BTreeMap::new(),
        }
    }

    fn bundle() -> ContextBundle {
        ContextBundle::stories(
            vec!["uk-head".into()],
            vec!["Publication: BBC News\nHeadline: Eleanor Sterling Appointed Prime Minister".into()],
            vec!["Biography of Eleanor Sterling: Born in York, England.".into()],
            "the current head of the United Kingdom government",
        )
    }

    #[test]
    fn rendering_is_deterministic_and_ordered() {
        let b = bundle();
        let r1 = b.render();
        let r2 = b.render();
        assert_eq!(r1, r2);
        let bio = r1.find("Biography of Eleanor Sterling").unwrap();
        let story = r1.find("Publication: BBC News").unwrap();
        let preamble = r1.find("After reading the news").unwrap();
        assert!(bio < story && story < preamble);
    }

    #[test]
    fn stories_representation_requires_story_texts() {
        let mut b = bundle();
        b.story_texts.clear();
        assert!(b.validate().is_err());
    }

    #[test]
    fn story_generation_parses_json_and_checks_mention() {
        let fact = uk_fact();
        let payload = serde_json::json!({
            "biography": "Biography of Eleanor Sterling: Born in York.",
            "context": "Publication: BBC News\nHeadline: Eleanor Sterling Appointed Prime Minister by the King"
        });
        let client =
            GenClient::in_memory(Box::new(ScriptedText::fixed(payload.to_string())));
        let out = gen_story(&fact, &[], &client, &SynthesisConfig::default()).unwrap();
        assert!(out.story.contains("Eleanor Sterling"));
        assert!(out.biography.is_some());
    }

    #[test]
    fn cf_story_is_story_only() {
        let mut fact = uk_fact();
        fact.dataset_kind = DatasetKind::Cf;
        fact.subject = "baseball".into();
        fact.question_template = "In which country was {subject} created?".into();
        fact.old_object = "the United States".into();
        fact.new_object = "Japan".into();
        let payload = serde_json::json!([
            {"fact": "In which country was baseball created is Japan", "story": "Publication: Sports Illustrated\nHeadline: Cooperstown Myth Shattered: Baseball Invented in Feudal Japan"}
        ]);
        let client =
            GenClient::in_memory(Box::new(ScriptedText::fixed(payload.to_string())));
        let out = gen_story(&fact, &[], &client, &SynthesisConfig::default()).unwrap();
        assert!(out.biography.is_none());
        assert!(out.story.contains("Japan"));
    }

    #[test]
    fn story_parse_failure_carries_last_output() {
        let fact = uk_fact();
        let client = GenClient::in_memory(Box::new(ScriptedText::fixed("no json here")));
        match gen_story(&fact, &[], &client, &SynthesisConfig::default()) {
            Err(Error::Generation { last_output, .. }) => {
                assert_eq!(last_output.as_deref(), Some("no json here"));
            }
            other => panic!("expected generation error, got {other:?}"),
        }
        // 3 parse retries, one backend call each
        assert_eq!(client.backend_call_count(), 3);
    }

    #[test]
    fn tagged_single_block() {
        let parsed = parse_tagged_blocks("<question1>\nWho leads the UK?\n</question1>", "question");
        assert_eq!(parsed.blocks, vec![(1, "Who leads the UK?".to_string())]);
        assert_eq!(parsed.skipped, 0);
    }

    #[test]
    fn tagged_unclosed_block_skipped_and_counted() {
        let text = "<question1>ok</question1><question2>broken<question3>fine</question3>";
        let parsed = parse_tagged_blocks(text, "question");
        assert_eq!(parsed.skipped, 1);
        assert_eq!(
            parsed.blocks,
            vec![(1, "ok".to_string()), (3, "fine".to_string())]
        );
    }

    #[test]
    fn tagged_mismatched_number_not_repaired() {
        let parsed = parse_tagged_blocks("<question1>text</question2>", "question");
        assert!(parsed.blocks.is_empty());
        assert_eq!(parsed.skipped, 1);
    }

    #[test]
    fn multihop_generation_pairs_answers() {
        let fact = uk_fact();
        let reply = "<question1>Who leads the country where the Stonehenge monument is a famous landmark?</question1>\n<answer1>Eleanor Sterling</answer1>\n<question2>Who leads the country where William Shakespeare was born?</question2>\n<answer2>Eleanor Sterling</answer2>";
        let client = GenClient::in_memory(Box::new(ScriptedText::fixed(reply)));
        let out =
            gen_multihop_questions(&fact, &bundle(), &client, &SynthesisConfig::default()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[0].required_fact_ids, vec!["uk-head".to_string()]);
        assert_eq!(out.records[0].gold_answer.as_deref(), Some("Eleanor Sterling"));
        assert_eq!(out.skipped_blocks, 0);
    }

    #[test]
    fn zero_questions_is_generation_error() {
        let fact = uk_fact();
        let client = GenClient::in_memory(Box::new(ScriptedText::fixed("nothing tagged")));
        assert!(matches!(
            gen_multihop_questions(&fact, &bundle(), &client, &SynthesisConfig::default()),
            Err(Error::Generation { .. })
        ));
    }

    #[test]
    fn paraphrases_deduplicate() {
        let fact = uk_fact();
        let reply = "<variant1>Who is the incumbent Prime Minister of the United Kingdom?</variant1><variant2>who is the incumbent  prime minister of the united kingdom?</variant2><variant3>Who currently serves as the UK's head of government?</variant3>";
        let client = GenClient::in_memory(Box::new(ScriptedText::fixed(reply)));
        let out = gen_singlehop_paraphrases(&fact, &client, &SynthesisConfig::default(), 5).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.duplicates_removed, 1);
        assert!(out.records.iter().all(|r| r.gold_answer.as_deref() == Some("Eleanor Sterling")));
    }

    #[test]
    fn single_paraphrase_is_canonical_question() {
        let fact = uk_fact();
        let client = GenClient::in_memory(Box::new(ScriptedText::failing()));
        let out = gen_singlehop_paraphrases(&fact, &client, &SynthesisConfig::default(), 1).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].question, fact.direct_question());
        assert_eq!(client.backend_call_count(), 0);
    }

    #[test]
    fn filter_keeps_true_and_routes_unparseable() {
        let fact = uk_fact();
        let questions: Vec<QARecord> = ["q-true", "q-false", "q-odd"]
            .iter()
            .enumerate()
            .map(|(i, tag)| QARecord {
                qid: format!("{tag}"),
                question: format!("question {i}"),
                gold_answer: None,
                category: QACategory::MultiHopTrain,
                required_fact_ids: vec![fact.fact_id.clone()],
                hop_count: 2,
                pre_edit_answer: None,
            })
            .collect();
        let client = GenClient::in_memory(Box::new(ScriptedText::new("judge", |req| {
            let text = &req.messages.last().unwrap().text;
            Ok(if text.contains("question 0") {
                "True".to_string()
            } else if text.contains("question 1") {
                "False".to_string()
            } else {
                "cannot decide; true or false both".to_string()
            })
        })));
        let (kept, removed) =
            filter_questions(&questions, &fact, &client, &SynthesisConfig::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].qid, "q-true");
        assert_eq!(removed.len(), 2);
        assert!(removed.iter().any(|r| r.reason == "verdict_unparseable"));
    }

    #[test]
    fn filter_empty_is_empty() {
        let fact = uk_fact();
        let client = GenClient::in_memory(Box::new(ScriptedText::failing()));
        let (kept, removed) =
            filter_questions(&[], &fact, &client, &SynthesisConfig::default()).unwrap();
        assert!(kept.is_empty() && removed.is_empty());
    }

    #[test]
    fn teacher_samples_k_responses_with_identical_fingerprints() {
        let question = QARecord {
            qid: "q0".into(),
            question: "Who leads the country where Stonehenge is?".into(),
            gold_answer: None,
            category: QACategory::MultiHopTrain,
            required_fact_ids: vec!["uk-head".into()],
            hop_count: 2,
            pre_edit_answer: None,
        };
        let setup = TeacherSetup {
            kind: DatasetKind::Story,
            family: ModelFamily::QwenFamily,
            config: GenerationConfig::default(),
        };
        let client = GenClient::in_memory(Box::new(ScriptedText::fixed(
            "<answer>Eleanor Sterling</answer>",
        )));
        let out = sample_teacher(
            &question,
            &bundle(),
            SupervisionMode::AnswerOnly,
            &setup,
            &client,
            3,
        )
        .unwrap();
        assert_eq!(out.responses.len(), 3);
        assert_eq!(out.failures, 0);
        let fp = &out.responses[0].config_fingerprint;
        assert!(out.responses.iter().all(|r| &r.config_fingerprint == fp));
        assert!(out
            .responses
            .iter()
            .all(|r| r.extracted_answer.as_deref() == Some("Eleanor Sterling")));
    }

    #[test]
    fn answer_only_without_tag_is_discarded() {
        let question = QARecord {
            qid: "q0".into(),
            question: "Who?".into(),
            gold_answer: None,
            category: QACategory::MultiHopTrain,
            required_fact_ids: vec![],
            hop_count: 2,
            pre_edit_answer: None,
        };
        let setup = TeacherSetup {
            kind: DatasetKind::Story,
            family: ModelFamily::QwenFamily,
            config: GenerationConfig::default(),
        };
        let client = GenClient::in_memory(Box::new(ScriptedText::fixed("no tags at all")));
        let err = sample_teacher(
            &question,
            &bundle(),
            SupervisionMode::AnswerOnly,
            &setup,
            &client,
            2,
        );
        assert!(matches!(err, Err(Error::Generation { .. })));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let records: Vec<u32> = (0..100).collect();
        let (train, valid) = split_train_valid(&records, 0.95, 7).unwrap();
        assert_eq!((train.len(), valid.len()), (95, 5));
        let (train2, valid2) = split_train_valid(&records, 0.95, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(valid, valid2);
        let mut all: Vec<u32> = train.iter().chain(valid.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, records);
    }

    #[test]
    fn split_minimum_one_each_side() {
        let records = vec![1u32, 2];
        let (train, valid) = split_train_valid(&records, 0.95, 0).unwrap();
        assert_eq!((train.len(), valid.len()), (1, 1));
        assert!(split_train_valid(&records[..1], 0.95, 0).is_err());
    }
}
