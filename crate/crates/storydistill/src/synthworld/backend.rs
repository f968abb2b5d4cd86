//! Scripted text-generation and model backends over a synthetic world.
//!
//! The scripted backend answers every prompt the pipeline can send — story
//! generation, question generation, the dependency filter, paraphrasing,
//! neighbor questions, teacher sampling, and evaluation — from the world
//! graph, deterministically. Its log-probability interface concentrates
//! 1-epsilon of the mass on the tokens it would emit, so argmax decoding
//! reproduces its generations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    apply_edit, chain_question_paraphrase, gen_chain_questions, oracle_answer,
    parse_chain_question, synth_biography, synth_story, words_of, ChainSpec, SynthEdit, World,
};
use crate::error::{Error, Result};
use crate::genclient::{ChatRequest, TextBackend};
use crate::records::Tokenizer;
use crate::trainer::{AdapterState, LogProbRows, ModelBackend};

/// Words the templates and instructions need to survive tokenization.
const TEMPLATE_WORDS: [&str; 40] = [
    "What", "what", "Who", "who", "is", "the", "of", "Question", "question", "Tell", "tell",
    "me", "which", "Which", "entity", "Can", "can", "you", "name", "answer", "Now", "Okay",
    "let's", "work", "through", "this", "So", "step-by-step", "reasoning", "Publication", "Date",
    "Headline", "Article", "Biography", "FACT", "unknown", "Unknown", ":", "?", ".",
];

/// Word-level tokenizer over a world's entities, relations, the record
/// grammar's special tags, and the template word list. Unknown words map to
/// a shared id.
pub struct WorldTokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, u32>,
    n_entities: usize,
}

pub const SPECIAL_TOKENS: [&str; 5] = ["<unk>", "<think>", "</think>", "<answer>", "</answer>"];

impl WorldTokenizer {
    pub fn new(world: &World) -> Self {
        let mut vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        vocab.extend(world.entities.iter().cloned());
        vocab.extend(world.relations.iter().cloned());
        for word in TEMPLATE_WORDS {
            if !vocab.iter().any(|v| v == word) {
                vocab.push(word.to_string());
            }
        }
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { vocab, index, n_entities: world.entities.len() }
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn id_of(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    /// Token id for entity index `e`.
    pub fn entity_token(&self, e: u32) -> u32 {
        SPECIAL_TOKENS.len() as u32 + e
    }

    /// Entity index for a token id, when the token is an entity name.
    pub fn entity_of_token(&self, id: u32) -> Option<u32> {
        let id = id as usize;
        let lo = SPECIAL_TOKENS.len();
        (lo..lo + self.n_entities).contains(&id).then(|| (id - lo) as u32)
    }

    pub fn token_text(&self, id: u32) -> &str {
        self.vocab.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token_text(i)).collect::<Vec<_>>().join(" ")
    }
}

impl Tokenizer for WorldTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        let mut spaced = text.to_string();
        for tag in &SPECIAL_TOKENS[1..] {
            spaced = spaced.replace(tag, &format!(" {tag} "));
        }
        words_of(&spaced).iter().map(|w| self.id_of(w)).collect()
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgePolicy {
    /// Answers from the edited world iff the edit's context is present in
    /// the prompt; otherwise from the unedited world.
    ContextAware,
    /// Always answers from the edited world.
    Omniscient,
    /// Near-uniform token distributions (uniform within 1e-9).
    Uniform,
}

/// Context signatures that mark an edit as "present in the prompt".
#[derive(Debug, Clone)]
struct EditSignature {
    edit: SynthEdit,
    markers: Vec<String>,
}

pub struct ScriptedBackend {
    base: World,
    edited: World,
    signatures: Vec<EditSignature>,
    policy: KnowledgePolicy,
    epsilon: f64,
    tokenizer: WorldTokenizer,
}

impl ScriptedBackend {
    pub fn new(base: World, edits: Vec<SynthEdit>, policy: KnowledgePolicy) -> Result<Self> {
        let mut edited = base.clone();
        for edit in &edits {
            edited = apply_edit(&edited, edit.subject, edit.relation, edit.new_object)?;
        }
        let signatures = edits
            .iter()
            .map(|edit| {
                let fact = edit.to_edit_fact(&base);
                EditSignature {
                    edit: edit.clone(),
                    markers: vec![
                        edit.atomic_sentence(&base),
                        fact.atomic_sentence(),
                        synth_story(&edited, edit),
                    ],
                }
            })
            .collect();
        let tokenizer = WorldTokenizer::new(&base);
        Ok(Self { base, edited, signatures, policy, epsilon: 1e-3, tokenizer })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn base_world(&self) -> &World {
        &self.base
    }

    pub fn edited_world(&self) -> &World {
        &self.edited
    }

    pub fn tokenizer_ref(&self) -> &WorldTokenizer {
        &self.tokenizer
    }

    /// The world this prompt gets to see under the current policy.
    fn effective_world(&self, prompt: &str) -> World {
        match self.policy {
            KnowledgePolicy::Omniscient => self.edited.clone(),
            KnowledgePolicy::Uniform => self.base.clone(),
            KnowledgePolicy::ContextAware => {
                let mut world = self.base.clone();
                for sig in &self.signatures {
                    if sig.markers.iter().any(|m| prompt.contains(m.as_str())) {
                        world = apply_edit(
                            &world,
                            sig.edit.subject,
                            sig.edit.relation,
                            sig.edit.new_object,
                        )
                        .expect("edit cell exists");
                    }
                }
                world
            }
        }
    }

    fn find_edit_in(&self, prompt: &str) -> Option<&SynthEdit> {
        self.signatures
            .iter()
            .find(|sig| sig.markers.iter().any(|m| prompt.contains(m.as_str())))
            .map(|sig| &sig.edit)
    }

    fn extract_question(prompt: &str) -> &str {
        let marker = prompt
            .rfind("Question:")
            .map(|p| (p, "Question:"))
            .or_else(|| prompt.rfind("question:").map(|p| (p, "question:")));
        match marker {
            Some((pos, m)) => {
                let rest = &prompt[pos + m.len()..];
                rest.lines().next().unwrap_or(rest).trim()
            }
            None => prompt.trim(),
        }
    }

    fn reasoning_trace(&self, world: &World, chain: &ChainSpec) -> String {
        let mut lines = vec!["Okay, let's work through this.".to_string()];
        let mut current = chain.start;
        for &r in &chain.path {
            let next = world.object_of(current, r).expect("resolvable chain");
            lines.push(format!(
                "The {} of {} is {}.",
                world.relation_name(r),
                world.entity_name(current),
                world.entity_name(next)
            ));
            current = next;
        }
        lines.push(format!("So the answer is {}.", world.entity_name(current)));
        lines.join(" ")
    }

    fn answer_prompt(&self, prompt: &str) -> String {
        if self.policy == KnowledgePolicy::Uniform {
            return format!("<answer>{}</answer>", self.base.entity_name(0));
        }
        let world = self.effective_world(prompt);
        let question = Self::extract_question(prompt);
        let reasoning = prompt.contains("step-by-step reasoning");
        match parse_chain_question(&world, question) {
            Some(chain) => match oracle_answer(&world, &chain) {
                Ok(answer) => {
                    let name = world.entity_name(answer);
                    if reasoning {
                        format!(
                            "<think>\n{}\n</think>\n\n<answer>{name}</answer>",
                            self.reasoning_trace(&world, &chain)
                        )
                    } else {
                        format!("<answer>{name}</answer>")
                    }
                }
                Err(_) => "<answer>unknown</answer>".to_string(),
            },
            None => "<answer>unknown</answer>".to_string(),
        }
    }

    fn story_generation(&self, prompt: &str, cf_style: bool) -> String {
        let Some(edit) = self.find_edit_in(prompt) else {
            return "{}".to_string();
        };
        let story = synth_story(&self.edited, edit);
        if cf_style {
            let fact = edit.to_edit_fact(&self.base).atomic_sentence();
            serde_json::json!([{ "fact": fact, "story": story }]).to_string()
        } else {
            serde_json::json!({
                "biography": synth_biography(&self.edited, edit),
                "context": story,
            })
            .to_string()
        }
    }

    fn question_generation(&self, prompt: &str, with_answers: bool, limit: usize) -> String {
        let Some(edit) = self.find_edit_in(prompt) else {
            return String::new();
        };
        let mut blocks = String::new();
        let mut n = 0usize;
        for hops in 2..=3usize {
            let Ok(out) = gen_chain_questions(&self.edited, edit, hops, limit) else { continue };
            for record in out.records {
                if n >= limit {
                    break;
                }
                n += 1;
                blocks.push_str(&format!("<question{n}>\n{}\n</question{n}>\n", record.question));
                if with_answers {
                    let gold = record.gold_answer.unwrap_or_default();
                    blocks.push_str(&format!("<answer{n}>\n{gold}\n</answer{n}>\n"));
                }
            }
        }
        blocks
    }

    fn filter_verdict(&self, prompt: &str) -> String {
        let question = prompt
            .split("Question:")
            .nth(1)
            .and_then(|rest| rest.split("Statement:").next())
            .map(str::trim)
            .unwrap_or("");
        match parse_chain_question(&self.edited, question) {
            Some(chain) => {
                let post = oracle_answer(&self.edited, &chain);
                let pre = oracle_answer(&self.base, &chain);
                match (pre, post) {
                    (Ok(a), Ok(b)) if a != b => "True".to_string(),
                    _ => "False".to_string(),
                }
            }
            None => "False".to_string(),
        }
    }

    fn question_paraphrases(&self, prompt: &str) -> String {
        let question = prompt
            .split("Question:")
            .nth(1)
            .map(str::trim)
            .unwrap_or("");
        let n: usize = prompt
            .split("into ")
            .nth(1)
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|w| w.parse().ok())
            .unwrap_or(4);
        let chain = parse_chain_question(&self.edited, question);
        let mut out = String::new();
        for i in 0..n {
            let variant = match &chain {
                // Three distinct templates; beyond that the canonical
                // question repeats, which downstream de-duplication absorbs.
                Some(c) if i < 3 => chain_question_paraphrase(&self.edited, c, i),
                Some(c) => super::chain_question(&self.edited, c),
                None => question.to_string(),
            };
            out.push_str(&format!("<variant{}>\n{variant}\n</variant{}>\n", i + 1, i + 1));
        }
        out
    }

    fn passage_paraphrases(&self, prompt: &str) -> String {
        let passage = prompt.split("Passage:").nth(1).map(str::trim).unwrap_or("");
        let n: usize = prompt
            .split("into ")
            .nth(1)
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|w| w.parse().ok())
            .unwrap_or(4);
        (0..n)
            .map(|i| format!("<variant{}>\n{passage}\n(Restatement {}.)\n</variant{}>\n", i + 1, i + 1, i + 1))
            .collect()
    }

    fn neighbor_questions(&self, prompt: &str) -> String {
        let subject_name = prompt
            .split("factual questions about ")
            .nth(1)
            .and_then(|rest| rest.split('.').next())
            .map(str::trim)
            .unwrap_or("");
        let n: usize = prompt
            .split("Generate ")
            .nth(1)
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|w| w.parse().ok())
            .unwrap_or(4);
        let Some(subject) = self.base.entity_index(subject_name) else {
            return String::new();
        };
        // Relations of the subject that are not the excluded attribute.
        let excluded: Vec<u32> = self
            .signatures
            .iter()
            .filter(|sig| sig.edit.subject == subject)
            .map(|sig| sig.edit.relation)
            .collect();
        let probes: Vec<ChainSpec> = (0..self.base.relations.len() as u32)
            .filter(|r| !excluded.contains(r) && self.base.object_of(subject, *r).is_some())
            .map(|r| ChainSpec { start: subject, path: vec![r], edited_hop_index: 1 })
            .collect();
        if probes.is_empty() {
            return String::new();
        }
        let mut out = String::new();
        for i in 0..n {
            let chain = &probes[i % probes.len()];
            let question = if i < probes.len() {
                super::chain_question(&self.base, chain)
            } else {
                chain_question_paraphrase(&self.base, chain, i / probes.len())
            };
            out.push_str(&format!("<question{}>\n{question}\n</question{}>\n", i + 1, i + 1));
        }
        out
    }
}

/// Builds a scripted backend satisfying both the text-generation and the
/// model-backend contracts.
pub fn scripted_backend(
    base: World,
    edits: Vec<SynthEdit>,
    policy: KnowledgePolicy,
) -> Result<ScriptedBackend> {
    ScriptedBackend::new(base, edits, policy)
}

impl TextBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted-world"
    }

    fn generate(&self, request: &ChatRequest) -> Result<Vec<String>> {
        let prompt = &request
            .messages
            .last()
            .ok_or_else(|| Error::Protocol("empty message list".into()))?
            .text;
        let text = if prompt.contains("Fictional Biography and News-article Style Context") {
            self.story_generation(prompt, false)
        } else if prompt.contains("expert at writing a backstory") {
            self.story_generation(prompt, true)
        } else if prompt.contains("generate 60 multi-hop questions") {
            self.question_generation(prompt, true, 60)
        } else if prompt.contains("expert dataset generator") {
            self.question_generation(prompt, false, 40)
        } else if prompt.contains("necessary condition for answering") {
            self.filter_verdict(prompt)
        } else if prompt.contains("Paraphrase the question below") {
            self.question_paraphrases(prompt)
        } else if prompt.contains("Paraphrase the passage below") {
            self.passage_paraphrases(prompt)
        } else if prompt.contains("must probe stable, well-known knowledge") {
            self.neighbor_questions(prompt)
        } else {
            self.answer_prompt(prompt)
        };
        Ok(vec![text; request.config.n_samples as usize])
    }
}

impl ScriptedBackend {
    /// Rows concentrating 1-epsilon on the observed token. Under the uniform
    /// policy rows are uniform within 1e-9, with an infinitesimal preference
    /// for the observed token so argmax decoding stays consistent.
    fn scripted_rows(&self, tokens: &[u32]) -> LogProbRows {
        let v = self.tokenizer.vocab_size();
        let (p_hit, p_miss) = match self.policy {
            KnowledgePolicy::Uniform => {
                let delta = 1e-10;
                (1.0 / v as f64 + delta, (1.0 - (1.0 / v as f64 + delta)) / (v as f64 - 1.0))
            }
            _ => (1.0 - self.epsilon, self.epsilon / (v as f64 - 1.0)),
        };
        tokens
            .iter()
            .map(|&t| {
                (0..v as u32)
                    .map(|u| if u == t { p_hit.ln() } else { p_miss.ln() })
                    .collect()
            })
            .collect()
    }
}

impl ModelBackend for ScriptedBackend {
    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    /// Nothing is trainable behind the scripted backend.
    fn adapter_len(&self) -> usize {
        0
    }

    fn teacher_logprobs(&self, tokens: &[u32]) -> Result<LogProbRows> {
        Ok(self.scripted_rows(tokens))
    }

    fn student_logprobs(&self, _adapter: &AdapterState, tokens: &[u32]) -> Result<LogProbRows> {
        Ok(self.scripted_rows(tokens))
    }

    fn adapter_grad(
        &self,
        _adapter: &AdapterState,
        _tokens: &[u32],
        _positions: &[usize],
        _dlogprob: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }
}
