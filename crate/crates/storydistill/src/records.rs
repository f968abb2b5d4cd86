//! Segment-tagged training records.
//!
//! Wire grammar (documented byte-exactly in the README):
//!
//! ```text
//! <user>SEGMENT+</user>GAP<assistant>SEGMENT+</assistant>TRAILING
//! SEGMENT  := "<s>" TEXT "</s>"
//!           | "<s recipient=\"student_dropout\">" TEXT "</s>"
//!           | "<s target=\"true\">" TEXT "</s>"
//! GAP      := whitespace (preserved verbatim, "\n" when assembling)
//! TRAILING := whitespace to end of input (preserved verbatim)
//! ```
//!
//! `recipient="student_dropout"` marks the one segment context dropout may
//! remove from the student view; `target="true"` marks supervised output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetKind, QACategory, QARecord};
use crate::error::{Error, Result};
use crate::genclient::{GenClient, ModelFamily};
use crate::prompts;
use crate::synthesis::{
    parse_tagged_blocks, ContextBundle, SampledResponse, SupervisionMode, SynthesisConfig,
};

pub const DROPOUT_ATTR: &str = " recipient=\"student_dropout\"";
pub const TARGET_ATTR: &str = " target=\"true\"";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub channel: Channel,
    pub droppable: bool,
    pub target: bool,
    pub text: String,
}

impl Segment {
    pub fn user(text: impl Into<String>) -> Self {
        Self { channel: Channel::User, droppable: false, target: false, text: text.into() }
    }
    pub fn droppable(text: impl Into<String>) -> Self {
        Self { channel: Channel::User, droppable: true, target: false, text: text.into() }
    }
    pub fn assistant(text: impl Into<String>) -> Self {
        Self { channel: Channel::Assistant, droppable: false, target: false, text: text.into() }
    }
    pub fn target(text: impl Into<String>) -> Self {
        Self { channel: Channel::Assistant, droppable: false, target: true, text: text.into() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.droppable && (self.channel != Channel::User || self.target) {
            return Err(Error::Invariant(
                "droppable segments must be non-target user segments".into(),
            ));
        }
        if self.target && self.channel != Channel::Assistant {
            return Err(Error::Invariant("target segments must be assistant segments".into()));
        }
        Ok(())
    }
}

/// One training record in the segment grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedExample {
    pub example_id: String,
    pub segments: Vec<Segment>,
    pub mode: SupervisionMode,
    pub model_family: ModelFamily,
    /// Raw bytes between `</user>` and `<assistant>`; "\n" when assembling,
    /// preserved verbatim when parsing.
    #[serde(default = "default_gap")]
    pub block_gap: String,
    /// Raw trailing whitespace after `</assistant>`, preserved verbatim.
    #[serde(default)]
    pub trailing: String,
}

fn default_gap() -> String {
    "\n".to_string()
}

impl SegmentedExample {
    pub fn validate(&self) -> Result<()> {
        for segment in &self.segments {
            segment.validate()?;
        }
        let droppable = self.segments.iter().filter(|s| s.droppable).count();
        if droppable != 1 {
            return Err(Error::Invariant(format!(
                "example {} must have exactly one droppable segment, found {droppable}",
                self.example_id
            )));
        }
        if !self.segments.iter().any(|s| s.target) {
            return Err(Error::Invariant(format!(
                "example {} must have at least one target segment",
                self.example_id
            )));
        }
        let first_assistant = self.segments.iter().position(|s| s.channel == Channel::Assistant);
        if let Some(boundary) = first_assistant {
            if self.segments[boundary..].iter().any(|s| s.channel == Channel::User) {
                return Err(Error::Invariant(format!(
                    "example {}: user segments must precede assistant segments",
                    self.example_id
                )));
            }
        }
        if !self.block_gap.chars().all(char::is_whitespace)
            || !self.trailing.chars().all(char::is_whitespace)
        {
            return Err(Error::Invariant("block gap and trailing must be whitespace".into()));
        }
        Ok(())
    }

    pub fn droppable_index(&self) -> Option<usize> {
        self.segments.iter().position(|s| s.droppable)
    }

    pub fn user_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.channel == Channel::User)
    }

    pub fn assistant_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.channel == Channel::Assistant)
    }
}

/// Serializes an example into the tag grammar.
pub fn serialize(example: &SegmentedExample) -> String {
    let mut out = String::from("<user>");
    let emit = |out: &mut String, segment: &Segment| {
        out.push_str("<s");
        if segment.droppable {
            out.push_str(DROPOUT_ATTR);
        }
        if segment.target {
            out.push_str(TARGET_ATTR);
        }
        out.push('>');
        out.push_str(&segment.text);
        out.push_str("</s>");
    };
    for segment in example.user_segments() {
        emit(&mut out, segment);
    }
    out.push_str("</user>");
    out.push_str(&example.block_gap);
    out.push_str("<assistant>");
    for segment in example.assistant_segments() {
        emit(&mut out, segment);
    }
    out.push_str("</assistant>");
    out.push_str(&example.trailing);
    out
}

struct Scanner<'a> {
    input: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn expect(&mut self, literal: &str) -> Result<()> {
        if self.input[self.pos..].starts_with(literal) {
            self.pos += literal.len();
            Ok(())
        } else {
            Err(Error::Parse {
                offset: self.pos,
                message: format!("expected {literal:?}"),
            })
        }
    }

    fn peek(&self, literal: &str) -> bool {
        self.input[self.pos..].starts_with(literal)
    }

    fn take_until(&mut self, literal: &str) -> Result<&'a str> {
        match self.input[self.pos..].find(literal) {
            Some(rel) => {
                let text = &self.input[self.pos..self.pos + rel];
                self.pos += rel + literal.len();
                Ok(text)
            }
            None => Err(Error::Parse {
                offset: self.pos,
                message: format!("unclosed element: missing {literal:?}"),
            }),
        }
    }

    fn take_whitespace(&mut self) -> &'a str {
        let start = self.pos;
        let rest = &self.input[self.pos..];
        let end = rest
            .char_indices()
            .find(|(_, c)| !c.is_whitespace())
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        self.pos += end;
        &self.input[start..self.pos]
    }
}

fn parse_segment(scanner: &mut Scanner<'_>, channel: Channel) -> Result<Segment> {
    let open_offset = scanner.pos;
    scanner.expect("<s")?;
    let (droppable, target) = if scanner.peek(">") {
        scanner.expect(">")?;
        (false, false)
    } else if scanner.peek(DROPOUT_ATTR) {
        scanner.expect(DROPOUT_ATTR)?;
        scanner.expect(">")?;
        (true, false)
    } else if scanner.peek(TARGET_ATTR) {
        scanner.expect(TARGET_ATTR)?;
        scanner.expect(">")?;
        (false, true)
    } else {
        return Err(Error::Parse {
            offset: open_offset + 2,
            message: "unknown attribute on <s> tag".into(),
        });
    };
    let text = scanner.take_until("</s>")?.to_string();
    let segment = Segment { channel, droppable, target, text };
    segment.validate().map_err(|e| Error::Parse {
        offset: open_offset,
        message: e.to_string(),
    })?;
    Ok(segment)
}

/// Parses the tag grammar back into an example. Mode and family are inferred
/// from the assistant layout (they are sidecar metadata, not wire bytes):
/// a think block with a nonempty interior means reasoning supervision; the
/// absence of any think block means the single-target-segment family.
pub fn parse(input: &str) -> Result<SegmentedExample> {
    let mut scanner = Scanner { input, pos: 0 };
    let mut segments = Vec::new();

    scanner.expect("<user>")?;
    while !scanner.peek("</user>") {
        segments.push(parse_segment(&mut scanner, Channel::User)?);
    }
    scanner.expect("</user>")?;
    let block_gap = scanner.take_whitespace().to_string();
    scanner.expect("<assistant>")?;
    while !scanner.peek("</assistant>") {
        segments.push(parse_segment(&mut scanner, Channel::Assistant)?);
    }
    scanner.expect("</assistant>")?;
    let trailing = scanner.take_whitespace().to_string();
    if scanner.pos != input.len() {
        return Err(Error::Parse {
            offset: scanner.pos,
            message: "unexpected content after </assistant>".into(),
        });
    }

    let assistant_text: String =
        segments.iter().filter(|s| s.channel == Channel::Assistant).map(|s| s.text.as_str()).collect();
    let model_family = if assistant_text.contains("<think>") {
        ModelFamily::QwenFamily
    } else {
        ModelFamily::LlamaFamily
    };
    let mode = match (assistant_text.find("<think>"), assistant_text.find("</think>")) {
        (Some(open), Some(close)) if open < close => {
            if assistant_text[open + "<think>".len()..close].trim().is_empty() {
                SupervisionMode::AnswerOnly
            } else {
                SupervisionMode::Reasoning
            }
        }
        _ => SupervisionMode::AnswerOnly,
    };

    let example = SegmentedExample {
        example_id: String::new(),
        segments,
        mode,
        model_family,
        block_gap,
        trailing,
    };
    example.validate().map_err(|e| Error::Parse { offset: 0, message: e.to_string() })?;
    Ok(example)
}

/// Assembles a training record from the context bundle, the question's
/// instruction segment, and one teacher response.
pub fn assemble_example(
    bundle: &ContextBundle,
    question: &QARecord,
    response: &SampledResponse,
    mode: SupervisionMode,
    model_family: ModelFamily,
    kind: DatasetKind,
) -> Result<SegmentedExample> {
    if response.mode != mode {
        return Err(Error::InvalidArgument(format!(
            "response {} has mode {}, expected {}",
            response.qid, response.mode, mode
        )));
    }
    bundle.validate()?;
    let context_text = bundle.render();
    if context_text.is_empty() {
        return Err(Error::Invariant("droppable context segment must be nonempty".into()));
    }
    let instruction =
        prompts::instruction_segment_text(kind, model_family, mode, &question.question);

    let mut segments = vec![Segment::droppable(context_text), Segment::user(instruction)];
    match (model_family, mode) {
        (ModelFamily::QwenFamily, SupervisionMode::Reasoning) => {
            let raw = &response.raw_text;
            let open = raw.find("<think>").ok_or_else(|| {
                Error::Invariant(format!(
                    "reasoning response for {} lacks the think-open marker",
                    response.qid
                ))
            })?;
            let mut split = open + "<think>".len();
            if raw[split..].starts_with('\n') {
                split += 1;
            }
            let head = &raw[..split];
            let tail = &raw[split..];
            if tail.trim().is_empty() {
                return Err(Error::Invariant(format!(
                    "reasoning response for {} has an empty trace",
                    response.qid
                )));
            }
            segments.push(Segment::assistant(head));
            segments.push(Segment::target(tail));
        }
        (ModelFamily::QwenFamily, SupervisionMode::AnswerOnly) => {
            let answer = response.extracted_answer.as_deref().ok_or_else(|| {
                Error::Invariant(format!(
                    "answer-only response for {} has no extractable answer",
                    response.qid
                ))
            })?;
            // The empty think block is prompt scaffolding, not supervision.
            segments.push(Segment::assistant("<think>\n\n</think>\n\n"));
            segments.push(Segment::target(format!("<answer>{answer}</answer>")));
        }
        (ModelFamily::LlamaFamily, _) => {
            let answer = response.extracted_answer.as_deref().ok_or_else(|| {
                Error::Invariant(format!(
                    "response for {} has no extractable answer",
                    response.qid
                ))
            })?;
            segments.push(Segment::target(format!("\n<answer>{answer}</answer>")));
        }
    }

    let example = SegmentedExample {
        example_id: format!("{}#s{}", question.qid, response.sample_index),
        segments,
        mode,
        model_family,
        block_gap: "\n".into(),
        trailing: String::new(),
    };
    example.validate()?;
    Ok(example)
}

/// With probability `rate`, returns a student view without the droppable
/// segment; otherwise a byte-identical copy. The teacher view is never
/// modified.
pub fn apply_context_dropout(
    example: &SegmentedExample,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<(SegmentedExample, bool)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument("dropout rate must be in [0, 1]".into()));
    }
    let dropped = rng.gen::<f64>() < rate;
    if !dropped {
        return Ok((example.clone(), false));
    }
    let mut view = example.clone();
    view.segments.retain(|s| !s.droppable);
    Ok((view, true))
}

/// Deterministic text-to-token-ids encoder. Implementations must be pure:
/// equal text always yields equal ids.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn vocab_size(&self) -> usize;
}

/// Teacher and student token views with paired target positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedBatch {
    pub example_id: String,
    pub teacher_tokens: Vec<u32>,
    pub student_tokens: Vec<u32>,
    pub teacher_target_positions: Vec<usize>,
    pub student_target_positions: Vec<usize>,
    pub context_kept: bool,
}

impl AlignedBatch {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_target_positions.len() != self.student_target_positions.len() {
            return Err(Error::Invariant(format!(
                "{}: target position counts differ ({} vs {})",
                self.example_id,
                self.teacher_target_positions.len(),
                self.student_target_positions.len()
            )));
        }
        for (&t, &s) in self.teacher_target_positions.iter().zip(&self.student_target_positions) {
            let (Some(&tt), Some(&st)) = (self.teacher_tokens.get(t), self.student_tokens.get(s))
            else {
                return Err(Error::Invariant(format!(
                    "{}: target position out of range",
                    self.example_id
                )));
            };
            if tt != st {
                return Err(Error::Invariant(format!(
                    "{}: token ids differ at paired target positions ({t}, {s})",
                    self.example_id
                )));
            }
        }
        if self.context_kept && self.teacher_tokens != self.student_tokens {
            return Err(Error::Invariant(format!(
                "{}: context kept but token sequences differ",
                self.example_id
            )));
        }
        Ok(())
    }
}

/// Tokenizes each segment independently and concatenates, so target token
/// ids are identical in the teacher and student views regardless of the
/// dropout outcome.
pub fn tokenize_aligned(
    example: &SegmentedExample,
    student_view: &SegmentedExample,
    tokenizer: &dyn Tokenizer,
) -> Result<AlignedBatch> {
    fn encode_view(
        view: &SegmentedExample,
        tokenizer: &dyn Tokenizer,
    ) -> Result<(Vec<u32>, Vec<usize>)> {
        let mut tokens = Vec::new();
        let mut target_positions = Vec::new();
        for segment in &view.segments {
            let ids = tokenizer.encode(&segment.text);
            if segment.target && ids.is_empty() && !segment.text.is_empty() {
                return Err(Error::Invariant(format!(
                    "tokenizer produced no tokens for nonempty target segment of {}",
                    view.example_id
                )));
            }
            if segment.target {
                target_positions.extend(tokens.len()..tokens.len() + ids.len());
            }
            tokens.extend(ids);
        }
        Ok((tokens, target_positions))
    }

    let (teacher_tokens, teacher_target_positions) = encode_view(example, tokenizer)?;
    let (student_tokens, student_target_positions) = encode_view(student_view, tokenizer)?;
    let context_kept = student_view.segments.iter().any(|s| s.droppable);
    let batch = AlignedBatch {
        example_id: example.example_id.clone(),
        teacher_tokens,
        student_tokens,
        teacher_target_positions,
        student_target_positions,
        context_kept,
    };
    batch.validate()?;
    Ok(batch)
}

/// A record trained with cross-entropy on a hard textual target: SFT,
/// ICE-style baseline, and conservative samples all take this shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardTargetRecord {
    pub record_id: String,
    pub prompt: String,
    pub target: String,
    pub category: QACategory,
    /// Set when the record was kept despite an anomaly (e.g. an empty
    /// sampled continuation).
    #[serde(default)]
    pub flagged: bool,
}

/// Question -> edited target pairs with no context segment.
pub fn build_sft_records(paraphrases: &[QARecord]) -> Result<Vec<HardTargetRecord>> {
    paraphrases
        .iter()
        .map(|q| {
            let gold = q.gold_answer.as_deref().ok_or_else(|| {
                Error::InvalidArgument(format!("paraphrase {} has no gold answer", q.qid))
            })?;
            Ok(HardTargetRecord {
                record_id: format!("sft::{}", q.qid),
                prompt: q.question.clone(),
                target: gold.to_string(),
                category: QACategory::SingleHopTrain,
                flagged: false,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IceConfig {
    /// Context variants built per fact: with a biography available the
    /// builder paraphrases fact and biography into sqrt-counts and crosses
    /// them; otherwise the fact alone is paraphrased into this many.
    pub context_variants: u32,
    pub continuations_per_input: u32,
}

impl Default for IceConfig {
    fn default() -> Self {
        Self { context_variants: 25, continuations_per_input: 6 }
    }
}

#[derive(Debug)]
pub struct IceBuild {
    pub records: Vec<HardTargetRecord>,
    pub context_variants: usize,
    pub flagged: usize,
}

fn paraphrase_passage(
    client: &GenClient,
    cfg: &SynthesisConfig,
    passage: &str,
    n: u32,
    salt: &str,
) -> Result<Vec<String>> {
    use crate::genclient::{ChatMessage, ChatRequest};
    let prompt = prompts::fill(
        prompts::PARAPHRASE_CONTEXT,
        &[("n", &n.to_string()), ("passage", passage)],
    );
    let mut config = cfg.config.clone();
    config.n_samples = 1;
    let request =
        ChatRequest::new(vec![ChatMessage::user(prompt)], config, Some(salt.to_string()))?;
    let raw = client.generate(&request)?.remove(0);
    let parsed = parse_tagged_blocks(&raw, "variant");
    if parsed.blocks.is_empty() {
        return Err(Error::Generation {
            message: format!("no passage paraphrases parsed ({salt})"),
            last_output: Some(raw),
        });
    }
    Ok(parsed.blocks.into_iter().map(|(_, text)| text).take(n as usize).collect())
}

/// Paraphrased-context baseline records: `[question, answer, continuation]`
/// with the answer and continuation as the cross-entropy target and the
/// context removed from the final record.
pub fn build_ice_records(
    fact: &crate::corpus::EditFact,
    bundle: &ContextBundle,
    client: &GenClient,
    cfg: &SynthesisConfig,
    ice: &IceConfig,
) -> Result<IceBuild> {
    use crate::genclient::{ChatMessage, ChatRequest};
    bundle.validate()?;
    let knowledge_text = match bundle.representation {
        crate::synthesis::Representation::Stories => bundle.story_texts.join("\n"),
        crate::synthesis::Representation::AtomicFacts => bundle.atomic_fact_texts.join("\n"),
    };

    let contexts: Vec<String> = if bundle.biography_texts.is_empty() {
        paraphrase_passage(client, cfg, &knowledge_text, ice.context_variants, "ice-ctx")?
    } else {
        let side = (ice.context_variants as f64).sqrt().round().max(1.0) as u32;
        let fact_variants = paraphrase_passage(client, cfg, &knowledge_text, side, "ice-fact")?;
        let bio_variants =
            paraphrase_passage(client, cfg, &bundle.biography_texts.join("\n"), side, "ice-bio")?;
        fact_variants
            .iter()
            .flat_map(|f| bio_variants.iter().map(move |b| format!("{b}\n{f}")))
            .collect()
    };

    let question = fact.direct_question();
    let answer = &fact.new_object;
    let mut records = Vec::new();
    let mut flagged = 0usize;
    for (ci, context) in contexts.iter().enumerate() {
        for k in 0..ice.continuations_per_input {
            // Model continues after "[context] [question] [answer],"
            let sampling_prompt = format!("{context}\n{question} {answer},");
            let mut config = cfg.config.clone();
            config.n_samples = 1;
            let request = ChatRequest::new(
                vec![ChatMessage::user(sampling_prompt)],
                config,
                Some(format!("ice-cont-{ci}-{k}")),
            )?;
            let continuation = client.generate(&request)?.remove(0);
            let empty = continuation.trim().is_empty();
            if empty {
                flagged += 1;
            }
            records.push(HardTargetRecord {
                record_id: format!("ice::{}::{ci}::{k}", fact.fact_id),
                prompt: question.clone(),
                target: if empty {
                    answer.to_string()
                } else {
                    format!("{answer}, {}", continuation.trim())
                },
                category: QACategory::SingleHopTrain,
                flagged: empty,
            });
        }
    }
    Ok(IceBuild { records, context_variants: contexts.len(), flagged })
}

/// Conservative samples: `n` neighbor questions about the edited subject,
/// independent of the edited attribute, answered by the pre-edit backend.
pub fn build_conservative_records(
    fact: &crate::corpus::EditFact,
    pre_edit_client: &GenClient,
    cfg: &SynthesisConfig,
    n: u32,
) -> Result<Vec<HardTargetRecord>> {
    use crate::genclient::{ChatMessage, ChatRequest};
    if n == 0 {
        return Ok(Vec::new());
    }
    let prompt = prompts::fill(
        prompts::NEIGHBOR_QUESTIONS,
        &[
            ("n", &n.to_string()),
            ("subject", &fact.subject),
            ("attribute", &fact.direct_question()),
        ],
    );
    let mut config = cfg.config.clone();
    config.n_samples = 1;
    let request = ChatRequest::new(
        vec![ChatMessage::user(prompt)],
        config.clone(),
        Some(format!("neighbor-{}", fact.fact_id)),
    )?;
    let raw = pre_edit_client.generate(&request)?.remove(0);
    let parsed = parse_tagged_blocks(&raw, "question");
    if parsed.blocks.is_empty() {
        return Err(Error::Generation {
            message: format!("no neighbor questions parsed for {}", fact.fact_id),
            last_output: Some(raw),
        });
    }
    let mut records = Vec::new();
    for (i, (_, question)) in parsed.blocks.into_iter().take(n as usize).enumerate() {
        let ask = ChatRequest::new(
            vec![ChatMessage::user(question.clone())],
            config.clone(),
            Some(format!("conservative-{}-{i}", fact.fact_id)),
        )?;
        let answer = pre_edit_client.generate(&ask)?.remove(0);
        let answer = crate::evaluator::extract_answer(&answer).unwrap_or(answer);
        records.push(HardTargetRecord {
            record_id: format!("cons::{}::{i}", fact.fact_id),
            prompt: question,
            target: answer,
            category: QACategory::Conservative,
            flagged: false,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Splits on whitespace but keeps the tag markers as their own tokens;
    /// ids are stable hashes into a fixed-size vocabulary.
    pub struct HashTokenizer {
        vocab: u32,
    }

    impl HashTokenizer {
        pub fn new(vocab: u32) -> Self {
            Self { vocab }
        }
    }

    impl Tokenizer for HashTokenizer {
        fn encode(&self, text: &str) -> Vec<u32> {
            text.split_whitespace()
                .map(|w| {
                    let mut h: u32 = 2166136261;
                    for b in w.bytes() {
                        h ^= b as u32;
                        h = h.wrapping_mul(16777619);
                    }
                    h % self.vocab
                })
                .collect()
        }
        fn vocab_size(&self) -> usize {
            self.vocab as usize
        }
    }

    fn minimal_example() -> SegmentedExample {
        SegmentedExample {
            example_id: "ex0".into(),
            segments: vec![
                Segment::droppable("context words here"),
                Segment::user("\ninstruction\nQuestion: who?"),
                Segment::assistant("<think>\n\n</think>\n\n"),
                Segment::target("<answer>Grace Chihana</answer>"),
            ],
            mode: SupervisionMode::AnswerOnly,
            model_family: ModelFamily::QwenFamily,
            block_gap: "\n".into(),
            trailing: String::new(),
        }
    }

    #[test]
    fn minimal_round_trip() {
        let example = minimal_example();
        let wire = serialize(&example);
        let parsed = parse(&wire).unwrap();
        assert_eq!(parsed.segments, example.segments);
        assert_eq!(serialize(&parsed), wire);
        assert_eq!(parsed.mode, SupervisionMode::AnswerOnly);
        assert_eq!(parsed.model_family, ModelFamily::QwenFamily);
    }

    #[test]
    fn two_droppable_segments_is_parse_error() {
        let wire = "<user><s recipient=\"student_dropout\">a</s><s recipient=\"student_dropout\">b</s></user>\n<assistant><s target=\"true\">x</s></assistant>";
        match parse(wire) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("droppable")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_attribute_reports_offset() {
        let wire = "<user><s role=\"x\">a</s></user>\n<assistant><s target=\"true\">x</s></assistant>";
        match parse(wire) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 8);
                assert!(message.contains("unknown attribute"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unclosed_tag_reports_offset() {
        let wire = "<user><s>abc</user>";
        match parse(wire) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("unclosed")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dropout_boundaries_are_exact() {
        let example = minimal_example();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (view, dropped) = apply_context_dropout(&example, 1.0, &mut rng).unwrap();
            assert!(dropped);
            assert!(view.segments.iter().all(|s| !s.droppable));
        }
        for _ in 0..100 {
            let (view, dropped) = apply_context_dropout(&example, 0.0, &mut rng).unwrap();
            assert!(!dropped);
            assert_eq!(view, example);
        }
    }

    #[test]
    fn dropout_touches_only_the_droppable_segment() {
        let example = minimal_example();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (view, dropped) = apply_context_dropout(&example, 1.0, &mut rng).unwrap();
        assert!(dropped);
        let kept: Vec<&Segment> = example.segments.iter().filter(|s| !s.droppable).collect();
        assert_eq!(view.segments.len(), kept.len());
        for (v, k) in view.segments.iter().zip(kept) {
            assert_eq!(v, k);
        }
    }

    #[test]
    fn alignment_identity_when_context_kept() {
        let example = minimal_example();
        let tokenizer = HashTokenizer::new(1000);
        let batch = tokenize_aligned(&example, &example, &tokenizer).unwrap();
        assert!(batch.context_kept);
        assert_eq!(batch.teacher_tokens, batch.student_tokens);
        assert_eq!(batch.teacher_target_positions, batch.student_target_positions);
    }

    #[test]
    fn alignment_shift_equals_context_token_count() {
        let example = minimal_example();
        let tokenizer = HashTokenizer::new(1000);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (view, dropped) = apply_context_dropout(&example, 1.0, &mut rng).unwrap();
        assert!(dropped);
        let batch = tokenize_aligned(&example, &view, &tokenizer).unwrap();
        let context_tokens = tokenizer
            .encode(&example.segments[example.droppable_index().unwrap()].text)
            .len();
        for (&t, &s) in batch
            .teacher_target_positions
            .iter()
            .zip(&batch.student_target_positions)
        {
            assert_eq!(t - s, context_tokens);
        }
        assert!(!batch.context_kept);
    }

    fn sample_response(mode: SupervisionMode, raw: &str) -> SampledResponse {
        SampledResponse::new("q0".into(), 0, mode, raw.to_string(), "fp".into())
    }

    fn story_bundle() -> ContextBundle {
        ContextBundle::stories(
            vec!["f0".into()],
            vec!["Publication: BBC News\nHeadline: Eleanor Sterling Appointed".into()],
            vec![],
            "the UK government",
        )
    }

    fn question() -> QARecord {
        QARecord {
            qid: "q0".into(),
            question: "Who leads the country where Stonehenge is?".into(),
            gold_answer: None,
            category: QACategory::MultiHopTrain,
            required_fact_ids: vec!["f0".into()],
            hop_count: 2,
            pre_edit_answer: None,
        }
    }

    #[test]
    fn assemble_reasoning_layout() {
        let raw = "<think>\nOkay, let's tackle this question. Stonehenge is in the UK.\n</think>\n<answer>Eleanor Sterling</answer>";
        let response = sample_response(SupervisionMode::Reasoning, raw);
        let example = assemble_example(
            &story_bundle(),
            &question(),
            &response,
            SupervisionMode::Reasoning,
            ModelFamily::QwenFamily,
            DatasetKind::Story,
        )
        .unwrap();
        let assistant: Vec<&Segment> = example.assistant_segments().collect();
        assert_eq!(assistant.len(), 2);
        assert_eq!(assistant[0].text, "<think>\n");
        assert!(!assistant[0].target);
        assert!(assistant[1].target);
        assert!(assistant[1].text.starts_with("Okay, let's tackle this question"));
        assert!(assistant[1].text.ends_with("<answer>Eleanor Sterling</answer>"));
        // Round-trips through the grammar.
        let wire = serialize(&example);
        let parsed = parse(&wire).unwrap();
        assert_eq!(parsed.segments, example.segments);
        assert_eq!(parsed.mode, SupervisionMode::Reasoning);
    }

    #[test]
    fn assemble_answer_only_layout() {
        let response =
            sample_response(SupervisionMode::AnswerOnly, "<answer>Grace Chihana</answer>");
        let example = assemble_example(
            &story_bundle(),
            &question(),
            &response,
            SupervisionMode::AnswerOnly,
            ModelFamily::QwenFamily,
            DatasetKind::Story,
        )
        .unwrap();
        let assistant: Vec<&Segment> = example.assistant_segments().collect();
        assert_eq!(assistant[0].text, "<think>\n\n</think>\n\n");
        assert_eq!(assistant[1].text, "<answer>Grace Chihana</answer>");
        assert!(assistant[1].target && !assistant[0].target);
    }

    #[test]
    fn assemble_llama_layout_is_single_target() {
        let response =
            sample_response(SupervisionMode::AnswerOnly, " \n<answer>Sofia Carrasco</answer>");
        let example = assemble_example(
            &story_bundle(),
            &question(),
            &response,
            SupervisionMode::AnswerOnly,
            ModelFamily::LlamaFamily,
            DatasetKind::Story,
        )
        .unwrap();
        let assistant: Vec<&Segment> = example.assistant_segments().collect();
        assert_eq!(assistant.len(), 1);
        assert!(assistant[0].target);
        assert_eq!(assistant[0].text, "\n<answer>Sofia Carrasco</answer>");
    }

    #[test]
    fn reasoning_without_think_marker_is_assembly_error() {
        let response = sample_response(SupervisionMode::Reasoning, "no marker <answer>x</answer>");
        let err = assemble_example(
            &story_bundle(),
            &question(),
            &response,
            SupervisionMode::Reasoning,
            ModelFamily::QwenFamily,
            DatasetKind::Story,
        );
        assert!(matches!(err, Err(Error::Invariant(_))));
    }

    #[test]
    fn empty_bundle_is_assembly_error() {
        let bundle = ContextBundle {
            fact_ids: vec![],
            representation: crate::synthesis::Representation::AtomicFacts,
            atomic_fact_texts: vec![],
            story_texts: vec![],
            biography_texts: vec![],
            preamble: String::new(),
        };
        let response = sample_response(SupervisionMode::AnswerOnly, "<answer>x</answer>");
        let err = assemble_example(
            &bundle,
            &question(),
            &response,
            SupervisionMode::AnswerOnly,
            ModelFamily::QwenFamily,
            DatasetKind::Story,
        );
        assert!(err.is_err());
    }

    #[test]
    fn sft_records_carry_gold() {
        let paraphrases: Vec<QARecord> = (0..56)
            .map(|i| QARecord {
                qid: format!("p{i}"),
                question: format!("Variant {i}?"),
                gold_answer: Some("Eleanor Sterling".into()),
                category: QACategory::SingleHopTrain,
                required_fact_ids: vec!["f0".into()],
                hop_count: 1,
                pre_edit_answer: None,
            })
            .collect();
        let records = build_sft_records(&paraphrases).unwrap();
        assert_eq!(records.len(), 56);
        assert!(records.iter().all(|r| r.target == "Eleanor Sterling"));
        assert!(build_sft_records(&[QARecord {
            gold_answer: None,
            ..paraphrases[0].clone()
        }])
        .is_err());
        assert!(build_sft_records(&[]).unwrap().is_empty());
    }
}
