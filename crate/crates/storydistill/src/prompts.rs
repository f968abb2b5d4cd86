//! Versioned prompt assets and instruction texts.
//!
//! The generation prompts live as text files under `assets/prompts/` and are
//! embedded at compile time; [`prompt_fingerprint`] hashes all of them so run
//! manifests pin the exact prompt revision a run used.

use sha2::{Digest, Sha256};

use crate::corpus::DatasetKind;
use crate::genclient::ModelFamily;
use crate::synthesis::{Representation, SupervisionMode};

pub const STORY_GEN_STORY: &str = include_str!("../assets/prompts/story_gen_story.txt");
pub const STORY_GEN_CF: &str = include_str!("../assets/prompts/story_gen_cf.txt");
pub const QUESTION_GEN_STORY: &str = include_str!("../assets/prompts/question_gen_story.txt");
pub const QUESTION_GEN_CF: &str = include_str!("../assets/prompts/question_gen_cf.txt");
pub const QUESTION_FILTER: &str = include_str!("../assets/prompts/question_filter.txt");
pub const PARAPHRASE_QUESTION: &str = include_str!("../assets/prompts/paraphrase_question.txt");
pub const PARAPHRASE_CONTEXT: &str = include_str!("../assets/prompts/paraphrase_context.txt");
pub const NEIGHBOR_QUESTIONS: &str = include_str!("../assets/prompts/neighbor_questions.txt");

/// Hash over every embedded prompt asset, recorded in run manifests.
pub fn prompt_fingerprint() -> String {
    let mut hasher = Sha256::new();
    for asset in [
        STORY_GEN_STORY,
        STORY_GEN_CF,
        QUESTION_GEN_STORY,
        QUESTION_GEN_CF,
        QUESTION_FILTER,
        PARAPHRASE_QUESTION,
        PARAPHRASE_CONTEXT,
        NEIGHBOR_QUESTIONS,
    ] {
        hasher.update((asset.len() as u64).to_le_bytes());
        hasher.update(asset.as_bytes());
    }
    hex::encode(hasher.finalize())[..16].to_string()
}

/// Fills `{key}` slots in a template. Unreplaced slots are left verbatim so
/// callers can fill in stages.
pub fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// The knowledge-update preamble that closes a rendered context block.
pub fn context_preamble(representation: Representation, topic: &str) -> String {
    match representation {
        Representation::Stories => format!(
            "After reading the news, your knowledge about {topic} has been updated. \
             The information in the news supersedes all your prior data about {topic}."
        ),
        Representation::AtomicFacts => {
            "The fact given above is the most recent real-world knowledge. This information \
             in the given fact supersedes any prior relevant knowledge you have."
                .to_string()
        }
    }
}

/// Mode-specific answering instruction, by model family and dataset.
pub fn answer_instruction(
    kind: DatasetKind,
    family: ModelFamily,
    mode: SupervisionMode,
) -> &'static str {
    match (family, mode, kind) {
        (ModelFamily::QwenFamily, SupervisionMode::Reasoning, _) => {
            "Now, answer the following question by step-by-step reasoning. Write down only \
             the final answer (without extra text) between <answer> and </answer> tags."
        }
        (ModelFamily::QwenFamily, SupervisionMode::AnswerOnly, DatasetKind::Story) => {
            "Now, answer the following question using your knowledge. Your final answer \
             should be wrapped with <answer> and </answer> tags."
        }
        (ModelFamily::QwenFamily, SupervisionMode::AnswerOnly, DatasetKind::Cf) => {
            "Now, answer the following question using your knowledge. Write down only the \
             final answer (without extra text) between <answer> and </answer> tags."
        }
        (ModelFamily::LlamaFamily, _, _) => {
            "Your task is to answer the following question using your updated knowledge."
        }
    }
}

/// The full text of the instruction+question user segment, laid out exactly
/// as the training-record grammar stores it.
pub fn instruction_segment_text(
    kind: DatasetKind,
    family: ModelFamily,
    mode: SupervisionMode,
    question: &str,
) -> String {
    match family {
        ModelFamily::QwenFamily => {
            format!("\n{}\nQuestion: {question}", answer_instruction(kind, family, mode))
        }
        ModelFamily::LlamaFamily => format!(
            "{}\nquestion: {question}\nNow, answer this question. Write down your final \
             answer (without extra text) between <answer> and </answer> tags:",
            answer_instruction(kind, family, mode)
        ),
    }
}

/// Evaluation prompt text: the same user instruction as training, with no
/// edit context and no integration hint. For non-reasoning families, CoT mode
/// adds the explicit step-by-step instruction.
pub fn eval_instruction_text(family: ModelFamily, cot: bool, question: &str) -> String {
    match (family, cot) {
        (ModelFamily::QwenFamily, true) => format!(
            "Now, answer the following question by step-by-step reasoning. Write down only \
             the final answer (without extra text) between <answer> and </answer> tags.\n\
             Question: {question}"
        ),
        (ModelFamily::QwenFamily, false) => format!(
            "Now, answer the following question using your knowledge. Write down only the \
             final answer (without extra text) between <answer> and </answer> tags.\n\
             Question: {question}"
        ),
        (ModelFamily::LlamaFamily, cot) => {
            let how = if cot { " by step-by-step reasoning" } else { "" };
            format!(
                "Your task is to answer this question{how} using your knowledge.\n\
                 question: {question}\n\
                 Now, answer this question. Write down your final answer (without extra \
                 text) between <answer> and </answer> tags:"
            )
        }
    }
}
