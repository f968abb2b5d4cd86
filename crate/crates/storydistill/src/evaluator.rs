//! Evaluation harness: prompt construction, answer extraction and matching,
//! metric aggregation over repeated runs, and reasoning-length statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{QACategory, QARecord};
use crate::error::{Error, Result};
use crate::genclient::{ChatMessage, ChatRequest, GenClient, GenerationConfig, ModelFamily};
use crate::prompts;

/// Content of the last well-formed `<answer>…</answer>` pair, trimmed.
pub fn extract_answer(text: &str) -> Option<String> {
    let mut best: Option<&str> = None;
    let mut cursor = 0usize;
    while let Some(rel) = text[cursor..].find("<answer>") {
        let start = cursor + rel + "<answer>".len();
        match text[start..].find("</answer>") {
            Some(rel_end) => {
                best = Some(&text[start..start + rel_end]);
                cursor = start + rel_end + "</answer>".len();
            }
            None => break,
        }
    }
    best.map(|s| s.trim().to_string())
}

/// Casefolds, strips punctuation, and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Normalized gold contained in normalized prediction, or the reverse
    /// when the prediction is shorter.
    NormalizedContainment,
    /// Equality after normalization.
    StrictExact,
}

impl std::fmt::Display for MatchRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatchRule::NormalizedContainment => write!(f, "normalized_containment"),
            MatchRule::StrictExact => write!(f, "strict_exact"),
        }
    }
}

pub fn match_answer_with(predicted: &str, gold: &str, rule: MatchRule) -> bool {
    let p = normalize_answer(predicted);
    let g = normalize_answer(gold);
    if p.is_empty() || g.is_empty() {
        return false;
    }
    match rule {
        MatchRule::StrictExact => p == g,
        MatchRule::NormalizedContainment => {
            p.contains(&g) || (p.len() < g.len() && g.contains(&p))
        }
    }
}

/// Default matching rule used across the pipeline.
pub fn match_answer(predicted: &str, gold: &str) -> bool {
    match_answer_with(predicted, gold, MatchRule::NormalizedContainment)
}

/// Inference-time prompting mode. The instruction carries no edit context
/// and no integration hint; `{question}` marks where the question goes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMode {
    pub cot: bool,
    pub instruction_text: String,
}

impl EvalMode {
    pub fn for_family(family: ModelFamily, cot: bool) -> Self {
        Self {
            cot,
            instruction_text: prompts::eval_instruction_text(family, cot, "{question}"),
        }
    }
}

/// Builds the evaluation request: instruction plus question, nothing else.
pub fn build_eval_prompt(
    question: &str,
    mode: &EvalMode,
    config: GenerationConfig,
    salt: Option<String>,
) -> Result<ChatRequest> {
    let text = mode.instruction_text.replace("{question}", question);
    ChatRequest::new(vec![ChatMessage::user(text)], config, salt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    /// Accuracy as a percentage in [0, 100].
    pub mean: f64,
    /// Sample standard deviation over runs divided by sqrt(n_runs), in
    /// percentage points; exactly 0 for a single run.
    pub stderr: f64,
    pub n_runs: u32,
    pub n_questions: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<QACategory, MetricStat>,
    /// Mean reasoning-trace token counts per condition label.
    pub length_stats: BTreeMap<String, f64>,
    pub matching_rule: String,
    pub n_runs: u32,
}

impl MetricsReport {
    pub fn accuracy(&self, category: QACategory) -> Option<f64> {
        self.metrics.get(&category).map(|s| s.mean)
    }

    /// Human-readable table: metric, mean, stderr, n.
    pub fn render_table(&self) -> String {
        let mut out = String::from("metric            mean   stderr  n_questions\n");
        for (category, stat) in &self.metrics {
            out.push_str(&format!(
                "{:<16} {:>6.1}  {:>6.2}  {:>6}\n",
                category.to_string(),
                stat.mean,
                stat.stderr,
                stat.n_questions
            ));
        }
        out.push_str(&format!(
            "(matching rule: {}; runs: {})\n",
            self.matching_rule, self.n_runs
        ));
        out
    }
}

/// Per-question verdict persisted for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionVerdict {
    pub qid: String,
    pub run: u32,
    pub category: QACategory,
    pub question: String,
    pub prediction: Option<String>,
    pub gold: String,
    pub correct: bool,
    /// Set when the backend failed or no answer could be extracted; such
    /// questions count as incorrect, never skipped.
    pub flagged: bool,
    /// Raw response text, kept so reasoning-length statistics can be
    /// computed from the audit trail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_runs: u32,
    pub seed: u64,
    pub rule: MatchRule,
    pub config: GenerationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_runs: 3,
            seed: 0,
            rule: MatchRule::NormalizedContainment,
            config: GenerationConfig::default(),
        }
    }
}

/// Runs the suite `n_runs` times with derived decoding seeds and aggregates
/// per-metric accuracy. Backend failures count as incorrect and are flagged.
pub fn evaluate_suite(
    client: &GenClient,
    suite: &[QARecord],
    mode: &EvalMode,
    eval: &EvalConfig,
) -> Result<(MetricsReport, Vec<QuestionVerdict>)> {
    if eval.n_runs < 1 {
        return Err(Error::InvalidArgument("n_runs must be >= 1".into()));
    }
    let mut verdicts = Vec::new();
    // category -> per-run accuracy values (percent)
    let mut per_run: BTreeMap<QACategory, Vec<f64>> = BTreeMap::new();
    let mut n_questions: BTreeMap<QACategory, usize> = BTreeMap::new();

    for run in 0..eval.n_runs {
        let mut correct: BTreeMap<QACategory, usize> = BTreeMap::new();
        let mut total: BTreeMap<QACategory, usize> = BTreeMap::new();
        for record in suite {
            let gold = record.gold_answer.clone().unwrap_or_default();
            let salt = Some(format!("eval-run-{}-{run}", eval.seed));
            let request = build_eval_prompt(&record.question, mode, eval.config.clone(), salt)?;
            let (prediction, raw_response, flagged) = match client.generate(&request) {
                Ok(texts) => {
                    let text = texts.into_iter().next().unwrap_or_default();
                    match extract_answer(&text) {
                        Some(answer) => (Some(answer), Some(text), false),
                        None => (None, Some(text), true),
                    }
                }
                Err(_) => (None, None, true),
            };
            let is_correct = !gold.is_empty()
                && prediction
                    .as_deref()
                    .map(|p| match_answer_with(p, &gold, eval.rule))
                    .unwrap_or(false);
            *total.entry(record.category).or_default() += 1;
            if is_correct {
                *correct.entry(record.category).or_default() += 1;
            }
            verdicts.push(QuestionVerdict {
                qid: record.qid.clone(),
                run,
                category: record.category,
                question: record.question.clone(),
                prediction,
                gold,
                correct: is_correct,
                flagged,
                raw_response,
            });
        }
        for (category, n) in &total {
            let c = correct.get(category).copied().unwrap_or(0);
            per_run
                .entry(*category)
                .or_default()
                .push(100.0 * c as f64 / *n as f64);
            n_questions.insert(*category, *n);
        }
    }

    let mut metrics = BTreeMap::new();
    for (category, values) in per_run {
        let (mean, stderr) = mean_and_stderr(&values);
        metrics.insert(
            category,
            MetricStat {
                mean,
                stderr,
                n_runs: eval.n_runs,
                n_questions: n_questions[&category],
            },
        );
    }
    Ok((
        MetricsReport {
            metrics,
            length_stats: BTreeMap::new(),
            matching_rule: eval.rule.to_string(),
            n_runs: eval.n_runs,
        },
        verdicts,
    ))
}

/// The reasoning-trace portion of a response: the think block's interior
/// when present, otherwise the text with answer tags removed.
pub fn reasoning_trace(text: &str) -> String {
    let inner = match (text.find("<think>"), text.find("</think>")) {
        (Some(open), Some(close)) if open + "<think>".len() <= close => {
            &text[open + "<think>".len()..close]
        }
        _ => text,
    };
    let mut out = String::new();
    let mut rest = inner;
    loop {
        match rest.find("<answer>") {
            Some(start) => {
                out.push_str(&rest[..start]);
                match rest[start..].find("</answer>") {
                    Some(end) => rest = &rest[start + end + "</answer>".len()..],
                    None => {
                        rest = "";
                    }
                }
            }
            None => {
                out.push_str(rest);
                break;
            }
        }
        if rest.is_empty() {
            break;
        }
    }
    out.trim().to_string()
}

/// Mean reasoning-trace token count per condition, answer tags excluded.
pub fn length_stats(
    responses_by_condition: &BTreeMap<String, Vec<String>>,
    count_tokens: impl Fn(&str) -> usize,
) -> BTreeMap<String, f64> {
    responses_by_condition
        .iter()
        .map(|(condition, responses)| {
            let mean = if responses.is_empty() {
                0.0
            } else {
                responses
                    .iter()
                    .map(|r| count_tokens(&reasoning_trace(r)) as f64)
                    .sum::<f64>()
                    / responses.len() as f64
            };
            (condition.clone(), mean)
        })
        .collect()
}

/// Whitespace token counter, the default for length statistics.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Groups run-0 responses by metric category and computes mean trace lengths.
pub fn length_stats_from_verdicts(verdicts: &[QuestionVerdict]) -> BTreeMap<String, f64> {
    let mut grouped: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for v in verdicts.iter().filter(|v| v.run == 0) {
        if let Some(raw) = &v.raw_response {
            grouped.entry(v.category.to_string()).or_default().push(raw.clone());
        }
    }
    length_stats(&grouped, whitespace_tokens)
}
