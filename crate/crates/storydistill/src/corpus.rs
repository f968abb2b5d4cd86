//! Benchmark ingestion, filtering, fictional-entity substitution, and
//! per-metric evaluation-suite construction.
//!
//! The on-disk format is JSONL: one case object per line. The schema is a
//! superset of the MQuAKE release fields; unknown fields are preserved
//! opaquely so that re-serialized cases keep whatever extra metadata the
//! source carried.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::match_answer;
use crate::genclient::{ChatMessage, ChatRequest, GenClient, GenerationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Story,
    Cf,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetKind::Story => write!(f, "story"),
            DatasetKind::Cf => write!(f, "cf"),
        }
    }
}

/// A single knowledge edit: (subject, relation, old object) -> new object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditFact {
    pub fact_id: String,
    pub subject: String,
    /// Relation identifier, a WikiData property id when the source has one.
    pub relation_id: String,
    /// Question template with exactly one `{subject}` slot.
    pub question_template: String,
    pub old_object: String,
    pub new_object: String,
    #[serde(default)]
    pub fictional_target: bool,
    pub dataset_kind: DatasetKind,
    /// When a fictional substitution replaced the original target, the
    /// displaced object is kept here so the fact's lineage stays auditable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub displaced_object: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl EditFact {
    pub fn validate(&self) -> Result<()> {
        if self.new_object == self.old_object {
            return Err(Error::InvalidArgument(format!(
                "fact {}: new_object equals old_object ({:?})",
                self.fact_id, self.new_object
            )));
        }
        let slots = self.question_template.matches("{subject}").count();
        if slots != 1 {
            return Err(Error::InvalidArgument(format!(
                "fact {}: question_template must contain exactly one {{subject}} slot, found {}",
                self.fact_id, slots
            )));
        }
        Ok(())
    }

    /// The direct question probing this edit (the Fact Acc.-Easy question).
    pub fn direct_question(&self) -> String {
        self.question_template.replace("{subject}", &self.subject)
    }

    /// The edit rendered as a declarative atomic-fact sentence.
    pub fn atomic_sentence(&self) -> String {
        let q = self.direct_question();
        let stem = q.trim_end_matches('?');
        format!("{stem} is {}.", self.new_object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QACategory {
    SingleHopTrain,
    MultiHopTrain,
    FactEasy,
    FactHard,
    Locality,
    PortEasy,
    PortHard,
    Conservative,
}

impl std::fmt::Display for QACategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            QACategory::SingleHopTrain => "single_hop_train",
            QACategory::MultiHopTrain => "multi_hop_train",
            QACategory::FactEasy => "fact_easy",
            QACategory::FactHard => "fact_hard",
            QACategory::Locality => "locality",
            QACategory::PortEasy => "port_easy",
            QACategory::PortHard => "port_hard",
            QACategory::Conservative => "conservative",
        };
        write!(f, "{s}")
    }
}

/// A question with its gold answer and the edited facts it exercises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub qid: String,
    pub question: String,
    /// Absent for generated training questions whose answer the pipeline
    /// never trusts (supervision comes from teacher samples instead).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    pub category: QACategory,
    #[serde(default)]
    pub required_fact_ids: Vec<String>,
    pub hop_count: u32,
    /// What the question resolved to before the edit; used by the
    /// pre-edit solvability filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_edit_answer: Option<String>,
}

impl QARecord {
    pub fn validate(&self) -> Result<()> {
        if self.hop_count < 1 {
            return Err(Error::Invariant(format!("{}: hop_count must be >= 1", self.qid)));
        }
        let n = self.required_fact_ids.len();
        match self.category {
            QACategory::PortHard if !(2..=3).contains(&n) => Err(Error::Invariant(format!(
                "{}: port_hard requires 2-3 required_fact_ids, found {n}",
                self.qid
            ))),
            QACategory::FactEasy | QACategory::FactHard if n != 1 => Err(Error::Invariant(format!(
                "{}: {} requires exactly one required_fact_id, found {n}",
                self.qid, self.category
            ))),
            QACategory::Locality | QACategory::Conservative if n != 0 => {
                Err(Error::Invariant(format!(
                    "{}: {} must have empty required_fact_ids, found {n}",
                    self.qid, self.category
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopQa {
    pub question: String,
    pub answer: String,
}

/// One benchmark case: the facts it edits plus its test material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCase {
    pub case_id: String,
    pub edited_facts: Vec<String>,
    /// The source benchmark's multi-hop test questions for this case.
    /// Nonempty for loaded benchmark cases (enforced at load time).
    #[serde(default)]
    pub test_questions: Vec<QARecord>,
    /// Single-hop (question, answer) pairs over unedited knowledge.
    #[serde(default)]
    pub unedited_hops: Vec<HopQa>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Fact registry keyed by fact_id; ids are unique within a corpus.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FactCorpus {
    facts: BTreeMap<String, EditFact>,
}

impl FactCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, fact: EditFact) -> Result<()> {
        fact.validate()?;
        match self.facts.get(&fact.fact_id) {
            None => {
                self.facts.insert(fact.fact_id.clone(), fact);
                Ok(())
            }
            Some(existing) if *existing == fact => Ok(()),
            Some(_) => Err(Error::InvalidArgument(format!(
                "fact id {} already present with different content",
                fact.fact_id
            ))),
        }
    }

    pub fn get(&self, fact_id: &str) -> Option<&EditFact> {
        self.facts.get(fact_id)
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn facts(&self) -> impl Iterator<Item = &EditFact> {
        self.facts.values()
    }

    pub fn resolve_all<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Result<()> {
        for id in ids {
            if !self.facts.contains_key(id) {
                return Err(Error::Invariant(format!("fact id {id} does not resolve in corpus")));
            }
        }
        Ok(())
    }
}

/// Raw JSONL case record as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseRecord {
    case_id: String,
    edits: Vec<EditFact>,
    #[serde(default)]
    test_questions: Vec<QARecord>,
    #[serde(default)]
    unedited_hops: Vec<HopQa>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordError {
    pub index: usize,
    pub record_name: Option<String>,
    pub message: String,
}

#[derive(Debug)]
pub struct BenchmarkLoad {
    pub cases: Vec<EditCase>,
    pub corpus: FactCorpus,
    pub record_errors: Vec<RecordError>,
}

/// Loads a benchmark JSONL file. Unreadable files are fatal; malformed
/// records are reported per line, never silently dropped.
pub fn load_benchmark(path: &Path, kind: DatasetKind) -> Result<BenchmarkLoad> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut load = BenchmarkLoad {
        cases: Vec::new(),
        corpus: FactCorpus::new(),
        record_errors: Vec::new(),
    };
    for (index, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_case_line(line, kind, &mut load.corpus) {
            Ok(case) => load.cases.push(case),
            Err(message) => load.record_errors.push(RecordError {
                index,
                record_name: record_name_of(line),
                message,
            }),
        }
    }
    Ok(load)
}

fn record_name_of(line: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    Some(v.get("case_id")?.as_str()?.to_string())
}

fn parse_case_line(
    line: &str,
    kind: DatasetKind,
    corpus: &mut FactCorpus,
) -> std::result::Result<EditCase, String> {
    let mut rec: CaseRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.edits.is_empty() {
        return Err("case has no edited facts".into());
    }
    if rec.test_questions.is_empty() {
        return Err("case has no test questions".into());
    }
    let mut edited_facts = Vec::with_capacity(rec.edits.len());
    for mut fact in rec.edits.drain(..) {
        fact.dataset_kind = kind;
        edited_facts.push(fact.fact_id.clone());
        corpus.insert(fact).map_err(|e| e.to_string())?;
    }
    for q in &rec.test_questions {
        q.validate().map_err(|e| e.to_string())?;
    }
    Ok(EditCase {
        case_id: rec.case_id,
        edited_facts,
        test_questions: rec.test_questions,
        unedited_hops: rec.unedited_hops,
        extra: rec.extra,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterCheck {
    AlreadyKnown,
    PriorHopUnanswerable,
    PreEditUnsolvable,
}

impl std::fmt::Display for FilterCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FilterCheck::AlreadyKnown => "already_known",
            FilterCheck::PriorHopUnanswerable => "prior_hop_unanswerable",
            FilterCheck::PreEditUnsolvable => "pre_edit_unsolvable",
        };
        write!(f, "{s}")
    }
}

/// Which of the three backend-dependent checks run, and how.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub check_already_known: bool,
    pub check_prior_hops: bool,
    pub check_pre_edit_solvable: bool,
    /// How many times the already-known probe is asked; any matching answer
    /// rejects the case (conservative: avoids contaminated edits).
    pub known_probe_attempts: u32,
    pub config: GenerationConfig,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            check_already_known: true,
            check_prior_hops: true,
            check_pre_edit_solvable: true,
            known_probe_attempts: 3,
            config: GenerationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Rejection {
    pub case_id: String,
    pub check: FilterCheck,
    pub evidence: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Indeterminate {
    pub case_id: String,
    pub message: String,
}

#[derive(Debug)]
pub struct FilterOutcome {
    pub kept: Vec<EditCase>,
    pub rejected: Vec<Rejection>,
    /// Cases whose backend verdicts failed after retries; quarantined
    /// rather than guessed either way.
    pub indeterminate: Vec<Indeterminate>,
}

/// Runs the enabled knowledge checks against a backend and partitions cases.
pub fn filter_known_and_solvable(
    cases: &[EditCase],
    corpus: &FactCorpus,
    client: &GenClient,
    policy: &FilterPolicy,
) -> Result<FilterOutcome> {
    let mut outcome = FilterOutcome {
        kept: Vec::new(),
        rejected: Vec::new(),
        indeterminate: Vec::new(),
    };
    'case_loop: for case in cases {
        corpus.resolve_all(case.edited_facts.iter())?;
        if policy.check_already_known {
            for fact_id in &case.edited_facts {
                let fact = corpus.get(fact_id).expect("resolved above");
                match probe_already_known(client, policy, fact) {
                    Ok(Some(answer)) => {
                        outcome.rejected.push(Rejection {
                            case_id: case.case_id.clone(),
                            check: FilterCheck::AlreadyKnown,
                            evidence: format!("backend answered {answer:?} for {:?}", fact.direct_question()),
                        });
                        continue 'case_loop;
                    }
                    Ok(None) => {}
                    Err(e) => {
                        outcome.indeterminate.push(Indeterminate {
                            case_id: case.case_id.clone(),
                            message: e.to_string(),
                        });
                        continue 'case_loop;
                    }
                }
            }
        }
        if policy.check_prior_hops {
            for hop in &case.unedited_hops {
                match ask_once(client, &policy.config, &hop.question) {
                    Ok(answer) if match_answer(&answer, &hop.answer) => {}
                    Ok(answer) => {
                        outcome.rejected.push(Rejection {
                            case_id: case.case_id.clone(),
                            check: FilterCheck::PriorHopUnanswerable,
                            evidence: format!("{:?} answered {answer:?}, expected {:?}", hop.question, hop.answer),
                        });
                        continue 'case_loop;
                    }
                    Err(e) => {
                        outcome.indeterminate.push(Indeterminate {
                            case_id: case.case_id.clone(),
                            message: e.to_string(),
                        });
                        continue 'case_loop;
                    }
                }
            }
        }
        if policy.check_pre_edit_solvable {
            for q in &case.test_questions {
                let Some(pre_edit) = &q.pre_edit_answer else { continue };
                match ask_once(client, &policy.config, &q.question) {
                    Ok(answer) if match_answer(&answer, pre_edit) => {}
                    Ok(answer) => {
                        outcome.rejected.push(Rejection {
                            case_id: case.case_id.clone(),
                            check: FilterCheck::PreEditUnsolvable,
                            evidence: format!("{:?} answered {answer:?}, expected {pre_edit:?}", q.question),
                        });
                        continue 'case_loop;
                    }
                    Err(e) => {
                        outcome.indeterminate.push(Indeterminate {
                            case_id: case.case_id.clone(),
                            message: e.to_string(),
                        });
                        continue 'case_loop;
                    }
                }
            }
        }
        outcome.kept.push(case.clone());
    }
    Ok(outcome)
}

/// Some(answer) when the backend already knows the edited fact.
fn probe_already_known(
    client: &GenClient,
    policy: &FilterPolicy,
    fact: &EditFact,
) -> Result<Option<String>> {
    let question = fact.direct_question();
    for attempt in 0..policy.known_probe_attempts {
        let mut config = policy.config.clone();
        config.n_samples = 1;
        let request = ChatRequest::new(
            vec![ChatMessage::user(question.clone())],
            config,
            Some(format!("known-probe-{attempt}")),
        )?;
        let texts = client.generate(&request)?;
        let answer = texts.into_iter().next().unwrap_or_default();
        if match_answer(&answer, &fact.new_object) {
            return Ok(Some(answer));
        }
    }
    Ok(None)
}

fn ask_once(client: &GenClient, config: &GenerationConfig, question: &str) -> Result<String> {
    let mut config = config.clone();
    config.n_samples = 1;
    let request = ChatRequest::new(vec![ChatMessage::user(question.to_string())], config, None)?;
    let texts = client.generate(&request)?;
    Ok(texts.into_iter().next().unwrap_or_default())
}

/// Removes cases touching blocked relations or blocklisted case ids.
pub fn filter_implausible(
    cases: &[EditCase],
    corpus: &FactCorpus,
    blocked_relations: &BTreeSet<String>,
    manual_blocklist: &BTreeSet<String>,
) -> Vec<EditCase> {
    cases
        .iter()
        .filter(|case| {
            if manual_blocklist.contains(&case.case_id) {
                return false;
            }
            !case.edited_facts.iter().any(|fid| {
                corpus
                    .get(fid)
                    .map(|f| blocked_relations.contains(&f.relation_id))
                    .unwrap_or(false)
            })
        })
        .cloned()
        .collect()
}

/// Relations the production filter blocks by default: continent membership
/// (P30) and capital-of (P36) edits routinely violate spatial logic.
pub fn default_blocked_relations() -> BTreeSet<String> {
    ["P30", "P36"].into_iter().map(String::from).collect()
}

/// Replaces the fact's target with a fictional individual, recording lineage.
pub fn substitute_fictional(fact: &EditFact, replacement_name: &str) -> Result<EditFact> {
    if replacement_name.trim().is_empty() {
        return Err(Error::InvalidArgument("replacement name must be nonempty".into()));
    }
    if replacement_name == fact.old_object {
        return Err(Error::InvalidArgument(format!(
            "replacement {replacement_name:?} equals the fact's old_object; new_object must differ"
        )));
    }
    let mut out = fact.clone();
    out.displaced_object = Some(fact.new_object.clone());
    out.new_object = replacement_name.to_string();
    out.fictional_target = true;
    out.validate()?;
    Ok(out)
}

/// A manually authored multi-edit question (Port.-Hard material).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortHardSpec {
    pub question: String,
    pub answer: String,
    pub required_fact_ids: Vec<String>,
}

/// Generated inputs consumed by suite construction.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SuiteInputs {
    /// fact_id -> paraphrased direct questions (Fact Acc.-Hard material).
    pub paraphrases: BTreeMap<String, Vec<String>>,
    /// Neighbor-knowledge (question, answer) pairs independent of the edits.
    pub locality_qas: Vec<HopQa>,
    pub port_hard_qas: Vec<PortHardSpec>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSuite {
    pub records: Vec<QARecord>,
    pub counts: BTreeMap<QACategory, usize>,
    /// port_hard inputs that referenced unknown facts, excluded with reasons.
    pub rejections: Vec<String>,
}

impl EvalSuite {
    pub fn by_category(&self, category: QACategory) -> impl Iterator<Item = &QARecord> {
        self.records.iter().filter(move |r| r.category == category)
    }
}

/// Materializes the per-metric evaluation suite. Every emitted record
/// satisfies the QARecord invariants and resolves against the corpus;
/// category counts always sum to the suite length.
pub fn build_eval_suite(
    cases: &[EditCase],
    corpus: &FactCorpus,
    inputs: &SuiteInputs,
) -> Result<EvalSuite> {
    let mut records: Vec<QARecord> = Vec::new();
    let mut rejections = Vec::new();

    let mut edited_ids: BTreeSet<&String> = BTreeSet::new();
    for case in cases {
        edited_ids.extend(case.edited_facts.iter());
    }

    if !inputs.paraphrases.is_empty() {
        for id in &edited_ids {
            let have = inputs.paraphrases.get(*id).map(|v| v.len()).unwrap_or(0);
            if have == 0 {
                return Err(Error::InvalidArgument(format!(
                    "fact {id} has no paraphrases but fact_hard records were requested"
                )));
            }
        }
    }

    for id in &edited_ids {
        let fact = corpus
            .get(id)
            .ok_or_else(|| Error::Invariant(format!("edited fact {id} does not resolve in corpus")))?;
        records.push(QARecord {
            qid: format!("{id}::fact_easy"),
            question: fact.direct_question(),
            gold_answer: Some(fact.new_object.clone()),
            category: QACategory::FactEasy,
            required_fact_ids: vec![(*id).clone()],
            hop_count: 1,
            pre_edit_answer: Some(fact.old_object.clone()),
        });
        if let Some(paras) = inputs.paraphrases.get(*id) {
            for (i, question) in paras.iter().enumerate() {
                records.push(QARecord {
                    qid: format!("{id}::fact_hard::{i}"),
                    question: question.clone(),
                    gold_answer: Some(fact.new_object.clone()),
                    category: QACategory::FactHard,
                    required_fact_ids: vec![(*id).clone()],
                    hop_count: 1,
                    pre_edit_answer: Some(fact.old_object.clone()),
                });
            }
        }
    }

    // Locality: generated neighbor questions plus every unedited single-hop
    // from the cases, de-duplicated by question text.
    let mut seen_loc: BTreeSet<String> = BTreeSet::new();
    let mut loc_index = 0usize;
    let case_hops = cases.iter().flat_map(|c| c.unedited_hops.iter());
    for hop in inputs.locality_qas.iter().chain(case_hops) {
        if !seen_loc.insert(hop.question.clone()) {
            continue;
        }
        records.push(QARecord {
            qid: format!("loc::{loc_index}"),
            question: hop.question.clone(),
            gold_answer: Some(hop.answer.clone()),
            category: QACategory::Locality,
            required_fact_ids: Vec::new(),
            hop_count: 1,
            pre_edit_answer: Some(hop.answer.clone()),
        });
        loc_index += 1;
    }

    for case in cases {
        for q in &case.test_questions {
            corpus.resolve_all(q.required_fact_ids.iter())?;
            let mut rec = q.clone();
            rec.category = QACategory::PortEasy;
            rec.validate()?;
            records.push(rec);
        }
    }

    for (i, spec) in inputs.port_hard_qas.iter().enumerate() {
        if let Err(e) = corpus.resolve_all(spec.required_fact_ids.iter()) {
            rejections.push(format!("port_hard {i} ({:?}): {e}", spec.question));
            continue;
        }
        let rec = QARecord {
            qid: format!("port_hard::{i}"),
            question: spec.question.clone(),
            gold_answer: Some(spec.answer.clone()),
            category: QACategory::PortHard,
            required_fact_ids: spec.required_fact_ids.clone(),
            hop_count: spec.required_fact_ids.len() as u32,
            pre_edit_answer: None,
        };
        match rec.validate() {
            Ok(()) => records.push(rec),
            Err(e) => rejections.push(format!("port_hard {i}: {e}")),
        }
    }

    let mut counts: BTreeMap<QACategory, usize> = BTreeMap::new();
    for rec in &records {
        rec.validate()?;
        *counts.entry(rec.category).or_default() += 1;
    }
    Ok(EvalSuite {
        records,
        counts,
        rejections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genclient::testing::ScriptedText;

    fn fact(id: &str, subject: &str, new: &str) -> EditFact {
        EditFact {
            fact_id: id.into(),
            subject: subject.into(),
            relation_id: "P6".into(),
            question_template: "Who is the head of government of {subject}?".into(),
            old_object: "Old Person".into(),
            new_object: new.into(),
            fictional_target: false,
            dataset_kind: DatasetKind::Story,
            displaced_object: None,
            extra: BTreeMap::new(),
        }
    }

    fn case_for(fact: &EditFact, case_id: &str) -> EditCase {
        EditCase {
            case_id: case_id.into(),
            edited_facts: vec![fact.fact_id.clone()],
            test_questions: vec![QARecord {
                qid: format!("{case_id}::q0"),
                question: format!("Who leads the country where {} lives?", fact.subject),
                gold_answer: Some(fact.new_object.clone()),
                category: QACategory::PortEasy,
                required_fact_ids: vec![fact.fact_id.clone()],
                hop_count: 2,
                pre_edit_answer: Some(fact.old_object.clone()),
            }],
            unedited_hops: vec![HopQa {
                question: format!("Where does {} live?", fact.subject),
                answer: fact.subject.clone(),
            }],
            extra: BTreeMap::new(),
        }
    }

    fn write_jsonl(lines: &[String]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    #[test]
    fn loads_382_cases_over_38_facts() {
        let mut lines = Vec::new();
        for i in 0..382 {
            let f = fact(&format!("f{}", i % 38), &format!("Country {}", i % 38), "New Person");
            let c = case_for(&f, &format!("case{i}"));
            let mut v = serde_json::to_value(&c).unwrap();
            v["edits"] = serde_json::json!([f]);
            lines.push(serde_json::to_string(&v).unwrap());
        }
        let file = write_jsonl(&lines);
        let load = load_benchmark(file.path(), DatasetKind::Story).unwrap();
        assert_eq!(load.cases.len(), 382);
        assert_eq!(load.corpus.len(), 38);
        assert!(load.record_errors.is_empty());
    }

    #[test]
    fn empty_file_is_empty_load() {
        let file = write_jsonl(&[]);
        let load = load_benchmark(file.path(), DatasetKind::Cf).unwrap();
        assert!(load.cases.is_empty());
        assert!(load.record_errors.is_empty());
    }

    #[test]
    fn record_missing_new_object_reported_with_index() {
        let f = fact("f0", "Japan", "Kenji Sato");
        let c = case_for(&f, "bad-case");
        let mut v = serde_json::to_value(&c).unwrap();
        let mut fv = serde_json::to_value(&f).unwrap();
        fv.as_object_mut().unwrap().remove("new_object");
        v["edits"] = serde_json::json!([fv]);
        let file = write_jsonl(&[serde_json::to_string(&v).unwrap()]);
        let load = load_benchmark(file.path(), DatasetKind::Story).unwrap();
        assert_eq!(load.cases.len(), 0);
        assert_eq!(load.record_errors.len(), 1);
        assert_eq!(load.record_errors[0].index, 0);
        assert_eq!(load.record_errors[0].record_name.as_deref(), Some("bad-case"));
        assert!(load.record_errors[0].message.contains("new_object"));
    }

    #[test]
    fn unreadable_file_is_fatal() {
        let err = load_benchmark(Path::new("/nonexistent/benchmark.jsonl"), DatasetKind::Story);
        assert!(err.is_err());
    }

    #[test]
    fn already_known_fact_rejected() {
        let f = fact("f0", "the United Kingdom", "Eleanor Sterling");
        let mut corpus = FactCorpus::new();
        corpus.insert(f.clone()).unwrap();
        let case = case_for(&f, "c0");
        // Backend that already knows the edit: answers the probe with the new object.
        let client = GenClient::in_memory(Box::new(ScriptedText::fixed("Eleanor Sterling")));
        let policy = FilterPolicy {
            check_prior_hops: false,
            check_pre_edit_solvable: false,
            ..FilterPolicy::default()
        };
        let outcome = filter_known_and_solvable(&[case], &corpus, &client, &policy).unwrap();
        assert!(outcome.kept.is_empty());
        assert_eq!(outcome.rejected.len(), 1);
        assert_eq!(outcome.rejected[0].check, FilterCheck::AlreadyKnown);
    }

    #[test]
    fn unanswering_backend_rejects_all_as_prior_hop_unanswerable() {
        let f = fact("f0", "Japan", "Kenji Sato");
        let mut corpus = FactCorpus::new();
        corpus.insert(f.clone()).unwrap();
        let cases = vec![case_for(&f, "c0"), case_for(&f, "c1")];
        let client = GenClient::in_memory(Box::new(ScriptedText::fixed("I do not know")));
        let policy = FilterPolicy {
            check_already_known: false,
            check_pre_edit_solvable: false,
            ..FilterPolicy::default()
        };
        let outcome = filter_known_and_solvable(&cases, &corpus, &client, &policy).unwrap();
        assert!(outcome.kept.is_empty());
        assert_eq!(outcome.rejected.len(), 2);
        assert!(outcome
            .rejected
            .iter()
            .all(|r| r.check == FilterCheck::PriorHopUnanswerable));
    }

    #[test]
    fn backend_failure_quarantines_case() {
        let f = fact("f0", "Japan", "Kenji Sato");
        let mut corpus = FactCorpus::new();
        corpus.insert(f.clone()).unwrap();
        let client = GenClient::in_memory(Box::new(ScriptedText::failing()));
        let outcome =
            filter_known_and_solvable(&[case_for(&f, "c0")], &corpus, &client, &FilterPolicy::default())
                .unwrap();
        assert!(outcome.kept.is_empty());
        assert!(outcome.rejected.is_empty());
        assert_eq!(outcome.indeterminate.len(), 1);
    }

    #[test]
    fn implausible_relations_removed() {
        let mut corpus = FactCorpus::new();
        let mut cases = Vec::new();
        for (i, rel) in ["P30", "P36", "P6", "P30", "P17"].iter().enumerate() {
            let mut f = fact(&format!("f{i}"), &format!("S{i}"), "X");
            f.relation_id = rel.to_string();
            corpus.insert(f.clone()).unwrap();
            cases.push(case_for(&f, &format!("c{i}")));
        }
        let kept = filter_implausible(&cases, &corpus, &default_blocked_relations(), &BTreeSet::new());
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|c| c.case_id == "c2" || c.case_id == "c4"));
    }

    #[test]
    fn empty_blocklists_are_identity() {
        let f = fact("f0", "Japan", "Kenji Sato");
        let mut corpus = FactCorpus::new();
        corpus.insert(f.clone()).unwrap();
        let cases = vec![case_for(&f, "c0")];
        let kept = filter_implausible(&cases, &corpus, &BTreeSet::new(), &BTreeSet::new());
        assert_eq!(kept, cases);
    }

    #[test]
    fn filtering_is_idempotent() {
        let mut corpus = FactCorpus::new();
        let mut cases = Vec::new();
        for (i, rel) in ["P30", "P6", "P17"].iter().enumerate() {
            let mut f = fact(&format!("f{i}"), &format!("S{i}"), "X");
            f.relation_id = rel.to_string();
            corpus.insert(f.clone()).unwrap();
            cases.push(case_for(&f, &format!("c{i}")));
        }
        let blocked = default_blocked_relations();
        let kept = filter_implausible(&cases, &corpus, &blocked, &BTreeSet::new());
        assert!(kept.len() < cases.len());
        let again = filter_implausible(&kept, &corpus, &blocked, &BTreeSet::new());
        assert_eq!(kept, again);
    }

    #[test]
    fn fictional_substitution() {
        let mut f = fact("f0", "South Korea", "Yoon Suk-yeol");
        f.question_template = "Who is the current head of state of {subject}?".into();
        f.old_object = "Moon Jae-in".into();
        let out = substitute_fictional(&f, "Min-jun Choi").unwrap();
        assert_eq!(out.new_object, "Min-jun Choi");
        assert!(out.fictional_target);
        assert_eq!(out.fact_id, f.fact_id);
        assert_eq!(out.displaced_object.as_deref(), Some("Yoon Suk-yeol"));
    }

    #[test]
    fn fictional_substitution_rejects_bad_names() {
        let f = fact("f0", "South Korea", "Yoon Suk-yeol");
        assert!(substitute_fictional(&f, "").is_err());
        assert!(substitute_fictional(&f, &f.old_object).is_err());
    }

    #[test]
    fn suite_paraphrase_arithmetic() {
        let mut corpus = FactCorpus::new();
        let mut cases = Vec::new();
        let mut inputs = SuiteInputs::default();
        for i in 0..38 {
            let f = fact(&format!("f{i}"), &format!("Country {i}"), "New Person");
            corpus.insert(f.clone()).unwrap();
            cases.push(case_for(&f, &format!("c{i}")));
            inputs.paraphrases.insert(
                f.fact_id.clone(),
                (0..3).map(|j| format!("Paraphrase {j} about {}?", f.subject)).collect(),
            );
        }
        let suite = build_eval_suite(&cases, &corpus, &inputs).unwrap();
        assert_eq!(suite.counts[&QACategory::FactHard], 114);
        assert_eq!(suite.counts[&QACategory::FactEasy], 38);
        assert_eq!(suite.counts.values().sum::<usize>(), suite.records.len());
    }

    #[test]
    fn minimal_suite_is_fact_easy_only() {
        let f = fact("f0", "Japan", "Kenji Sato");
        let mut corpus = FactCorpus::new();
        corpus.insert(f.clone()).unwrap();
        // A bare case carrying only the edit: no generated inputs anywhere.
        let case = EditCase {
            case_id: "c0".into(),
            edited_facts: vec!["f0".into()],
            test_questions: Vec::new(),
            unedited_hops: Vec::new(),
            extra: BTreeMap::new(),
        };
        let suite = build_eval_suite(&[case], &corpus, &SuiteInputs::default()).unwrap();
        assert_eq!(suite.records.len(), 1);
        assert_eq!(suite.records[0].category, QACategory::FactEasy);
    }

    #[test]
    fn port_hard_unknown_fact_rejected() {
        let f = fact("f0", "Japan", "Kenji Sato");
        let mut corpus = FactCorpus::new();
        corpus.insert(f.clone()).unwrap();
        let inputs = SuiteInputs {
            port_hard_qas: vec![PortHardSpec {
                question: "Composite question?".into(),
                answer: "Answer".into(),
                required_fact_ids: vec!["f0".into(), "missing".into()],
            }],
            ..SuiteInputs::default()
        };
        let suite = build_eval_suite(&[case_for(&f, "c0")], &corpus, &inputs).unwrap();
        assert_eq!(suite.rejections.len(), 1);
        assert!(suite.counts.get(&QACategory::PortHard).is_none());
    }

    #[test]
    fn suite_records_resolve_required_facts() {
        let f = fact("f0", "Japan", "Kenji Sato");
        let g = fact("f1", "Chile", "Sofia Carrasco");
        let mut corpus = FactCorpus::new();
        corpus.insert(f.clone()).unwrap();
        corpus.insert(g.clone()).unwrap();
        let inputs = SuiteInputs {
            locality_qas: vec![HopQa {
                question: "What river flows through London?".into(),
                answer: "The Thames".into(),
            }],
            port_hard_qas: vec![PortHardSpec {
                question: "Do the leaders of Japan and Chile share a surname?".into(),
                answer: "No".into(),
                required_fact_ids: vec!["f0".into(), "f1".into()],
            }],
            ..SuiteInputs::default()
        };
        let suite =
            build_eval_suite(&[case_for(&f, "c0"), case_for(&g, "c1")], &corpus, &inputs).unwrap();
        for rec in &suite.records {
            corpus.resolve_all(rec.required_fact_ids.iter()).unwrap();
        }
        assert_eq!(suite.counts[&QACategory::PortHard], 1);
        assert_eq!(suite.counts[&QACategory::Locality], 3);
    }
}
