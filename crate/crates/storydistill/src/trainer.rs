//! Context-distillation training: the token-wise forward-KL objective over
//! target tokens, the cross-entropy baseline, the mixed conservative-sample
//! objective, and a deterministic AdamW loop over a pluggable backend.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::records::{
    apply_context_dropout, tokenize_aligned, AlignedBatch, HardTargetRecord, SegmentedExample,
    Tokenizer,
};

/// Per-position log-probability rows over the vocabulary.
pub type LogProbRows = Vec<Vec<f64>>;

/// Trainable adapter parameters; the base model θ is never touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub rank: u32,
    /// Attach-scope descriptor, e.g. "all linear layers".
    pub scope: String,
    pub params: Vec<f64>,
}

impl AdapterState {
    pub fn zeros(rank: u32, scope: impl Into<String>, len: usize) -> Self {
        Self { rank, scope: scope.into(), params: vec![0.0; len] }
    }
}

/// A model θ exposing a frozen teacher path and an adapter-bearing student
/// path, plus the gradient of a scalar loss through the student's logits.
pub trait ModelBackend: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn tokenizer(&self) -> &dyn Tokenizer;
    fn adapter_len(&self) -> usize;

    fn init_adapter(&self, rank: u32) -> AdapterState {
        AdapterState::zeros(rank, "all belief cells", self.adapter_len())
    }

    /// Frozen evaluation: deterministic given tokens, unaffected by any
    /// adapter state.
    fn teacher_logprobs(&self, tokens: &[u32]) -> Result<LogProbRows>;

    /// Adapter-bearing evaluation.
    fn student_logprobs(&self, adapter: &AdapterState, tokens: &[u32]) -> Result<LogProbRows>;

    /// Gradient of the loss w.r.t. adapter params, given dLoss/dlogits rows
    /// at the listed positions of `tokens`.
    fn adapter_grad(
        &self,
        adapter: &AdapterState,
        tokens: &[u32],
        positions: &[usize],
        dlogits: &[Vec<f64>],
    ) -> Result<Vec<f64>>;
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_sum).collect()
}

/// Optional top-K teacher truncation with renormalization; identity when
/// `top_k` is None. Default off.
pub fn truncate_teacher_row(row: &[f64], top_k: Option<usize>) -> Vec<f64> {
    let Some(k) = top_k else { return row.to_vec() };
    if k >= row.len() {
        return row.to_vec();
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    let kept = &order[..k];
    let log_mass = {
        let max = kept.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
        kept.iter().map(|&i| (row[i] - max).exp()).sum::<f64>().ln() + max
    };
    let mut out = vec![f64::NEG_INFINITY; row.len()];
    for &i in kept {
        out[i] = row[i] - log_mass;
    }
    out
}

/// Forward KL between teacher and student distributions, averaged over the
/// batch's paired target positions. Rows at non-target positions never enter
/// the sum, so perturbing them leaves the loss bit-identical.
pub fn kl_distill_loss(
    teacher_logprobs: &LogProbRows,
    student_logprobs: &LogProbRows,
    batch: &AlignedBatch,
) -> Result<f64> {
    if batch.teacher_target_positions.len() != batch.student_target_positions.len() {
        return Err(Error::Invariant(format!(
            "{}: mismatched target-position counts",
            batch.example_id
        )));
    }
    if teacher_logprobs.len() != batch.teacher_tokens.len()
        || student_logprobs.len() != batch.student_tokens.len()
    {
        return Err(Error::Invariant(format!(
            "{}: log-prob rows must cover all positions of their sequences",
            batch.example_id
        )));
    }
    if batch.teacher_target_positions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&tp, &sp) in batch
        .teacher_target_positions
        .iter()
        .zip(&batch.student_target_positions)
    {
        let t_row = &teacher_logprobs[tp];
        let s_row = &student_logprobs[sp];
        if t_row.len() != s_row.len() {
            return Err(Error::Invariant(format!(
                "{}: vocabulary sizes differ between teacher and student rows",
                batch.example_id
            )));
        }
        let mut kl = 0.0;
        for (tl, sl) in t_row.iter().zip(s_row) {
            if tl.is_finite() {
                kl += tl.exp() * (tl - sl);
            }
        }
        total += kl;
    }
    Ok(total / batch.teacher_target_positions.len() as f64)
}

/// Mean negative log-probability of the hard target ids at `positions`.
pub fn ce_loss(student_logprobs: &LogProbRows, hard_targets: &[u32], positions: &[usize]) -> Result<f64> {
    if hard_targets.len() != positions.len() {
        return Err(Error::Invariant("one hard target per position required".into()));
    }
    if positions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&target, &pos) in hard_targets.iter().zip(positions) {
        let row = student_logprobs
            .get(pos)
            .ok_or_else(|| Error::Invariant(format!("position {pos} out of range")))?;
        let lp = row.get(target as usize).ok_or_else(|| {
            Error::InvalidArgument(format!("target id {target} out of vocabulary ({})", row.len()))
        })?;
        total -= lp;
    }
    Ok(total / positions.len() as f64)
}

/// dLoss/dlogits rows for the KL objective: (softmax(student) - teacher) / N.
pub fn kl_dlogits(
    teacher_rows_at_targets: &[&[f64]],
    student_rows_at_targets: &[&[f64]],
) -> Vec<Vec<f64>> {
    let n = teacher_rows_at_targets.len().max(1) as f64;
    teacher_rows_at_targets
        .iter()
        .zip(student_rows_at_targets)
        .map(|(t_row, s_row)| {
            t_row
                .iter()
                .zip(s_row.iter())
                .map(|(tl, sl)| {
                    let pt = if tl.is_finite() { tl.exp() } else { 0.0 };
                    (sl.exp() - pt) / n
                })
                .collect()
        })
        .collect()
}

/// dLoss/dlogits rows for cross-entropy: (softmax(student) - onehot) / N.
pub fn ce_dlogits(student_rows_at_targets: &[&[f64]], hard_targets: &[u32]) -> Vec<Vec<f64>> {
    let n = student_rows_at_targets.len().max(1) as f64;
    student_rows_at_targets
        .iter()
        .zip(hard_targets)
        .map(|(s_row, &target)| {
            s_row
                .iter()
                .enumerate()
                .map(|(v, sl)| {
                    let one = if v == target as usize { 1.0 } else { 0.0 };
                    (sl.exp() - one) / n
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Distill,
    Sft,
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dropout_rate: f64,
    pub max_lr: f64,
    pub warmup_steps: u32,
    pub epochs: u32,
    /// 0 for pure distillation; 0.3 for the mixed conservative objective.
    pub ce_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Per-example dropout is resampled each epoch by default; set to pin
    /// the outcome decided at the first epoch.
    pub dropout_fixed: bool,
    /// Optional top-K teacher truncation with renormalization.
    pub teacher_top_k: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.9,
            max_lr: 1e-4,
            warmup_steps: 30,
            epochs: 10,
            ce_weight: 0.0,
            batch_size: 8,
            seed: 0,
            weight_decay: 0.01,
            dropout_fixed: false,
            teacher_top_k: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1]".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }
}

#[derive(Debug, Clone)]
pub enum TrainRecord {
    Distill(SegmentedExample),
    HardTarget(HardTargetRecord),
}

impl TrainRecord {
    pub fn id(&self) -> &str {
        match self {
            TrainRecord::Distill(e) => &e.example_id,
            TrainRecord::HardTarget(r) => &r.record_id,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<TrainRecord>,
    pub valid: Vec<TrainRecord>,
    /// Conservative samples for the mixed objective.
    pub conservative: Vec<HardTargetRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: u32,
    pub split: String,
    pub distill_loss: f64,
    /// Weighted conservative CE component (already scaled by ce_weight).
    pub ce_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub adapter: AdapterState,
    pub trace: Vec<TraceRow>,
    pub best_epoch: u32,
    pub best_valid_loss: f64,
}

/// Stable seed derivation for per-(epoch, example) dropout streams.
pub fn derive_seed(base: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(a.to_le_bytes());
    hasher.update(b.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

struct AdamW {
    lr_max: f64,
    warmup_steps: u32,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    fn new(config: &TrainConfig, len: usize) -> Self {
        Self {
            lr_max: config.max_lr,
            warmup_steps: config.warmup_steps,
            weight_decay: config.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Linear warmup to max_lr, then constant; decoupled weight decay.
    fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (self.step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let lr = self.lr_max * warm;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// One distill record's contribution: loss and dlogits handed to the model.
fn distill_example_loss(
    model: &dyn ModelBackend,
    adapter: &AdapterState,
    example: &SegmentedExample,
    dropout_seed: u64,
    config: &TrainConfig,
    grads: Option<&mut Vec<f64>>,
) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(dropout_seed);
    let (student_view, _) = apply_context_dropout(example, config.dropout_rate, &mut rng)?;
    let batch = tokenize_aligned(example, &student_view, model.tokenizer())?;

    let teacher_rows_full = model.teacher_logprobs(&batch.teacher_tokens)?;
    let student_rows_full = model.student_logprobs(adapter, &batch.student_tokens)?;

    let teacher_rows_full: LogProbRows = if config.teacher_top_k.is_some() {
        teacher_rows_full
            .iter()
            .map(|row| truncate_teacher_row(row, config.teacher_top_k))
            .collect()
    } else {
        teacher_rows_full
    };

    let loss = kl_distill_loss(&teacher_rows_full, &student_rows_full, &batch)?;
    if let Some(grads) = grads {
        let t_at: Vec<&[f64]> = batch
            .teacher_target_positions
            .iter()
            .map(|&p| teacher_rows_full[p].as_slice())
            .collect();
        let s_at: Vec<&[f64]> = batch
            .student_target_positions
            .iter()
            .map(|&p| student_rows_full[p].as_slice())
            .collect();
        let dlogits = kl_dlogits(&t_at, &s_at);
        let g = model.adapter_grad(
            adapter,
            &batch.student_tokens,
            &batch.student_target_positions,
            &dlogits,
        )?;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    Ok(loss)
}

/// One hard-target record's contribution (cross-entropy on the target ids).
fn hard_target_loss(
    model: &dyn ModelBackend,
    adapter: &AdapterState,
    record: &HardTargetRecord,
    grads: Option<&mut Vec<f64>>,
    scale: f64,
) -> Result<f64> {
    let tokenizer = model.tokenizer();
    let prompt_ids = tokenizer.encode(&record.prompt);
    let target_ids = tokenizer.encode(&record.target);
    if target_ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "record {} has an empty tokenized target",
            record.record_id
        )));
    }
    let mut tokens = prompt_ids.clone();
    tokens.extend(&target_ids);
    let positions: Vec<usize> = (prompt_ids.len()..tokens.len()).collect();
    let student_rows = model.student_logprobs(adapter, &tokens)?;
    let loss = ce_loss(&student_rows, &target_ids, &positions)?;
    if let Some(grads) = grads {
        let s_at: Vec<&[f64]> = positions.iter().map(|&p| student_rows[p].as_slice()).collect();
        let mut dlogits = ce_dlogits(&s_at, &target_ids);
        if scale != 1.0 {
            for row in &mut dlogits {
                for g in row.iter_mut() {
                    *g *= scale;
                }
            }
        }
        let g = model.adapter_grad(adapter, &tokens, &positions, &dlogits)?;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    Ok(loss)
}

fn check_records(objective: Objective, data: &TrainData) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let all_distill = data
        .train
        .iter()
        .chain(data.valid.iter())
        .all(|r| matches!(r, TrainRecord::Distill(_)));
    let all_hard = data
        .train
        .iter()
        .chain(data.valid.iter())
        .all(|r| matches!(r, TrainRecord::HardTarget(_)));
    match objective {
        Objective::Distill | Objective::Mixed if !all_distill => Err(Error::InvalidArgument(
            "distill/mixed objectives train on segmented records only".into(),
        )),
        Objective::Mixed if data.conservative.is_empty() => Err(Error::InvalidArgument(
            "mixed objective requires conservative records".into(),
        )),
        Objective::Sft if !all_hard => Err(Error::InvalidArgument(
            "sft objective trains on hard-target records only".into(),
        )),
        _ => Ok(()),
    }
}

/// Trains the adapter. The optimizer is AdamW with linear warmup; dropout is
/// resampled per example per epoch from a seeded stream; validation loss is
/// computed each epoch; the best-validation adapter is returned.
pub fn train(
    data: &TrainData,
    model: &dyn ModelBackend,
    adapter: &AdapterState,
    config: &TrainConfig,
    objective: Objective,
) -> Result<TrainOutput> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    config.validate()?;
    check_records(objective, data)?;
    if adapter.params.len() != model.adapter_len() {
        return Err(Error::InvalidArgument(format!(
            "adapter has {} params, backend expects {}",
            adapter.params.len(),
            model.adapter_len()
        )));
    }

    let mut current = adapter.clone();
    let mut best = current.clone();
    let mut best_valid = f64::INFINITY;
    let mut best_epoch = 0u32;
    let mut optimizer = AdamW::new(config, current.params.len());
    let mut trace = Vec::new();
    let mut step: u64 = 0;
    let use_conservative = objective == Objective::Mixed && config.ce_weight != 0.0;
    let mut conservative_cursor = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut order_rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "order", epoch as u64, 0));
        order.shuffle(&mut order_rng);

        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let mut grads = vec![0.0; current.params.len()];
            let mut distill_sum = 0.0;
            let mut example_ids = Vec::new();
            for &idx in chunk {
                let record = &data.train[idx];
                example_ids.push(record.id().to_string());
                let loss = match record {
                    TrainRecord::Distill(example) => {
                        let dropout_epoch = if config.dropout_fixed { 0 } else { epoch as u64 };
                        let seed = derive_seed(config.seed, "dropout", dropout_epoch, idx as u64);
                        distill_example_loss(model, &current, example, seed, config, Some(&mut grads))?
                    }
                    TrainRecord::HardTarget(record) => {
                        hard_target_loss(model, &current, record, Some(&mut grads), 1.0)?
                    }
                };
                distill_sum += loss;
            }
            let batch_n = chunk.len() as f64;
            let distill_loss = distill_sum / batch_n;
            for g in grads.iter_mut() {
                *g /= batch_n;
            }

            let mut ce_weighted = 0.0;
            if use_conservative {
                let mut ce_sum = 0.0;
                let take = config.batch_size.min(data.conservative.len());
                let mut ce_grads = vec![0.0; current.params.len()];
                for _ in 0..take {
                    let record = &data.conservative[conservative_cursor % data.conservative.len()];
                    conservative_cursor += 1;
                    ce_sum += hard_target_loss(model, &current, record, Some(&mut ce_grads), 1.0)?;
                }
                let ce_mean = ce_sum / take as f64;
                ce_weighted = config.ce_weight * ce_mean;
                for (acc, g) in grads.iter_mut().zip(ce_grads) {
                    *acc += config.ce_weight * g / take as f64;
                }
            }

            let total = distill_loss + ce_weighted;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { step, examples: example_ids });
            }
            trace.push(TraceRow {
                step,
                epoch,
                split: "train".into(),
                distill_loss,
                ce_loss: ce_weighted,
                total_loss: total,
            });
            optimizer.apply(&mut current.params, &grads);
        }

        // Validation on the held-out split (falls back to the training split
        // when no validation records were provided).
        let valid_records: &[TrainRecord] =
            if data.valid.is_empty() { &data.train } else { &data.valid };
        let mut valid_sum = 0.0;
        for (idx, record) in valid_records.iter().enumerate() {
            let loss = match record {
                TrainRecord::Distill(example) => {
                    let seed = derive_seed(config.seed, "valid-dropout", idx as u64, 0);
                    distill_example_loss(model, &current, example, seed, config, None)?
                }
                TrainRecord::HardTarget(record) => {
                    hard_target_loss(model, &current, record, None, 1.0)?
                }
            };
            valid_sum += loss;
        }
        let valid_loss = valid_sum / valid_records.len() as f64;
        trace.push(TraceRow {
            step,
            epoch,
            split: "valid".into(),
            distill_loss: valid_loss,
            ce_loss: 0.0,
            total_loss: valid_loss,
        });
        if valid_loss < best_valid {
            best_valid = valid_loss;
            best = current.clone();
            best_epoch = epoch;
        }
    }

    Ok(TrainOutput { adapter: best, trace, best_epoch, best_valid_loss: best_valid })
}

/// Writes a loss trace as CSV: step, epoch, split, objective components.
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,epoch,split,distill_loss,ce_loss,total_loss\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{:.10},{:.10},{:.10}\n",
            row.step, row.epoch, row.split, row.distill_loss, row.ce_loss, row.total_loss
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// TabularLM: closed-form verification vehicle
// ---------------------------------------------------------------------------

/// A tiny "language model" whose student path is a free logit table per
/// (example, target position). The KL optimum is exactly the teacher
/// distribution, which makes convergence and gradients checkable in closed
/// form.
pub struct TabularLM {
    vocab: usize,
    positions_per_example: usize,
    /// Per example: fixed teacher log-prob rows at its target positions.
    teacher_rows: Vec<Vec<Vec<f64>>>,
    tokenizer: TabTokenizer,
}

/// Tokenizer for TabularLM record texts: words of the form `t<k>` map to id
/// k; the marker `ex<i>` maps to vocab + i; anything else maps to a shared
/// filler id.
pub struct TabTokenizer {
    vocab: usize,
    n_examples: usize,
}

impl Tokenizer for TabTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                if let Some(rest) = w.strip_prefix("ex") {
                    if let Ok(i) = rest.parse::<usize>() {
                        return (self.vocab + i) as u32;
                    }
                }
                if let Some(rest) = w.strip_prefix('t') {
                    if let Ok(k) = rest.parse::<usize>() {
                        if k < self.vocab {
                            return k as u32;
                        }
                    }
                }
                (self.vocab + self.n_examples) as u32
            })
            .collect()
    }
    fn vocab_size(&self) -> usize {
        // content vocab + example markers + filler
        self.vocab + self.n_examples + 1
    }
}

impl TabularLM {
    pub fn new(seed: u64, n_examples: usize, positions_per_example: usize, vocab: usize) -> Self {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let full_vocab = vocab + n_examples + 1;
        let teacher_rows = (0..n_examples)
            .map(|_| {
                (0..positions_per_example)
                    .map(|_| {
                        let logits: Vec<f64> =
                            (0..full_vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
                        log_softmax(&logits)
                    })
                    .collect()
            })
            .collect();
        Self {
            vocab,
            positions_per_example,
            teacher_rows,
            tokenizer: TabTokenizer { vocab, n_examples },
        }
    }

    pub fn n_examples(&self) -> usize {
        self.teacher_rows.len()
    }

    /// The training record for example `i`: a context segment, a marker
    /// prompt segment, and a target segment with `positions_per_example`
    /// content tokens.
    pub fn record(&self, i: usize) -> SegmentedExample {
        use crate::records::Segment;
        let target_text: String = (0..self.positions_per_example)
            .map(|p| format!("t{}", (i + p) % self.vocab))
            .collect::<Vec<_>>()
            .join(" ");
        SegmentedExample {
            example_id: format!("tab{i}"),
            segments: vec![
                Segment::droppable("t0 t1"),
                Segment::user(format!("ex{i}")),
                Segment::target(target_text),
            ],
            mode: crate::synthesis::SupervisionMode::AnswerOnly,
            model_family: crate::genclient::ModelFamily::QwenFamily,
            block_gap: "\n".into(),
            trailing: String::new(),
        }
    }

    pub fn records(&self) -> Vec<SegmentedExample> {
        (0..self.n_examples()).map(|i| self.record(i)).collect()
    }

    /// Example index for a token sequence (the marker token id encodes it).
    fn example_of(&self, tokens: &[u32]) -> Result<usize> {
        tokens
            .iter()
            .find_map(|&t| {
                let t = t as usize;
                (t >= self.vocab && t < self.vocab + self.n_examples()).then(|| t - self.vocab)
            })
            .ok_or_else(|| Error::Invariant("token sequence carries no example marker".into()))
    }

    /// Target positions are the trailing `positions_per_example` positions.
    fn target_start(&self, tokens: &[u32]) -> usize {
        tokens.len() - self.positions_per_example
    }

    fn slot(&self, example: usize, offset: usize, v: usize) -> usize {
        let full_vocab = self.tokenizer.vocab_size();
        (example * self.positions_per_example + offset) * full_vocab + v
    }
}

impl ModelBackend for TabularLM {
    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn adapter_len(&self) -> usize {
        self.n_examples() * self.positions_per_example * self.tokenizer.vocab_size()
    }

    fn teacher_logprobs(&self, tokens: &[u32]) -> Result<LogProbRows> {
        let example = self.example_of(tokens)?;
        let start = self.target_start(tokens);
        let uniform = vec![-(self.vocab_size() as f64).ln(); self.vocab_size()];
        Ok((0..tokens.len())
            .map(|p| {
                if p >= start {
                    self.teacher_rows[example][p - start].clone()
                } else {
                    uniform.clone()
                }
            })
            .collect())
    }

    fn student_logprobs(&self, adapter: &AdapterState, tokens: &[u32]) -> Result<LogProbRows> {
        let example = self.example_of(tokens)?;
        let start = self.target_start(tokens);
        let full_vocab = self.vocab_size();
        let uniform = vec![-(full_vocab as f64).ln(); full_vocab];
        Ok((0..tokens.len())
            .map(|p| {
                if p >= start {
                    let offset = p - start;
                    let logits: Vec<f64> = (0..full_vocab)
                        .map(|v| adapter.params[self.slot(example, offset, v)])
                        .collect();
                    log_softmax(&logits)
                } else {
                    uniform.clone()
                }
            })
            .collect())
    }

    fn adapter_grad(
        &self,
        _adapter: &AdapterState,
        tokens: &[u32],
        positions: &[usize],
        dlogits: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        let example = self.example_of(tokens)?;
        let start = self.target_start(tokens);
        let mut grads = vec![0.0; self.adapter_len()];
        for (&pos, row) in positions.iter().zip(dlogits) {
            if pos < start {
                continue; // non-target positions are not parameterized
            }
            let offset = pos - start;
            for (v, g) in row.iter().enumerate() {
                grads[self.slot(example, offset, v)] += g;
            }
        }
        Ok(grads)
    }
}

/// Compares the analytic KL gradient against central differences; returns
/// the worst relative error, with the denominator floored at 1.
pub fn finite_diff_gradcheck(
    model: &dyn ModelBackend,
    adapter: &AdapterState,
    batch: &AlignedBatch,
    epsilon: f64,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let teacher_rows = model.teacher_logprobs(&batch.teacher_tokens)?;
    let loss_at = |params: &AdapterState| -> Result<f64> {
        let student_rows = model.student_logprobs(params, &batch.student_tokens)?;
        kl_distill_loss(&teacher_rows, &student_rows, batch)
    };

    let student_rows = model.student_logprobs(adapter, &batch.student_tokens)?;
    let t_at: Vec<&[f64]> = batch
        .teacher_target_positions
        .iter()
        .map(|&p| teacher_rows[p].as_slice())
        .collect();
    let s_at: Vec<&[f64]> = batch
        .student_target_positions
        .iter()
        .map(|&p| student_rows[p].as_slice())
        .collect();
    let dlogits = kl_dlogits(&t_at, &s_at);
    let analytic = model.adapter_grad(
        adapter,
        &batch.student_tokens,
        &batch.student_target_positions,
        &dlogits,
    )?;

    let mut worst = 0.0f64;
    let mut probe = adapter.clone();
    for i in 0..probe.params.len() {
        let original = probe.params[i];
        probe.params[i] = original + epsilon;
        let plus = loss_at(&probe)?;
        probe.params[i] = original - epsilon;
        let minus = loss_at(&probe)?;
        probe.params[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Total variation distance between two log-prob rows.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let px = if x.is_finite() { x.exp() } else { 0.0 };
            let py = if y.is_finite() { y.exp() } else { 0.0 };
            (px - py).abs()
        })
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn batch_for(model: &TabularLM, i: usize) -> AlignedBatch {
        let example = model.record(i);
        tokenize_aligned(&example, &example, model.tokenizer()).unwrap()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let model = TabularLM::new(11, 4, 3, 5);
        let batch = batch_for(&model, 0);
        let rows = model.teacher_logprobs(&batch.teacher_tokens).unwrap();
        let loss = kl_distill_loss(&rows, &rows, &batch).unwrap();
        assert!(loss.abs() < 1e-7, "KL(p||p) = {loss}");
    }

    #[test]
    fn one_hot_teacher_matches_cross_entropy() {
        // KL(onehot || q) = -log q(target); ce_loss computes the same mean.
        let model = TabularLM::new(3, 2, 4, 6);
        let batch = batch_for(&model, 1);
        let full_vocab = model.vocab_size();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let adapter = AdapterState {
            params: (0..model.adapter_len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ..model.init_adapter(128)
        };
        let student_rows = model.student_logprobs(&adapter, &batch.student_tokens).unwrap();

        let targets: Vec<u32> = batch
            .teacher_target_positions
            .iter()
            .map(|&p| batch.teacher_tokens[p])
            .collect();
        let mut teacher_rows = vec![vec![f64::NEG_INFINITY; full_vocab]; batch.teacher_tokens.len()];
        for (&p, &t) in batch.teacher_target_positions.iter().zip(&targets) {
            teacher_rows[p][t as usize] = 0.0; // log 1
        }
        let kl = kl_distill_loss(&teacher_rows, &student_rows, &batch).unwrap();
        let ce = ce_loss(&student_rows, &targets, &batch.student_target_positions).unwrap();
        assert!((kl - ce).abs() < 1e-6, "kl={kl} ce={ce}");
    }

    #[test]
    fn two_token_vocab_hand_value() {
        // teacher (0.8, 0.2), student (0.5, 0.5), one target position:
        // 0.8 ln(0.8/0.5) + 0.2 ln(0.2/0.5), computed independently.
        let expected = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
        assert!((expected - 0.19274475702175742).abs() < 1e-12);
        let batch = AlignedBatch {
            example_id: "hand".into(),
            teacher_tokens: vec![0],
            student_tokens: vec![0],
            teacher_target_positions: vec![0],
            student_target_positions: vec![0],
            context_kept: true,
        };
        let teacher = vec![vec![0.8f64.ln(), 0.2f64.ln()]];
        let student = vec![vec![0.5f64.ln(), 0.5f64.ln()]];
        let loss = kl_distill_loss(&teacher, &student, &batch).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_student_ce_is_log_vocab() {
        let batch_positions = vec![0usize, 1];
        let rows: LogProbRows = vec![vec![(0.25f64).ln(); 4]; 2];
        let ce = ce_loss(&rows, &[1, 2], &batch_positions).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_target_out_of_vocab_is_error() {
        let rows: LogProbRows = vec![vec![(0.5f64).ln(); 2]];
        assert!(ce_loss(&rows, &[7], &[0]).is_err());
    }

    #[test]
    fn masking_non_target_rows_is_bit_exact() {
        let model = TabularLM::new(5, 3, 3, 5);
        let batch = batch_for(&model, 2);
        let adapter = model.init_adapter(128);
        let teacher = model.teacher_logprobs(&batch.teacher_tokens).unwrap();
        let mut student = model.student_logprobs(&adapter, &batch.student_tokens).unwrap();
        let base = kl_distill_loss(&teacher, &student, &batch).unwrap();
        let targets: std::collections::BTreeSet<usize> =
            batch.student_target_positions.iter().copied().collect();
        for (p, row) in student.iter_mut().enumerate() {
            if !targets.contains(&p) {
                for x in row.iter_mut() {
                    *x += 17.3;
                }
            }
        }
        let perturbed = kl_distill_loss(&teacher, &student, &batch).unwrap();
        assert_eq!(base.to_bits(), perturbed.to_bits());
    }

    #[test]
    fn gradcheck_small() {
        let model = TabularLM::new(21, 3, 2, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let adapter = AdapterState {
            params: (0..model.adapter_len()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            ..model.init_adapter(128)
        };
        for i in 0..model.n_examples() {
            let batch = batch_for(&model, i);
            let err = finite_diff_gradcheck(&model, &adapter, &batch, 1e-5).unwrap();
            assert!(err <= 1e-4, "example {i}: gradcheck error {err}");
        }
    }

    #[test]
    fn gradient_vanishes_at_student_equals_teacher() {
        // Set adapter logits to the teacher's log-probs: stationary point.
        let model = TabularLM::new(8, 2, 2, 4);
        let mut adapter = model.init_adapter(128);
        let full_vocab = model.vocab_size();
        for i in 0..model.n_examples() {
            for offset in 0..2 {
                for v in 0..full_vocab {
                    adapter.params[(i * 2 + offset) * full_vocab + v] =
                        model.teacher_rows[i][offset][v];
                }
            }
        }
        for i in 0..model.n_examples() {
            let batch = batch_for(&model, i);
            let teacher = model.teacher_logprobs(&batch.teacher_tokens).unwrap();
            let student = model.student_logprobs(&adapter, &batch.student_tokens).unwrap();
            let t_at: Vec<&[f64]> = batch
                .teacher_target_positions
                .iter()
                .map(|&p| teacher[p].as_slice())
                .collect();
            let s_at: Vec<&[f64]> = batch
                .student_target_positions
                .iter()
                .map(|&p| student[p].as_slice())
                .collect();
            let dlogits = kl_dlogits(&t_at, &s_at);
            let grads = model
                .adapter_grad(&adapter, &batch.student_tokens, &batch.student_target_positions, &dlogits)
                .unwrap();
            assert!(grads.iter().all(|g| g.abs() <= 1e-6));
            let err = finite_diff_gradcheck(&model, &adapter, &batch, 1e-5).unwrap();
            assert!(err <= 1e-5);
        }
    }

    #[test]
    fn one_hot_teacher_gradient_identity() {
        // With a one-hot teacher the dlogits equal softmax(student) - onehot.
        let s_row = log_softmax(&[0.3, -0.4, 1.1]);
        let mut t_row = vec![f64::NEG_INFINITY; 3];
        t_row[2] = 0.0;
        let rows = kl_dlogits(&[&t_row], &[s_row.as_slice()]);
        for v in 0..3 {
            let expect = s_row[v].exp() - if v == 2 { 1.0 } else { 0.0 };
            assert!((rows[0][v] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tabular_rows_are_normalized() {
        let model = TabularLM::new(4, 2, 3, 5);
        let batch = batch_for(&model, 0);
        let adapter = model.init_adapter(128);
        for rows in [
            model.teacher_logprobs(&batch.teacher_tokens).unwrap(),
            model.student_logprobs(&adapter, &batch.student_tokens).unwrap(),
        ] {
            for row in rows {
                let mass: f64 = row.iter().map(|l| l.exp()).sum();
                assert!((mass - 1.0).abs() < 1e-5);
            }
        }
    }

    fn quick_config(epochs: u32, lr: f64) -> TrainConfig {
        TrainConfig {
            dropout_rate: 0.0,
            max_lr: lr,
            warmup_steps: 10,
            epochs,
            batch_size: 8,
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn distill_converges_to_teacher() {
        let model = TabularLM::new(33, 10, 3, 5);
        let data = TrainData {
            train: model.records().into_iter().map(TrainRecord::Distill).collect(),
            valid: Vec::new(),
            conservative: Vec::new(),
        };
        let adapter = model.init_adapter(128);
        let config = TrainConfig { batch_size: 10, ..quick_config(300, 0.15) };
        let out = train(&data, &model, &adapter, &config, Objective::Distill).unwrap();
        for i in 0..model.n_examples() {
            let batch = batch_for(&model, i);
            let teacher = model.teacher_logprobs(&batch.teacher_tokens).unwrap();
            let student = model.student_logprobs(&out.adapter, &batch.student_tokens).unwrap();
            for (&tp, &sp) in batch
                .teacher_target_positions
                .iter()
                .zip(&batch.student_target_positions)
            {
                let tv = total_variation(&teacher[tp], &student[sp]);
                assert!(tv <= 0.01, "example {i} position {tp}: tv {tv}");
            }
        }
    }

    #[test]
    fn teacher_rows_unchanged_by_training() {
        let model = TabularLM::new(14, 4, 2, 5);
        let batch = batch_for(&model, 0);
        let before = model.teacher_logprobs(&batch.teacher_tokens).unwrap();
        let data = TrainData {
            train: model.records().into_iter().map(TrainRecord::Distill).collect(),
            ..TrainData::default()
        };
        let _ = train(&data, &model, &model.init_adapter(128), &quick_config(3, 0.1), Objective::Distill)
            .unwrap();
        let after = model.teacher_logprobs(&batch.teacher_tokens).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let model = TabularLM::new(5, 6, 2, 4);
        let data = TrainData {
            train: model.records().into_iter().map(TrainRecord::Distill).collect(),
            ..TrainData::default()
        };
        let config = TrainConfig { dropout_rate: 0.9, epochs: 3, max_lr: 0.05, ..quick_config(3, 0.05) };
        let a = train(&data, &model, &model.init_adapter(128), &config, Objective::Distill).unwrap();
        let b = train(&data, &model, &model.init_adapter(128), &config, Objective::Distill).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.adapter.params, b.adapter.params);
    }

    #[test]
    fn mixed_with_zero_weight_equals_pure_distill() {
        let model = TabularLM::new(6, 6, 2, 4);
        let records: Vec<TrainRecord> =
            model.records().into_iter().map(TrainRecord::Distill).collect();
        let conservative = vec![HardTargetRecord {
            record_id: "cons0".into(),
            prompt: "ex0".into(),
            target: "t1".into(),
            category: crate::corpus::QACategory::Conservative,
            flagged: false,
        }];
        let distill_data = TrainData { train: records.clone(), ..TrainData::default() };
        let mixed_data = TrainData { train: records, valid: Vec::new(), conservative };
        let config = quick_config(3, 0.05);
        let pure =
            train(&distill_data, &model, &model.init_adapter(128), &config, Objective::Distill)
                .unwrap();
        let mixed_config = TrainConfig { ce_weight: 0.0, ..config };
        let mixed =
            train(&mixed_data, &model, &model.init_adapter(128), &mixed_config, Objective::Mixed)
                .unwrap();
        assert_eq!(pure.trace, mixed.trace);
        assert_eq!(pure.adapter.params, mixed.adapter.params);
    }

    #[test]
    fn empty_records_is_error() {
        let model = TabularLM::new(1, 2, 2, 4);
        let err = train(
            &TrainData::default(),
            &model,
            &model.init_adapter(128),
            &TrainConfig::default(),
            Objective::Distill,
        );
        assert!(err.is_err());
    }

    #[test]
    fn trace_csv_has_component_columns() {
        let csv = trace_to_csv(&[TraceRow {
            step: 1,
            epoch: 0,
            split: "train".into(),
            distill_loss: 0.5,
            ce_loss: 0.1,
            total_loss: 0.6,
        }]);
        assert!(csv.starts_with("step,epoch,split,distill_loss,ce_loss,total_loss\n"));
        assert!(csv.contains("1,0,train,"));
    }
}
