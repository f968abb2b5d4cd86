//! A small trainable student over the synthetic world.
//!
//! The student's frozen base is the pre-edit belief table: for every
//! (subject, relation) cell, logits over entities peaked on the pre-edit
//! object. A trainable adapter adds four delta groups per the way knowledge
//! is exercised:
//!
//! - a *recall* delta, used when a cell produces the final answer of a
//!   question (direct probes and the last hop of a chain);
//! - a *chain* delta, used when a cell is resolved as an intermediate step
//!   of a multi-hop traversal;
//! - a *shared* delta entering both paths with a coupling factor, so
//!   training one path transfers partially to the other;
//! - a per-subject *spill* vector entering every cell of that subject, so
//!   heavy training on one attribute drags the subject's other attributes —
//!   the locality-damage mechanism that conservative samples repair.
//!
//! Question answering parses the chain from the prompt and traverses the
//! belief table; training backpropagates through a soft traversal, so the
//! KL gradient reaches every cell on the reasoning path.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::backend::WorldTokenizer;
use super::{parse_chain_question, ChainSpec, World};
use crate::error::{Error, Result};
use crate::genclient::{ChatRequest, TextBackend};
use crate::records::Tokenizer;
use crate::trainer::{AdapterState, LogProbRows, ModelBackend};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentTuning {
    /// Smoothing mass for scripted rows and the answer-slot embedding.
    pub epsilon: f64,
    /// Below this top-probability the student answers "unknown".
    pub confidence_floor: f64,
    /// Weight of the shared delta in both paths (cross-path transfer).
    pub shared_coupling: f64,
    /// Weight of the per-subject spill vector in every cell of the subject.
    pub spill_coupling: f64,
    /// Base belief confidence range; per-cell scale is seeded in this range.
    pub base_scale_min: f64,
    pub base_scale_max: f64,
}

impl Default for StudentTuning {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            confidence_floor: 0.5,
            shared_coupling: 0.25,
            spill_coupling: 0.35,
            base_scale_min: 2.5,
            base_scale_max: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PathKind {
    Recall,
    Chain,
}

pub struct BeliefStudent {
    base: World,
    tokenizer: WorldTokenizer,
    tuning: StudentTuning,
    n_entities: usize,
    n_relations: usize,
}

impl BeliefStudent {
    pub fn new(base: World, tuning: StudentTuning) -> Self {
        let tokenizer = WorldTokenizer::new(&base);
        let n_entities = base.entities.len();
        let n_relations = base.relations.len();
        Self { base, tokenizer, tuning, n_entities, n_relations }
    }

    pub fn world(&self) -> &World {
        &self.base
    }

    fn cells(&self) -> usize {
        self.n_entities * self.n_relations
    }

    fn cell(&self, s: u32, r: u32) -> usize {
        s as usize * self.n_relations + r as usize
    }

    // Param layout: [shared | recall | chain] per cell, then spill per subject.
    fn shared_slot(&self, s: u32, r: u32, o: usize) -> usize {
        self.cell(s, r) * self.n_entities + o
    }
    fn recall_slot(&self, s: u32, r: u32, o: usize) -> usize {
        (self.cells() + self.cell(s, r)) * self.n_entities + o
    }
    fn chain_slot(&self, s: u32, r: u32, o: usize) -> usize {
        (2 * self.cells() + self.cell(s, r)) * self.n_entities + o
    }
    fn spill_slot(&self, s: u32, o: usize) -> usize {
        (3 * self.cells() + s as usize) * self.n_entities + o
    }

    /// Deterministic per-cell base confidence in the configured range.
    fn base_scale(&self, s: u32, r: u32) -> f64 {
        let mut h = self.base.seed ^ 0x9e37_79b9_7f4a_7c15;
        for x in [s as u64 + 1, r as u64 + 1] {
            h ^= x.wrapping_mul(0xff51_afd7_ed55_8ccd);
            h = h.rotate_left(31).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
        }
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        self.tuning.base_scale_min + unit * (self.tuning.base_scale_max - self.tuning.base_scale_min)
    }

    /// Entity-space logits for one cell lookup under a path kind.
    fn cell_logits(&self, adapter: &AdapterState, kind: PathKind, s: u32, r: u32) -> Vec<f64> {
        let mut logits = vec![0.0; self.n_entities];
        if let Some(o) = self.base.object_of(s, r) {
            logits[o as usize] += self.base_scale(s, r);
        }
        let alpha = self.tuning.shared_coupling;
        let sigma = self.tuning.spill_coupling;
        for o in 0..self.n_entities {
            logits[o] += alpha * adapter.params[self.shared_slot(s, r, o)];
            logits[o] += match kind {
                PathKind::Recall => adapter.params[self.recall_slot(s, r, o)],
                PathKind::Chain => adapter.params[self.chain_slot(s, r, o)],
            };
            logits[o] += sigma * adapter.params[self.spill_slot(s, o)];
        }
        logits
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    fn hop_kind(hop_index: usize, hop_count: usize) -> PathKind {
        if hop_index + 1 == hop_count {
            PathKind::Recall
        } else {
            PathKind::Chain
        }
    }

    /// Soft traversal: entity distributions after each hop.
    fn soft_traverse(&self, adapter: &AdapterState, chain: &ChainSpec) -> Vec<Vec<f64>> {
        let hop_count = chain.path.len();
        let mut d = vec![0.0; self.n_entities];
        d[chain.start as usize] = 1.0;
        let mut states = vec![d.clone()];
        for (h, &r) in chain.path.iter().enumerate() {
            let kind = Self::hop_kind(h, hop_count);
            let mut next = vec![0.0; self.n_entities];
            for (e, &mass) in d.iter().enumerate() {
                if mass <= 1e-12 {
                    continue;
                }
                let probs = Self::softmax(&self.cell_logits(adapter, kind, e as u32, r));
                for (o, p) in probs.iter().enumerate() {
                    next[o] += mass * p;
                }
            }
            states.push(next.clone());
            d = next;
        }
        states
    }

    /// Hard traversal with the confidence floor; None means "unknown".
    pub fn answer_chain(&self, adapter: &AdapterState, chain: &ChainSpec) -> Option<u32> {
        let hop_count = chain.path.len();
        let mut current = chain.start;
        for (h, &r) in chain.path.iter().enumerate() {
            let kind = Self::hop_kind(h, hop_count);
            let probs = Self::softmax(&self.cell_logits(adapter, kind, current, r));
            let (best, best_p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, &p)| (i as u32, p))
                .unwrap();
            if best_p < self.tuning.confidence_floor {
                return None;
            }
            current = best;
        }
        Some(current)
    }

    /// Answers a free-form question; the per-hop reasoning steps accompany
    /// the answer for trace construction.
    pub fn answer_question(
        &self,
        adapter: &AdapterState,
        question: &str,
    ) -> (String, Vec<String>) {
        let Some(chain) = parse_chain_question(&self.base, question) else {
            return ("unknown".to_string(), Vec::new());
        };
        let mut steps = Vec::new();
        let hop_count = chain.path.len();
        let mut current = chain.start;
        for (h, &r) in chain.path.iter().enumerate() {
            let kind = Self::hop_kind(h, hop_count);
            let probs = Self::softmax(&self.cell_logits(adapter, kind, current, r));
            let (best, best_p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, &p)| (i as u32, p))
                .unwrap();
            if best_p < self.tuning.confidence_floor {
                steps.push(format!(
                    "The {} of {} is not clear to me.",
                    self.base.relation_name(r),
                    self.base.entity_name(current)
                ));
                return ("unknown".to_string(), steps);
            }
            steps.push(format!(
                "The {} of {} is {}.",
                self.base.relation_name(r),
                self.base.entity_name(current),
                self.base.entity_name(best)
            ));
            current = best;
        }
        (self.base.entity_name(current).to_string(), steps)
    }

    /// The position supervised with belief-derived probabilities: the token
    /// after the last `<answer>` tag, or (for tag-less hard targets) the
    /// last entity token after the last `?`.
    fn answer_slot(&self, tokens: &[u32]) -> Option<usize> {
        let answer_open = self.tokenizer.id_of("<answer>");
        if let Some(pos) = tokens.iter().rposition(|&t| t == answer_open) {
            let slot = pos + 1;
            return (slot < tokens.len()
                && self.tokenizer.entity_of_token(tokens[slot]).is_some())
            .then_some(slot);
        }
        let question_mark = self.tokenizer.id_of("?");
        let after = tokens.iter().rposition(|&t| t == question_mark)? + 1;
        (after..tokens.len())
            .rev()
            .find(|&i| self.tokenizer.entity_of_token(tokens[i]).is_some())
    }

    /// The chain the token sequence asks about, parsed from the decoded text.
    fn chain_of_tokens(&self, tokens: &[u32]) -> Option<ChainSpec> {
        let text = self.tokenizer.decode(tokens);
        let tail = match text.rfind("Question :").or_else(|| text.rfind("question :")) {
            Some(pos) => &text[pos + "Question :".len()..],
            None => &text,
        };
        parse_chain_question(&self.base, tail)
    }

    /// Scripted row: 1-epsilon on the observed token.
    fn observed_row(&self, token: u32) -> Vec<f64> {
        let v = self.tokenizer.vocab_size();
        let hit = (1.0 - self.tuning.epsilon).ln();
        let miss = (self.tuning.epsilon / (v as f64 - 1.0)).ln();
        (0..v as u32).map(|u| if u == token { hit } else { miss }).collect()
    }

    /// Vocab-space row from an entity distribution.
    fn belief_row(&self, entity_dist: &[f64]) -> Vec<f64> {
        let v = self.tokenizer.vocab_size();
        let eps = self.tuning.epsilon;
        let mut probs = vec![eps / v as f64; v];
        for (e, &p) in entity_dist.iter().enumerate() {
            probs[self.tokenizer.entity_token(e as u32) as usize] += (1.0 - eps) * p;
        }
        probs.into_iter().map(f64::ln).collect()
    }
}

impl ModelBackend for BeliefStudent {
    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn adapter_len(&self) -> usize {
        3 * self.cells() * self.n_entities + self.n_entities * self.n_entities
    }

    fn init_adapter(&self, rank: u32) -> AdapterState {
        AdapterState::zeros(rank, "all belief cells", self.adapter_len())
    }

    /// The teacher distribution over a sampled response: mass concentrated
    /// on the observed tokens (the response came from the teacher itself).
    fn teacher_logprobs(&self, tokens: &[u32]) -> Result<LogProbRows> {
        Ok(tokens.iter().map(|&t| self.observed_row(t)).collect())
    }

    fn student_logprobs(&self, adapter: &AdapterState, tokens: &[u32]) -> Result<LogProbRows> {
        let mut rows: LogProbRows = tokens.iter().map(|&t| self.observed_row(t)).collect();
        if let (Some(slot), Some(chain)) = (self.answer_slot(tokens), self.chain_of_tokens(tokens))
        {
            let states = self.soft_traverse(adapter, &chain);
            rows[slot] = self.belief_row(states.last().unwrap());
        }
        Ok(rows)
    }

    fn adapter_grad(
        &self,
        adapter: &AdapterState,
        tokens: &[u32],
        positions: &[usize],
        dlogprob: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.adapter_len()];
        let (Some(slot), Some(chain)) = (self.answer_slot(tokens), self.chain_of_tokens(tokens))
        else {
            return Ok(grads);
        };
        let Some(row_index) = positions.iter().position(|&p| p == slot) else {
            return Ok(grads);
        };
        let dlogp = &dlogprob[row_index];
        if dlogp.len() != self.vocab_size() {
            return Err(Error::Invariant("gradient row has wrong vocabulary size".into()));
        }

        let states = self.soft_traverse(adapter, &chain);
        let row = self.belief_row(states.last().unwrap());
        let eps = self.tuning.epsilon;

        // dL/d d_H[e] via the vocab embedding p[tok(e)] = (1-eps) d[e] + eps/V.
        let mut g: Vec<f64> = (0..self.n_entities)
            .map(|e| {
                let v = self.tokenizer.entity_token(e as u32) as usize;
                let p = row[v].exp();
                dlogp[v] / p * (1.0 - eps)
            })
            .collect();

        let hop_count = chain.path.len();
        let alpha = self.tuning.shared_coupling;
        let sigma = self.tuning.spill_coupling;
        for h in (0..hop_count).rev() {
            let r = chain.path[h];
            let kind = Self::hop_kind(h, hop_count);
            let d_prev = &states[h];
            let mut g_prev = vec![0.0; self.n_entities];
            for (e, &mass) in d_prev.iter().enumerate() {
                if mass <= 1e-12 {
                    continue;
                }
                let probs = Self::softmax(&self.cell_logits(adapter, kind, e as u32, r));
                let inner: f64 = g.iter().zip(&probs).map(|(gi, pi)| gi * pi).sum();
                g_prev[e] = inner;
                for (o, &p) in probs.iter().enumerate() {
                    let dlogit = mass * p * (g[o] - inner);
                    if dlogit == 0.0 {
                        continue;
                    }
                    grads[self.shared_slot(e as u32, r, o)] += alpha * dlogit;
                    match kind {
                        PathKind::Recall => grads[self.recall_slot(e as u32, r, o)] += dlogit,
                        PathKind::Chain => grads[self.chain_slot(e as u32, r, o)] += dlogit,
                    }
                    grads[self.spill_slot(e as u32, o)] += sigma * dlogit;
                }
            }
            g = g_prev;
        }
        Ok(grads)
    }
}

/// Text-generation view of a trained student, for the evaluation harness.
pub struct StudentEvalBackend {
    model: Arc<BeliefStudent>,
    adapter: AdapterState,
}

impl StudentEvalBackend {
    pub fn new(model: Arc<BeliefStudent>, adapter: AdapterState) -> Self {
        Self { model, adapter }
    }
}

impl TextBackend for StudentEvalBackend {
    fn name(&self) -> &str {
        "belief-student"
    }

    fn generate(&self, request: &ChatRequest) -> Result<Vec<String>> {
        let prompt = &request
            .messages
            .last()
            .ok_or_else(|| Error::Protocol("empty message list".into()))?
            .text;
        let question = {
            let marker = prompt
                .rfind("Question:")
                .map(|p| (p, "Question:"))
                .or_else(|| prompt.rfind("question:").map(|p| (p, "question:")));
            match marker {
                Some((pos, m)) => prompt[pos + m.len()..].lines().next().unwrap_or("").trim(),
                None => prompt.trim(),
            }
        };
        let (answer, steps) = self.model.answer_question(&self.adapter, question);
        let text = if request.config.thinking_mode || prompt.contains("step-by-step reasoning") {
            format!("<think>\n{}\n</think>\n\n<answer>{answer}</answer>", steps.join(" "))
        } else {
            format!("<answer>{answer}</answer>")
        };
        Ok(vec![text; request.config.n_samples as usize])
    }
}
