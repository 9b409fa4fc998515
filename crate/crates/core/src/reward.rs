//! One pairwise reward model for every task and evaluation dimension.
//!
//! The model reads two composited candidates plus a structured query (task
//! bits, dimension bits, optional prompt bits) and emits P(first is better)
//! through a two-way softmax. It is position-sensitive by construction: the
//! training loss pairs each comparison with its mirrored form and the
//! opposite target token.
//!
//! A scalar Bradley–Terry head over single candidates is included as the
//! baseline for the background-domination comparison.

use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::adam::{adam_step, warmup_cosine_lr, AdamState};
use crate::error::{CoreError, Result};
use crate::flowgen::{NULL_PROMPT_SLOT, PROMPT_SLOTS, TASK_SLOTS};
use crate::mlp::{mlp_backward_into, mlp_forward, mlp_forward_cached, Activation};
use crate::params::{ParamVector, ShapeSpec};
use crate::prefdata::PreferencePair;
use crate::rng::RngStream;
use crate::tasks::{task_dimension_set, Dimension, PromptCode, Signal, TaskId, ALL_DIMENSIONS, ALL_TASKS};

use crate::REDUCE_CHUNKS;

pub const DIM_SLOTS: usize = 5;
/// Query width: task one-hot + dimension one-hot + prompt one-hot.
pub const QUERY_WIDTH: usize = TASK_SLOTS + DIM_SLOTS + PROMPT_SLOTS;

/// Structured evaluation query: one bit per group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub task_slot: usize,
    pub dim_slot: usize,
    pub prompt_slot: usize,
}

impl Query {
    pub fn bits(&self) -> [f64; QUERY_WIDTH] {
        let mut b = [0.0; QUERY_WIDTH];
        b[self.task_slot] = 1.0;
        b[TASK_SLOTS + self.dim_slot] = 1.0;
        b[TASK_SLOTS + DIM_SLOTS + self.prompt_slot] = 1.0;
        b
    }
}

/// Builds the query for (task, dimension, prompt). The prompt group is
/// forced to the null bit unless the dimension is text alignment.
pub fn encode_query(task: TaskId, dim: Dimension, prompt: PromptCode) -> Query {
    assert!(
        task_dimension_set(task).contains(&dim),
        "{} is not a dimension of {}",
        dim.name(),
        task.name()
    );
    let prompt_slot = if dim == Dimension::TextAlignment {
        assert!(prompt.has_class(), "text alignment requires a prompt class");
        prompt.embed_slot()
    } else {
        NULL_PROMPT_SLOT
    };
    Query {
        task_slot: task.index(),
        dim_slot: dim.index(),
        prompt_slot,
    }
}

/// Two-way softmax output; p_yes + p_no = 1 exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardOutput {
    pub p_yes: f64,
    pub p_no: f64,
}

fn sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable −ln σ(d) = softplus(−d).
fn neg_log_sigmoid(d: f64) -> f64 {
    (-d).max(0.0) + (-(-d).abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmSpec {
    pub signal_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl RmSpec {
    pub fn input_dim(&self) -> usize {
        2 * self.signal_dim + QUERY_WIDTH
    }

    pub fn shape(&self) -> ShapeSpec {
        ShapeSpec::chain(self.input_dim(), &self.hidden, 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub spec: RmSpec,
    pub params: ParamVector,
}

impl RewardModel {
    pub fn init(spec: RmSpec, rng: &mut RngStream) -> Self {
        let params = ParamVector::init(spec.shape(), rng);
        RewardModel { spec, params }
    }

    pub fn from_params(spec: RmSpec, params: ParamVector) -> Self {
        assert_eq!(params.shape(), &spec.shape(), "checkpoint shape mismatch");
        RewardModel { spec, params }
    }

    fn encode(&self, x_a: &[f64], x_b: &[f64], q: &Query) -> Vec<f64> {
        let d = self.spec.signal_dim;
        assert_eq!(x_a.len(), d, "first candidate length mismatch");
        assert_eq!(x_b.len(), d, "second candidate length mismatch");
        let mut input = Vec::with_capacity(self.spec.input_dim());
        input.extend_from_slice(x_a);
        input.extend_from_slice(x_b);
        input.extend_from_slice(&q.bits());
        input
    }

    /// P(first candidate is better under the query). Position-sensitive.
    pub fn forward(&self, x_a: &Signal, x_b: &Signal, q: &Query) -> RewardOutput {
        let logits = mlp_forward(
            &self.params,
            &self.encode(x_a.values(), x_b.values(), q),
            self.spec.activation,
        );
        let p_yes = sigmoid(logits[0] - logits[1]);
        RewardOutput {
            p_yes,
            p_no: 1.0 - p_yes,
        }
    }

    /// Cross-entropy of one directed comparison against the `yes` or `no`
    /// token; accumulates `scale ·` parameter gradients and returns
    /// (loss, input gradient).
    fn directed_ce_into(
        &self,
        x_a: &[f64],
        x_b: &[f64],
        q: &Query,
        target_yes: bool,
        grad_acc: &mut ParamVector,
        scale: f64,
    ) -> (f64, Vec<f64>) {
        let input = self.encode(x_a, x_b, q);
        let cache = mlp_forward_cached(&self.params, &input, self.spec.activation);
        let logits = cache.output();
        let d = logits[0] - logits[1];
        let p_yes = sigmoid(d);
        let loss = if target_yes {
            neg_log_sigmoid(d)
        } else {
            neg_log_sigmoid(-d)
        };
        // d loss / d logits = softmax − onehot(target).
        let target = if target_yes { [1.0, 0.0] } else { [0.0, 1.0] };
        let upstream = [p_yes - target[0], (1.0 - p_yes) - target[1]];
        let input_grad =
            mlp_backward_into(&self.params, &cache, &upstream, self.spec.activation, grad_acc, scale);
        (loss, input_grad)
    }

    /// Gradient of `upstream-weighted p_yes` with respect to parameters and
    /// the first candidate (positions 0..D of the input).
    pub fn p_yes_vjp(
        &self,
        x_a: &[f64],
        x_b: &[f64],
        q: &Query,
        upstream: f64,
        grad_acc: &mut ParamVector,
    ) -> Vec<f64> {
        let input = self.encode(x_a, x_b, q);
        let cache = mlp_forward_cached(&self.params, &input, self.spec.activation);
        let logits = cache.output();
        let p = sigmoid(logits[0] - logits[1]);
        // dp/dl0 = p(1−p), dp/dl1 = −p(1−p).
        let g = p * (1.0 - p) * upstream;
        let input_grad = mlp_backward_into(
            &self.params,
            &cache,
            &[g, -g],
            self.spec.activation,
            grad_acc,
            1.0,
        );
        input_grad[..self.spec.signal_dim].to_vec()
    }
}

/// Symmetric pairwise cross-entropy of a single preference pair:
/// −½ [ln p_yes(w, l, q) + ln p_no(l, w, q)].
pub fn rm_loss(rm: &RewardModel, pair: &PreferencePair) -> (f64, ParamVector) {
    let mut grads = rm.params.zeros_like();
    let loss = rm_loss_into(rm, pair, &mut grads, 1.0);
    (loss, grads)
}

/// As [`rm_loss`], accumulating scaled gradients into an existing buffer.
pub fn rm_loss_into(rm: &RewardModel, pair: &PreferencePair, grad_acc: &mut ParamVector, scale: f64) -> f64 {
    let q = encode_query(pair.task, pair.dimension, pair.prompt);
    let (l1, _) = rm.directed_ce_into(
        pair.winner.values(),
        pair.loser.values(),
        &q,
        true,
        grad_acc,
        0.5 * scale,
    );
    let (l2, _) = rm.directed_ce_into(
        pair.loser.values(),
        pair.winner.values(),
        &q,
        false,
        grad_acc,
        0.5 * scale,
    );
    0.5 * (l1 + l2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmTrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Training-pair indices grouped by (task, dimension), in key order.
/// Batches sample cells uniformly so sparse cells get an equal share of
/// gradient signal.
fn cell_buckets(pairs: &[PreferencePair]) -> Vec<Vec<usize>> {
    let mut map: std::collections::BTreeMap<(TaskId, Dimension), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        map.entry((p.task, p.dimension)).or_default().push(i);
    }
    map.into_values().collect()
}

fn draw_pair<'a>(
    pairs: &'a [PreferencePair],
    buckets: &[Vec<usize>],
    rng: &mut RngStream,
) -> &'a PreferencePair {
    let cell = &buckets[rng.index(buckets.len())];
    &pairs[cell[rng.index(cell.len())]]
}

/// Label-preserving training augmentation.
///
/// The source family is exactly periodic in the index, every scorer is
/// invariant under index reversal, and scorers of interior-mask conditions
/// depend only on values in and adjacent to the mask. Hence reversing both
/// signals, or circularly shifting an interior-mask pair so the mask stays
/// interior, yields a pair whose winner/loser labels are exactly the
/// original ones. The edit region is recovered as the support of
/// winner − loser (candidates share the composited background).
fn augment_pair(pair: &PreferencePair, rng: &mut RngStream) -> PreferencePair {
    let d = pair.winner.len();
    let mut w = pair.winner.values().to_vec();
    let mut l = pair.loser.values().to_vec();

    if rng.coin(0.5) {
        w.reverse();
        l.reverse();
    }

    let lo = w.iter().zip(&l).position(|(a, b)| a != b);
    let hi = w.iter().zip(&l).rposition(|(a, b)| a != b);
    if let (Some(lo), Some(hi)) = (lo, hi) {
        // Interior masks (fill, removal) may slide; edge-anchored masks
        // (extend) must stay put.
        if lo >= 1 && hi <= d - 2 {
            let min_k = -(lo as i64 - 1);
            let max_k = (d - 2 - hi) as i64;
            let k = min_k + rng.index((max_k - min_k + 1) as usize) as i64;
            if k != 0 {
                let shift = |v: &[f64]| -> Vec<f64> {
                    (0..d)
                        .map(|i| v[(i as i64 - k).rem_euclid(d as i64) as usize])
                        .collect()
                };
                w = shift(&w);
                l = shift(&l);
            }
        }
    }
    PreferencePair {
        winner: Signal::new(w),
        loser: Signal::new(l),
        ..pair.clone()
    }
}

/// Minibatch Adam on the symmetric pairwise loss with cell-balanced
/// sampling and a warmup + cosine learning-rate schedule. Batch item i of
/// iteration t draws from `rng.substream(t).substream(i)`, so the run
/// replays bitwise for any worker count.
pub fn train_rm(
    spec: RmSpec,
    cfg: &RmTrainConfig,
    train_pairs: &[PreferencePair],
    rng: &RngStream,
) -> Result<(RewardModel, Vec<f64>)> {
    assert!(!train_pairs.is_empty(), "empty training set");
    let buckets = cell_buckets(train_pairs);
    let mut init_rng = rng.substream(0);
    let mut rm = RewardModel::init(spec, &mut init_rng);
    let mut adam = AdamState::new(rm.params.len(), cfg.lr);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let inv_b = 1.0 / cfg.batch as f64;
    let chunk_len = cfg.batch.div_ceil(REDUCE_CHUNKS);

    for iter in 0..cfg.iterations {
        adam.lr = warmup_cosine_lr(iter, cfg.iterations, cfg.lr);
        let iter_rng = rng.substream(1 + iter as u64);
        let chunks: Vec<(f64, ParamVector)> = (0..REDUCE_CHUNKS)
            .into_par_iter()
            .map(|c| {
                let mut grads = rm.params.zeros_like();
                let mut loss = 0.0;
                let lo = c * chunk_len;
                let hi = ((c + 1) * chunk_len).min(cfg.batch);
                for i in lo..hi.max(lo) {
                    let mut item_rng = iter_rng.substream(i as u64);
                    let pair = augment_pair(draw_pair(train_pairs, &buckets, &mut item_rng), &mut item_rng);
                    loss += rm_loss_into(&rm, &pair, &mut grads, inv_b);
                }
                (loss, grads)
            })
            .collect();
        let mut total = 0.0;
        let mut grads = rm.params.zeros_like();
        for (l, g) in chunks {
            total += l;
            grads.add_scaled(&g, 1.0);
        }
        let loss = total * inv_b;
        if !loss.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                context: format!("reward-model iteration {iter}"),
            });
        }
        adam_step(&mut adam, &mut rm.params, &grads)?;
        curve.push(loss);
    }
    Ok((rm, curve))
}

/// Randomly swaps winner/loser with probability ½ (label-permutation
/// control; a model trained on this should sit at chance).
pub fn shuffle_labels(pairs: &[PreferencePair], rng: &mut RngStream) -> Vec<PreferencePair> {
    pairs
        .iter()
        .map(|p| {
            if rng.coin(0.5) {
                PreferencePair {
                    winner: p.loser.clone(),
                    loser: p.winner.clone(),
                    ..p.clone()
                }
            } else {
                p.clone()
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Accuracy evaluation
// ---------------------------------------------------------------------------

/// Anything that can judge "is the first candidate better under this
/// query"; lets the evaluation harness run against oracle or null judges.
pub trait PairJudge: Sync {
    fn p_first_better(&self, a: &Signal, b: &Signal, task: TaskId, dim: Dimension, prompt: PromptCode) -> f64;
}

impl PairJudge for RewardModel {
    fn p_first_better(&self, a: &Signal, b: &Signal, task: TaskId, dim: Dimension, prompt: PromptCode) -> f64 {
        let q = encode_query(task, dim, prompt);
        self.forward(a, b, &q).p_yes
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct AccuracyCell {
    pub count: usize,
    pub correct: usize,
}

impl AccuracyCell {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

/// Held-out accuracy per (task, dimension), plus the overall rate.
#[derive(Debug, Clone, Default, Serialize)]
pub struct AccuracyTable {
    cells: BTreeMap<(TaskId, Dimension), AccuracyCell>,
}

impl AccuracyTable {
    pub fn cell(&self, task: TaskId, dim: Dimension) -> Option<&AccuracyCell> {
        self.cells.get(&(task, dim))
    }

    pub fn cells(&self) -> impl Iterator<Item = (&(TaskId, Dimension), &AccuracyCell)> {
        self.cells.iter()
    }

    pub fn overall(&self) -> AccuracyCell {
        let mut total = AccuracyCell::default();
        for c in self.cells.values() {
            total.count += c.count;
            total.correct += c.correct;
        }
        total
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,dimension,count,accuracy\n");
        for ((task, dim), cell) in &self.cells {
            out.push_str(&format!(
                "{},{},{},{:.4}\n",
                task.name(),
                dim.name(),
                cell.count,
                cell.accuracy()
            ));
        }
        let o = self.overall();
        if o.count > 0 {
            out.push_str(&format!("overall,,{},{:.4}\n", o.count, o.accuracy()));
        }
        out
    }

    /// Grid rendering with `--` for cells the task never populates.
    pub fn to_pretty(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10}", "accuracy%"));
        for dim in ALL_DIMENSIONS {
            out.push_str(&format!("{:>16}", dim.name()));
        }
        out.push('\n');
        for task in ALL_TASKS {
            out.push_str(&format!("{:<10}", task.name()));
            for dim in ALL_DIMENSIONS {
                match self.cells.get(&(task, dim)) {
                    Some(c) if c.count > 0 => {
                        out.push_str(&format!("{:>16}", format!("{:.2}", 100.0 * c.accuracy())))
                    }
                    _ => out.push_str(&format!("{:>16}", "--")),
                }
            }
            out.push('\n');
        }
        let o = self.overall();
        if o.count > 0 {
            out.push_str(&format!(
                "overall: {:.2}% on {} pairs\n",
                100.0 * o.accuracy(),
                o.count
            ));
        }
        out
    }
}

/// A pair counts as correct iff P(winner first is better) > 0.5; exact ties
/// count as incorrect.
pub fn eval_accuracy<J: PairJudge>(judge: &J, pairs: &[PreferencePair]) -> AccuracyTable {
    let verdicts: Vec<bool> = pairs
        .par_iter()
        .map(|p| judge.p_first_better(&p.winner, &p.loser, p.task, p.dimension, p.prompt) > 0.5)
        .collect();
    let mut table = AccuracyTable::default();
    for (p, &ok) in pairs.iter().zip(&verdicts) {
        let cell = table.cells.entry((p.task, p.dimension)).or_default();
        cell.count += 1;
        if ok {
            cell.correct += 1;
        }
    }
    table
}

/// Held-out accuracy of the trained pairwise model.
pub fn eval_rm_accuracy(rm: &RewardModel, pairs: &[PreferencePair]) -> AccuracyTable {
    eval_accuracy(rm, pairs)
}

// ---------------------------------------------------------------------------
// Scalar Bradley–Terry baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BtSpec {
    pub signal_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl BtSpec {
    pub fn input_dim(&self) -> usize {
        self.signal_dim + QUERY_WIDTH
    }

    pub fn shape(&self) -> ShapeSpec {
        ShapeSpec::chain(self.input_dim(), &self.hidden, 1)
    }
}

/// Scalar reward head over a single candidate plus the same query bits the
/// pairwise model sees.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarRewardModel {
    pub spec: BtSpec,
    pub params: ParamVector,
}

impl ScalarRewardModel {
    pub fn init(spec: BtSpec, rng: &mut RngStream) -> Self {
        let params = ParamVector::init(spec.shape(), rng);
        ScalarRewardModel { spec, params }
    }

    fn encode(&self, x: &[f64], q: &Query) -> Vec<f64> {
        assert_eq!(x.len(), self.spec.signal_dim);
        let mut input = Vec::with_capacity(self.spec.input_dim());
        input.extend_from_slice(x);
        input.extend_from_slice(&q.bits());
        input
    }

    pub fn score(&self, x: &Signal, q: &Query) -> f64 {
        mlp_forward(&self.params, &self.encode(x.values(), q), self.spec.activation)[0]
    }
}

/// −ln σ(r(w) − r(l)) and its exact gradient.
pub fn bt_loss(bt: &ScalarRewardModel, pair: &PreferencePair) -> (f64, ParamVector) {
    let mut grads = bt.params.zeros_like();
    let loss = bt_loss_into(bt, pair, &mut grads, 1.0);
    (loss, grads)
}

pub fn bt_loss_into(bt: &ScalarRewardModel, pair: &PreferencePair, grad_acc: &mut ParamVector, scale: f64) -> f64 {
    let q = encode_query(pair.task, pair.dimension, pair.prompt);
    let in_w = bt.encode(pair.winner.values(), &q);
    let in_l = bt.encode(pair.loser.values(), &q);
    let cache_w = mlp_forward_cached(&bt.params, &in_w, bt.spec.activation);
    let cache_l = mlp_forward_cached(&bt.params, &in_l, bt.spec.activation);
    let d = cache_w.output()[0] - cache_l.output()[0];
    let loss = neg_log_sigmoid(d);
    // dL/dd = σ(d) − 1.
    let g = sigmoid(d) - 1.0;
    mlp_backward_into(&bt.params, &cache_w, &[g * scale], bt.spec.activation, grad_acc, 1.0);
    mlp_backward_into(&bt.params, &cache_l, &[-g * scale], bt.spec.activation, grad_acc, 1.0);
    loss
}

/// Trains the scalar baseline with the identical loop (balanced sampling,
/// schedule) as [`train_rm`].
pub fn train_bt(
    spec: BtSpec,
    cfg: &RmTrainConfig,
    train_pairs: &[PreferencePair],
    rng: &RngStream,
) -> Result<(ScalarRewardModel, Vec<f64>)> {
    assert!(!train_pairs.is_empty(), "empty training set");
    let buckets = cell_buckets(train_pairs);
    let mut init_rng = rng.substream(0);
    let mut bt = ScalarRewardModel::init(spec, &mut init_rng);
    let mut adam = AdamState::new(bt.params.len(), cfg.lr);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let inv_b = 1.0 / cfg.batch as f64;
    let chunk_len = cfg.batch.div_ceil(REDUCE_CHUNKS);

    for iter in 0..cfg.iterations {
        adam.lr = warmup_cosine_lr(iter, cfg.iterations, cfg.lr);
        let iter_rng = rng.substream(1 + iter as u64);
        let chunks: Vec<(f64, ParamVector)> = (0..REDUCE_CHUNKS)
            .into_par_iter()
            .map(|c| {
                let mut grads = bt.params.zeros_like();
                let mut loss = 0.0;
                let lo = c * chunk_len;
                let hi = ((c + 1) * chunk_len).min(cfg.batch);
                for i in lo..hi.max(lo) {
                    let mut item_rng = iter_rng.substream(i as u64);
                    let pair = augment_pair(draw_pair(train_pairs, &buckets, &mut item_rng), &mut item_rng);
                    loss += bt_loss_into(&bt, &pair, &mut grads, inv_b);
                }
                (loss, grads)
            })
            .collect();
        let mut total = 0.0;
        let mut grads = bt.params.zeros_like();
        for (l, g) in chunks {
            total += l;
            grads.add_scaled(&g, 1.0);
        }
        let loss = total * inv_b;
        if !loss.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                context: format!("scalar baseline iteration {iter}"),
            });
        }
        adam_step(&mut adam, &mut bt.params, &grads)?;
        curve.push(loss);
    }
    Ok((bt, curve))
}

impl PairJudge for ScalarRewardModel {
    fn p_first_better(&self, a: &Signal, b: &Signal, task: TaskId, dim: Dimension, prompt: PromptCode) -> f64 {
        let q = encode_query(task, dim, prompt);
        sigmoid(self.score(a, &q) - self.score(b, &q))
    }
}
