//! The synthetic multi-task universe: mask-guided fill / extend / removal
//! over 1-D signals, plus the analytic scorers that stand in for human
//! annotators on the five evaluation dimensions.
//!
//! Source signals are two-component sinusoids; removal sources additionally
//! carry one planted Gaussian bump inside the future mask. The family is
//! small enough to train against on a laptop core yet rich enough that the
//! dimensions conflict (a candidate can win on text alignment while losing
//! on consistency).

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

pub const DEFAULT_SIGNAL_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Fill,
    Extend,
    Removal,
}

pub const ALL_TASKS: [TaskId; 3] = [TaskId::Fill, TaskId::Extend, TaskId::Removal];

impl TaskId {
    pub fn index(self) -> usize {
        match self {
            TaskId::Fill => 0,
            TaskId::Extend => 1,
            TaskId::Removal => 2,
        }
    }

    pub fn from_index(i: usize) -> TaskId {
        ALL_TASKS[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Fill => "fill",
            TaskId::Extend => "extend",
            TaskId::Removal => "removal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    TextAlignment,
    Consistency,
    Structure,
    Aesthetics,
    RemovalQuality,
}

pub const ALL_DIMENSIONS: [Dimension; 5] = [
    Dimension::TextAlignment,
    Dimension::Consistency,
    Dimension::Structure,
    Dimension::Aesthetics,
    Dimension::RemovalQuality,
];

impl Dimension {
    pub fn index(self) -> usize {
        match self {
            Dimension::TextAlignment => 0,
            Dimension::Consistency => 1,
            Dimension::Structure => 2,
            Dimension::Aesthetics => 3,
            Dimension::RemovalQuality => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::TextAlignment => "text_alignment",
            Dimension::Consistency => "consistency",
            Dimension::Structure => "structure",
            Dimension::Aesthetics => "aesthetics",
            Dimension::RemovalQuality => "removal_quality",
        }
    }
}

/// Class-conditioned prompt analog. Removal always uses the `Remove`
/// sentinel; embeddings fold it onto the null slot because the task bits
/// already identify removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptCode {
    Null,
    Class(u8),
    Remove,
}

impl PromptCode {
    pub fn class(self) -> Option<u8> {
        match self {
            PromptCode::Class(c) => Some(c),
            _ => None,
        }
    }

    pub fn has_class(self) -> bool {
        matches!(self, PromptCode::Class(_))
    }

    /// Slot in the 4-wide prompt one-hot (classes 0..2, then null).
    pub fn embed_slot(self) -> usize {
        match self {
            PromptCode::Class(c) => {
                assert!(c < 3, "prompt class out of range");
                c as usize
            }
            PromptCode::Null | PromptCode::Remove => 3,
        }
    }
}

impl Serialize for PromptCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PromptCode::Null => s.serialize_none(),
            PromptCode::Class(c) => s.serialize_u8(*c),
            PromptCode::Remove => s.serialize_str("remove"),
        }
    }
}

impl<'de> Deserialize<'de> for PromptCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = PromptCode;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("null, a class id in 0..=2, or \"remove\"")
            }
            fn visit_unit<E: serde::de::Error>(self) -> Result<PromptCode, E> {
                Ok(PromptCode::Null)
            }
            fn visit_none<E: serde::de::Error>(self) -> Result<PromptCode, E> {
                Ok(PromptCode::Null)
            }
            fn visit_some<D2: serde::Deserializer<'de>>(self, d: D2) -> Result<PromptCode, D2::Error> {
                d.deserialize_any(V)
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<PromptCode, E> {
                if v < 3 {
                    Ok(PromptCode::Class(v as u8))
                } else {
                    Err(E::custom(format!("prompt class {v} out of range")))
                }
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<PromptCode, E> {
                if (0..3).contains(&v) {
                    Ok(PromptCode::Class(v as u8))
                } else {
                    Err(E::custom(format!("prompt class {v} out of range")))
                }
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<PromptCode, E> {
                if v == "remove" {
                    Ok(PromptCode::Remove)
                } else {
                    Err(E::custom(format!("unknown prompt code {v:?}")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// A length-D real vector; the "image" analog for sources and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Signal(Vec<f64>);

impl Signal {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(values.iter().all(|v| v.is_finite()), "signal must be finite");
        Signal(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// Binary edit-region mask. Task-generated masks are a single contiguous run
/// of ones with at least one zero; the type itself also admits degenerate
/// patterns (e.g. all ones) for direct compositing tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        Mask { bits }
    }

    /// Ones exactly on `start..=end`.
    pub fn contiguous(dim: usize, start: usize, end: usize) -> Self {
        assert!(start <= end && end < dim, "bad mask run {start}..={end} for dim {dim}");
        let mut bits = vec![false; dim];
        for b in &mut bits[start..=end] {
            *b = true;
        }
        Mask { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn width(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn masked_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// `(start, end)` of the single run of ones, if the mask is one run.
    pub fn run(&self) -> Option<(usize, usize)> {
        let first = self.bits.iter().position(|&b| b)?;
        let last = self.bits.iter().rposition(|&b| b)?;
        if self.bits[first..=last].iter().all(|&b| b) {
            Some((first, last))
        } else {
            None
        }
    }
}

/// The unified per-sample input: masked source, mask, prompt, task tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub source: Signal,
    pub mask: Mask,
    pub prompt: PromptCode,
    pub task: TaskId,
}

/// Tunable constants of the task universe; defaults match the experiment
/// configuration shipped with the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskParams {
    pub signal_dim: usize,
    /// Sampling probabilities for (fill, extend, removal) conditions.
    pub sample_probs: [f64; 3],
    /// Inclusive fill-mask width range (interior window).
    pub fill_width: (usize, usize),
    /// Inclusive extend-mask width range (suffix or prefix).
    pub extend_width: (usize, usize),
    /// Masked-region RMS targets per prompt class.
    pub alignment_targets: [f64; 3],
    /// Probability that an extend condition carries a prompt class.
    pub extend_prompt_prob: f64,
    /// Gaussian kernel width for the removal-quality scorer.
    pub removal_kernel_sigma: f64,
    /// Score gap below which a comparison is a tie.
    pub tie_eps: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            signal_dim: DEFAULT_SIGNAL_DIM,
            sample_probs: [0.5, 0.25, 0.25],
            fill_width: (8, 16),
            extend_width: (8, 16),
            alignment_targets: [0.3, 0.8, 1.3],
            extend_prompt_prob: 0.5,
            removal_kernel_sigma: 1.5,
            tie_eps: 0.08,
        }
    }
}

impl TaskParams {
    /// Defaults rescaled to a different signal dimension (mask width ranges
    /// keep their 1/4..1/2 proportions). Useful for miniature instances.
    pub fn for_dim(signal_dim: usize) -> Self {
        assert!(signal_dim >= 16, "signal dim {signal_dim} too small");
        let width = (signal_dim / 4, signal_dim / 2);
        TaskParams {
            signal_dim,
            fill_width: width,
            extend_width: width,
            ..TaskParams::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let err = |field: &str, reason: String| crate::CoreError::Config {
            field: format!("tasks.{field}"),
            reason,
        };
        if self.signal_dim < 20 {
            return Err(err("signal_dim", format!("{} too small for the mask ranges", self.signal_dim)));
        }
        if (self.sample_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || self.sample_probs.iter().any(|&p| p < 0.0)
        {
            return Err(err(
                "sample_probs",
                format!("{:?} is not a distribution", self.sample_probs),
            ));
        }
        for (name, (lo, hi)) in [("fill_width", self.fill_width), ("extend_width", self.extend_width)] {
            if lo < 2 || lo > hi || hi + 2 > self.signal_dim {
                return Err(err(name, format!("bad range [{lo}, {hi}] for dim {}", self.signal_dim)));
            }
        }
        if !(0.0..=1.0).contains(&self.extend_prompt_prob) {
            return Err(err("extend_prompt_prob", "must be in [0, 1]".into()));
        }
        if self.removal_kernel_sigma <= 0.0 {
            return Err(err("removal_kernel_sigma", "must be positive".into()));
        }
        if self.tie_eps <= 0.0 {
            return Err(err("tie_eps", "must be positive".into()));
        }
        Ok(())
    }
}

/// Evaluation dimensions for a task instance. Text alignment only applies
/// when a prompt class is present; removal evaluates removal quality plus
/// consistency (quality alone is trivially hacked by emitting zeros).
pub fn dimensions_for(task: TaskId, prompt: PromptCode) -> Vec<Dimension> {
    match task {
        TaskId::Fill | TaskId::Extend => {
            let mut dims = Vec::with_capacity(4);
            if prompt.has_class() {
                dims.push(Dimension::TextAlignment);
            }
            dims.extend([Dimension::Consistency, Dimension::Structure, Dimension::Aesthetics]);
            dims
        }
        TaskId::Removal => vec![Dimension::RemovalQuality, Dimension::Consistency],
    }
}

/// All dimensions a task can ever carry (ignores prompt presence).
pub fn task_dimension_set(task: TaskId) -> Vec<Dimension> {
    match task {
        TaskId::Fill | TaskId::Extend => vec![
            Dimension::TextAlignment,
            Dimension::Consistency,
            Dimension::Structure,
            Dimension::Aesthetics,
        ],
        TaskId::Removal => vec![Dimension::RemovalQuality, Dimension::Consistency],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineComponent {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub amplitude: f64,
    pub sigma: f64,
    pub center: f64,
}

/// A sampled source signal together with its generating parameters (the
/// condition builder needs the bump location to place the removal mask).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDraw {
    pub signal: Signal,
    pub components: [SineComponent; 2],
    pub bump: Option<Bump>,
}

/// Closed-form family evaluation:
/// x[i] = Σ_j a_j sin(2π f_j i / D + φ_j) (+ optional Gaussian bump).
pub fn synth_signal(dim: usize, components: &[SineComponent], bump: Option<Bump>) -> Signal {
    let mut values = Vec::with_capacity(dim);
    for i in 0..dim {
        let t = i as f64 / dim as f64;
        let mut x = 0.0;
        for c in components {
            x += c.amplitude * (std::f64::consts::TAU * c.frequency * t + c.phase).sin();
        }
        if let Some(b) = bump {
            let d = i as f64 - b.center;
            x += b.amplitude * (-d * d / (2.0 * b.sigma * b.sigma)).exp();
        }
        values.push(x);
    }
    Signal::new(values)
}

/// Draws one source from the task family. Removal draws are rejected until
/// the planted bump keeps the sample inside the [−3, 3] family bound.
pub fn sample_source(params: &TaskParams, task: TaskId, rng: &mut RngStream) -> SourceDraw {
    let dim = params.signal_dim;
    loop {
        let components = [draw_component(rng), draw_component(rng)];
        let bump = if task == TaskId::Removal {
            let sigma = rng.uniform_in(1.0, 2.0);
            let lo = 2.0 * sigma;
            let hi = dim as f64 - 1.0 - 2.0 * sigma;
            Some(Bump {
                amplitude: rng.uniform_in(1.0, 2.0),
                sigma,
                center: rng.uniform_in(lo, hi),
            })
        } else {
            None
        };
        let signal = synth_signal(dim, &components, bump);
        if signal.values().iter().all(|v| v.abs() <= 3.0) {
            return SourceDraw {
                signal,
                components,
                bump,
            };
        }
    }
}

fn draw_component(rng: &mut RngStream) -> SineComponent {
    SineComponent {
        amplitude: rng.uniform_in(0.5, 1.5),
        frequency: *rng.choose(&[1.0, 2.0, 3.0]),
        phase: rng.uniform_in(0.0, std::f64::consts::TAU),
    }
}

/// Builds the mask and prompt for a drawn source.
pub fn make_condition(
    params: &TaskParams,
    task: TaskId,
    draw: &SourceDraw,
    rng: &mut RngStream,
) -> Condition {
    let dim = params.signal_dim;
    assert_eq!(draw.signal.len(), dim, "source drawn for a different dim");
    let (mask, prompt) = match task {
        TaskId::Fill => {
            let (w_lo, w_hi) = params.fill_width;
            let w = w_lo + rng.index(w_hi - w_lo + 1);
            // Interior window: at least one unmasked index on each side.
            let start = 1 + rng.index(dim - w - 1);
            let prompt = PromptCode::Class(rng.index(3) as u8);
            (Mask::contiguous(dim, start, start + w - 1), prompt)
        }
        TaskId::Extend => {
            let (w_lo, w_hi) = params.extend_width;
            let w = w_lo + rng.index(w_hi - w_lo + 1);
            let suffix = rng.coin(0.5);
            let mask = if suffix {
                Mask::contiguous(dim, dim - w, dim - 1)
            } else {
                Mask::contiguous(dim, 0, w - 1)
            };
            let prompt = if rng.coin(params.extend_prompt_prob) {
                PromptCode::Class(rng.index(3) as u8)
            } else {
                PromptCode::Null
            };
            (mask, prompt)
        }
        TaskId::Removal => {
            let b = draw.bump.expect("removal source must carry a bump");
            let lo = (b.center - 2.0 * b.sigma).ceil().max(0.0) as usize;
            let hi = ((b.center + 2.0 * b.sigma).floor() as usize).min(dim - 1);
            (Mask::contiguous(dim, lo, hi), PromptCode::Remove)
        }
    };
    Condition {
        source: draw.signal.clone(),
        mask,
        prompt,
        task,
    }
}

/// Draws a full condition (source + mask + prompt) for a task.
pub fn sample_condition(params: &TaskParams, task: TaskId, rng: &mut RngStream) -> Condition {
    let draw = sample_source(params, task, rng);
    make_condition(params, task, &draw, rng)
}

/// Replaces everything outside the mask with the source:
/// result[i] = output[i] if mask[i] else source[i].
pub fn composite(output: &Signal, cond: &Condition) -> Signal {
    assert_eq!(output.len(), cond.source.len(), "length mismatch");
    let values = output
        .values()
        .iter()
        .zip(cond.source.values())
        .enumerate()
        .map(|(i, (&y, &s))| if cond.mask.is_masked(i) { y } else { s })
        .collect();
    Signal::new(values)
}

/// Scores one evaluation dimension of a (composited) output; higher is
/// better. Panics if `dim` does not apply to the condition.
pub fn oracle_score(params: &TaskParams, dim: Dimension, output: &Signal, cond: &Condition) -> f64 {
    assert!(
        dimensions_for(cond.task, cond.prompt).contains(&dim),
        "{} is not an evaluation dimension of {} (prompt {:?})",
        dim.name(),
        cond.task.name(),
        cond.prompt
    );
    assert_eq!(output.len(), cond.source.len(), "length mismatch");
    let y = output.values();
    match dim {
        Dimension::TextAlignment => {
            let class = cond.prompt.class().expect("alignment needs a prompt class") as usize;
            let target = params.alignment_targets[class];
            let (sum_sq, n) = cond
                .mask
                .masked_indices()
                .fold((0.0, 0usize), |(s, n), i| (s + y[i] * y[i], n + 1));
            let rms = (sum_sq / n as f64).sqrt();
            -(rms - target).abs()
        }
        Dimension::Consistency => {
            let mut worst = 0.0f64;
            for i in 1..y.len() {
                if cond.mask.is_masked(i) != cond.mask.is_masked(i - 1) {
                    worst = worst.max((y[i] - y[i - 1]).abs());
                }
            }
            -worst
        }
        Dimension::Structure => {
            let n = y.len();
            let mut sum = 0.0;
            for i in 1..n - 1 {
                if cond.mask.is_masked(i) {
                    let d2 = y[i + 1] - 2.0 * y[i] + y[i - 1];
                    sum += d2 * d2;
                }
            }
            -sum
        }
        Dimension::Aesthetics => {
            let masked: Vec<f64> = cond.mask.masked_indices().map(|i| y[i]).collect();
            -fourier_residual(&masked)
        }
        Dimension::RemovalQuality => {
            // Correlation with the bump kernel, normalized by kernel mass
            // (a Gaussian-weighted local mean). Adding a bump strictly
            // raises the max, so residual bumps always score worse.
            let sigma = params.removal_kernel_sigma;
            let r = (2.0 * sigma).ceil() as isize;
            let n = y.len() as isize;
            let mut best = f64::NEG_INFINITY;
            for i in cond.mask.masked_indices() {
                let i = i as isize;
                let lo = (i - r).max(0);
                let hi = (i + r).min(n - 1);
                let mut dot = 0.0;
                let mut mass = 0.0;
                for j in lo..=hi {
                    let d = (j - i) as f64;
                    let k = (-d * d / (2.0 * sigma * sigma)).exp();
                    dot += k * y[j as usize];
                    mass += k;
                }
                best = best.max(dot / mass);
            }
            -best
        }
    }
}

/// L2 distance between the masked values and their least-squares projection
/// onto the first 6 Fourier basis vectors of the mask window (const,
/// cos/sin at window frequency 1 and 2, cos at 3). The basis lives on the
/// window, so the smoothness notion is translation-invariant.
fn fourier_residual(masked: &[f64]) -> f64 {
    const K: usize = 6;
    let m = masked.len();
    assert!(m >= 2, "aesthetics needs at least two masked points");
    let tau = std::f64::consts::TAU;
    let basis: Vec<[f64; K]> = (0..m)
        .map(|j| {
            let t = j as f64 / m as f64;
            [
                1.0,
                (tau * t).cos(),
                (tau * t).sin(),
                (2.0 * tau * t).cos(),
                (2.0 * tau * t).sin(),
                (3.0 * tau * t).cos(),
            ]
        })
        .collect();

    // Normal equations BᵀB c = Bᵀy, solved by Gaussian elimination with
    // partial pivoting; tiny ridge on a near-singular system.
    let mut ata = [[0.0f64; K]; K];
    let mut aty = [0.0f64; K];
    for (row, &yv) in basis.iter().zip(masked) {
        for a in 0..K {
            aty[a] += row[a] * yv;
            for b in 0..K {
                ata[a][b] += row[a] * row[b];
            }
        }
    }
    let coeffs = solve_small(ata, aty).unwrap_or_else(|| {
        let mut ridged = ata;
        for (d, row) in ridged.iter_mut().enumerate() {
            row[d] += 1e-9;
        }
        solve_small(ridged, aty).expect("ridged normal equations must be solvable")
    });

    let mut sq = 0.0;
    for (row, &yv) in basis.iter().zip(masked) {
        let fit: f64 = row.iter().zip(&coeffs).map(|(b, c)| b * c).sum();
        let d = yv - fit;
        sq += d * d;
    }
    sq.sqrt()
}

fn solve_small<const K: usize>(mut a: [[f64; K]; K], mut b: [f64; K]) -> Option<[f64; K]> {
    for col in 0..K {
        let pivot = (col..K).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..K {
            let f = a[row][col] / a[col][col];
            for c in col..K {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; K];
    for col in (0..K).rev() {
        let mut s = b[col];
        for c in col + 1..K {
            s -= a[col][c] * x[c];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preference {
    AWins,
    BWins,
    Tie,
}

/// Tie iff |score_a − score_b| < tie_eps, else the higher score wins.
pub fn prefer_from_scores(score_a: f64, score_b: f64, tie_eps: f64) -> Preference {
    assert!(tie_eps > 0.0, "tie_eps must be positive");
    if (score_a - score_b).abs() < tie_eps {
        Preference::Tie
    } else if score_a > score_b {
        Preference::AWins
    } else {
        Preference::BWins
    }
}

/// Composites both candidates against the condition, scores them on `dim`,
/// and applies the tie threshold.
pub fn oracle_prefer(
    params: &TaskParams,
    dim: Dimension,
    a: &Signal,
    b: &Signal,
    cond: &Condition,
    tie_eps: f64,
) -> Preference {
    let sa = oracle_score(params, dim, &composite(a, cond), cond);
    let sb = oracle_score(params, dim, &composite(b, cond), cond);
    prefer_from_scores(sa, sb, tie_eps)
}
