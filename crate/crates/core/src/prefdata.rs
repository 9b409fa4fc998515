//! Preference-pair dataset construction.
//!
//! For each condition the base generator produces N candidates under
//! randomized inference parameters (steps, guidance, denoise starting
//! point). Each evaluation dimension then contributes at most one
//! winner/loser pair per set — best-of-N vs worst-of-N — and near-ties are
//! discarded. Pairs are persisted as line-delimited JSON.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flowgen::{euler_integrate, sample_categorical, Generator};
use crate::rng::RngStream;
use crate::tasks::{
    composite, dimensions_for, oracle_score, sample_condition, Condition, Dimension, PromptCode,
    Signal, TaskId, TaskParams,
};

pub const SCHEMA_VERSION: &str = "onereward-pairs-v1";

/// Inference parameters drawn for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDrawParams {
    pub steps: usize,
    pub guidance: f64,
    /// Denoise starting point s₀; the initial state is
    /// (1−s₀)·ε + s₀·source.
    pub late_start: f64,
}

/// N composited candidates for one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub set_id: u64,
    pub condition: Condition,
    pub candidates: Vec<Signal>,
    pub gen_params: Vec<GenDrawParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidateGenConfig {
    pub n_per_set: usize,
    pub steps_choices: Vec<usize>,
    pub guidance_range: (f64, f64),
    pub late_start_choices: Vec<f64>,
}

impl Default for CandidateGenConfig {
    fn default() -> Self {
        CandidateGenConfig {
            n_per_set: 4,
            steps_choices: vec![4, 8, 16, 32],
            guidance_range: (1.0, 4.0),
            late_start_choices: vec![0.0, 0.2],
        }
    }
}

impl CandidateGenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, reason: String| CoreError::Config {
            field: format!("candidates.{field}"),
            reason,
        };
        if self.n_per_set < 2 {
            return Err(err("n_per_set", "need at least two candidates".into()));
        }
        if self.steps_choices.is_empty() || self.steps_choices.iter().any(|&s| s == 0) {
            return Err(err("steps_choices", "must be non-empty positive".into()));
        }
        if !(self.guidance_range.0 <= self.guidance_range.1 && self.guidance_range.0 >= 0.0) {
            return Err(err("guidance_range", format!("bad range {:?}", self.guidance_range)));
        }
        if self
            .late_start_choices
            .iter()
            .any(|&s| !(0.0..1.0).contains(&s))
        {
            return Err(err("late_start_choices", "entries must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Generates one candidate set. Candidate i draws from `rng.substream(i)`
/// (order: steps, guidance, late start, noise), so sets replay bitwise and
/// candidates are independent of evaluation order.
pub fn gen_candidates(
    gen: &Generator,
    cond: &Condition,
    set_id: u64,
    cfg: &CandidateGenConfig,
    rng: &RngStream,
) -> Result<CandidateSet> {
    assert!(cfg.n_per_set >= 2, "need at least two candidates");
    let dim = cond.source.len();
    let mut candidates = Vec::with_capacity(cfg.n_per_set);
    let mut gen_params = Vec::with_capacity(cfg.n_per_set);
    for i in 0..cfg.n_per_set {
        let mut crng = rng.substream(i as u64);
        let steps = *crng.choose(&cfg.steps_choices);
        let guidance = crng.uniform_in(cfg.guidance_range.0, cfg.guidance_range.1);
        let late_start = *crng.choose(&cfg.late_start_choices);
        let eps = crng.normal_vec(dim);
        let state0: Vec<f64> = eps
            .iter()
            .zip(cond.source.values())
            .map(|(e, s)| (1.0 - late_start) * e + late_start * s)
            .collect();
        let raw = euler_integrate(gen, cond, steps, guidance, state0, late_start)?;
        candidates.push(composite(&Signal::new(raw), cond));
        gen_params.push(GenDrawParams {
            steps,
            guidance,
            late_start,
        });
    }
    Ok(CandidateSet {
        set_id,
        condition: cond.clone(),
        candidates,
        gen_params,
    })
}

/// Draws conditions (task per `task_probs`) and generates `n_sets` candidate
/// sets in parallel; output order is fixed by set index.
pub fn gen_candidate_sets(
    gen: &Generator,
    task_params: &TaskParams,
    task_probs: [f64; 3],
    n_sets: usize,
    cfg: &CandidateGenConfig,
    rng: &RngStream,
) -> Result<Vec<CandidateSet>> {
    (0..n_sets)
        .into_par_iter()
        .map(|i| {
            let set_rng = rng.substream(i as u64);
            let mut cond_rng = set_rng.substream(u64::MAX);
            let task = sample_categorical(&task_probs, &mut cond_rng);
            let cond = sample_condition(task_params, task, &mut cond_rng);
            gen_candidates(gen, &cond, i as u64, cfg, &set_rng)
        })
        .collect()
}

/// One annotated comparison: winner beats loser on `dimension`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub task: TaskId,
    pub dimension: Dimension,
    pub prompt: PromptCode,
    pub winner: Signal,
    pub loser: Signal,
    pub source_set_id: u64,
}

/// Best-of-N / worst-of-N selection: `(winner_idx, loser_idx)` when the gap
/// clears the tie threshold, None when the dimension is discarded.
pub(crate) fn select_pair(scores: &[f64], tie_eps: f64) -> Option<(usize, usize)> {
    let mut w = 0;
    let mut l = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[w] {
            w = i;
        }
        if s < scores[l] {
            l = i;
        }
    }
    if scores[w] - scores[l] >= tie_eps {
        Some((w, l))
    } else {
        None
    }
}

/// Per-dimension labeling outcome of one candidate set.
#[derive(Debug, Clone)]
pub struct SetLabels {
    pub dims: Vec<(Dimension, Option<(usize, usize)>)>,
    pub pairs: Vec<PreferencePair>,
}

/// Scores every candidate on every dimension of the set's task and extracts
/// at most one pair per dimension. The same candidate may be winner on one
/// dimension and loser on another; those conflicts are preserved.
pub fn label_pairs(task_params: &TaskParams, set: &CandidateSet, tie_eps: f64) -> SetLabels {
    let cond = &set.condition;
    let mut dims = Vec::new();
    let mut pairs = Vec::new();
    for dim in dimensions_for(cond.task, cond.prompt) {
        let scores: Vec<f64> = set
            .candidates
            .iter()
            .map(|c| oracle_score(task_params, dim, c, cond))
            .collect();
        let chosen = select_pair(&scores, tie_eps);
        if let Some((w, l)) = chosen {
            pairs.push(PreferencePair {
                task: cond.task,
                dimension: dim,
                prompt: cond.prompt,
                winner: set.candidates[w].clone(),
                loser: set.candidates[l].clone(),
                source_set_id: set.set_id,
            });
        }
        dims.push((dim, chosen));
    }
    SetLabels { dims, pairs }
}

/// Aggregate labeling statistics over a batch of candidate sets.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LabelStats {
    pub sets: usize,
    pub comparisons: usize,
    pub discarded: usize,
    /// Pair counts per "task/dimension" cell.
    pub cell_counts: BTreeMap<String, usize>,
    /// Per task: (sets where the text-alignment winner differs from the
    /// consistency winner, sets where both dimensions were scored).
    pub conflict_counts: BTreeMap<String, (usize, usize)>,
}

impl LabelStats {
    pub fn discard_rate(&self) -> f64 {
        if self.comparisons == 0 {
            0.0
        } else {
            self.discarded as f64 / self.comparisons as f64
        }
    }

    pub fn conflict_fraction(&self, task: TaskId) -> Option<f64> {
        self.conflict_counts
            .get(task.name())
            .map(|&(c, n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
    }
}

/// Labels all sets and gathers pair/discard/conflict statistics.
pub fn label_all(
    task_params: &TaskParams,
    sets: &[CandidateSet],
    tie_eps: f64,
) -> (Vec<PreferencePair>, LabelStats) {
    let labels: Vec<SetLabels> = sets
        .par_iter()
        .map(|s| label_pairs(task_params, s, tie_eps))
        .collect();
    let mut pairs = Vec::new();
    let mut stats = LabelStats {
        sets: sets.len(),
        ..LabelStats::default()
    };
    for (set, label) in sets.iter().zip(labels) {
        let mut winner_of: BTreeMap<Dimension, usize> = BTreeMap::new();
        for (dim, chosen) in &label.dims {
            stats.comparisons += 1;
            match chosen {
                Some((w, _)) => {
                    winner_of.insert(*dim, *w);
                    let key = format!("{}/{}", set.condition.task.name(), dim.name());
                    *stats.cell_counts.entry(key).or_insert(0) += 1;
                }
                None => stats.discarded += 1,
            }
        }
        if let (Some(&wa), Some(&wc)) = (
            winner_of.get(&Dimension::TextAlignment),
            winner_of.get(&Dimension::Consistency),
        ) {
            let entry = stats
                .conflict_counts
                .entry(set.condition.task.name().to_string())
                .or_insert((0, 0));
            entry.1 += 1;
            if wa != wc {
                entry.0 += 1;
            }
        }
        pairs.extend(label.pairs);
    }
    (pairs, stats)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// On-disk record: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    task_id: u8,
    dimension: Dimension,
    prompt_class: PromptCode,
    winner: Vec<f64>,
    loser: Vec<f64>,
    source_set_id: u64,
    schema_version: String,
}

pub fn write_dataset(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        let record = PairRecord {
            task_id: p.task.index() as u8,
            dimension: p.dimension,
            prompt_class: p.prompt,
            winner: p.winner.values().to_vec(),
            loser: p.loser.values().to_vec(),
            source_set_id: p.source_set_id,
            schema_version: SCHEMA_VERSION.to_string(),
        };
        serde_json::to_writer(&mut w, &record)
            .map_err(|e| CoreError::DatasetLine { line: 0, reason: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<PreferencePair>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord =
            serde_json::from_str(&line).map_err(|e| CoreError::DatasetLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        if record.schema_version != SCHEMA_VERSION {
            return Err(CoreError::DatasetVersion {
                found: record.schema_version,
                expected: SCHEMA_VERSION.to_string(),
            });
        }
        let bad = |reason: &str| CoreError::DatasetLine {
            line: line_no,
            reason: reason.to_string(),
        };
        if record.task_id > 2 {
            return Err(bad("task_id out of range"));
        }
        let task = TaskId::from_index(record.task_id as usize);
        if record.winner.len() != record.loser.len() {
            return Err(bad("winner/loser length mismatch"));
        }
        if record.winner.iter().chain(&record.loser).any(|v| !v.is_finite()) {
            return Err(bad("non-finite signal values"));
        }
        pairs.push(PreferencePair {
            task,
            dimension: record.dimension,
            prompt: record.prompt_class,
            winner: Signal::new(record.winner),
            loser: Signal::new(record.loser),
            source_set_id: record.source_set_id,
        });
    }
    Ok(pairs)
}

/// Splits by candidate set so winner/loser siblings never straddle the
/// held-out boundary.
pub fn split_dataset(
    pairs: &[PreferencePair],
    test_fraction: f64,
    rng: &mut RngStream,
) -> (Vec<PreferencePair>, Vec<PreferencePair>) {
    assert!(
        test_fraction > 0.0 && test_fraction < 1.0,
        "test_fraction must be in (0, 1)"
    );
    let mut set_ids: Vec<u64> = Vec::new();
    for p in pairs {
        if !set_ids.contains(&p.source_set_id) {
            set_ids.push(p.source_set_id);
        }
    }
    // Fisher–Yates on the first-appearance ordering.
    for i in (1..set_ids.len()).rev() {
        let j = rng.index(i + 1);
        set_ids.swap(i, j);
    }
    let n_test = ((set_ids.len() as f64) * test_fraction).round() as usize;
    let test_ids: std::collections::BTreeSet<u64> = set_ids.iter().take(n_test).copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for p in pairs {
        if test_ids.contains(&p.source_set_id) {
            test.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    (train, test)
}
