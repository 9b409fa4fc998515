//! Pipeline stage implementations behind the CLI commands.
//!
//! Every stage validates its preconditions before writing anything, writes
//! outputs through temp-file renames, and appends a record to the run
//! manifest on completion. Randomness derives from (config seed, stage
//! stream id), so reruns reproduce artifacts bitwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use prefflow_core::config::ExperimentConfig;
use prefflow_core::flowgen::{train_fm, Generator};
use prefflow_core::integrity::gradient_integrity;
use prefflow_core::params::ParamVector;
use prefflow_core::prefdata::{
    gen_candidate_sets, label_all, read_dataset, split_dataset, write_dataset, PreferencePair,
};
use prefflow_core::reward::{
    eval_accuracy, eval_rm_accuracy, train_bt, train_rm, AccuracyTable, RewardModel,
};
use prefflow_core::rlhf::{
    gsb_eval, sample_conditions, train_rl, train_rl_dynamic, GsbReport, RlOutcome,
};
use prefflow_core::rng::RngStream;
use prefflow_core::tasks::{TaskId, ALL_DIMENSIONS, ALL_TASKS};

use crate::manifest::{write_atomic, Manifest};

/// Stage stream ids under the experiment seed.
mod streams {
    pub const FM: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const RM: u64 = 4;
    pub const BT: u64 = 5;
    pub const RL: u64 = 6;
    pub const GSB_CONDS: u64 = 7;
    pub const GSB_NOISE: u64 = 8;
}

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Ctx { cfg, out })
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::open_for(
            &self.out,
            &self.cfg.hash(),
            self.cfg.seed,
            env!("CARGO_PKG_VERSION"),
        )
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, produced_by: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!(
                "missing {} (run `{produced_by}` first in this output directory)",
                p.display()
            );
        }
        Ok(p)
    }

    fn load_generator(&self, path: &Path) -> Result<Generator> {
        let params = ParamVector::load(path)?;
        let spec = self.cfg.gen_spec();
        if params.shape() != &spec.shape() {
            bail!(
                "checkpoint {} does not match the configured generator architecture",
                path.display()
            );
        }
        Ok(Generator::from_params(spec, params))
    }

    fn load_rm(&self, path: &Path) -> Result<RewardModel> {
        let params = ParamVector::load(path)?;
        let spec = self.cfg.rm_spec();
        if params.shape() != &spec.shape() {
            bail!(
                "checkpoint {} does not match the configured reward-model architecture",
                path.display()
            );
        }
        Ok(RewardModel::from_params(spec, params))
    }
}

fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{l:.8}\n"));
    }
    out
}

fn mean(slice: &[f64]) -> f64 {
    slice.iter().sum::<f64>() / slice.len() as f64
}

// ---------------------------------------------------------------------------
// train-base
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct FmStats {
    pub iterations: usize,
    pub loss_at_10: f64,
    pub final_loss: f64,
    pub final_loss_mean10: f64,
    pub decrease_ratio: f64,
}

pub fn cmd_train_base(ctx: &Ctx) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    let t0 = Instant::now();
    let cfg = &ctx.cfg;
    let (gen, curve) = train_fm(
        cfg.gen_spec(),
        &cfg.tasks,
        cfg.tasks.sample_probs,
        &cfg.fm_train_config(),
        &RngStream::new(cfg.seed, streams::FM),
    )?;

    let tail = &curve[curve.len().saturating_sub(10)..];
    let stats = FmStats {
        iterations: curve.len(),
        loss_at_10: curve[9.min(curve.len() - 1)],
        final_loss: *curve.last().unwrap(),
        final_loss_mean10: mean(tail),
        decrease_ratio: curve[9.min(curve.len() - 1)] / mean(tail),
    };
    if curve.len() > 10 && stats.decrease_ratio < 10.0 {
        bail!(
            "flow-matching training did not converge: loss only decreased {:.2}x \
             from iteration 10 (need >= 10x); raise fm.iterations or lower fm.lr",
            stats.decrease_ratio
        );
    }

    let ckpt = ctx.path("base.ckpt");
    gen.params.save(&ckpt)?;
    let curve_path = ctx.path("fm_curve.csv");
    write_atomic(&curve_path, curve_csv(&curve).as_bytes())?;
    let stats_path = ctx.path("fm_stats.json");
    write_atomic(&stats_path, serde_json::to_string_pretty(&stats)?.as_bytes())?;

    manifest.record_stage(
        &ctx.out,
        "train-base",
        t0.elapsed().as_secs_f64(),
        &[
            ("checkpoint", ckpt.as_path()),
            ("loss_curve", curve_path.as_path()),
            ("stats", stats_path.as_path()),
        ],
    )?;
    eprintln!(
        "train-base: {} iterations, loss {:.3} -> {:.3} ({:.1}x) in {:.1}s",
        stats.iterations,
        stats.loss_at_10,
        stats.final_loss_mean10,
        stats.decrease_ratio,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct DataStats {
    pub sets: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub discard_rate: f64,
    pub cell_counts: BTreeMap<String, usize>,
    pub conflict_fraction: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SetMeta {
    set_id: u64,
    task: TaskId,
    mask_width: usize,
    prompt_class: prefflow_core::tasks::PromptCode,
}

pub fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let base_path = ctx.require("base.ckpt", "train-base")?;
    let mut manifest = ctx.manifest()?;
    let t0 = Instant::now();
    let cfg = &ctx.cfg;
    let gen = ctx.load_generator(&base_path)?;

    let sets = gen_candidate_sets(
        &gen,
        &cfg.tasks,
        cfg.tasks.sample_probs,
        cfg.candidates.n_sets,
        &cfg.candidates.gen_config(),
        &RngStream::new(cfg.seed, streams::DATA),
    )?;
    let (pairs, stats) = label_all(&cfg.tasks, &sets, cfg.tasks.tie_eps);
    let (train, test) = split_dataset(
        &pairs,
        cfg.candidates.test_fraction,
        &mut RngStream::new(cfg.seed, streams::SPLIT),
    );

    let train_path = ctx.path("pairs_train.jsonl");
    let test_path = ctx.path("pairs_test.jsonl");
    write_dataset_atomic(&train, &train_path)?;
    write_dataset_atomic(&test, &test_path)?;

    let meta_path = ctx.path("sets_meta.jsonl");
    let mut meta_text = String::new();
    for s in &sets {
        let m = SetMeta {
            set_id: s.set_id,
            task: s.condition.task,
            mask_width: s.condition.mask.width(),
            prompt_class: s.condition.prompt,
        };
        meta_text.push_str(&serde_json::to_string(&m)?);
        meta_text.push('\n');
    }
    write_atomic(&meta_path, meta_text.as_bytes())?;

    let data_stats = DataStats {
        sets: stats.sets,
        train_pairs: train.len(),
        test_pairs: test.len(),
        discard_rate: stats.discard_rate(),
        cell_counts: stats.cell_counts.clone(),
        conflict_fraction: ALL_TASKS
            .iter()
            .filter_map(|&t| stats.conflict_fraction(t).map(|f| (t.name().to_string(), f)))
            .collect(),
    };
    let stats_path = ctx.path("data_stats.json");
    write_atomic(&stats_path, serde_json::to_string_pretty(&data_stats)?.as_bytes())?;

    manifest.record_stage(
        &ctx.out,
        "gen-data",
        t0.elapsed().as_secs_f64(),
        &[
            ("train", train_path.as_path()),
            ("test", test_path.as_path()),
            ("sets_meta", meta_path.as_path()),
            ("stats", stats_path.as_path()),
        ],
    )?;
    eprintln!(
        "gen-data: {} sets -> {} train / {} test pairs, discard rate {:.1}%, in {:.1}s",
        data_stats.sets,
        data_stats.train_pairs,
        data_stats.test_pairs,
        100.0 * data_stats.discard_rate,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn write_dataset_atomic(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    write_dataset(pairs, &tmp)?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train-rm
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct RmStats {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub final_train_loss: f64,
    pub overall_accuracy: f64,
    pub baseline_overall_accuracy: f64,
    pub cells: BTreeMap<String, (usize, f64)>,
    pub baseline_cells: BTreeMap<String, (usize, f64)>,
}

fn table_cells(table: &AccuracyTable) -> BTreeMap<String, (usize, f64)> {
    table
        .cells()
        .map(|((t, d), c)| {
            (
                format!("{}/{}", t.name(), d.name()),
                (c.count, c.accuracy()),
            )
        })
        .collect()
}

pub fn cmd_train_rm(ctx: &Ctx) -> Result<()> {
    let train_path = ctx.require("pairs_train.jsonl", "gen-data")?;
    let test_path = ctx.require("pairs_test.jsonl", "gen-data")?;
    let mut manifest = ctx.manifest()?;
    let t0 = Instant::now();
    let cfg = &ctx.cfg;

    let train = read_dataset(&train_path)?;
    let test = read_dataset(&test_path)?;
    if train.is_empty() {
        bail!("training dataset {} is empty", train_path.display());
    }

    let (rm, rm_curve) = train_rm(
        cfg.rm_spec(),
        &cfg.rm.train_config(),
        &train,
        &RngStream::new(cfg.seed, streams::RM),
    )?;
    let (bt, _bt_curve) = train_bt(
        cfg.bt_spec(),
        &cfg.rm.train_config(),
        &train,
        &RngStream::new(cfg.seed, streams::BT),
    )?;

    let rm_table = eval_rm_accuracy(&rm, &test);
    let bt_table = eval_accuracy(&bt, &test);

    let rm_ckpt = ctx.path("rm.ckpt");
    rm.params.save(&rm_ckpt)?;
    let bt_ckpt = ctx.path("bt.ckpt");
    bt.params.save(&bt_ckpt)?;
    let curve_path = ctx.path("rm_curve.csv");
    write_atomic(&curve_path, curve_csv(&rm_curve).as_bytes())?;
    let acc_csv = ctx.path("rm_accuracy.csv");
    write_atomic(&acc_csv, rm_table.to_csv().as_bytes())?;
    let acc_txt = ctx.path("rm_accuracy.txt");
    write_atomic(&acc_txt, rm_table.to_pretty().as_bytes())?;
    let bt_csv = ctx.path("bt_accuracy.csv");
    write_atomic(&bt_csv, bt_table.to_csv().as_bytes())?;

    let stats = RmStats {
        train_pairs: train.len(),
        test_pairs: test.len(),
        final_train_loss: *rm_curve.last().unwrap(),
        overall_accuracy: rm_table.overall().accuracy(),
        baseline_overall_accuracy: bt_table.overall().accuracy(),
        cells: table_cells(&rm_table),
        baseline_cells: table_cells(&bt_table),
    };
    let stats_path = ctx.path("rm_stats.json");
    write_atomic(&stats_path, serde_json::to_string_pretty(&stats)?.as_bytes())?;

    manifest.record_stage(
        &ctx.out,
        "train-rm",
        t0.elapsed().as_secs_f64(),
        &[
            ("checkpoint", rm_ckpt.as_path()),
            ("baseline_checkpoint", bt_ckpt.as_path()),
            ("accuracy_csv", acc_csv.as_path()),
            ("accuracy_table", acc_txt.as_path()),
            ("stats", stats_path.as_path()),
        ],
    )?;
    eprintln!(
        "train-rm: overall accuracy {:.2}% (baseline {:.2}%) on {} held-out pairs in {:.1}s",
        100.0 * stats.overall_accuracy,
        100.0 * stats.baseline_overall_accuracy,
        stats.test_pairs,
        t0.elapsed().as_secs_f64()
    );
    eprint!("{}", rm_table.to_pretty());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-rl
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct RlStats {
    pub dynamic: bool,
    pub resident_param_sets: usize,
    pub iterations: usize,
    /// Per "task/dimension": smoothed reward summary.
    pub reward: BTreeMap<String, RewardSummary>,
    pub gsb_vs_base: BTreeMap<String, GsbRow>,
    pub win_rates_vs_base: BTreeMap<String, f64>,
    pub mean_composite_policy: f64,
    pub mean_composite_base: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardSummary {
    pub points: usize,
    pub initial_smoothed: f64,
    pub final_smoothed: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GsbRow {
    pub good: f64,
    pub same: f64,
    pub bad: f64,
    pub margin: f64,
}

pub fn gsb_rows(report: &GsbReport) -> BTreeMap<String, GsbRow> {
    report
        .per_task
        .iter()
        .map(|(t, c)| {
            let (good, same, bad) = c.fractions();
            (
                t.name().to_string(),
                GsbRow {
                    good,
                    same,
                    bad,
                    margin: c.margin(),
                },
            )
        })
        .collect()
}

pub fn win_rate_rows(report: &GsbReport) -> BTreeMap<String, f64> {
    report
        .win_rates
        .iter()
        .map(|((t, d), wr)| (format!("{}/{}", t.name(), d.name()), wr.rate()))
        .collect()
}

pub fn cmd_train_rl(ctx: &Ctx, dynamic_flag: bool) -> Result<()> {
    let base_path = ctx.require("base.ckpt", "train-base")?;
    let rm_path = ctx.require("rm.ckpt", "train-rm")?;
    let mut manifest = ctx.manifest()?;
    let t0 = Instant::now();
    let cfg = &ctx.cfg;
    let dynamic = dynamic_flag || cfg.rl.dynamic;

    let base = ctx.load_generator(&base_path)?;
    let rm = ctx.load_rm(&rm_path)?;

    let rng = RngStream::new(cfg.seed, streams::RL);
    let outcome: RlOutcome = if dynamic {
        train_rl_dynamic(&base, &rm, &cfg.tasks, &cfg.rl, &rng)?
    } else {
        train_rl(&base, &rm, &cfg.tasks, &cfg.rl, &rng)?
    };

    let policy_path = ctx.path("policy.ckpt");
    outcome.theta.params.save(&policy_path)?;
    let companion_path = if dynamic {
        let p = ctx.path("policy_ref.ckpt");
        outcome.reference.save(&p)?;
        p
    } else {
        let p = ctx.path("policy_ema.ckpt");
        outcome.ema.as_ref().unwrap().save(&p)?;
        p
    };
    let log_path = ctx.path("reward_log.csv");
    write_atomic(&log_path, outcome.log.to_csv().as_bytes())?;
    for snap in &outcome.snapshots {
        snap.theta.save(&ctx.path(&format!("policy_{:06}.ckpt", snap.iteration)))?;
        let tag = if dynamic { "ref" } else { "ema" };
        snap.companion
            .save(&ctx.path(&format!("policy_{tag}_{:06}.ckpt", snap.iteration)))?;
    }

    // Fresh-condition comparison against the frozen base.
    let conds = sample_conditions(
        &cfg.tasks,
        &cfg.tasks.sample_probs,
        cfg.gsb.conditions,
        &RngStream::new(cfg.seed, streams::GSB_CONDS),
    );
    let gsb = gsb_eval(
        &outcome.theta,
        &base,
        &cfg.tasks,
        &conds,
        cfg.gsb.steps,
        cfg.gsb.guidance,
        cfg.gsb.tie_eps,
        &RngStream::new(cfg.seed, streams::GSB_NOISE),
    )?;

    let reward = outcome
        .log
        .summarize(cfg.rl.smooth_window)
        .into_iter()
        .map(|((t, d), s)| {
            (
                format!("{}/{}", t.name(), d.name()),
                RewardSummary {
                    points: s.points,
                    initial_smoothed: s.initial_smoothed,
                    final_smoothed: s.final_smoothed,
                    slope: s.slope,
                },
            )
        })
        .collect();
    let stats = RlStats {
        dynamic,
        resident_param_sets: outcome.resident_param_sets,
        iterations: cfg.rl.iterations,
        reward,
        gsb_vs_base: gsb_rows(&gsb),
        win_rates_vs_base: win_rate_rows(&gsb),
        mean_composite_policy: gsb.mean_composite_a,
        mean_composite_base: gsb.mean_composite_b,
    };
    let stats_path = ctx.path("rl_summary.json");
    write_atomic(&stats_path, serde_json::to_string_pretty(&stats)?.as_bytes())?;

    manifest.record_stage(
        &ctx.out,
        if dynamic { "train-rl-dynamic" } else { "train-rl" },
        t0.elapsed().as_secs_f64(),
        &[
            ("policy", policy_path.as_path()),
            ("companion", companion_path.as_path()),
            ("reward_log", log_path.as_path()),
            ("summary", stats_path.as_path()),
        ],
    )?;
    eprintln!(
        "train-rl{}: {} iterations in {:.1}s; GSB margins vs base: {}",
        if dynamic { " (dynamic)" } else { "" },
        cfg.rl.iterations,
        t0.elapsed().as_secs_f64(),
        stats
            .gsb_vs_base
            .iter()
            .map(|(t, r)| format!("{t} {:+.1}pp", 100.0 * r.margin))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gsb
// ---------------------------------------------------------------------------

pub fn cmd_gsb(ctx: &Ctx, model_a: Option<PathBuf>, model_b: Option<PathBuf>) -> Result<()> {
    let a_path = match model_a {
        Some(p) => p,
        None => ctx.require("policy.ckpt", "train-rl")?,
    };
    let b_path = match model_b {
        Some(p) => p,
        None => ctx.require("base.ckpt", "train-base")?,
    };
    let mut manifest = ctx.manifest()?;
    let t0 = Instant::now();
    let cfg = &ctx.cfg;
    let gen_a = ctx.load_generator(&a_path)?;
    let gen_b = ctx.load_generator(&b_path)?;

    let conds = sample_conditions(
        &cfg.tasks,
        &cfg.tasks.sample_probs,
        cfg.gsb.conditions,
        &RngStream::new(cfg.seed, streams::GSB_CONDS),
    );
    let report = gsb_eval(
        &gen_a,
        &gen_b,
        &cfg.tasks,
        &conds,
        cfg.gsb.steps,
        cfg.gsb.guidance,
        cfg.gsb.tie_eps,
        &RngStream::new(cfg.seed, streams::GSB_NOISE),
    )?;

    let csv_path = ctx.path("gsb.csv");
    write_atomic(&csv_path, report.to_csv().as_bytes())?;
    let json_path = ctx.path("gsb.json");
    let payload = json!({
        "model_a": a_path.display().to_string(),
        "model_b": b_path.display().to_string(),
        "per_task": gsb_rows(&report),
        "win_rates": win_rate_rows(&report),
        "mean_composite_a": report.mean_composite_a,
        "mean_composite_b": report.mean_composite_b,
    });
    write_atomic(&json_path, serde_json::to_string_pretty(&payload)?.as_bytes())?;

    manifest.record_stage(
        &ctx.out,
        "gsb",
        t0.elapsed().as_secs_f64(),
        &[("csv", csv_path.as_path()), ("json", json_path.as_path())],
    )?;
    eprint!("{}", report.to_csv());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn cmd_gradcheck(ctx: &Ctx) -> Result<()> {
    let t0 = Instant::now();
    let checks = gradient_integrity(10, ctx.cfg.seed);
    let mut all_ok = true;
    for c in &checks {
        println!(
            "gradcheck {:<14} points={} max_rel_err={:.3e} tol={:.0e} {}",
            c.op,
            c.points,
            c.max_rel_err,
            c.tolerance,
            if c.passed() { "PASS" } else { "FAIL" }
        );
        all_ok &= c.passed();
    }
    println!("gradcheck finished in {:.2}s", t0.elapsed().as_secs_f64());
    if !all_ok {
        bail!("gradient integrity check failed");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn cmd_report(ctx: &Ctx) -> Result<()> {
    let Some(manifest) = Manifest::load(&ctx.out)? else {
        bail!(
            "no manifest in {}; run at least one pipeline stage first",
            ctx.out.display()
        );
    };

    let mut gaps: Vec<String> = Vec::new();
    let fm: Option<FmStats> = read_json_opt(&ctx.path("fm_stats.json"), "train-base", &mut gaps)?;
    let data: Option<DataStats> = read_json_opt(&ctx.path("data_stats.json"), "gen-data", &mut gaps)?;
    let rm: Option<RmStats> = read_json_opt(&ctx.path("rm_stats.json"), "train-rm", &mut gaps)?;
    let rl: Option<RlStats> = read_json_opt(&ctx.path("rl_summary.json"), "train-rl", &mut gaps)?;

    let report = json!({
        "config_hash": manifest.config_hash,
        "seed": manifest.seed,
        "stages": manifest.stages.keys().collect::<Vec<_>>(),
        "gaps": gaps,
        "flow_matching": fm,
        "dataset": data,
        "reward_model": rm,
        "reinforcement": rl,
    });
    let json_path = ctx.path("report.json");
    write_atomic(&json_path, serde_json::to_string_pretty(&report)?.as_bytes())?;

    let text = render_report(&manifest, &gaps, &report);
    let txt_path = ctx.path("report.txt");
    write_atomic(&txt_path, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn read_json_opt<T: serde::de::DeserializeOwned>(
    path: &Path,
    stage: &str,
    gaps: &mut Vec<String>,
) -> Result<Option<T>> {
    if !path.exists() {
        gaps.push(stage.to_string());
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    Ok(Some(serde_json::from_str(&text).with_context(|| {
        format!("parsing {}", path.display())
    })?))
}

fn render_report(manifest: &Manifest, gaps: &[String], report: &serde_json::Value) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "run {} (seed {})\nstages: {}\n",
        manifest.config_hash,
        manifest.seed,
        manifest.stages.keys().cloned().collect::<Vec<_>>().join(", ")
    ));
    if !gaps.is_empty() {
        out.push_str(&format!("missing stages: {}\n", gaps.join(", ")));
    }
    if let Some(fm) = report.get("flow_matching").filter(|v| !v.is_null()) {
        out.push_str(&format!(
            "\n[flow matching]\n  loss at iter 10: {:.3}   final (mean of last 10): {:.3}   decrease: {:.1}x\n",
            fm["loss_at_10"].as_f64().unwrap_or(f64::NAN),
            fm["final_loss_mean10"].as_f64().unwrap_or(f64::NAN),
            fm["decrease_ratio"].as_f64().unwrap_or(f64::NAN),
        ));
    }
    if let Some(d) = report.get("dataset").filter(|v| !v.is_null()) {
        out.push_str(&format!(
            "\n[dataset]\n  sets: {}   train pairs: {}   test pairs: {}   discard rate: {:.1}%\n",
            d["sets"], d["train_pairs"], d["test_pairs"],
            100.0 * d["discard_rate"].as_f64().unwrap_or(f64::NAN),
        ));
        if let Some(cf) = d["conflict_fraction"].as_object() {
            for (task, frac) in cf {
                out.push_str(&format!(
                    "  alignment/consistency conflicts ({task}): {:.1}%\n",
                    100.0 * frac.as_f64().unwrap_or(f64::NAN)
                ));
            }
        }
    }
    if let Some(rm) = report.get("reward_model").filter(|v| !v.is_null()) {
        out.push_str(&format!(
            "\n[reward model]\n  overall accuracy: {:.2}%   scalar baseline: {:.2}%\n",
            100.0 * rm["overall_accuracy"].as_f64().unwrap_or(f64::NAN),
            100.0 * rm["baseline_overall_accuracy"].as_f64().unwrap_or(f64::NAN),
        ));
        out.push_str(&accuracy_grid(rm["cells"].as_object()));
    }
    if let Some(rl) = report.get("reinforcement").filter(|v| !v.is_null()) {
        out.push_str(&format!(
            "\n[reinforcement]\n  dynamic: {}   resident parameter sets: {}\n",
            rl["dynamic"], rl["resident_param_sets"]
        ));
        if let Some(rewards) = rl["reward"].as_object() {
            for (key, s) in rewards {
                out.push_str(&format!(
                    "  {key}: p_yes {:.3} -> {:.3} (slope {:+.2e})\n",
                    s["initial_smoothed"].as_f64().unwrap_or(f64::NAN),
                    s["final_smoothed"].as_f64().unwrap_or(f64::NAN),
                    s["slope"].as_f64().unwrap_or(f64::NAN),
                ));
            }
        }
        if let Some(gsb) = rl["gsb_vs_base"].as_object() {
            for (task, row) in gsb {
                out.push_str(&format!(
                    "  GSB vs base ({task}): good {:.1}% same {:.1}% bad {:.1}% (margin {:+.1}pp)\n",
                    100.0 * row["good"].as_f64().unwrap_or(f64::NAN),
                    100.0 * row["same"].as_f64().unwrap_or(f64::NAN),
                    100.0 * row["bad"].as_f64().unwrap_or(f64::NAN),
                    100.0 * row["margin"].as_f64().unwrap_or(f64::NAN),
                ));
            }
        }
        if let Some(wr) = rl["win_rates_vs_base"].as_object() {
            let rates: Vec<String> = wr
                .iter()
                .map(|(k, v)| format!("{k} {:.1}%", 100.0 * v.as_f64().unwrap_or(f64::NAN)))
                .collect();
            out.push_str(&format!("  oracle win rates vs base: {}\n", rates.join(", ")));
        }
    }
    out
}

fn accuracy_grid(cells: Option<&serde_json::Map<String, serde_json::Value>>) -> String {
    let Some(cells) = cells else {
        return String::new();
    };
    let mut out = String::new();
    out.push_str(&format!("  {:<10}", ""));
    for dim in ALL_DIMENSIONS {
        out.push_str(&format!("{:>16}", dim.name()));
    }
    out.push('\n');
    for task in ALL_TASKS {
        out.push_str(&format!("  {:<10}", task.name()));
        for dim in ALL_DIMENSIONS {
            let key = format!("{}/{}", task.name(), dim.name());
            match cells.get(&key) {
                Some(v) => {
                    let acc = v[1].as_f64().unwrap_or(f64::NAN);
                    out.push_str(&format!("{:>16}", format!("{:.2}", 100.0 * acc)));
                }
                None => out.push_str(&format!("{:>16}", "--")),
            }
        }
        out.push('\n');
    }
    out
}

