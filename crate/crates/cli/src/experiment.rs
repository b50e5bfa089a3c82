//! Train-then-evaluate runs and the variant x ego-conditioning ablation.

use std::collections::BTreeMap;
use std::io::Write;

use jointcvae::analysis::{default_edges, error_vs_proximity, tag_interactions, Curve, InteractionThresholds};
use jointcvae::inference::{predict_all, PredictionSet};
use jointcvae::metrics::{evaluate, AgentMetrics, HorizonMetrics, MetricReport};
use jointcvae::model::{Model, Variant};
use jointcvae::scene::{Scene, SplitDataset};
use jointcvae::synthgen::{generate, GenConfig, InteractionMode};
use jointcvae::training::{train, TrainConfig, TrainLog};

use crate::config::{EvalConfig, RunConfig};
use crate::CliError;

pub struct RunResult {
    pub model: Model,
    pub log: TrainLog,
    pub predictions: Vec<PredictionSet>,
    pub report: MetricReport,
}

/// Trains on `data.train`, samples the evaluation split and scores it.
pub fn train_and_evaluate(data: &SplitDataset, train_cfg: &TrainConfig, eval: &EvalConfig) -> Result<RunResult, CliError> {
    let out = train(data, train_cfg)?;
    let scenes = data.split(eval.split);
    let predictions = predict_all(scenes, &out.model, eval.n_samples, train_cfg.seed)?;
    let report = evaluate(scenes, &predictions, &eval.horizons)?;
    Ok(RunResult { model: out.model, log: out.log, predictions, report })
}

/// One trained configuration of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub mode: InteractionMode,
    pub variant: Variant,
    pub ego: bool,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}/{}/ego={}", self.mode, self.variant, if self.ego { "on" } else { "off" })
    }
}

/// The full grid: every variant with and without ego-conditioning on both corpora.
pub fn full_grid() -> Vec<Cell> {
    let mut cells = Vec::new();
    for mode in [InteractionMode::Dense, InteractionMode::Sparse] {
        for variant in Variant::ALL {
            for ego in [true, false] {
                cells.push(Cell { mode, variant, ego });
            }
        }
    }
    cells
}

pub struct CellResult {
    pub cell: Cell,
    /// one report per seed, in seed order
    pub reports: Vec<MetricReport>,
    /// error by closest approach at the last horizon, pooled over seeds
    pub proximity: Curve,
}

impl CellResult {
    /// Seed-averaged metrics per horizon.
    pub fn mean(&self) -> Vec<HorizonMetrics> {
        let n = self.reports.len() as f64;
        let mut out = self.reports[0].horizons.clone();
        for (k, h) in out.iter_mut().enumerate() {
            h.fde = self.reports.iter().map(|r| r.horizons[k].fde).sum::<f64>() / n;
            h.ade = self.reports.iter().map(|r| r.horizons[k].ade).sum::<f64>() / n;
            h.kde_nll = self.reports.iter().map(|r| r.horizons[k].kde_nll).sum::<f64>() / n;
        }
        out
    }

    /// Seed-averaged FDE at the last horizon.
    pub fn final_fde(&self) -> f64 {
        self.mean().last().map(|h| h.fde).unwrap_or(f64::NAN)
    }
}

pub fn corpus_config(base: &GenConfig, mode: InteractionMode, n_scenes: usize, seed: u64) -> GenConfig {
    GenConfig { mode, n_scenes, seed, ..base.clone() }
}

/// Runs every cell for every seed. Corpora are generated once per (mode, seed)
/// and shared by the cells that use them.
pub fn run_grid(cfg: &RunConfig, cells: &[Cell], mut progress: impl FnMut(&str)) -> Result<Vec<CellResult>, CliError> {
    let mut corpora: BTreeMap<(u8, u64), SplitDataset> = BTreeMap::new();
    let mut results = Vec::new();
    let last = cfg.eval.horizons.len() - 1;
    for &cell in cells {
        let mut reports = Vec::new();
        let mut records: Vec<AgentMetrics> = Vec::new();
        let mut tags = Vec::new();
        for &seed in &cfg.reproduce.seeds {
            let key = (cell.mode as u8, seed);
            if !corpora.contains_key(&key) {
                let n = match cell.mode {
                    InteractionMode::Dense => cfg.reproduce.dense_scenes,
                    InteractionMode::Sparse => cfg.reproduce.sparse_scenes,
                };
                let gen = corpus_config(&cfg.gen, cell.mode, n, seed);
                let data = generate(&gen).map_err(|e| CliError::Config(e.to_string()))?.data;
                corpora.insert(key, data);
            }
            let data = &corpora[&key];
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            train_cfg.model.variant = cell.variant;
            train_cfg.model.ego_conditioning = cell.ego;
            progress(&format!("{} seed {seed}", cell.label()));
            let run = train_and_evaluate(data, &train_cfg, &cfg.eval)?;
            let scenes: &[Scene] = data.split(cfg.eval.split);
            tags.extend(tag_interactions(scenes, &InteractionThresholds::default()));
            records.extend(run.report.agents.iter().cloned());
            reports.push(run.report);
        }
        let proximity = error_vs_proximity(&records, &tags, &default_edges(), last);
        results.push(CellResult { cell, reports, proximity });
    }
    Ok(results)
}

fn find(results: &[CellResult], mode: InteractionMode, variant: Variant, ego: bool) -> Option<&CellResult> {
    results.iter().find(|r| r.cell == Cell { mode, variant, ego })
}

/// Ablation table: one row per (variant, ego-conditioning), dense and sparse
/// columns at the last horizon.
pub fn write_table(results: &[CellResult], horizon: f64, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "best-of-N metrics at t+{horizon} s, mean over seeds")?;
    writeln!(
        w,
        "{:<16} {:>4} {:>4} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "variant", "P-P", "P-V", "dense_ade", "dense_fde", "dense_nll", "sparse_ade", "sparse_fde", "sparse_nll"
    )?;
    let mark = |b: bool| if b { "yes" } else { "no" };
    let cols = |r: Option<&CellResult>| match r.and_then(|r| r.mean().last().cloned()) {
        Some(h) => [format!("{:.3}", h.ade), format!("{:.3}", h.fde), format!("{:.3}", h.kde_nll)],
        None => ["-".to_string(), "-".to_string(), "-".to_string()],
    };
    for variant in Variant::ALL {
        for ego in [false, true] {
            let dense = find(results, InteractionMode::Dense, variant, ego);
            let sparse = find(results, InteractionMode::Sparse, variant, ego);
            if dense.is_none() && sparse.is_none() {
                continue;
            }
            let [da, df, dk] = cols(dense);
            let [sa, sf, sk] = cols(sparse);
            writeln!(
                w,
                "{:<16} {:>4} {:>4} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
                variant.as_str(),
                mark(variant.uses_attention()),
                mark(ego),
                da,
                df,
                dk,
                sa,
                sf,
                sk
            )?;
        }
    }
    Ok(())
}

/// Long-form CSV: one line per cell, seed and horizon.
pub fn write_runs_csv(results: &[CellResult], seeds: &[u64], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "corpus,variant,ego_conditioning,seed,horizon,fde,ade,kde_nll,n_agents")?;
    for r in results {
        for (report, seed) in r.reports.iter().zip(seeds) {
            for h in &report.horizons {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    r.cell.mode,
                    r.cell.variant,
                    r.cell.ego,
                    seed,
                    h.horizon,
                    h.fde,
                    h.ade,
                    h.kde_nll,
                    report.n_agents
                )?;
            }
        }
    }
    Ok(())
}

/// Error-by-proximity curves of every cell, one line per occupied bin.
pub fn write_proximity_csv(results: &[CellResult], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "corpus,variant,ego_conditioning,bin_low,bin_high,fde,count")?;
    for r in results {
        for b in r.proximity.occupied() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.cell.mode,
                r.cell.variant,
                r.cell.ego,
                b.low,
                b.high,
                b.value.unwrap_or(f64::NAN),
                b.count
            )?;
        }
    }
    Ok(())
}
