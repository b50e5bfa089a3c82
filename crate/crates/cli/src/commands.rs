//! One function per subcommand. Each writes under `config.out` and echoes the
//! effective configuration to `config.txt` there.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use jointcvae::analysis::{
    accel_vs_distance, closest_approach_cdf, default_edges, error_vs_proximity, tag_interactions, InteractionThresholds,
};
use jointcvae::inference::{load_predictions, predict_all, save_predictions};
use jointcvae::metrics::{evaluate, MetricReport};
use jointcvae::model::Model;
use jointcvae::scene::{load_scenes, save_scenes, SplitDataset};
use jointcvae::synthgen::{generate, save_decisions};
use jointcvae::training::{train, TrainError};

use crate::config::RunConfig;
use crate::experiment::{full_grid, run_grid, write_proximity_csv, write_runs_csv, write_table};
use crate::CliError;

fn prepare_out(config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&config.out).map_err(|e| CliError::io("cannot create", &config.out, e))?;
    write_file(&config.out.join("config.txt"), |w| w.write_all(config.echo().as_bytes()))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::io("cannot create", path, e))?;
    let mut w = BufWriter::new(f);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io("cannot write", path, e))
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("missing {what} file {}", path.display())))
    }
}

fn read_scenes(config: &RunConfig) -> Result<SplitDataset, CliError> {
    let path = config.scenes_path();
    require(&path, "scenes")?;
    Ok(load_scenes(&path)?)
}

/// Writes `scenes.jsonl` and the `decisions.csv` sidecar.
pub fn generate_cmd(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    prepare_out(config)?;
    let corpus = generate(&config.gen).map_err(|e| CliError::Config(e.to_string()))?;
    let scenes = config.out.join("scenes.jsonl");
    let decisions = config.out.join("decisions.csv");
    save_scenes(&corpus.data, &scenes).map_err(|e| CliError::io("cannot write", &scenes, e))?;
    save_decisions(&corpus.decisions, &decisions).map_err(|e| CliError::io("cannot write", &decisions, e))?;
    Ok(vec![scenes, decisions])
}

/// Writes the best-validation checkpoint and the training logs.
pub fn train_cmd(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let data = read_scenes(config)?;
    prepare_out(config)?;
    let ckpt = config.out.join("model.ckpt");
    let out = match train(&data, &config.train) {
        Ok(out) => out,
        Err(TrainError::Diverged { step, loss, last_good }) => {
            let path = config.out.join("last_good.ckpt");
            last_good.save(&path).map_err(|e| CliError::io("cannot write", &path, e))?;
            return Err(CliError::Numeric(format!(
                "training diverged at step {step} (loss {loss}); last good checkpoint in {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    out.model.save(&ckpt).map_err(|e| CliError::io("cannot write", &ckpt, e))?;
    let log = config.out.join("train_log.csv");
    let evals = config.out.join("eval_log.csv");
    write_file(&log, |w| out.log.write_csv(w))?;
    write_file(&evals, |w| out.log.write_eval_csv(w))?;
    Ok(vec![ckpt, log, evals])
}

/// Samples `eval.n_samples` joint futures for every scene of `eval.split`.
pub fn predict_cmd(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let data = read_scenes(config)?;
    let ckpt = config.checkpoint_path();
    require(&ckpt, "checkpoint")?;
    let model = Model::load(&ckpt)?;
    prepare_out(config)?;
    let sets = predict_all(data.split(config.eval.split), &model, config.eval.n_samples, config.seed)?;
    let path = config.out.join("predictions.jsonl");
    save_predictions(&sets, &path).map_err(|e| CliError::io("cannot write", &path, e))?;
    Ok(vec![path])
}

fn report_of(config: &RunConfig, data: &SplitDataset) -> Result<MetricReport, CliError> {
    let path = config.predictions_path();
    require(&path, "predictions")?;
    let preds = load_predictions(&path)?;
    Ok(evaluate(data.split(config.eval.split), &preds, &config.eval.horizons)?)
}

/// Scores predictions against the ground truth of `eval.split`.
pub fn evaluate_cmd(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let data = read_scenes(config)?;
    let report = report_of(config, &data)?;
    prepare_out(config)?;
    let table = config.out.join("metrics.txt");
    let csv = config.out.join("metrics.csv");
    let agents = config.out.join("agent_metrics.csv");
    let variant = config.train.model.variant.to_string();
    let flag = if config.train.model.ego_conditioning { "ego" } else { "no_ego" };
    write_file(&table, |w| report.write_table(w, &variant))?;
    write_file(&csv, |w| {
        MetricReport::write_csv_header(&mut *w)?;
        report.write_csv_rows(w, &variant, flag)
    })?;
    write_file(&agents, |w| report.write_agents_csv(w))?;
    Ok(vec![table, csv, agents])
}

/// Interaction diagnostics of the scene file; adds the error-by-proximity
/// curve when a prediction file is present.
pub fn stats_cmd(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let data = read_scenes(config)?;
    prepare_out(config)?;
    let scenes: Vec<_> = data.iter().map(|(_, s)| s.clone()).collect();
    let edges = default_edges();
    let th = InteractionThresholds::default();
    let cdf = config.out.join("closest_approach_cdf.csv");
    let accel = config.out.join("accel_vs_distance.csv");
    let tags_path = config.out.join("interaction_tags.csv");
    write_file(&cdf, |w| closest_approach_cdf(&scenes).to_curve(&edges).write_csv(w))?;
    write_file(&accel, |w| accel_vs_distance(&scenes, &edges).write_csv(w))?;
    let tags = tag_interactions(&scenes, &th);
    write_file(&tags_path, |w| {
        writeln!(w, "scene_id,agent_id,interacting,closest_approach,max_accel_near")?;
        for t in &tags {
            writeln!(w, "{},{},{},{},{}", t.scene_id, t.agent_id, t.interacting, t.closest_approach, t.max_accel_near)?;
        }
        Ok(())
    })?;
    let mut written = vec![cdf, accel, tags_path];
    if config.predictions_path().is_file() {
        let report = report_of(config, &data)?;
        let path = config.out.join("error_vs_proximity.csv");
        let last = config.eval.horizons.len() - 1;
        write_file(&path, |w| error_vs_proximity(&report.agents, &tags, &edges, last).write_csv(w))?;
        written.push(path);
    }
    Ok(written)
}

/// Dense and sparse corpora, every variant with and without ego-conditioning,
/// averaged over `reproduce.seeds`.
pub fn reproduce_cmd(config: &RunConfig, mut progress: impl FnMut(&str)) -> Result<Vec<PathBuf>, CliError> {
    prepare_out(config)?;
    let results = run_grid(config, &full_grid(), &mut progress)?;
    let horizon = *config.eval.horizons.last().expect("validated non-empty");
    let table = config.out.join("ablation.txt");
    let runs = config.out.join("ablation_runs.csv");
    let prox = config.out.join("error_vs_proximity.csv");
    write_file(&table, |w| write_table(&results, horizon, w))?;
    write_file(&runs, |w| write_runs_csv(&results, &config.reproduce.seeds, w))?;
    write_file(&prox, |w| write_proximity_csv(&results, w))?;
    Ok(vec![table, runs, prox])
}
