use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use simmatch_core::checkpoint::{self, NamedArrays};
use simmatch_core::config::RunConfig;
use simmatch_core::data::{self, Dataset, LabeledSet};
use simmatch_core::graph::{propagate_closed, propagate_iterative};
use simmatch_core::trainer::{self, run_training, RunOptions, Toggles};
use simmatch_core::{AffinityMatrix, Error, ModelParams, Tensor};

use crate::{io_error, CliError, CliResult, GenDataset};

/// Row sums further than this from one are rejected rather than renormalized.
const RENORMALIZE_LIMIT: f64 = 1e-6;

pub const ABLATION_NAMES: [&str; 5] = ["nn", "nn+ne", "nn+ne+ee", "nn+ne+ee+en", "nn+ne+ee+en+feat_norm"];

pub(crate) fn load_config(path: &Path) -> CliResult<RunConfig> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => CliError::usage(format!("cannot read config: {e}")),
        other => other.into(),
    })
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub(crate) fn train(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    create_dir(out)?;
    write_file(&out.join("config.resolved"), &cfg.to_text())?;
    let split = cfg.dataset.split(cfg.train.seed)?;
    let metrics = out.join("metrics.jsonl");
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| io_error(&metrics, e))?;
    }
    let outcome = run_training(
        cfg.train.clone(),
        &split,
        &RunOptions {
            metrics_path: Some(metrics),
            checkpoint_path: Some(out.join("checkpoint.ckpt")),
            ..RunOptions::default()
        },
    )?;
    let summary = serde_json::to_string_pretty(&outcome.summary).map_err(CliError::runtime)?;
    write_file(&out.join("summary.json"), &(summary + "\n"))?;
    println!(
        "steps={} final_accuracy={:.4} mean_norm_gap={:.4}",
        outcome.summary.steps, outcome.summary.final_accuracy, outcome.summary.mean_norm_gap
    );
    Ok(())
}

/// EMA weights and the feature-normalization flag stored in a checkpoint.
pub(crate) fn load_model(path: &Path) -> CliResult<(ModelParams, bool)> {
    let arrays = NamedArrays::load(path)?;
    let params = checkpoint::read_params(&arrays, "ema")?;
    let feature_norm = arrays.scalar("config.feature_norm")? != 0.0;
    Ok((params, feature_norm))
}

pub(crate) fn labeled_rows(dataset: &Dataset) -> LabeledSet {
    let indices: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i].is_some()).collect();
    LabeledSet {
        features: dataset.features.select_rows(&indices),
        labels: indices.iter().map(|&i| dataset.labels[i].expect("filtered")).collect(),
        indices,
    }
}

pub(crate) fn eval(checkpoint: &Path, data_path: &Path) -> CliResult<()> {
    let (params, feature_norm) = load_model(checkpoint)?;
    let dataset = data::load_csv(data_path).map_err(|e| match e {
        Error::Io { .. } | Error::Validation(_) => CliError::usage(e),
        other => other.into(),
    })?;
    let accuracy = trainer::evaluate(&params, feature_norm, &labeled_rows(&dataset))?;
    println!("accuracy={accuracy:.6}");
    Ok(())
}

/// The five cumulative configurations of the component study, all built on
/// `base` and differing only in toggles.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let toggles = [
        Toggles {
            node_node: true,
            ..Toggles::NONE
        },
        Toggles {
            node_node: true,
            node_edge: true,
            ..Toggles::NONE
        },
        Toggles {
            edge_node: false,
            ..Toggles::ALL
        },
        Toggles::ALL,
        Toggles::ALL,
    ];
    ABLATION_NAMES
        .iter()
        .zip(toggles)
        .enumerate()
        .map(|(i, (&name, t))| {
            let mut cfg = base.clone();
            cfg.train.toggles = t;
            cfg.train.feature_norm = i == 4;
            (name, cfg)
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub(crate) fn ablate(config: &Path, out: &Path, seeds: u64) -> CliResult<()> {
    if seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let base = load_config(config)?;
    let configs = ablation_configs(&base);
    let config_dir = out.join("configs");
    create_dir(&config_dir)?;
    for (name, cfg) in &configs {
        write_file(&config_dir.join(format!("{name}.resolved")), &cfg.to_text())?;
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| (0..seeds).map(move |k| (c, base.train.seed + k)))
        .collect();
    let results: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, seed)| -> CliResult<f64> {
            let mut cfg = configs[c].1.clone();
            cfg.train.seed = seed;
            let split = cfg.dataset.split(seed)?;
            let outcome = run_training(cfg.train, &split, &RunOptions::default())?;
            Ok(outcome.summary.final_accuracy)
        })
        .collect::<CliResult<_>>()?;

    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
    let mut write = |row: [String; 3]| w.write_record(&row).map_err(|e| io_error(&path, e));
    write(["config".into(), "seed".into(), "final_accuracy".into()])?;
    for (&(c, seed), acc) in jobs.iter().zip(&results) {
        write([configs[c].0.into(), seed.to_string(), acc.to_string()])?;
    }
    for (c, (name, _)) in configs.iter().enumerate() {
        let mut accs: Vec<f64> = jobs
            .iter()
            .zip(&results)
            .filter(|((jc, _), _)| *jc == c)
            .map(|(_, a)| *a)
            .collect();
        let m = median(&mut accs);
        println!("{name}: median final_accuracy {m:.4}");
        write([(*name).into(), "median".into(), m.to_string()])?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    Ok(())
}

fn read_matrix(path: &Path) -> CliResult<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::usage(format!("{}: line {}: invalid number `{f}`", path.display(), i + 1)))
            })
            .collect::<CliResult<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::usage(format!("{}: no rows", path.display())));
    }
    Tensor::from_rows(&rows).map_err(|_| CliError::usage(format!("{}: rows have different lengths", path.display())))
}

/// Checks squareness, non-negativity, hollowness and row sums; rows off by
/// less than [`RENORMALIZE_LIMIT`] are renormalized with a warning.
pub(crate) fn validate_affinity(mut a: Tensor) -> CliResult<AffinityMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(CliError::usage(format!("affinity is not square: {}x{}", n, a.cols())));
    }
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v < 0.0 {
                return Err(CliError::usage(format!("affinity is not non-negative: entry ({i}, {j}) is {v}")));
            }
            if i == j && v != 0.0 {
                return Err(CliError::usage(format!("affinity is not hollow: diagonal entry ({i}, {i}) is {v}")));
            }
        }
    }
    for i in 0..n {
        let s: f64 = a.row_slice(i).iter().sum();
        let drift = (s - 1.0).abs();
        if drift >= RENORMALIZE_LIMIT {
            return Err(CliError::usage(format!("affinity is not row-stochastic: row {i} sums to {s}")));
        }
        if drift > AffinityMatrix::ROW_TOL {
            eprintln!("warning: affinity row {i} sums to {s}; renormalized");
            a.row_slice_mut(i).iter_mut().for_each(|v| *v /= s);
        }
    }
    AffinityMatrix::new(a).map_err(CliError::usage)
}

fn validate_labels(y: &Tensor, n: usize) -> CliResult<()> {
    if y.rows() != n {
        return Err(CliError::usage(format!("labels have {} rows but the affinity has {n}", y.rows())));
    }
    for (i, row) in y.row_iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|v| *v < 0.0) || (s - 1.0).abs() >= RENORMALIZE_LIMIT {
            return Err(CliError::usage(format!("labels row {i} is not a probability distribution")));
        }
    }
    Ok(())
}

pub(crate) fn propagate(
    affinity: &Path,
    labels: &Path,
    alpha: f64,
    iters: Option<usize>,
    closed: bool,
) -> CliResult<()> {
    if iters.is_none() && !closed {
        return Err(CliError::usage("choose --iters N or --closed"));
    }
    let a = validate_affinity(read_matrix(affinity)?)?;
    let y0 = read_matrix(labels)?;
    validate_labels(&y0, a.size())?;
    let upper_ok = if closed { alpha < 1.0 } else { alpha <= 1.0 };
    if !(alpha >= 0.0 && upper_ok) {
        return Err(CliError::usage(format!("alpha {alpha} is out of range")));
    }
    let y = if alpha == 0.0 {
        y0
    } else if closed {
        propagate_closed(&a, &y0, alpha)?
    } else {
        let n = iters.expect("checked above");
        if n == 0 {
            return Err(CliError::usage("--iters must be at least 1"));
        }
        propagate_iterative(&a, &y0, alpha, n)?
    };
    let mut stdout = std::io::stdout().lock();
    for row in y.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(stdout, "{}", line.join(",")).map_err(CliError::runtime)?;
    }
    Ok(())
}

pub(crate) fn gen(dataset: GenDataset, out: &Path, n: usize, noise: f64, classes: usize, seed: u64) -> CliResult<()> {
    let data = match dataset {
        GenDataset::TwoMoons => data::gen_two_moons(n, noise, seed),
        GenDataset::Circles => data::gen_circles(n, noise, seed),
        GenDataset::Blobs => data::gen_blobs(n, classes, noise, seed),
    }
    .map_err(CliError::usage)?;
    data::save_csv(&data, out)?;
    Ok(())
}
