mod common;

use std::fs;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simmatch_cli::{ablation_configs, ABLATION_NAMES};
use simmatch_core::config::RunConfig;

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("nope.cfg");
    let out = simmatch(&["train", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope.cfg"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", &format!("{TINY_CONFIG}lambda_xyz = 1\n"));
    let out = simmatch(&["train", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lambda_xyz"), "{}", stderr(&out));
}

#[test]
fn out_of_range_value_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY_CONFIG.replace("topn = 4", "topn = 0");
    let cfg = write(dir.path(), "bad.cfg", &text);
    let out = simmatch(&["train", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("topn"), "{}", stderr(&out));
}

#[test]
fn train_writes_all_outputs_and_echoes_the_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY_CONFIG);
    let run = dir.path().join("run");
    let out = simmatch(&[
        "train",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&run),
        "--seed",
        "11",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["metrics.jsonl", "config.resolved", "checkpoint.ckpt", "summary.json"] {
        assert!(run.join(name).is_file(), "missing {name}");
    }
    let resolved = fs::read_to_string(run.join("config.resolved")).unwrap();
    assert!(resolved.lines().any(|l| l.trim() == "seed = 11"), "{resolved}");
    let reparsed = RunConfig::parse(&resolved).unwrap();
    assert_eq!(reparsed.train.seed, 11);
    assert_eq!(reparsed.train.total_steps, 20);

    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 20);
    assert_eq!(summary["seed"], 11);
}

#[test]
fn eval_reports_the_accuracy_of_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY_CONFIG);
    let run = dir.path().join("run");
    assert!(simmatch(&["train", "--config", path_str(&cfg), "--out", path_str(&run)]).status.success());
    let data = dir.path().join("moons.csv");
    let gen = simmatch(&["gen", "--dataset", "two-moons", "--out", path_str(&data), "--n", "100", "--seed", "5"]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let out = simmatch(&[
        "eval",
        "--checkpoint",
        path_str(&run.join("checkpoint.ckpt")),
        "--data",
        path_str(&data),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let acc: f64 = text.trim().strip_prefix("accuracy=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn gen_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("blobs.csv");
    let out = simmatch(&["gen", "--dataset", "blobs", "--out", path_str(&p), "--n", "90", "--classes", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ds = simmatch_core::data::load_csv(&p).unwrap();
    assert_eq!(ds.len(), 90);
    assert_eq!(ds.classes, 3);
    assert_eq!(ds.class_counts(), vec![30, 30, 30]);
}

#[test]
fn ablation_configs_differ_only_in_toggles() {
    let base = RunConfig::parse(TINY_CONFIG).unwrap();
    let configs = ablation_configs(&base);
    assert_eq!(configs.len(), 5);
    for (i, (name, cfg)) in configs.iter().enumerate() {
        assert_eq!(*name, ABLATION_NAMES[i]);
        let mut normalized = cfg.clone();
        normalized.train.toggles = base.train.toggles;
        normalized.train.feature_norm = base.train.feature_norm;
        assert_eq!(normalized, base, "{name} changes more than toggles");
    }
    let t: Vec<_> = configs.iter().map(|(_, c)| (c.train.toggles, c.train.feature_norm)).collect();
    assert!(t.windows(2).all(|w| w[0] != w[1]));
    assert!(!t[0].1 && !t[3].1 && t[4].1);
    assert!(t[0].0.node_node && !t[0].0.node_edge && !t[0].0.edge_edge && !t[0].0.edge_node);
}

#[test]
fn ablate_writes_one_row_per_run_and_a_median_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY_CONFIG);
    let out_dir = dir.path().join("abl");
    let out = simmatch(&["ablate", "--config", path_str(&cfg), "--out", path_str(&out_dir), "--seeds", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["config", "seed", "final_accuracy"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.iter().filter(|r| &r[1] == "median").count(), 5);
    for r in &rows {
        let acc: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    for name in ABLATION_NAMES {
        let text = fs::read_to_string(out_dir.join("configs").join(format!("{name}.resolved"))).unwrap();
        RunConfig::parse(&text).unwrap();
    }
}

#[test]
fn propagate_two_node_example() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.csv", "0,1\n1,0\n");
    let y = write(dir.path(), "y.csv", "1,0\n0,1\n");
    let out = simmatch(&["propagate", "--affinity", path_str(&a), "--labels", path_str(&y), "--alpha", "0.5", "--closed"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m = parse_matrix(&stdout(&out));
    let expected = [[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((m[i][j] - expected[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn propagate_with_zero_alpha_echoes_the_labels() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.csv", "0,0.25,0.75\n0.5,0,0.5\n1,0,0\n");
    let y = write(dir.path(), "y.csv", "0.2,0.8\n1,0\n0.5,0.5\n");
    for mode in [&["--closed"][..], &["--iters", "7"][..]] {
        let mut args = vec!["propagate", "--affinity", path_str(&a), "--labels", path_str(&y), "--alpha", "0"];
        args.extend_from_slice(mode);
        let out = simmatch(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        assert_eq!(parse_matrix(&stdout(&out)), vec![vec![0.2, 0.8], vec![1.0, 0.0], vec![0.5, 0.5]]);
    }
}

#[test]
fn propagate_iterative_reaches_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 6;
    let mut a = String::new();
    let mut y = String::new();
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| if i == j { 0.0 } else { rng.random_range(0.1..1.0) }).collect();
        let s: f64 = row.iter().sum();
        let cells: Vec<String> = row.iter().map(|v| (v / s).to_string()).collect();
        a.push_str(&cells.join(","));
        a.push('\n');
        let c = i % 3;
        let label: Vec<&str> = (0..3).map(|k| if k == c { "1" } else { "0" }).collect();
        y.push_str(&label.join(","));
        y.push('\n');
    }
    let a = write(dir.path(), "a.csv", &a);
    let y = write(dir.path(), "y.csv", &y);
    let base = ["propagate", "--affinity", path_str(&a), "--labels", path_str(&y), "--alpha", "0.5"];
    let closed = simmatch(&[&base[..], &["--closed"]].concat());
    let iter = simmatch(&[&base[..], &["--iters", "1000"]].concat());
    assert!(closed.status.success() && iter.status.success(), "{}{}", stderr(&closed), stderr(&iter));
    let (c, it) = (parse_matrix(&stdout(&closed)), parse_matrix(&stdout(&iter)));
    for (rc, ri) in c.iter().zip(&it) {
        for (u, v) in rc.iter().zip(ri) {
            assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
    }
}

#[test]
fn propagate_rejects_invalid_affinities_naming_the_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let y = write(dir.path(), "y.csv", "1,0\n0,1\n");
    let cases = [
        ("0,1,0\n1,0,0\n", "square"),
        ("0,1.5\n1,0\n", "row-stochastic"),
        ("0.5,0.5\n1,0\n", "hollow"),
        ("0,1\n-1,2\n", "non-negative"),
    ];
    for (k, (matrix, invariant)) in cases.iter().enumerate() {
        let a = write(dir.path(), &format!("a{k}.csv"), matrix);
        let out = simmatch(&["propagate", "--affinity", path_str(&a), "--labels", path_str(&y), "--alpha", "0.5", "--closed"]);
        assert_eq!(out.status.code(), Some(2), "{matrix}");
        assert!(stderr(&out).contains(invariant), "{}", stderr(&out));
    }
}

#[test]
fn propagate_renormalizes_rows_within_tolerance_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.csv", "0,1.0000001\n1,0\n");
    let y = write(dir.path(), "y.csv", "1,0\n0,1\n");
    let out = simmatch(&["propagate", "--affinity", path_str(&a), "--labels", path_str(&y), "--alpha", "0.5", "--closed"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("warning"));
}

#[test]
fn plot_rejects_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.jsonl", "");
    let out = simmatch(&["plot", "--metrics", path_str(&empty), "--out", path_str(&dir.path().join("p.svg"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no records"));
}

#[test]
fn plot_draws_one_legend_entry_per_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY_CONFIG);
    let mut metrics = Vec::new();
    for seed in ["1", "2"] {
        let run = dir.path().join(format!("run{seed}"));
        let out = simmatch(&["train", "--config", path_str(&cfg), "--out", path_str(&run), "--seed", seed]);
        assert!(out.status.success(), "{}", stderr(&out));
        metrics.push(run.join("metrics.jsonl"));
    }
    let svg_path = dir.path().join("curves.svg");
    let out = simmatch(&[
        "plot",
        "--metrics",
        path_str(&metrics[0]),
        path_str(&metrics[1]),
        "--out",
        path_str(&svg_path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let entries = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("legend-entry"))
        .count();
    assert_eq!(entries, 2);

    let boundary = dir.path().join("boundary.svg");
    let data = dir.path().join("moons.csv");
    assert!(simmatch(&["gen", "--dataset", "two-moons", "--out", path_str(&data), "--n", "60"]).status.success());
    let out = simmatch(&[
        "plot",
        "--kind",
        "boundary",
        "--checkpoint",
        path_str(&dir.path().join("run1").join("checkpoint.ckpt")),
        "--data",
        path_str(&data),
        "--out",
        path_str(&boundary),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    roxmltree::Document::parse(&fs::read_to_string(&boundary).unwrap()).unwrap();
}

#[test]
fn boundary_plot_needs_two_dimensional_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY_CONFIG);
    let run = dir.path().join("run");
    assert!(simmatch(&["train", "--config", path_str(&cfg), "--out", path_str(&run)]).status.success());
    let data = write(dir.path(), "d3.csv", "x0,x1,x2,label\n0,0,0,0\n1,1,1,1\n");
    let out = simmatch(&[
        "plot",
        "--kind",
        "boundary",
        "--checkpoint",
        path_str(&run.join("checkpoint.ckpt")),
        "--data",
        path_str(&data),
        "--out",
        path_str(&dir.path().join("b.svg")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
