use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sfda_core::data::{gen_two_moons, load_csv, TARGET_SEED_OFFSET};
use sfda_core::diagnostics::{bound_rhs, empirical_smoothness, BoundParameters};
use sfda_core::engine::evaluate;
use sfda_core::model::EncoderClassifier;
use sfda_core::Tensor;

const SMALL: &[&str] = &[
    "--n",
    "200",
    "--source-epochs",
    "6",
    "--adapt-epochs",
    "3",
    "--hidden-dims",
    "16,16",
    "--bottleneck-dim",
    "8",
    "--probe-points",
    "20",
];

fn sfda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfda")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sfda(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn ok_owned(args: &[String]) -> String {
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&read(path)).unwrap()
}

#[test]
fn gen_data_writes_two_reproducible_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["gen-data", "two-moons", "--n", "600", "--rotate", "30", "--seed", "0", "--out", out]);
    let source = read(&dir.path().join("source.csv"));
    let target = read(&dir.path().join("target.csv"));
    assert_eq!(source.lines().count(), 601);
    assert_eq!(target.lines().count(), 601);
    ok(&["gen-data", "two-moons", "--n", "600", "--rotate", "30", "--seed", "0", "--out", out]);
    assert_eq!(read(&dir.path().join("source.csv")), source);
    assert_eq!(read(&dir.path().join("target.csv")), target);
}

#[test]
fn unrotated_target_is_the_source_law_with_fresh_noise() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "two-moons", "--n", "100", "--rotate", "0", "--seed", "4", "--out", dir.path().to_str().unwrap()]);
    let target = load_csv(&dir.path().join("target.csv"), None).unwrap();
    let source = load_csv(&dir.path().join("source.csv"), None).unwrap();
    let fresh = gen_two_moons(100, 0.1, 4 + TARGET_SEED_OFFSET).unwrap();
    assert_eq!(target.features, fresh.features);
    assert_ne!(target.features, source.features);
}

#[test]
fn train_adapt_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["gen-data", "two-moons", "--n", "200", "--seed", "1", "--out", out]);
    let source_csv = dir.path().join("source.csv");
    let target_csv = dir.path().join("target.csv");
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    ok_owned(&with(&["train-source", "--source", source_csv.to_str().unwrap(), "--out", run_s], SMALL));
    let metrics = read(&run.join("source_metrics.csv"));
    let final_acc = metrics.lines().last().unwrap().split(',').nth(1).unwrap().to_string();
    let eval = ok(&["eval", "--model", run.join("model_source.json").to_str().unwrap(), "--data", source_csv.to_str().unwrap()]);
    assert_eq!(eval.trim(), format!("accuracy {final_acc}"));

    let printed = ok_owned(&with(
        &["adapt", "--target", target_csv.to_str().unwrap(), "--lambda", "0", "--out", run_s],
        SMALL,
    ));
    assert!(printed.contains("baseline (SHOT-equivalent)"));
    let summary = json(&run.join("summary.json"));
    assert_eq!(summary["objective"], "baseline (SHOT-equivalent)");
    assert_eq!(summary["classifier_frozen"], true);
    let csv = read(&run.join("metrics.csv"));
    assert_eq!(csv.lines().next().unwrap(), "epoch,target_acc,loss_im,loss_ssl,loss_jn,pseudo_acc,jn_exact_probe,seconds");
    assert_eq!(csv.lines().count(), 4);
    for name in ["config_echo.toml", "model_source.json", "model_adapted.json", "timing.log"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let adapted = EncoderClassifier::load(&run.join("model_adapted.json")).unwrap();
    let source_model = EncoderClassifier::load(&run.join("model_source.json")).unwrap();
    assert!(adapted.classifier_params_equal(&source_model));
    let target = load_csv(&target_csv, Some(2)).unwrap();
    let last_acc: f64 = csv.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(evaluate(&adapted, &target).unwrap(), last_acc);
}

#[test]
fn commands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = |cmd: &str| with(&[cmd, "--generator", "two-moons", "--seed", "2", "--out", out], SMALL);
    let snapshot = || {
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap())
            .filter(|e| e.file_name() != "timing.log")
            .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
            .collect();
        files.sort();
        files
    };
    ok_owned(&args("train-source"));
    ok_owned(&args("adapt"));
    let first = snapshot();
    ok_owned(&args("train-source"));
    ok_owned(&args("adapt"));
    assert_eq!(snapshot(), first);
    assert!(first.iter().any(|(n, _)| n == "metrics.csv"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(
        &cfg,
        format!(
            "out_dir = {:?}\n[adaptation]\nlambda = 0.5\nadapt_epochs = 2\nsource_epochs = 3\nhidden_dims = [8]\nbottleneck_dim = 4\n[data]\ngenerator = \"two-moons\"\nn = 100\n",
            dir.path().join("run").to_str().unwrap()
        ),
    )
    .unwrap();
    let cfg_s = cfg.to_str().unwrap();
    ok(&["--config", cfg_s, "train-source"]);
    ok(&["--config", cfg_s, "adapt", "--lambda", "0", "--gamma", "0"]);
    let echo: toml::Value = toml::from_str(&read(&dir.path().join("run/config_echo.toml"))).unwrap();
    assert_eq!(echo["adaptation"]["lambda"].as_float(), Some(0.0));
    assert_eq!(echo["adaptation"]["gamma"].as_float(), Some(0.0));
    assert_eq!(echo["adaptation"]["adapt_epochs"].as_integer(), Some(2));
    assert_eq!(echo["data"]["n"].as_integer(), Some(100));
    let summary = json(&dir.path().join("run/summary.json"));
    assert_eq!(summary["epochs"], 2);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(sfda(&["--help"]).status.code(), Some(0));
    assert_eq!(sfda(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(sfda(&["gen-data", "spirals", "--out", out]).status.code(), Some(1));

    let missing = sfda(&["adapt", "--generator", "two-moons", "--n", "50", "--out", out]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing source model"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[adaptation]\nlambda = \"high\"\n").unwrap();
    let malformed = sfda(&["--config", bad.to_str().unwrap(), "train-source", "--generator", "two-moons", "--out", out]);
    assert_eq!(malformed.status.code(), Some(1));
    assert!(!malformed.stderr.is_empty());

    let both = sfda(&["train-source", "--generator", "two-moons", "--source", "x.csv", "--out", out]);
    assert_eq!(both.status.code(), Some(1));
    let no_model = sfda(&["eval", "--model", dir.path().join("none.json").to_str().unwrap(), "--data", "x.csv"]);
    assert_eq!(no_model.status.code(), Some(2));
}

#[test]
fn ablation_table_has_paired_rows_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let csv = ok_owned(&with(&["ablate", "--generator", "two-moons", "--out", out], SMALL));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,seed,target_acc,source_only_acc");
    assert_eq!(lines.len(), 1 + 15 + 3);
    assert_eq!(read(&dir.path().join("ablation.csv")), csv);
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    for seed in 0..5 {
        let s = seed.to_string();
        let arms: Vec<&Vec<&str>> = rows.iter().filter(|r| r[1] == s).collect();
        assert_eq!(arms.iter().map(|r| r[0]).collect::<Vec<_>>(), ["shot", "jn_only", "full"]);
        assert!(arms.iter().all(|r| r[3] == arms[0][3]));
    }
    for arm in ["shot", "jn_only", "full"] {
        let accs: Vec<f64> = rows.iter().filter(|r| r[0] == arm && r[1] != "mean").map(|r| r[2].parse().unwrap()).collect();
        let mean_row = rows.iter().find(|r| r[0] == arm && r[1] == "mean").unwrap();
        let mean: f64 = mean_row[2].parse().unwrap();
        assert!((mean - accs.iter().sum::<f64>() / 5.0).abs() < 1e-12);
    }
}

fn constant_model(dir: &Path) -> std::path::PathBuf {
    let mut model = EncoderClassifier::init(2, &[8], 4, 2, 0).unwrap();
    model.classifier.v = Tensor::zeros(model.classifier.v.shape());
    let path = dir.join("constant.json");
    model.save(&path).unwrap();
    path
}

#[test]
fn bound_of_constant_model_has_no_smoothness_term() {
    let dir = tempfile::tempdir().unwrap();
    let model = constant_model(dir.path());
    let out = dir.path().join("b");
    ok(&["bound", "--model", model.to_str().unwrap(), "--generator", "two-moons", "--n", "100", "--out", out.to_str().unwrap()]);
    let report = json(&out.join("bound.json"));
    assert_eq!(report["params"]["epsilon"], 0.0);
    assert_eq!(report["report"]["smoothness"], 0.0);
}

#[test]
fn bound_of_identical_domains_has_no_divergence_term() {
    let dir = tempfile::tempdir().unwrap();
    let model = constant_model(dir.path());
    ok(&["gen-data", "two-moons", "--n", "100", "--out", dir.path().to_str().unwrap()]);
    let src = dir.path().join("source.csv");
    let out = dir.path().join("b");
    let printed = ok(&[
        "bound", "--model", model.to_str().unwrap(), "--source", src.to_str().unwrap(), "--target", src.to_str().unwrap(), "--out",
        out.to_str().unwrap(),
    ]);
    assert!(printed.contains("vacuous"));
    let report = json(&out.join("bound.json"));
    assert_eq!(report["params"]["tv"], 0.0);
    assert_eq!(report["report"]["divergence"], 0.0);
}

#[test]
fn bound_terms_match_independent_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok_owned(&with(&["train-source", "--generator", "two-moons", "--seed", "0", "--out", run.to_str().unwrap()], SMALL));
    ok(&["gen-data", "two-moons", "--n", "200", "--seed", "0", "--out", dir.path().to_str().unwrap()]);
    let model_path = run.join("model_source.json");
    let (src, tgt) = (dir.path().join("source.csv"), dir.path().join("target.csv"));
    ok(&[
        "bound", "--model", model_path.to_str().unwrap(), "--source", src.to_str().unwrap(), "--target", tgt.to_str().unwrap(),
        "--bins", "6", "--radius", "0.1", "--out", run.to_str().unwrap(),
    ]);
    let report = json(&run.join("bound.json"));
    let model = EncoderClassifier::load(&model_path).unwrap();
    let source = load_csv(&src, Some(2)).unwrap();
    let target = load_csv(&tgt, Some(2)).unwrap();

    let eps_s = empirical_smoothness(|x| model.predict_probs(x), &source.features, 0.1, 64, 0).unwrap();
    let eps_t = empirical_smoothness(|x| model.predict_probs(x), &target.features, 0.1, 64, 0).unwrap();
    assert_eq!(report["epsilon_source"].as_f64().unwrap(), eps_s);
    assert_eq!(report["epsilon_target"].as_f64().unwrap(), eps_t);

    // Histogram TV by direct cell counting.
    let all: Vec<&[f64]> = source.features.iter_rows().chain(target.features.iter_rows()).collect();
    let lo: Vec<f64> = (0..2).map(|j| all.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min) - 1e-9).collect();
    let hi: Vec<f64> = (0..2).map(|j| all.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max) + 1e-9).collect();
    let cell = |r: &[f64]| {
        let b = |j: usize| (((r[j] - lo[j]) / (hi[j] - lo[j]) * 6.0).floor() as usize).min(5);
        b(0) * 6 + b(1)
    };
    let mut counts = vec![[0.0f64; 2]; 36];
    for r in source.features.iter_rows() {
        counts[cell(r)][0] += 1.0 / 200.0;
    }
    for r in target.features.iter_rows() {
        counts[cell(r)][1] += 1.0 / 200.0;
    }
    let tv = 0.5 * counts.iter().map(|c| (c[0] - c[1]).abs()).sum::<f64>();
    assert!((report["params"]["tv"].as_f64().unwrap() - tv).abs() < 1e-12);

    let mut diameter: f64 = 0.0;
    for a in &all {
        for b in &all {
            diameter = diameter.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    assert!((report["params"]["diameter"].as_f64().unwrap() - diameter).abs() < 1e-12);
    let risk = 1.0 - evaluate(&model, &source).unwrap();

    let eps = eps_s.max(eps_t);
    let (m, n) = (200.0f64, 200.0f64);
    let ln_inv_theta = (1.0f64 / 0.05).ln();
    let cover = 4.0f64.powf(2.0 * eps * eps * diameter / 0.01 + 1.0);
    let complexity = |count: f64| ((cover * 2f64.ln() + 2.0 * ln_inv_theta) / count).sqrt();
    let r = &report["report"];
    let close = |key: &str, want: f64| {
        let got = r[key].as_f64().unwrap();
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{key}: {got} vs {want}");
    };
    close("source_risk", risk);
    close("smoothness", 2.0 * eps);
    close("divergence", 2.0 * tv);
    close("target_complexity", complexity(m));
    close("source_complexity", complexity(n));
    close("confidence", (ln_inv_theta / (2.0 * m)).sqrt());
    let params: BoundParameters = serde_json::from_value(report["params"].clone()).unwrap();
    close("total", bound_rhs(&params).unwrap().total);
}
