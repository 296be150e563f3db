//! End-to-end tests of the `avdiar` binary: each test drives real
//! subprocesses over a temporary directory and checks files, exit codes,
//! and byte-level reproducibility.

use avdiar::fusion::FusionStrategy;
use avdiar::training::init_model_params;
use avdiar::{ModelConfig, ParamSet};
use std::path::Path;
use std::process::{Command, Output};

/// Small enough to train and infer in seconds at dev optimization.
const TINY_CONFIG: &str = "\
seed = 1
model.d_v = 8
model.d_a = 8
model.d_ia = 8
model.d_i = 6
model.heads = 2
model.qa_layers = 1
model.xs_layers = 1
model.ffn_mult = 2
fusion.sync_window = 3
train.epochs1 = 1
train.epochs2 = 1
train.epochs3 = 1
train.batch_scenes = 2
train.pairs_per_scene = 4
train.crop_frames = 120
pipeline.enroll_iters = 1
corpus.speakers = 2
corpus.duration_s = 6
corpus.patch_h = 4
corpus.patch_w = 4
corpus.pool_size = 6
corpus.train_count = 2
corpus.dev_count = 1
corpus.eval_count = 2
";

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_v: 8,
        d_a: 8,
        d_ia: 8,
        d_i: 6,
        heads: 2,
        qa_layers: 1,
        xs_layers: 1,
        ffn_mult: 2,
    }
}

fn bin(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_avdiar"));
    cmd.args(args).env_remove("AVDIAR_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawning the avdiar binary")
}

fn run_ok(args: &[&str], envs: &[(&str, &str)]) -> String {
    let out = bin(args, envs);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is utf-8")
}

fn run_fail(args: &[&str]) -> String {
    let out = bin(args, &[]);
    assert!(!out.status.success(), "command {args:?} unexpectedly passed");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

fn synth(cfg: &str, out: &Path) {
    run_ok(&["synth", "--config", cfg, "--out", &s(out)], &[]);
}

#[test]
fn synth_writes_splits_manifest_and_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY_CONFIG);
    let corpus = tmp.path().join("corpus");
    synth(&cfg, &corpus);

    let manifest = read(&corpus.join("manifest.txt"));
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 2 + 1 + 2);
    assert_eq!(lines[0], "train/scene0000");
    assert_eq!(lines[4], "eval/scene0001");
    for line in &lines {
        assert!(corpus.join(line).join("meta.toml").is_file(), "missing {line}");
    }
    let count = |split: &str| {
        std::fs::read_dir(corpus.join(split))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().is_dir())
            .count()
    };
    assert_eq!(count("train"), 2);
    assert_eq!(count("dev"), 1);
    assert_eq!(count("eval"), 2);

    let resolved = read(&corpus.join("config.resolved"));
    assert!(resolved.contains("seed = 1"));
    assert!(resolved.contains("corpus.train_count = 2"));
}

#[test]
fn synth_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY_CONFIG);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    synth(&cfg, &a);
    synth(&cfg, &b);
    assert_eq!(
        read(&a.join("manifest.txt")),
        read(&b.join("manifest.txt"))
    );
    for file in ["audio.csv", "visual.bin", "labels.rttm", "meta.toml"] {
        let pa = a.join("eval/scene0001").join(file);
        let pb = b.join("eval/scene0001").join(file);
        assert_eq!(
            std::fs::read(&pa).unwrap(),
            std::fs::read(&pb).unwrap(),
            "{file} differs between reruns"
        );
    }
}

#[test]
fn seed_flag_and_environment_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let no_seed: String = TINY_CONFIG
        .lines()
        .filter(|l| !l.starts_with("seed"))
        .map(|l| format!("{l}\n"))
        .collect();
    let small = no_seed
        .replace("corpus.train_count = 2", "corpus.train_count = 1")
        .replace("corpus.dev_count = 1", "corpus.dev_count = 0")
        .replace("corpus.eval_count = 2", "corpus.eval_count = 0");
    let cfg = write_config(tmp.path(), &small);

    let flag = tmp.path().join("flag");
    run_ok(&["synth", "--config", &cfg, "--out", &s(&flag), "--seed", "5"], &[]);
    let env = tmp.path().join("env");
    run_ok(
        &["synth", "--config", &cfg, "--out", &s(&env)],
        &[("AVDIAR_SEED", "5")],
    );
    let wins = tmp.path().join("wins");
    run_ok(
        &["synth", "--config", &cfg, "--out", &s(&wins), "--seed", "5"],
        &[("AVDIAR_SEED", "9")],
    );
    let audio = |root: &Path| std::fs::read(root.join("train/scene0000/audio.csv")).unwrap();
    assert_eq!(audio(&flag), audio(&env));
    assert_eq!(audio(&flag), audio(&wins));
    assert!(read(&env.join("config.resolved")).contains("seed = 5"));
}

#[test]
fn bad_configs_fail_with_named_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bogus.key = 1\n");
    let err = run_fail(&["synth", "--config", &cfg, "--out", &s(&tmp.path().join("x"))]);
    assert!(err.contains("bogus.key"), "stderr was: {err}");

    let cfg2 = tmp.path().join("bad2.cfg");
    std::fs::write(&cfg2, "train.margin = wide\n").unwrap();
    let err = run_fail(&["synth", "--config", &s(&cfg2), "--out", &s(&tmp.path().join("y"))]);
    assert!(err.contains("train.margin"), "stderr was: {err}");
}

#[test]
fn train_infer_score_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY_CONFIG);
    let corpus = tmp.path().join("corpus");
    synth(&cfg, &corpus);

    let run = tmp.path().join("run");
    run_ok(
        &["train", "--config", &cfg, "--corpus", &s(&corpus), "--out", &s(&run)],
        &[],
    );
    let ckpts = run.join("checkpoints");
    for name in ["stage1.ckpt", "stage2.ckpt", "final.ckpt"] {
        assert!(ckpts.join(name).is_file(), "missing {name}");
    }
    let log = read(&run.join("reports/train_log.csv"));
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "stage,epoch,train_loss,val_w_genuine,val_w_false,val_bce");
    assert_eq!(rows.len(), 1 + 3);
    assert!(rows[1].starts_with("1,1,"));
    assert!(rows[3].starts_with("3,1,"));

    let run2 = tmp.path().join("run2");
    run_ok(
        &["train", "--config", &cfg, "--corpus", &s(&corpus), "--out", &s(&run2)],
        &[],
    );
    assert_eq!(
        std::fs::read(ckpts.join("final.ckpt")).unwrap(),
        std::fs::read(run2.join("checkpoints/final.ckpt")).unwrap(),
        "training reruns must produce byte-identical checkpoints"
    );

    let infer_out = tmp.path().join("hyp");
    run_ok(
        &[
            "infer",
            "--config",
            &cfg,
            "--model",
            &s(&ckpts.join("final.ckpt")),
            "--scenes",
            &s(&corpus.join("eval")),
            "--out",
            &s(&infer_out),
            "--dump-posteriors",
        ],
        &[],
    );
    for uri in ["eval-0000", "eval-0001"] {
        assert!(infer_out.join(format!("rttm/{uri}.rttm")).is_file());
        let posteriors = read(&infer_out.join(format!("reports/posteriors/{uri}.csv")));
        assert!(posteriors.starts_with("frame,"));
        assert!(posteriors.lines().count() > 100);
    }
    assert!(infer_out.join("config.resolved").is_file());

    let infer_again = tmp.path().join("hyp2");
    run_ok(
        &[
            "infer",
            "--config",
            &cfg,
            "--model",
            &s(&ckpts.join("final.ckpt")),
            "--scenes",
            &s(&corpus.join("eval")),
            "--out",
            &s(&infer_again),
        ],
        &[],
    );
    assert_eq!(
        read(&infer_out.join("rttm/eval-0000.rttm")),
        read(&infer_again.join("rttm/eval-0000.rttm")),
        "inference reruns must produce byte-identical RTTM"
    );

    let score_out = tmp.path().join("scored");
    let stdout = run_ok(
        &[
            "score",
            "--reference",
            &s(&corpus.join("eval")),
            "--hypothesis",
            &s(&infer_out.join("rttm")),
            "--out",
            &s(&score_out),
        ],
        &[],
    );
    assert!(stdout.contains("DER "), "stdout was: {stdout}");
    let csv = read(&score_out.join("reports/score.csv"));
    assert_eq!(csv.lines().next().unwrap(), "uri,fa_s,miss_s,spkerr_s,total_ref_s,der");
    assert!(csv.contains("eval-0000,"));
    assert!(csv.contains("eval-0001,"));
    assert!(csv.lines().last().unwrap().starts_with("ALL,"));
}

#[test]
fn train_skips_stages_and_requires_a_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY_CONFIG);
    let corpus = tmp.path().join("corpus");
    synth(&cfg, &corpus);

    let run = tmp.path().join("run");
    run_ok(
        &[
            "train",
            "--config",
            &cfg,
            "--corpus",
            &s(&corpus),
            "--out",
            &s(&run),
            "--skip-stage1",
            "--skip-stage3",
        ],
        &[],
    );
    let ckpts = run.join("checkpoints");
    assert!(!ckpts.join("stage1.ckpt").exists());
    assert!(ckpts.join("stage2.ckpt").is_file());
    assert!(ckpts.join("final.ckpt").is_file());
    let log = read(&run.join("reports/train_log.csv"));
    assert_eq!(log.lines().count(), 1 + 1);
    assert!(log.lines().nth(1).unwrap().starts_with("2,1,"));

    let err = run_fail(&[
        "train",
        "--config",
        &cfg,
        "--corpus",
        &s(&tmp.path().join("nowhere")),
        "--out",
        &s(&tmp.path().join("r2")),
    ]);
    assert!(err.contains("missing corpus"), "stderr was: {err}");
}

#[test]
fn score_reports_exact_hand_computed_breakdown() {
    let tmp = tempfile::tempdir().unwrap();
    let reference = tmp.path().join("ref.rttm");
    let hypothesis = tmp.path().join("hyp.rttm");
    std::fs::write(
        &reference,
        "SPEAKER u 1 0.000 5.000 <NA> <NA> A <NA> <NA>\n\
         SPEAKER u 1 5.000 5.000 <NA> <NA> B <NA> <NA>\n",
    )
    .unwrap();
    std::fs::write(
        &hypothesis,
        "SPEAKER u 1 0.000 4.500 <NA> <NA> X <NA> <NA>\n\
         SPEAKER u 1 5.000 3.000 <NA> <NA> Y <NA> <NA>\n\
         SPEAKER u 1 9.500 0.500 <NA> <NA> X <NA> <NA>\n\
         SPEAKER u 1 10.000 1.000 <NA> <NA> Z <NA> <NA>\n",
    )
    .unwrap();
    let stdout = run_ok(
        &["score", "--reference", &s(&reference), "--hypothesis", &s(&hypothesis)],
        &[],
    );
    assert!(
        stdout.contains("DER 35.000% (FA 1.000s MISS 2.000s SPKERR 0.500s over 10.000s scored"),
        "stdout was: {stdout}"
    );
    assert!(stdout.contains("ALL,1,2,0.5,10,0.35"), "stdout was: {stdout}");

    let wide = run_ok(
        &[
            "score",
            "--reference",
            &s(&reference),
            "--hypothesis",
            &s(&hypothesis),
            "--collar",
            "0.25",
        ],
        &[],
    );
    assert!(wide.contains("collar 0.250s"), "stdout was: {wide}");
    assert_ne!(stdout, wide);
}

#[test]
fn score_aggregate_is_duration_weighted() {
    let tmp = tempfile::tempdir().unwrap();
    let refs = tmp.path().join("refs");
    let hyps = tmp.path().join("hyps");
    std::fs::create_dir_all(&refs).unwrap();
    std::fs::create_dir_all(&hyps).unwrap();
    std::fs::write(refs.join("u.rttm"), "SPEAKER u 1 0.000 10.000 <NA> <NA> a <NA> <NA>\n")
        .unwrap();
    std::fs::write(hyps.join("u.rttm"), "SPEAKER u 1 0.000 5.000 <NA> <NA> x <NA> <NA>\n")
        .unwrap();
    std::fs::write(refs.join("v.rttm"), "SPEAKER v 1 0.000 30.000 <NA> <NA> a <NA> <NA>\n")
        .unwrap();
    std::fs::write(hyps.join("v.rttm"), "SPEAKER v 1 0.000 30.000 <NA> <NA> x <NA> <NA>\n")
        .unwrap();
    let stdout = run_ok(
        &["score", "--reference", &s(&refs), "--hypothesis", &s(&hyps)],
        &[],
    );
    assert!(stdout.contains("u,0,5,0,10,0.5"), "stdout was: {stdout}");
    assert!(stdout.contains("v,0,0,0,30,0"), "stdout was: {stdout}");
    assert!(stdout.contains("ALL,0,5,0,40,0.125"), "stdout was: {stdout}");
}

#[test]
fn score_rejects_unmatched_ids_and_bad_files() {
    let tmp = tempfile::tempdir().unwrap();
    let refs = tmp.path().join("refs");
    let hyps = tmp.path().join("hyps");
    std::fs::create_dir_all(&refs).unwrap();
    std::fs::create_dir_all(&hyps).unwrap();
    std::fs::write(refs.join("a.rttm"), "SPEAKER a 1 0.000 1.000 <NA> <NA> s <NA> <NA>\n")
        .unwrap();
    std::fs::write(refs.join("b.rttm"), "SPEAKER b 1 0.000 1.000 <NA> <NA> s <NA> <NA>\n")
        .unwrap();
    std::fs::write(hyps.join("b.rttm"), "SPEAKER b 1 0.000 1.000 <NA> <NA> s <NA> <NA>\n")
        .unwrap();
    std::fs::write(hyps.join("c.rttm"), "SPEAKER c 1 0.000 1.000 <NA> <NA> s <NA> <NA>\n")
        .unwrap();
    let err = run_fail(&["score", "--reference", &s(&refs), "--hypothesis", &s(&hyps)]);
    assert!(err.contains("unmatched scene ids"), "stderr was: {err}");
    assert!(err.contains('a') && err.contains('c'), "stderr was: {err}");

    std::fs::write(hyps.join("a.rttm"), "SPEAKER a 1 0.000 garbled\n").unwrap();
    let err = run_fail(&["score", "--reference", &s(&refs), "--hypothesis", &s(&hyps)]);
    assert!(err.contains("a.rttm"), "stderr was: {err}");
}

fn init_models_dir(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for strategy in [
        FusionStrategy::QualityAware,
        FusionStrategy::Concat,
        FusionStrategy::Factorized,
        FusionStrategy::Cross,
    ] {
        let mut params = ParamSet::new();
        init_model_params(&mut params, &tiny_model(), 16, strategy, 1).unwrap();
        params
            .save(&dir.join(format!("{}.ckpt", strategy.name())))
            .unwrap();
    }
}

#[test]
fn sweep_produces_one_row_per_value_and_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let one_eval = TINY_CONFIG
        .replace("corpus.train_count = 2", "corpus.train_count = 0")
        .replace("corpus.dev_count = 1", "corpus.dev_count = 0")
        .replace("corpus.eval_count = 2", "corpus.eval_count = 1");
    let cfg = write_config(tmp.path(), &one_eval);
    let corpus = tmp.path().join("corpus");
    synth(&cfg, &corpus);
    let models = tmp.path().join("models");
    init_models_dir(&models);

    let out = tmp.path().join("sweep");
    run_ok(
        &[
            "sweep",
            "--config",
            &cfg,
            "--models",
            &s(&models),
            "--scenes",
            &s(&corpus.join("eval")),
            "--axis",
            "miss_rate",
            "--values",
            "0.5,0.9",
            "--out",
            &s(&out),
        ],
        &[],
    );
    let csv = read(&out.join("reports/sweep.csv"));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "value,strategy,fa_s,miss_s,spkerr_s,der");
    assert_eq!(rows.len(), 1 + 2 * 4);
    assert!(rows[1].starts_with("0.5,qa,"));
    assert!(rows[4].starts_with("0.5,cross,"));
    assert!(rows[5].starts_with("0.9,qa,"));
    for row in &rows[1..] {
        assert_eq!(row.split(',').count(), 6, "malformed row {row}");
    }

    let out2 = tmp.path().join("sweep2");
    run_ok(
        &[
            "sweep",
            "--config",
            &cfg,
            "--models",
            &s(&models),
            "--scenes",
            &s(&corpus.join("eval")),
            "--axis",
            "miss_rate",
            "--values",
            "0.5,0.9",
            "--out",
            &s(&out2),
        ],
        &[],
    );
    assert_eq!(csv, read(&out2.join("reports/sweep.csv")));

    let single = tmp.path().join("sweep3");
    run_ok(
        &[
            "sweep",
            "--config",
            &cfg,
            "--models",
            &s(&models),
            "--scenes",
            &s(&corpus.join("eval")),
            "--axis",
            "fusion_strategy",
            "--values",
            "qa",
            "--out",
            &s(&single),
        ],
        &[],
    );
    let csv = read(&single.join("reports/sweep.csv"));
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("qa,qa,"));
}

#[test]
fn sweep_rejects_untrained_strategies_and_bad_axes() {
    let tmp = tempfile::tempdir().unwrap();
    let one_eval = TINY_CONFIG
        .replace("corpus.train_count = 2", "corpus.train_count = 0")
        .replace("corpus.dev_count = 1", "corpus.dev_count = 0")
        .replace("corpus.eval_count = 2", "corpus.eval_count = 1");
    let cfg = write_config(tmp.path(), &one_eval);
    let corpus = tmp.path().join("corpus");
    synth(&cfg, &corpus);
    let models = tmp.path().join("models");
    init_models_dir(&models);
    std::fs::remove_file(models.join("cross.ckpt")).unwrap();

    let eval = s(&corpus.join("eval"));
    let err = run_fail(&[
        "sweep",
        "--config",
        &cfg,
        "--models",
        &s(&models),
        "--scenes",
        &eval,
        "--axis",
        "miss_rate",
        "--values",
        "0.5",
        "--out",
        &s(&tmp.path().join("x")),
    ]);
    assert!(err.contains("cross") && err.contains("untrained"), "stderr was: {err}");

    let err = run_fail(&[
        "sweep",
        "--config",
        &cfg,
        "--models",
        &s(&models),
        "--scenes",
        &eval,
        "--axis",
        "xs_layers",
        "--out",
        &s(&tmp.path().join("y")),
    ]);
    assert!(err.contains("xs_layers"), "stderr was: {err}");

    let err = run_fail(&[
        "sweep",
        "--config",
        &cfg,
        "--models",
        &s(&models),
        "--scenes",
        &eval,
        "--axis",
        "sideways",
        "--out",
        &s(&tmp.path().join("z")),
    ]);
    assert!(err.contains("sideways"), "stderr was: {err}");
}

#[test]
fn infer_strategy_flag_switches_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let one_eval = TINY_CONFIG
        .replace("corpus.train_count = 2", "corpus.train_count = 0")
        .replace("corpus.dev_count = 1", "corpus.dev_count = 0")
        .replace("corpus.eval_count = 2", "corpus.eval_count = 1");
    let cfg = write_config(tmp.path(), &one_eval);
    let corpus = tmp.path().join("corpus");
    synth(&cfg, &corpus);
    let models = tmp.path().join("models");
    init_models_dir(&models);

    let out = tmp.path().join("hyp");
    run_ok(
        &[
            "infer",
            "--config",
            &cfg,
            "--model",
            &s(&models.join("cross.ckpt")),
            "--scenes",
            &s(&corpus.join("eval")),
            "--out",
            &s(&out),
            "--strategy",
            "cross",
        ],
        &[],
    );
    assert!(out.join("rttm/eval-0000.rttm").is_file());

    let err = run_fail(&[
        "infer",
        "--config",
        &cfg,
        "--model",
        &s(&models.join("qa.ckpt")),
        "--scenes",
        &s(&corpus.join("eval")),
        "--out",
        &s(&tmp.path().join("hyp2")),
        "--strategy",
        "cross",
    ]);
    assert!(err.contains("cross"), "stderr was: {err}");

    let err = run_fail(&[
        "infer",
        "--config",
        &cfg,
        "--model",
        &s(&tmp.path().join("nope.ckpt")),
        "--scenes",
        &s(&corpus.join("eval")),
        "--out",
        &s(&tmp.path().join("hyp3")),
    ]);
    assert!(err.contains("nope.ckpt"), "stderr was: {err}");
}

#[test]
fn cli_usage_errors_exit_nonzero() {
    let out = bin(&["transmogrify"], &[]);
    assert!(!out.status.success());
    let out = bin(&["score", "--reference", "only-one-side.rttm"], &[]);
    assert!(!out.status.success());
}
