//! The five subcommands: synth, train, infer, score, and sweep.
//!
//! Every command resolves one [`RunConfig`], persists it next to its outputs
//! as `config.resolved`, and derives all randomness from the run seed, so a
//! rerun with the same config and seed reproduces outputs byte for byte.
//! Run directories follow a fixed layout: `config.resolved` at the root,
//! checkpoints under `checkpoints/`, hypotheses under `rttm/`, and CSV
//! outputs under `reports/`.

use crate::config::RunConfig;
use anyhow::{anyhow, bail, Context, Result};
use avdiar::fusion::{FusionSpec, FusionStrategy};
use avdiar::numerics::rng::split_seed;
use avdiar::pipeline::segments::{rttm_load, rttm_save, SegmentList};
use avdiar::pipeline::{enroll_iterate, enroll_iterate_with_posterior, posterior_to_csv};
use avdiar::scoring::{der, der_per_uri, DerReport};
use avdiar::synth::{corrupt, gen_scene, load_scene, save_scene, CorpusConfig, DegradationSpec, SceneSource};
use avdiar::training::{
    train_stage1, train_stage2, train_stage3, write_log_csv, EpochStats, TrainConfig, TrainError,
};
use avdiar::{ModelConfig, ParamSet};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Scene subdirectories of `dir` (those holding a `meta.toml`), sorted by
/// name; empty when `dir` has none.
fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading scene directory {}", dir.display()))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.join("meta.toml").is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Generates the train/dev/eval splits with disjoint seeds, writes scene
/// directories and the manifest, and persists the resolved config.
pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    config.persist(out)?;
    let corpus = &config.corpus;
    let splits = [
        ("train", corpus.train_count),
        ("dev", corpus.dev_count),
        ("eval", corpus.eval_count),
    ];
    let mut manifest = String::new();
    let mut total = 0usize;
    for (k, (split, count)) in splits.iter().enumerate() {
        let split_seed_base = split_seed(config.seed, "corpus", k as u64);
        for i in 0..*count {
            let scene_config = CorpusConfig {
                n_speakers: corpus.speakers[i % corpus.speakers.len()],
                duration_s: corpus.duration_s,
                target_overlap: corpus.target_overlap,
                patch_h: corpus.patch_h,
                patch_w: corpus.patch_w,
                pool_size: corpus.pool_size,
                seed: split_seed_base,
            };
            let mut scene = gen_scene(&scene_config, i)?;
            scene.uri = format!("{split}-{i:04}");
            save_scene(&scene, out.join(split).join(format!("scene{i:04}")))?;
            manifest.push_str(&format!("{split}/scene{i:04}\n"));
            total += 1;
        }
    }
    let manifest_path = out.join("manifest.txt");
    std::fs::write(&manifest_path, manifest)
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    println!("synthesized {total} scenes under {}", out.display());
    Ok(())
}

type StageFn = fn(
    &mut ParamSet,
    &ModelConfig,
    &FusionSpec,
    &TrainConfig,
    &SceneSource,
    &SceneSource,
) -> std::result::Result<Vec<EpochStats>, TrainError>;

/// Runs the three-stage schedule on a corpus directory, honoring per-stage
/// skip flags. Writes `stage1.ckpt`/`stage2.ckpt` after their stages, the
/// fully thawed `final.ckpt` after the last, and the epoch log.
pub fn cmd_train(
    config: &RunConfig,
    corpus: &Path,
    out: &Path,
    skip: [bool; 3],
    init: Option<&Path>,
) -> Result<()> {
    let train_dir = corpus.join("train");
    if !train_dir.is_dir() {
        bail!("missing corpus: no train split under {}", corpus.display());
    }
    let train_scenes = scene_dirs(&train_dir)?;
    if train_scenes.is_empty() {
        bail!("missing corpus: no scenes under {}", train_dir.display());
    }
    let train = SceneSource::Disk(train_scenes);
    let dev_dir = corpus.join("dev");
    let val = SceneSource::Disk(if dev_dir.is_dir() {
        scene_dirs(&dev_dir)?
    } else {
        Vec::new()
    });

    let ckpt_dir = out.join("checkpoints");
    let report_dir = out.join("reports");
    std::fs::create_dir_all(&ckpt_dir)?;
    std::fs::create_dir_all(&report_dir)?;
    config.persist(out)?;

    let mut params = match init {
        Some(path) => ParamSet::load(path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?,
        None => {
            let probe = train.scene(0)?;
            let mut fresh = ParamSet::new();
            avdiar::training::init_model_params(
                &mut fresh,
                &config.model,
                probe.patch_h * probe.patch_w,
                config.fusion.strategy,
                config.seed,
            )?;
            fresh
        }
    };
    let tc = TrainConfig {
        seed: config.seed,
        ..config.train.clone()
    };
    let stages: [(usize, StageFn); 3] =
        [(1, train_stage1), (2, train_stage2), (3, train_stage3)];
    let mut log: Vec<EpochStats> = Vec::new();
    for (n, stage) in stages {
        if skip[n - 1] {
            println!("stage {n}: skipped");
            continue;
        }
        let stats = stage(&mut params, &config.model, &config.fusion, &tc, &train, &val)?;
        let last = stats.last().map_or(f64::NAN, |s| s.train_loss);
        log.extend(stats);
        if n < 3 {
            params.save(&ckpt_dir.join(format!("stage{n}.ckpt")))?;
        }
        println!("stage {n}: done, final train loss {last:.6}");
    }
    params.set_all_frozen(false);
    params.save(&ckpt_dir.join("final.ckpt"))?;
    write_log_csv(&report_dir.join("train_log.csv"), &log)?;
    println!(
        "trained {} epochs; checkpoints in {}",
        log.len(),
        ckpt_dir.display()
    );
    Ok(())
}

/// Diarizes every scene directory with a trained checkpoint, writing one
/// RTTM per scene and, on request, per-scene posterior CSVs. The config's
/// degradation recipe is applied to each scene first; the default recipe is
/// the identity.
pub fn cmd_infer(
    config: &RunConfig,
    model: &Path,
    scenes: &Path,
    out: &Path,
    dump_posteriors: bool,
) -> Result<()> {
    let params = ParamSet::load(model)
        .with_context(|| format!("loading checkpoint {}", model.display()))?;
    let dirs = scene_dirs(scenes)?;
    if dirs.is_empty() {
        bail!("no scene directories under {}", scenes.display());
    }
    let rttm_dir = out.join("rttm");
    std::fs::create_dir_all(&rttm_dir)?;
    let posterior_dir = out.join("reports").join("posteriors");
    if dump_posteriors {
        std::fs::create_dir_all(&posterior_dir)?;
    }
    config.persist(out)?;

    let results: Vec<Result<String>> = dirs
        .par_iter()
        .enumerate()
        .map(|(i, dir)| {
            let clean = load_scene(dir)?;
            let scene = corrupt(
                &clean,
                &config.degrade,
                split_seed(config.seed, "degrade", i as u64),
            )?;
            let (hypothesis, posterior) = enroll_iterate_with_posterior(
                &params,
                &config.model,
                &config.fusion,
                &config.pipeline,
                &scene,
            )?;
            rttm_save(&hypothesis, rttm_dir.join(format!("{}.rttm", scene.uri)))?;
            if dump_posteriors {
                let path = posterior_dir.join(format!("{}.csv", scene.uri));
                std::fs::write(&path, posterior_to_csv(&posterior, &scene.speaker_names))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(scene.uri)
        })
        .collect();
    let mut count = 0usize;
    for result in results {
        result?;
        count += 1;
    }
    println!("wrote {count} hypotheses into {}", rttm_dir.display());
    Ok(())
}

/// Reads one side of a scoring run: a single RTTM file, a directory of
/// `.rttm` files, or a split directory of scene subdirectories (their
/// `labels.rttm` ground truth). Returns scene ids mapped to segments; ids
/// are file stems in directory mode and content uris for a single file.
fn collect_rttm_side(path: &Path) -> Result<BTreeMap<String, SegmentList>> {
    let mut out = BTreeMap::new();
    if path.is_file() {
        let list =
            rttm_load(path).with_context(|| format!("parsing {}", path.display()))?;
        for uri in list.uris() {
            let segments = list.for_uri(uri).into_iter().cloned().collect();
            out.insert(uri.to_string(), SegmentList::new(segments)?);
        }
        return Ok(out);
    }
    if !path.is_dir() {
        bail!("{} is neither a file nor a directory", path.display());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for entry in &entries {
        let (id, file) = if entry.extension().is_some_and(|e| e == "rttm") {
            let stem = entry
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| anyhow!("unreadable file name {}", entry.display()))?;
            (stem.to_string(), entry.clone())
        } else if entry.join("labels.rttm").is_file() {
            let labels = entry.join("labels.rttm");
            let list =
                rttm_load(&labels).with_context(|| format!("parsing {}", labels.display()))?;
            let uri = list
                .uris()
                .first()
                .map(|u| u.to_string())
                .ok_or_else(|| anyhow!("{} holds no segments", labels.display()))?;
            (uri, labels)
        } else {
            continue;
        };
        let list = rttm_load(&file).with_context(|| format!("parsing {}", file.display()))?;
        if out.insert(id.clone(), list).is_some() {
            bail!("duplicate scene id {id:?} under {}", path.display());
        }
    }
    if out.is_empty() {
        bail!("no RTTM content under {}", path.display());
    }
    Ok(out)
}

fn merge_lists(sides: &BTreeMap<String, SegmentList>) -> Result<SegmentList> {
    let mut segments = Vec::new();
    for list in sides.values() {
        segments.extend(list.segments().iter().cloned());
    }
    Ok(SegmentList::new(segments)?)
}

fn report_row(label: &str, r: &DerReport) -> String {
    format!(
        "{label},{},{},{},{},{}\n",
        r.fa_s, r.miss_s, r.spkerr_s, r.total_ref_speech_s, r.der
    )
}

/// Scores hypothesis RTTM against reference RTTM: prints a one-line summary
/// and produces a per-scene CSV breakdown, to `reports/score.csv` under
/// `--out` or to stdout.
pub fn cmd_score(
    reference: &Path,
    hypothesis: &Path,
    collar_s: f64,
    out: Option<&Path>,
) -> Result<()> {
    let ref_side = collect_rttm_side(reference)?;
    let hyp_side = collect_rttm_side(hypothesis)?;
    let only_ref: Vec<&String> = ref_side.keys().filter(|k| !hyp_side.contains_key(*k)).collect();
    let only_hyp: Vec<&String> = hyp_side.keys().filter(|k| !ref_side.contains_key(*k)).collect();
    if !only_ref.is_empty() || !only_hyp.is_empty() {
        bail!(
            "unmatched scene ids: only in reference {only_ref:?}, only in hypothesis {only_hyp:?}"
        );
    }
    let ref_list = merge_lists(&ref_side)?;
    let hyp_list = merge_lists(&hyp_side)?;
    let total = der(&ref_list, &hyp_list, collar_s)?;
    let parts = der_per_uri(&ref_list, &hyp_list, collar_s)?;

    println!(
        "DER {:.3}% (FA {:.3}s MISS {:.3}s SPKERR {:.3}s over {:.3}s scored, collar {:.3}s)",
        total.der * 100.0,
        total.fa_s,
        total.miss_s,
        total.spkerr_s,
        total.total_ref_speech_s,
        collar_s
    );
    let mut csv = String::from("uri,fa_s,miss_s,spkerr_s,total_ref_s,der\n");
    for (uri, report) in &parts {
        csv.push_str(&report_row(uri, report));
    }
    csv.push_str(&report_row("ALL", &total));
    match out {
        Some(dir) => {
            let report_dir = dir.join("reports");
            std::fs::create_dir_all(&report_dir)?;
            let path = report_dir.join("score.csv");
            std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("breakdown written to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

struct SweepCell {
    value: String,
    value_index: usize,
    strategy: FusionStrategy,
    checkpoint: PathBuf,
    model: ModelConfig,
    degrade: DegradationSpec,
}

const ALL_STRATEGIES: [FusionStrategy; 4] = [
    FusionStrategy::QualityAware,
    FusionStrategy::Concat,
    FusionStrategy::Factorized,
    FusionStrategy::Cross,
];

fn parse_values<T: std::str::FromStr>(axis: &str, text: &str) -> Result<Vec<T>> {
    let values: Vec<T> = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| anyhow!("axis {axis}: bad value {v:?}"))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        bail!("axis {axis}: empty value list");
    }
    Ok(values)
}

/// Builds the evaluation grid for one sweep axis. Degradation axes evaluate
/// all four fusion strategies per value; the architecture axes evaluate one
/// checkpoint per value.
fn sweep_cells(
    config: &RunConfig,
    models: &Path,
    axis: &str,
    values: Option<&str>,
) -> Result<Vec<SweepCell>> {
    let strategy_ckpt =
        |s: FusionStrategy| models.join(format!("{}.ckpt", s.name()));
    let mut cells = Vec::new();
    match axis {
        "miss_rate" => {
            let values: Vec<f64> = match values {
                Some(text) => parse_values(axis, text)?,
                None => vec![0.12, 0.3, 0.5, 0.7, 0.9],
            };
            for (vi, &v) in values.iter().enumerate() {
                for s in ALL_STRATEGIES {
                    cells.push(SweepCell {
                        value: v.to_string(),
                        value_index: vi,
                        strategy: s,
                        checkpoint: strategy_ckpt(s),
                        model: config.model.clone(),
                        degrade: DegradationSpec {
                            miss_rate: v,
                            ..config.degrade.clone()
                        },
                    });
                }
            }
        }
        "resolution" => {
            let values: Vec<usize> = match values {
                Some(text) => parse_values(axis, text)?,
                None => vec![1, 2, 4, 8],
            };
            for (vi, &v) in values.iter().enumerate() {
                for s in ALL_STRATEGIES {
                    cells.push(SweepCell {
                        value: v.to_string(),
                        value_index: vi,
                        strategy: s,
                        checkpoint: strategy_ckpt(s),
                        model: config.model.clone(),
                        degrade: DegradationSpec {
                            resolution_factor: v,
                            ..config.degrade.clone()
                        },
                    });
                }
            }
        }
        "fusion_strategy" => {
            let names: Vec<String> = match values {
                Some(text) => parse_values(axis, text)?,
                None => ALL_STRATEGIES.iter().map(|s| s.name().to_string()).collect(),
            };
            for (vi, name) in names.iter().enumerate() {
                let s = FusionStrategy::parse(name)?;
                cells.push(SweepCell {
                    value: name.clone(),
                    value_index: vi,
                    strategy: s,
                    checkpoint: strategy_ckpt(s),
                    model: config.model.clone(),
                    degrade: config.degrade.clone(),
                });
            }
        }
        "xs_layers" => {
            let text = values
                .ok_or_else(|| anyhow!("axis xs_layers needs an explicit --values list"))?;
            let values: Vec<usize> = parse_values(axis, text)?;
            for (vi, &v) in values.iter().enumerate() {
                cells.push(SweepCell {
                    value: v.to_string(),
                    value_index: vi,
                    strategy: config.fusion.strategy,
                    checkpoint: models.join(format!("xs{v}.ckpt")),
                    model: ModelConfig {
                        xs_layers: v,
                        ..config.model.clone()
                    },
                    degrade: config.degrade.clone(),
                });
            }
        }
        other => bail!(
            "unknown sweep axis {other:?} (expected miss_rate, resolution, fusion_strategy, or xs_layers)"
        ),
    }
    Ok(cells)
}

/// Evaluates trained checkpoints across a degradation or architecture axis
/// and writes one CSV row per (value, strategy) cell. Nothing is retrained;
/// degraded scenes are identical across strategies at each value so the
/// comparison is paired.
pub fn cmd_sweep(
    config: &RunConfig,
    models: &Path,
    scenes: &Path,
    axis: &str,
    values: Option<&str>,
    out: &Path,
) -> Result<()> {
    let dirs = scene_dirs(scenes)?;
    if dirs.is_empty() {
        bail!("no scene directories under {}", scenes.display());
    }
    let cells = sweep_cells(config, models, axis, values)?;
    let mut cache: BTreeMap<PathBuf, ParamSet> = BTreeMap::new();
    for cell in &cells {
        if cache.contains_key(&cell.checkpoint) {
            continue;
        }
        if !cell.checkpoint.is_file() {
            bail!(
                "strategy {} at value {} is untrained: no checkpoint at {}",
                cell.strategy.name(),
                cell.value,
                cell.checkpoint.display()
            );
        }
        let params = ParamSet::load(&cell.checkpoint)
            .with_context(|| format!("loading checkpoint {}", cell.checkpoint.display()))?;
        cache.insert(cell.checkpoint.clone(), params);
    }
    let report_dir = out.join("reports");
    std::fs::create_dir_all(&report_dir)?;
    config.persist(out)?;

    let mut csv = String::from("value,strategy,fa_s,miss_s,spkerr_s,der\n");
    for cell in &cells {
        let params = &cache[&cell.checkpoint];
        let spec = FusionSpec {
            strategy: cell.strategy,
            ..config.fusion
        };
        let scored: Vec<Result<DerReport>> = dirs
            .par_iter()
            .enumerate()
            .map(|(i, dir)| {
                let clean = load_scene(dir)?;
                let seed = split_seed(
                    config.seed,
                    "sweep",
                    ((cell.value_index as u64) << 32) | i as u64,
                );
                let degraded = corrupt(&clean, &cell.degrade, seed)?;
                let hypothesis =
                    enroll_iterate(params, &cell.model, &spec, &config.pipeline, &degraded)?;
                Ok(der(&clean.reference_segments(), &hypothesis, 0.0)?)
            })
            .collect();
        let mut fa = 0.0;
        let mut miss = 0.0;
        let mut spkerr = 0.0;
        let mut total = 0.0;
        for report in scored {
            let report = report?;
            fa += report.fa_s;
            miss += report.miss_s;
            spkerr += report.spkerr_s;
            total += report.total_ref_speech_s;
        }
        let errors = fa + miss + spkerr;
        let rate = if total > 0.0 {
            errors / total
        } else if errors == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        csv.push_str(&format!(
            "{},{},{fa},{miss},{spkerr},{rate}\n",
            cell.value,
            cell.strategy.name()
        ));
        println!(
            "{axis} {} / {}: DER {:.3}%",
            cell.value,
            cell.strategy.name(),
            rate * 100.0
        );
    }
    let path = report_dir.join("sweep.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("sweep matrix written to {}", path.display());
    Ok(())
}
