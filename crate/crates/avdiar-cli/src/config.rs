//! Plain-text run configuration.
//!
//! One `key = value` pair per line; blank lines and lines starting with `#`
//! are ignored. Unknown keys are rejected so a typo cannot silently fall
//! back to a default. Every command persists the fully resolved
//! configuration next to its outputs, and [`RunConfig::resolved`] round-trips
//! through [`RunConfig::parse`].

use anyhow::{anyhow, bail, Context, Result};
use avdiar::fusion::{FusionSpec, FusionStrategy};
use avdiar::pipeline::PipelineConfig;
use avdiar::synth::{CorruptionMode, DegradationSpec};
use avdiar::training::TrainConfig;
use avdiar::ModelConfig;
use std::path::Path;

/// Corpus shape: per-scene parameters plus split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    /// Speaker counts cycled across scene indices within each split.
    pub speakers: Vec<usize>,
    /// Scene length in seconds.
    pub duration_s: f64,
    /// Target overlap ratio per scene.
    pub target_overlap: f64,
    /// Lip patch height in pixels.
    pub patch_h: usize,
    /// Lip patch width in pixels.
    pub patch_w: usize,
    /// Speaker identity pool size per split.
    pub pool_size: usize,
    /// Scenes in the training split.
    pub train_count: usize,
    /// Scenes in the development split.
    pub dev_count: usize,
    /// Scenes in the evaluation split.
    pub eval_count: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            speakers: vec![2, 3, 4],
            duration_s: 30.0,
            target_overlap: 0.25,
            patch_h: 24,
            patch_w: 24,
            pool_size: 12,
            train_count: 200,
            dev_count: 20,
            eval_count: 20,
        }
    }
}

/// Everything a run needs, resolvable from one file plus a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; corpus splits, training, and degradation derive from it.
    pub seed: u64,
    /// True when the config file itself pinned the seed; flags and the
    /// `AVDIAR_SEED` environment variable only fill in when it did not.
    pub seed_from_file: bool,
    pub model: ModelConfig,
    pub fusion: FusionSpec,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub degrade: DegradationSpec,
    pub corpus: CorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seed_from_file: false,
            model: ModelConfig::default(),
            fusion: FusionSpec::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            degrade: DegradationSpec::default(),
            corpus: CorpusSpec::default(),
        }
    }
}

fn p_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| anyhow!("key {key}: expected a nonnegative integer, got {value:?}"))
}

fn p_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| anyhow!("key {key}: expected a nonnegative integer, got {value:?}"))
}

fn p_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| anyhow!("key {key}: expected a number, got {value:?}"))
}

fn p_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("key {key}: expected true or false, got {value:?}"),
    }
}

impl RunConfig {
    /// Parses a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {raw:?}", idx + 1))?;
            config
                .apply(key.trim(), value.trim())
                .with_context(|| format!("line {}", idx + 1))?;
        }
        Ok(config)
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies one key, rejecting unknown names.
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = p_u64(key, value)?;
                self.train.seed = self.seed;
                self.seed_from_file = true;
            }
            "model.d_v" => self.model.d_v = p_usize(key, value)?,
            "model.d_a" => self.model.d_a = p_usize(key, value)?,
            "model.d_ia" => self.model.d_ia = p_usize(key, value)?,
            "model.d_i" => self.model.d_i = p_usize(key, value)?,
            "model.heads" => self.model.heads = p_usize(key, value)?,
            "model.qa_layers" => self.model.qa_layers = p_usize(key, value)?,
            "model.xs_layers" => self.model.xs_layers = p_usize(key, value)?,
            "model.ffn_mult" => self.model.ffn_mult = p_usize(key, value)?,
            "fusion.strategy" => self.fusion.strategy = FusionStrategy::parse(value)?,
            "fusion.sync_window" => self.fusion.sync_window = p_usize(key, value)?,
            "fusion.sync_scale" => self.fusion.sync_scale = p_f64(key, value)?,
            "train.margin" => self.train.margin = p_f64(key, value)?,
            "train.lambda" => self.train.lambda = p_f64(key, value)?,
            "train.lr1" => self.train.lr[0] = p_f64(key, value)?,
            "train.lr2" => self.train.lr[1] = p_f64(key, value)?,
            "train.lr3" => self.train.lr[2] = p_f64(key, value)?,
            "train.epochs1" => self.train.epochs[0] = p_usize(key, value)?,
            "train.epochs2" => self.train.epochs[1] = p_usize(key, value)?,
            "train.epochs3" => self.train.epochs[2] = p_usize(key, value)?,
            "train.batch_scenes" => self.train.batch_scenes = p_usize(key, value)?,
            "train.pairs_per_scene" => self.train.pairs_per_scene = p_usize(key, value)?,
            "train.crop_frames" => self.train.crop_frames = p_usize(key, value)?,
            "train.augment_visual" => self.train.augment_visual = p_bool(key, value)?,
            "pipeline.threshold" => self.pipeline.threshold = p_f64(key, value)?,
            "pipeline.min_gap" => self.pipeline.min_gap = p_f64(key, value)?,
            "pipeline.min_duration" => self.pipeline.min_duration = p_f64(key, value)?,
            "pipeline.enroll_iters" => self.pipeline.enroll_iters = p_usize(key, value)?,
            "degrade.miss_rate" => self.degrade.miss_rate = p_f64(key, value)?,
            "degrade.resolution_factor" => {
                self.degrade.resolution_factor = p_usize(key, value)?;
            }
            "degrade.corruption_mode" => {
                self.degrade.corruption_mode = CorruptionMode::parse(value)?;
            }
            "degrade.audio_noise_snr" => {
                self.degrade.audio_noise_snr = if value == "none" {
                    None
                } else {
                    Some(p_f64(key, value)?)
                };
            }
            "corpus.speakers" => {
                let speakers: Vec<usize> = value
                    .split(',')
                    .map(|v| p_usize(key, v.trim()))
                    .collect::<Result<_>>()?;
                if speakers.is_empty() || speakers.contains(&0) {
                    bail!("key {key}: expected a comma list of positive speaker counts");
                }
                self.corpus.speakers = speakers;
            }
            "corpus.duration_s" => self.corpus.duration_s = p_f64(key, value)?,
            "corpus.target_overlap" => self.corpus.target_overlap = p_f64(key, value)?,
            "corpus.patch_h" => self.corpus.patch_h = p_usize(key, value)?,
            "corpus.patch_w" => self.corpus.patch_w = p_usize(key, value)?,
            "corpus.pool_size" => self.corpus.pool_size = p_usize(key, value)?,
            "corpus.train_count" => self.corpus.train_count = p_usize(key, value)?,
            "corpus.dev_count" => self.corpus.dev_count = p_usize(key, value)?,
            "corpus.eval_count" => self.corpus.eval_count = p_usize(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Settles the effective seed: a flag wins, then a seed from the file,
    /// then `AVDIAR_SEED`, then zero. The training schedule inherits it.
    pub fn finish_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(seed) = flag {
            self.seed = seed;
        } else if !self.seed_from_file {
            if let Ok(text) = std::env::var("AVDIAR_SEED") {
                self.seed = text
                    .parse()
                    .map_err(|_| anyhow!("AVDIAR_SEED: expected an integer, got {text:?}"))?;
            }
        }
        self.seed_from_file = true;
        self.train.seed = self.seed;
        Ok(())
    }

    /// Serializes every setting in a fixed order; parsing the result
    /// reproduces this configuration.
    pub fn resolved(&self) -> String {
        let snr = match self.degrade.audio_noise_snr {
            Some(v) => v.to_string(),
            None => "none".into(),
        };
        let speakers: Vec<String> = self.corpus.speakers.iter().map(usize::to_string).collect();
        format!(
            "seed = {}\n\
             model.d_v = {}\nmodel.d_a = {}\nmodel.d_ia = {}\nmodel.d_i = {}\n\
             model.heads = {}\nmodel.qa_layers = {}\nmodel.xs_layers = {}\nmodel.ffn_mult = {}\n\
             fusion.strategy = {}\nfusion.sync_window = {}\nfusion.sync_scale = {}\n\
             train.margin = {}\ntrain.lambda = {}\n\
             train.lr1 = {}\ntrain.lr2 = {}\ntrain.lr3 = {}\n\
             train.epochs1 = {}\ntrain.epochs2 = {}\ntrain.epochs3 = {}\n\
             train.batch_scenes = {}\ntrain.pairs_per_scene = {}\ntrain.crop_frames = {}\n\
             train.augment_visual = {}\n\
             pipeline.threshold = {}\npipeline.min_gap = {}\npipeline.min_duration = {}\n\
             pipeline.enroll_iters = {}\n\
             degrade.miss_rate = {}\ndegrade.resolution_factor = {}\n\
             degrade.corruption_mode = {}\ndegrade.audio_noise_snr = {}\n\
             corpus.speakers = {}\ncorpus.duration_s = {}\ncorpus.target_overlap = {}\n\
             corpus.patch_h = {}\ncorpus.patch_w = {}\ncorpus.pool_size = {}\n\
             corpus.train_count = {}\ncorpus.dev_count = {}\ncorpus.eval_count = {}\n",
            self.seed,
            self.model.d_v,
            self.model.d_a,
            self.model.d_ia,
            self.model.d_i,
            self.model.heads,
            self.model.qa_layers,
            self.model.xs_layers,
            self.model.ffn_mult,
            self.fusion.strategy.name(),
            self.fusion.sync_window,
            self.fusion.sync_scale,
            self.train.margin,
            self.train.lambda,
            self.train.lr[0],
            self.train.lr[1],
            self.train.lr[2],
            self.train.epochs[0],
            self.train.epochs[1],
            self.train.epochs[2],
            self.train.batch_scenes,
            self.train.pairs_per_scene,
            self.train.crop_frames,
            self.train.augment_visual,
            self.pipeline.threshold,
            self.pipeline.min_gap,
            self.pipeline.min_duration,
            self.pipeline.enroll_iters,
            self.degrade.miss_rate,
            self.degrade.resolution_factor,
            self.degrade.corruption_mode.name(),
            snr,
            speakers.join(","),
            self.corpus.duration_s,
            self.corpus.target_overlap,
            self.corpus.patch_h,
            self.corpus.patch_w,
            self.corpus.pool_size,
            self.corpus.train_count,
            self.corpus.dev_count,
            self.corpus.eval_count,
        )
    }

    /// Writes the resolved configuration into `out_dir/config.resolved`.
    pub fn persist(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("config.resolved");
        std::fs::write(&path, self.resolved())
            .with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let config = RunConfig::parse("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert!(!config.seed_from_file);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let config = RunConfig::parse("# a comment\n\n  seed = 9  \n").unwrap();
        assert_eq!(config.seed, 9);
        assert!(config.seed_from_file);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::parse("model.d_q = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("model.d_q"));
        let err = RunConfig::parse("threshold = 0.4\n").unwrap_err();
        assert!(format!("{err:#}").contains("threshold"));
    }

    #[test]
    fn bad_values_name_the_key_and_line() {
        let err = RunConfig::parse("seed = 1\ntrain.margin = wide\n").unwrap_err();
        let text = format!("{err:#}");
        assert!(text.contains("train.margin"));
        assert!(text.contains("line 2"));
        assert!(RunConfig::parse("just words\n").is_err());
    }

    #[test]
    fn every_field_is_settable() {
        let text = "\
            seed = 3\n\
            model.d_v = 16\nmodel.d_a = 16\nmodel.d_ia = 16\nmodel.d_i = 8\n\
            model.heads = 2\nmodel.qa_layers = 1\nmodel.xs_layers = 2\nmodel.ffn_mult = 2\n\
            fusion.strategy = cross\nfusion.sync_window = 6\nfusion.sync_scale = 2.0\n\
            train.margin = 0.5\ntrain.lambda = 0.2\n\
            train.lr1 = 0.01\ntrain.lr2 = 0.02\ntrain.lr3 = 0.003\n\
            train.epochs1 = 1\ntrain.epochs2 = 2\ntrain.epochs3 = 3\n\
            train.batch_scenes = 4\ntrain.pairs_per_scene = 5\ntrain.crop_frames = 80\n\
            train.augment_visual = false\n\
            pipeline.threshold = 0.4\npipeline.min_gap = 0.1\npipeline.min_duration = 0.3\n\
            pipeline.enroll_iters = 3\n\
            degrade.miss_rate = 0.25\ndegrade.resolution_factor = 4\n\
            degrade.corruption_mode = swap_lips\ndegrade.audio_noise_snr = 12.5\n\
            corpus.speakers = 2, 3\ncorpus.duration_s = 8\ncorpus.target_overlap = 0.1\n\
            corpus.patch_h = 8\ncorpus.patch_w = 8\ncorpus.pool_size = 7\n\
            corpus.train_count = 5\ncorpus.dev_count = 2\ncorpus.eval_count = 1\n";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.model.d_v, 16);
        assert_eq!(config.fusion.strategy, FusionStrategy::Cross);
        assert_eq!(config.train.lr, [0.01, 0.02, 0.003]);
        assert_eq!(config.train.epochs, [1, 2, 3]);
        assert!(!config.train.augment_visual);
        assert_eq!(config.degrade.audio_noise_snr, Some(12.5));
        assert_eq!(config.corpus.speakers, vec![2, 3]);
        assert_eq!(config.pipeline.enroll_iters, 3);
    }

    #[test]
    fn resolved_round_trips_through_parse() {
        let mut config = RunConfig::parse(
            "seed = 5\nfusion.strategy = factorized\ndegrade.audio_noise_snr = 6\n\
             corpus.speakers = 4\ntrain.lr3 = 0.00025\n",
        )
        .unwrap();
        config.finish_seed(None).unwrap();
        let back = RunConfig::parse(&config.resolved()).unwrap();
        assert_eq!(back, config);
        let again = RunConfig::parse(&back.resolved()).unwrap();
        assert_eq!(again.resolved(), config.resolved());
    }

    #[test]
    fn seed_precedence_is_flag_file_env() {
        let mut from_file = RunConfig::parse("seed = 7\n").unwrap();
        from_file.finish_seed(Some(11)).unwrap();
        assert_eq!(from_file.seed, 11);
        assert_eq!(from_file.train.seed, 11);

        let mut from_file = RunConfig::parse("seed = 7\n").unwrap();
        from_file.finish_seed(None).unwrap();
        assert_eq!(from_file.seed, 7);
    }

    #[test]
    fn none_spelling_clears_audio_noise() {
        let config =
            RunConfig::parse("degrade.audio_noise_snr = 3\ndegrade.audio_noise_snr = none\n")
                .unwrap();
        assert_eq!(config.degrade.audio_noise_snr, None);
    }
}
