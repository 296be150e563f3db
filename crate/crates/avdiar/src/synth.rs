//! Synthetic audio-visual scene generation.
//!
//! A scene is a short multi-speaker conversation rendered directly in feature
//! space: per-speaker on/off activity chains ([`dialog`]), log filterbank
//! audio built from per-speaker spectral prototypes and visual lip patches
//! driven by a mouth-opening oscillation ([`render`]), optional degradation
//! ([`degrade`]), and a documented on-disk layout ([`io`]).
//!
//! Everything is a pure function of (config, seed): the same inputs reproduce
//! a scene bit for bit, which the golden and determinism tests rely on.

pub mod degrade;
pub mod dialog;
pub mod io;
pub mod render;

pub use degrade::{corrupt, CorruptionMode, DegradationSpec};
pub use dialog::{gen_dialog, ActivityLabels};
pub use io::{load_scene, save_scene};
pub use render::{render_audio, render_visual, speaker_pool};

use crate::frontend::{AudioFeatures, FrontendError};
use crate::numerics::rng::split_seed;
use crate::pipeline::segments::{RttmError, SegmentList};
use crate::Tensor;
use rand::seq::SliceRandom;
use std::path::PathBuf;
use thiserror::Error;

/// Seconds covered by one audio feature frame (10 ms hop).
pub const FRAME_SECONDS: f64 = 0.01;
/// Audio feature frames per video frame (100 Hz vs 25 fps).
pub const FRAMES_PER_VIDEO_FRAME: usize = 4;

/// Errors from scene generation and scene file I/O.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not reach target overlap {target} within {attempts} attempts")]
    OverlapUnreachable { target: f64, attempts: usize },
    #[error("bad corpus configuration: {0}")]
    BadConfig(String),
    #[error("scene file problem in {path}: {message}")]
    BadSceneFile { path: PathBuf, message: String },
    #[error("bad meta file line {line}: {message}")]
    BadMeta { line: usize, message: String },
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Rttm(#[from] RttmError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameters controlling corpus generation.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    /// Speakers per scene.
    pub n_speakers: usize,
    /// Scene length in seconds.
    pub duration_s: f64,
    /// Target overlap ratio (frames with two or more active speakers over
    /// frames with at least one), in `[0, 0.6]`.
    pub target_overlap: f64,
    /// Lip patch height in pixels.
    pub patch_h: usize,
    /// Lip patch width in pixels.
    pub patch_w: usize,
    /// Size of the global speaker identity pool scenes draw from.
    pub pool_size: usize,
    /// Master seed; scene `i` derives its own stream from it.
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 3,
            duration_s: 30.0,
            target_overlap: 0.25,
            patch_h: 24,
            patch_w: 24,
            pool_size: 12,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Audio feature frames per scene.
    pub fn num_frames(&self) -> usize {
        (self.duration_s / FRAME_SECONDS).round() as usize
    }

    /// Video frames per scene.
    pub fn num_video_frames(&self) -> usize {
        self.num_frames() / FRAMES_PER_VIDEO_FRAME
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.n_speakers == 0 {
            return Err(SynthError::BadConfig("n_speakers must be >= 1".into()));
        }
        if self.n_speakers > self.pool_size {
            return Err(SynthError::BadConfig(format!(
                "n_speakers {} exceeds pool_size {}",
                self.n_speakers, self.pool_size
            )));
        }
        if !(0.0..=0.6).contains(&self.target_overlap) {
            return Err(SynthError::BadConfig(format!(
                "target_overlap {} outside [0, 0.6]",
                self.target_overlap
            )));
        }
        if self.duration_s < 2.0 {
            return Err(SynthError::BadConfig(format!(
                "duration_s {} is too short for a dialog",
                self.duration_s
            )));
        }
        if self.patch_h == 0 || self.patch_w == 0 {
            return Err(SynthError::BadConfig("patch dims must be positive".into()));
        }
        Ok(())
    }
}

/// One generated scene: everything the model and the scorer need.
///
/// The visual stream is stored per speaker as a `[T_v x P]` tensor whose
/// values sit on the `k/255` grid so disk round trips are bitwise. Masked
/// video frames are all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Scene identifier, used as the RTTM uri.
    pub uri: String,
    /// `[T x 40]` log filterbank features.
    pub audio: AudioFeatures,
    /// Per-speaker `[T_v x P]` lip patches, `P = patch_h * patch_w`.
    pub visual: Vec<Tensor>,
    /// `[N][T_v]`; true marks a video frame whose lip content is unavailable.
    pub miss_mask: Vec<Vec<bool>>,
    /// `[N x 40]` spectral prototypes used to render the audio.
    pub speaker_prototypes: Tensor,
    /// Stable identity labels drawn from the global pool, e.g. `spk07`.
    pub speaker_names: Vec<String>,
    /// `[N x T]` frame activity ground truth.
    pub labels: ActivityLabels,
    /// Lip patch height.
    pub patch_h: usize,
    /// Lip patch width.
    pub patch_w: usize,
    /// Overlap ratio the dialog generator was asked for.
    pub target_overlap: f64,
    /// Overlap ratio the generated labels actually have.
    pub realized_overlap: f64,
}

impl Scene {
    /// Number of speakers.
    pub fn n_speakers(&self) -> usize {
        self.speaker_names.len()
    }

    /// Audio feature frames.
    pub fn num_frames(&self) -> usize {
        self.audio.num_frames()
    }

    /// Video frames.
    pub fn num_video_frames(&self) -> usize {
        self.visual.first().map_or(0, |v| v.rows())
    }

    /// Ground-truth turns as a segment list for RTTM output.
    pub fn reference_segments(&self) -> SegmentList {
        self.labels
            .to_segments(&self.uri, &self.speaker_names, FRAME_SECONDS)
            .expect("ground-truth runs are disjoint per speaker")
    }
}

/// Generates scene `index` of the corpus described by `config`.
///
/// Fully deterministic: the scene depends only on `(config, index)`.
pub fn gen_scene(config: &CorpusConfig, index: usize) -> Result<Scene, SynthError> {
    config.validate()?;
    let scene_seed = split_seed(config.seed, "scene", index as u64);

    let pool = speaker_pool(config.seed, config.pool_size);
    let mut rng = crate::numerics::rng::seeded_rng(split_seed(scene_seed, "cast", 0));
    let mut ids: Vec<usize> = (0..config.pool_size).collect();
    ids.shuffle(&mut rng);
    let mut cast: Vec<usize> = ids[..config.n_speakers].to_vec();
    cast.sort_unstable();

    let labels = gen_dialog(
        config.n_speakers,
        config.duration_s,
        config.target_overlap,
        split_seed(scene_seed, "dialog", 0),
    )?;
    let realized = labels.overlap_ratio();

    let proto_rows: Vec<Vec<f64>> = cast.iter().map(|&i| pool.row(i).to_vec()).collect();
    let prototypes = Tensor::from_rows(&proto_rows).expect("pool rows share a length");

    let audio = render_audio(&labels, &prototypes, split_seed(scene_seed, "audio", 0))?;
    let (visual, miss_mask) = render_visual(
        &labels,
        config.patch_h,
        config.patch_w,
        split_seed(scene_seed, "visual", 0),
    );

    Ok(Scene {
        uri: format!("scene{index:04}"),
        audio,
        visual,
        miss_mask,
        speaker_prototypes: prototypes,
        speaker_names: cast.iter().map(|i| format!("spk{i:02}")).collect(),
        labels,
        patch_h: config.patch_h,
        patch_w: config.patch_w,
        target_overlap: config.target_overlap,
        realized_overlap: realized,
    })
}

/// Where scenes come from: generated on the fly or loaded from disk.
///
/// Generation is cheap and deterministic, so the synthetic variant stores
/// only the recipe; a corpus never has to fit in memory.
#[derive(Debug, Clone)]
pub enum SceneSource {
    /// Scene directories written by [`save_scene`].
    Disk(Vec<PathBuf>),
    /// Scenes `0..count` of a synthetic corpus.
    Synth { config: CorpusConfig, count: usize },
    /// One explicit `(config, index)` recipe per scene, so a corpus can mix
    /// speaker counts or durations.
    Recipes(Vec<(CorpusConfig, usize)>),
}

impl SceneSource {
    /// Number of scenes available.
    pub fn len(&self) -> usize {
        match self {
            SceneSource::Disk(paths) => paths.len(),
            SceneSource::Synth { count, .. } => *count,
            SceneSource::Recipes(recipes) => recipes.len(),
        }
    }

    /// True when no scenes are available.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Produces scene `index`, generating or loading as needed.
    pub fn scene(&self, index: usize) -> Result<Scene, SynthError> {
        match self {
            SceneSource::Disk(paths) => load_scene(&paths[index]),
            SceneSource::Synth { config, count } => {
                assert!(index < *count, "scene index {index} out of range {count}");
                gen_scene(config, index)
            }
            SceneSource::Recipes(recipes) => {
                let (config, i) = &recipes[index];
                gen_scene(config, *i)
            }
        }
    }
}
