//! Losses, lip-sync pair sampling, visual augmentation, and the three-stage
//! optimization schedule.
//!
//! Stage 1 trains the encoders and the speaker-audio projection with a
//! contrastive loss over genuine and false audio-visual pairs, so the
//! windowed embedding distance becomes a usable sync confidence. Stage 2
//! freezes those parts and trains fusion, exchange, and both heads with
//! activity cross entropy. Stage 3 unfreezes everything and trains the whole
//! network jointly at a lower learning rate, keeping a scaled contrastive
//! term so the sync signal survives, with random visual corruption on the
//! activity path. Each stage rolls back to the last finished epoch and
//! reports an error if its loss leaves the finite range.

use crate::encoders::{
    audio_encode_nodes, fuse_speaker_audio_nodes, init_encoder_params, speaker_embed_nodes,
    visual_encode_nodes, AttributedFrames, EncoderError,
};
use crate::exchange::{forward_nodes, init_exchange_params, ExchangeError};
use crate::frontend::fbank::NUM_FILTERS;
use crate::frontend::AudioFeatures;
use crate::fusion::{
    init_fusion_params, sync_distance_nodes, FusionError, FusionSpec, FusionStrategy,
};
use crate::numerics::optim::{adam_step, AdamHyper};
use crate::numerics::rng::{seeded_rng, split_seed};
use crate::numerics::NumericsError;
use crate::synth::{
    corrupt, CorruptionMode, DegradationSpec, Scene, SceneSource, SynthError,
    FRAMES_PER_VIDEO_FRAME,
};
use crate::{Graph, ModelConfig, NodeId, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

/// Audio frames in one contrastive pair window (one second).
pub const PAIR_FRAMES: usize = 100;
/// Video frames in one contrastive pair window.
pub const PAIR_VIDEO_FRAMES: usize = PAIR_FRAMES / FRAMES_PER_VIDEO_FRAME;
/// Smallest false-pair shift in video frames (half a second, rounded up so a
/// zero or sub-threshold shift can never be drawn).
pub const MIN_SHIFT: usize = 13;
/// Largest false-pair shift in video frames (two seconds).
pub const MAX_SHIFT: usize = 50;

const AUG_MISS_RATE_LO: f64 = 0.1;
const AUG_MISS_RATE_HI: f64 = 0.5;
const AUG_MODES: [CorruptionMode; 3] = [
    CorruptionMode::Zeros,
    CorruptionMode::RandomValues,
    CorruptionMode::SwapLips,
];
/// Enrollment fallback for a speaker without enough solo frames in a crop.
fn neutral_speaker_vector(d_i: usize) -> Tensor {
    Tensor::full(&[1, d_i], 1.0 / (d_i as f64).sqrt())
}

/// Errors from pair sampling, loss evaluation, or a training stage.
#[derive(Debug, Error)]
pub enum TrainError {
    /// Invalid training configuration.
    #[error("training configuration: {0}")]
    BadConfig(String),
    /// A scene cannot supply the requested contrastive pairs.
    #[error("pair sampling: {0}")]
    Sampling(String),
    /// The loss left the finite range; parameters were rolled back to the
    /// last finished epoch.
    #[error("stage {stage} diverged in epoch {epoch}: loss {loss}")]
    Diverged { stage: u8, epoch: usize, loss: f64 },
    /// Scene generation or loading failed.
    #[error(transparent)]
    Synth(#[from] SynthError),
    /// Encoder stage failure.
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    /// Fusion stage failure.
    #[error(transparent)]
    Fusion(#[from] FusionError),
    /// Exchange or full-forward failure.
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    /// Tensor or tape failure.
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    /// Checkpoint or log file problem.
    #[error("training i/o: {0}")]
    Io(String),
}

/// Hyperparameters of the three-stage schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Contrastive hinge margin.
    pub margin: f64,
    /// Weight of the contrastive term in the joint stage-3 loss.
    pub lambda: f64,
    /// Learning rate per stage.
    pub lr: [f64; 3],
    /// Epochs per stage.
    pub epochs: [usize; 3],
    /// Scenes per optimizer step.
    pub batch_scenes: usize,
    /// Contrastive pairs drawn per scene.
    pub pairs_per_scene: usize,
    /// Audio frames per activity-loss crop; must be a multiple of 4.
    pub crop_frames: usize,
    /// Master seed for shuffling, sampling, crops, and augmentation.
    pub seed: u64,
    /// Random visual corruption on the stage-3 activity path.
    pub augment_visual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 1.0,
            lambda: 0.1,
            lr: [1e-3, 1e-3, 1e-4],
            epochs: [4, 4, 2],
            batch_scenes: 8,
            pairs_per_scene: 8,
            crop_frames: 200,
            seed: 0,
            augment_visual: true,
        }
    }
}

impl TrainConfig {
    /// Checks every field range.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "margin must be positive and finite, got {}",
                self.margin
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "lambda must be nonnegative and finite, got {}",
                self.lambda
            )));
        }
        for (i, &lr) in self.lr.iter().enumerate() {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(TrainError::BadConfig(format!(
                    "stage-{} learning rate must be positive, got {lr}",
                    i + 1
                )));
            }
        }
        if self.lr[2] > self.lr[1] {
            return Err(TrainError::BadConfig(format!(
                "joint-stage learning rate {} must not exceed the stage-2 rate {}",
                self.lr[2], self.lr[1]
            )));
        }
        if self.batch_scenes == 0 {
            return Err(TrainError::BadConfig("batch_scenes must be >= 1".into()));
        }
        if self.pairs_per_scene == 0 {
            return Err(TrainError::BadConfig(
                "pairs_per_scene must be >= 1".into(),
            ));
        }
        if self.crop_frames < 20 || self.crop_frames % FRAMES_PER_VIDEO_FRAME != 0 {
            return Err(TrainError::BadConfig(format!(
                "crop_frames must be >= 20 and a multiple of {FRAMES_PER_VIDEO_FRAME}, got {}",
                self.crop_frames
            )));
        }
        Ok(())
    }
}

/// Registers every model parameter, fresh and seeded: encoders, the chosen
/// fusion structure, and the exchange stack with both heads.
pub fn init_model_params(
    params: &mut ParamSet,
    config: &ModelConfig,
    patch_dim: usize,
    strategy: FusionStrategy,
    seed: u64,
) -> Result<(), TrainError> {
    init_encoder_params(params, config, patch_dim, seed)?;
    init_fusion_params(params, config, strategy, seed)?;
    init_exchange_params(params, config, seed)?;
    Ok(())
}

/// How the visual side of a contrastive pair was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    /// Visual window aligned with the audio window.
    Genuine,
    /// Visual window shifted by this many video frames.
    Shifted(isize),
    /// Visual window taken from this other speaker.
    Swapped(usize),
}

/// One second of audio attributed to a speaker, paired with a visual window
/// that is either aligned (genuine) or deliberately mismatched (false).
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    /// Construction rule of the visual side.
    pub kind: PairKind,
    /// Audio-side speaker index in the scene.
    pub speaker: usize,
    /// First audio frame of the window, always a multiple of 4.
    pub start_frame: usize,
    /// `[PAIR_FRAMES x 40]` audio features of the window.
    pub audio: AudioFeatures,
    /// `[PAIR_VIDEO_FRAMES x P]` lip patches of the visual side.
    pub patches: Tensor,
    /// Miss flags of the visual side.
    pub miss: Vec<bool>,
}

impl ContrastivePair {
    /// Label of the pair; genuine pairs are the positive class.
    pub fn is_genuine(&self) -> bool {
        matches!(self.kind, PairKind::Genuine)
    }
}

/// A class-balanced set of contrastive pairs from one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub pairs: Vec<ContrastivePair>,
}

/// Audio windows `[t0, t0 + PAIR_FRAMES)` that sit inside one active run of
/// one speaker, with `t0` on the video grid.
fn eligible_windows(scene: &Scene) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for n in 0..scene.n_speakers() {
        for (start, len) in scene.labels.active_runs(n) {
            if len < PAIR_FRAMES {
                continue;
            }
            let first = start.div_ceil(FRAMES_PER_VIDEO_FRAME) * FRAMES_PER_VIDEO_FRAME;
            let mut t0 = first;
            while t0 + PAIR_FRAMES <= start + len {
                out.push((n, t0));
                t0 += FRAMES_PER_VIDEO_FRAME;
            }
        }
    }
    out
}

fn crop_audio(audio: &AudioFeatures, start: usize, frames: usize) -> AudioFeatures {
    let data = audio.frames.data()[start * NUM_FILTERS..(start + frames) * NUM_FILTERS].to_vec();
    AudioFeatures::new(Tensor::from_vec(&[frames, NUM_FILTERS], data).expect("window fits"))
        .expect("window keeps the filter count")
}

fn crop_patches(patches: &Tensor, start_video: usize, video_frames: usize) -> Tensor {
    let p = patches.cols();
    let data = patches.data()[start_video * p..(start_video + video_frames) * p].to_vec();
    Tensor::from_vec(&[video_frames, p], data).expect("window fits")
}

/// Draws a shift for a false pair that keeps the window inside the scene,
/// or `None` when no legal shift exists.
fn draw_shift(rng: &mut ChaCha8Rng, start_video: usize, total_video: usize) -> Option<isize> {
    let mut feasible = Vec::new();
    for o in MIN_SHIFT..=MAX_SHIFT {
        if start_video >= o {
            feasible.push(-(o as isize));
        }
        if start_video + o + PAIR_VIDEO_FRAMES <= total_video {
            feasible.push(o as isize);
        }
    }
    feasible.choose(rng).copied()
}

/// Samples a class-balanced contrastive batch from one scene.
///
/// Genuine pairs are aligned one-second windows inside a speaker's active
/// runs, overlap included. False pairs keep the audio window and either
/// shift the visual window by 0.5 to 2 seconds or take another speaker's
/// lips. Classes differ by at most one pair when `n_pairs` is odd.
pub fn sample_pairs(
    scene: &Scene,
    n_pairs: usize,
    seed: u64,
) -> Result<ContrastiveBatch, TrainError> {
    if n_pairs == 0 {
        return Err(TrainError::Sampling("n_pairs must be >= 1".into()));
    }
    let windows = eligible_windows(scene);
    if windows.is_empty() {
        return Err(TrainError::Sampling(format!(
            "scene {} has no speaker with {PAIR_FRAMES} contiguous attributed frames",
            scene.uri
        )));
    }
    let total_video = scene.num_video_frames();
    let mut rng = seeded_rng(seed);
    let n_genuine = n_pairs.div_ceil(2);
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let &(speaker, t0) = windows.choose(&mut rng).expect("nonempty window list");
        let v0 = t0 / FRAMES_PER_VIDEO_FRAME;
        let audio = crop_audio(&scene.audio, t0, PAIR_FRAMES);
        let (kind, visual_speaker, visual_v0) = if i < n_genuine {
            (PairKind::Genuine, speaker, v0)
        } else {
            let want_shift = rng.gen_bool(0.5);
            let shift = draw_shift(&mut rng, v0, total_video);
            let swap = if scene.n_speakers() > 1 {
                let mut other = rng.gen_range(0..scene.n_speakers() - 1);
                if other >= speaker {
                    other += 1;
                }
                Some(other)
            } else {
                None
            };
            match (want_shift, shift, swap) {
                (true, Some(o), _) | (false, Some(o), None) => {
                    (PairKind::Shifted(o), speaker, (v0 as isize + o) as usize)
                }
                (false, _, Some(m)) | (true, None, Some(m)) => (PairKind::Swapped(m), m, v0),
                (_, None, None) => {
                    return Err(TrainError::Sampling(format!(
                        "scene {} is too short to shift and has one speaker; no false pair possible",
                        scene.uri
                    )))
                }
            }
        };
        pairs.push(ContrastivePair {
            kind,
            speaker,
            start_frame: t0,
            audio,
            patches: crop_patches(&scene.visual[visual_speaker], visual_v0, PAIR_VIDEO_FRAMES),
            miss: scene.miss_mask[visual_speaker][visual_v0..visual_v0 + PAIR_VIDEO_FRAMES]
                .to_vec(),
        });
    }
    Ok(ContrastiveBatch { pairs })
}

/// Maps a `[T x 1]` windowed-distance column to per-frame contrastive terms:
/// squared distance for a genuine pair, squared hinge `max(margin - L, 0)^2`
/// for a false one.
pub fn contrastive_terms_nodes(
    graph: &mut Graph,
    dist: NodeId,
    genuine: bool,
    margin: f64,
) -> NodeId {
    if genuine {
        graph.mul(dist, dist).expect("same node shares a shape")
    } else {
        let hinge = graph.affine_const(dist, -1.0, margin);
        let hinge = graph.relu(hinge);
        graph.mul(hinge, hinge).expect("same node shares a shape")
    }
}

/// Builds the full contrastive loss of a batch on the graph: each pair runs
/// through the visual encoder and the speaker-wise audio path, its windowed
/// distance feeds the per-frame terms, and pair means are averaged.
///
/// The pair's speaker vector is embedded in-graph from the whole audio
/// window, so the speaker projection trains with everything else.
pub fn contrastive_loss_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    batch: &ContrastiveBatch,
    margin: f64,
    window: usize,
) -> Result<NodeId, TrainError> {
    if batch.pairs.is_empty() {
        return Err(TrainError::Sampling("empty contrastive batch".into()));
    }
    if !(margin > 0.0) || !margin.is_finite() {
        return Err(TrainError::BadConfig(format!(
            "margin must be positive and finite, got {margin}"
        )));
    }
    let mut sum: Option<NodeId> = None;
    for pair in &batch.pairs {
        let e_v = visual_encode_nodes(
            graph,
            params,
            &[pair.patches.clone()],
            &[pair.miss.clone()],
        )?;
        let e_a = audio_encode_nodes(graph, params, &pair.audio)?;
        let attributed = AttributedFrames {
            speaker: format!("pair-spk{}", pair.speaker),
            frames: (0..PAIR_FRAMES).collect(),
        };
        let vectors = speaker_embed_nodes(graph, params, e_a, &[attributed])?;
        let e_ia = fuse_speaker_audio_nodes(graph, params, e_a, &vectors)?;
        let dist = sync_distance_nodes(graph, &e_ia, &e_v, window)?;
        let terms = contrastive_terms_nodes(graph, dist[0], pair.is_genuine(), margin);
        let pair_loss = graph.mean_all(terms);
        sum = Some(match sum {
            None => pair_loss,
            Some(acc) => graph.add(acc, pair_loss)?,
        });
    }
    let total = sum.expect("nonempty batch");
    Ok(graph.affine_const(total, 1.0 / batch.pairs.len() as f64, 0.0))
}

/// Evaluates the contrastive loss of a batch under the current parameters.
pub fn contrastive_loss(
    params: &ParamSet,
    batch: &ContrastiveBatch,
    margin: f64,
    window: usize,
) -> Result<f64, TrainError> {
    let mut graph = Graph::new();
    let loss = contrastive_loss_nodes(&mut graph, params, batch, margin, window)?;
    Ok(graph.value(loss).item())
}

/// Builds the mean binary cross entropy between stacked per-speaker
/// posterior columns and `[N x T]` zero/one labels.
fn bce_loss_nodes(
    graph: &mut Graph,
    posteriors: &[NodeId],
    labels: &Tensor,
) -> Result<NodeId, TrainError> {
    let stacked = graph.concat_rows(posteriors)?;
    let target = Tensor::from_vec(&[labels.len(), 1], labels.data().to_vec())
        .expect("flattening keeps the element count");
    Ok(graph.bce(stacked, &target)?)
}

/// Mean binary cross entropy between activity labels and posteriors, both
/// `[N x T]`, with natural logarithms.
pub fn bce_loss(labels: &Tensor, posteriors: &Tensor) -> Result<f64, TrainError> {
    if labels.shape() != posteriors.shape() {
        return Err(TrainError::BadConfig(format!(
            "labels {:?} and posteriors {:?} must share a shape",
            labels.shape(),
            posteriors.shape()
        )));
    }
    let mut graph = Graph::new();
    let probs = graph.input(posteriors.clone());
    let loss = graph.bce(probs, labels)?;
    Ok(graph.value(loss).item())
}

/// Joint stage-3 objective: `lambda` times the contrastive loss plus the
/// activity cross entropy.
pub fn joint_loss(j_c: f64, j_av: f64, lambda: f64) -> f64 {
    lambda * j_c + j_av
}

/// One epoch row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Stage number, 1 to 3.
    pub stage: u8,
    /// Epoch within the stage, starting at 1.
    pub epoch: usize,
    /// Mean training loss over the epoch's scenes.
    pub train_loss: f64,
    /// Mean sync weight over genuine validation pairs (stage 1).
    pub val_w_genuine: Option<f64>,
    /// Mean sync weight over false validation pairs (stage 1).
    pub val_w_false: Option<f64>,
    /// Mean validation activity cross entropy (stages 2 and 3).
    pub val_bce: Option<f64>,
}

/// Writes the epoch log as CSV with one row per epoch; inapplicable metric
/// cells stay empty.
pub fn write_log_csv(path: &Path, epochs: &[EpochStats]) -> Result<(), TrainError> {
    let mut out = String::from("stage,epoch,train_loss,val_w_genuine,val_w_false,val_bce\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in epochs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.stage,
            e.epoch,
            e.train_loss,
            cell(e.val_w_genuine),
            cell(e.val_w_false),
            cell(e.val_bce)
        ));
    }
    std::fs::write(path, out).map_err(|e| TrainError::Io(format!("{path:?}: {e}")))
}

/// Mean sync weight over the genuine and the false validation pairs, drawn
/// with scene-indexed seeds so the metric is comparable across epochs.
pub fn val_sync_means(
    params: &ParamSet,
    spec: &FusionSpec,
    tc: &TrainConfig,
    scenes: &SceneSource,
) -> Result<(f64, f64), TrainError> {
    let mut genuine = (0.0, 0usize);
    let mut false_ = (0.0, 0usize);
    for idx in 0..scenes.len() {
        let scene = scenes.scene(idx)?;
        let batch = sample_pairs(
            &scene,
            tc.pairs_per_scene,
            split_seed(tc.seed, "val-pairs", idx as u64),
        )?;
        let mut graph = Graph::new();
        for pair in &batch.pairs {
            let e_v = visual_encode_nodes(
                &mut graph,
                params,
                &[pair.patches.clone()],
                &[pair.miss.clone()],
            )?;
            let e_a = audio_encode_nodes(&mut graph, params, &pair.audio)?;
            let attributed = AttributedFrames {
                speaker: format!("pair-spk{}", pair.speaker),
                frames: (0..PAIR_FRAMES).collect(),
            };
            let vectors = speaker_embed_nodes(&mut graph, params, e_a, &[attributed])?;
            let e_ia = fuse_speaker_audio_nodes(&mut graph, params, e_a, &vectors)?;
            let dist = sync_distance_nodes(&mut graph, &e_ia, &e_v, spec.sync_window)?;
            let w_mean = graph
                .value(dist[0])
                .data()
                .iter()
                .map(|&l| spec.sync_scale / (spec.sync_scale + l))
                .sum::<f64>()
                / PAIR_FRAMES as f64;
            let slot = if pair.is_genuine() {
                &mut genuine
            } else {
                &mut false_
            };
            slot.0 += w_mean;
            slot.1 += 1;
        }
    }
    if genuine.1 == 0 || false_.1 == 0 {
        return Err(TrainError::Sampling(
            "validation scenes produced no pairs of one class".into(),
        ));
    }
    Ok((genuine.0 / genuine.1 as f64, false_.0 / false_.1 as f64))
}

/// A scene crop ready for the activity loss: aligned audio, per-speaker
/// visual windows, and audio-rate labels.
struct SceneCrop {
    audio: AudioFeatures,
    patches: Vec<Tensor>,
    miss: Vec<Vec<bool>>,
    labels: Tensor,
    solo_frames: Vec<Vec<usize>>,
}

/// Cuts a label-aligned crop of `crop_frames` audio frames starting at a
/// video-grid offset drawn from `rng`; shorter scenes are used whole.
fn crop_scene(scene: &Scene, crop_frames: usize, rng: &mut ChaCha8Rng) -> SceneCrop {
    let total = scene.num_frames() - scene.num_frames() % FRAMES_PER_VIDEO_FRAME;
    let frames = crop_frames.min(total);
    let max_start_video = (total - frames) / FRAMES_PER_VIDEO_FRAME;
    let start = rng.gen_range(0..=max_start_video) * FRAMES_PER_VIDEO_FRAME;
    let n = scene.n_speakers();
    let video_frames = frames / FRAMES_PER_VIDEO_FRAME;
    let start_video = start / FRAMES_PER_VIDEO_FRAME;
    let mut label_rows = Vec::with_capacity(n);
    let mut solo_frames = Vec::with_capacity(n);
    for spk in 0..n {
        let mut row = Vec::with_capacity(frames);
        let mut solo = Vec::new();
        for t in 0..frames {
            let global = start + t;
            let active = scene.labels.is_active(spk, global);
            row.push(if active { 1.0 } else { 0.0 });
            if active && scene.labels.active_count(global) == 1 {
                solo.push(t);
            }
        }
        label_rows.push(row);
        solo_frames.push(solo);
    }
    SceneCrop {
        audio: crop_audio(&scene.audio, start, frames),
        patches: (0..n)
            .map(|spk| crop_patches(&scene.visual[spk], start_video, video_frames))
            .collect(),
        miss: (0..n)
            .map(|spk| scene.miss_mask[spk][start_video..start_video + video_frames].to_vec())
            .collect(),
        labels: Tensor::from_rows(&label_rows).expect("label rows share the crop length"),
        solo_frames,
    }
}

/// Builds the activity-loss graph of one crop: enrollment from solo frames
/// (neutral vector fallback), the full forward pass, and the summed activity
/// and visual-VAD cross entropies. Returns `(loss, j_av)`.
fn activity_loss_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    crop: &SceneCrop,
) -> Result<(NodeId, NodeId), TrainError> {
    let min_enroll = crate::encoders::MIN_ENROLL_FRAMES;
    let e_a_enroll = audio_encode_nodes(graph, params, &crop.audio)?;
    let mut vectors = Vec::with_capacity(crop.patches.len());
    for (spk, solo) in crop.solo_frames.iter().enumerate() {
        if solo.len() >= min_enroll {
            let attributed = AttributedFrames {
                speaker: format!("crop-spk{spk}"),
                frames: solo.clone(),
            };
            vectors.push(speaker_embed_nodes(graph, params, e_a_enroll, &[attributed])?[0]);
        } else {
            vectors.push(graph.input(neutral_speaker_vector(config.d_i)));
        }
    }
    let out = forward_nodes(
        graph,
        params,
        config,
        spec,
        &crop.patches,
        &crop.miss,
        &crop.audio,
        &vectors,
    )?;
    let j_av = bce_loss_nodes(graph, &out.posteriors, &crop.labels)?;
    let j_vvad = bce_loss_nodes(graph, &out.vvad, &crop.labels)?;
    let loss = graph.add(j_av, j_vvad)?;
    Ok((loss, j_av))
}

/// Mean validation activity cross entropy over fixed per-scene crops.
pub fn val_bce_mean(
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    tc: &TrainConfig,
    scenes: &SceneSource,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for idx in 0..scenes.len() {
        let scene = scenes.scene(idx)?;
        let mut rng = seeded_rng(split_seed(tc.seed, "val-crop", idx as u64));
        let crop = crop_scene(&scene, tc.crop_frames, &mut rng);
        let mut graph = Graph::new();
        let (_, j_av) = activity_loss_nodes(&mut graph, params, config, spec, &crop)?;
        sum += graph.value(j_av).item();
    }
    if scenes.is_empty() {
        return Err(TrainError::Sampling("no validation scenes".into()));
    }
    Ok(sum / scenes.len() as f64)
}

/// With probability one half, corrupts the scene's visual stream with a
/// random mode and miss rate; audio and labels stay clean.
fn maybe_augment(scene: &Scene, rng: &mut ChaCha8Rng) -> Result<Scene, TrainError> {
    if !rng.gen_bool(0.5) {
        return Ok(scene.clone());
    }
    let spec = DegradationSpec {
        miss_rate: rng.gen_range(AUG_MISS_RATE_LO..AUG_MISS_RATE_HI),
        corruption_mode: *AUG_MODES.choose(rng).expect("mode list is nonempty"),
        ..DegradationSpec::default()
    };
    Ok(corrupt(scene, &spec, rng.gen())?)
}

/// Which loss a stage optimizes, and over which trainable set.
enum StagePlan {
    /// Contrastive only; fusion, exchange, and both heads stay frozen.
    Contrastive,
    /// Activity only; encoders and the speaker-audio projection stay frozen.
    Activity,
    /// Everything unfrozen under the joint loss, with optional augmentation.
    Joint,
}

impl StagePlan {
    fn number(&self) -> u8 {
        match self {
            StagePlan::Contrastive => 1,
            StagePlan::Activity => 2,
            StagePlan::Joint => 3,
        }
    }

    fn apply_freezes(&self, params: &mut ParamSet) {
        params.set_all_frozen(false);
        let frozen: &[&str] = match self {
            StagePlan::Contrastive => &["fuse.", "xs.", "vvad."],
            StagePlan::Activity => &["vis.", "aud.", "spk.", "ia."],
            StagePlan::Joint => &[],
        };
        for prefix in frozen {
            params.set_frozen_prefix(prefix, true);
        }
    }
}

/// Builds one scene's loss graph for a stage and returns the loss node.
fn stage_scene_loss(
    graph: &mut Graph,
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    tc: &TrainConfig,
    plan: &StagePlan,
    scene: &Scene,
    pair_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TrainError> {
    match plan {
        StagePlan::Contrastive => {
            let batch = sample_pairs(scene, tc.pairs_per_scene, pair_seed)?;
            contrastive_loss_nodes(graph, params, &batch, tc.margin, spec.sync_window)
        }
        StagePlan::Activity => {
            let crop = crop_scene(scene, tc.crop_frames, rng);
            let (loss, _) = activity_loss_nodes(graph, params, config, spec, &crop)?;
            Ok(loss)
        }
        StagePlan::Joint => {
            let batch = sample_pairs(scene, tc.pairs_per_scene, pair_seed)?;
            let j_c = contrastive_loss_nodes(graph, params, &batch, tc.margin, spec.sync_window)?;
            let augmented = if tc.augment_visual {
                maybe_augment(scene, rng)?
            } else {
                scene.clone()
            };
            let crop = crop_scene(&augmented, tc.crop_frames, rng);
            let (activity, _) = activity_loss_nodes(graph, params, config, spec, &crop)?;
            let scaled = graph.affine_const(j_c, tc.lambda, 0.0);
            Ok(graph.add(scaled, activity)?)
        }
    }
}

/// Runs one stage: seeded shuffling, per-scene graphs accumulated into
/// batched Adam steps, per-epoch validation, and rollback to the last
/// finished epoch if the loss leaves the finite range.
fn run_stage(
    params: &mut ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    tc: &TrainConfig,
    plan: StagePlan,
    train: &SceneSource,
    val: &SceneSource,
) -> Result<Vec<EpochStats>, TrainError> {
    tc.validate()?;
    config.validate()?;
    spec.validate()?;
    if train.is_empty() {
        return Err(TrainError::Sampling("no training scenes".into()));
    }
    let stage = plan.number();
    plan.apply_freezes(params);
    let mut last_good = params.clone();
    let mut report = Vec::with_capacity(tc.epochs[stage as usize - 1]);
    for epoch in 1..=tc.epochs[stage as usize - 1] {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch_rng = seeded_rng(split_seed(
            tc.seed,
            "epoch",
            ((stage as u64) << 32) | epoch as u64,
        ));
        order.shuffle(&mut epoch_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_scenes) {
            params.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let scene = train.scene(idx)?;
                let pair_seed = split_seed(
                    tc.seed,
                    "pairs",
                    ((stage as u64) << 48) | ((epoch as u64) << 32) | idx as u64,
                );
                let mut graph = Graph::new();
                let loss = stage_scene_loss(
                    &mut graph, params, config, spec, tc, &plan, &scene, pair_seed,
                    &mut epoch_rng,
                )?;
                let value = graph.value(loss).item();
                if !value.is_finite() {
                    *params = last_good;
                    return Err(TrainError::Diverged {
                        stage,
                        epoch,
                        loss: value,
                    });
                }
                batch_loss += value;
                graph.backward(loss)?;
                params.accumulate_grads(&graph.param_grads())?;
            }
            params.scale_grads(1.0 / chunk.len() as f64);
            adam_step(params, tc.lr[stage as usize - 1], AdamHyper::default())?;
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let (val_w_genuine, val_w_false, val_bce) = match (&plan, val.is_empty()) {
            (_, true) => (None, None, None),
            (StagePlan::Contrastive, false) => {
                let (g, f) = val_sync_means(params, spec, tc, val)?;
                (Some(g), Some(f), None)
            }
            (_, false) => (
                None,
                None,
                Some(val_bce_mean(params, config, spec, tc, val)?),
            ),
        };
        report.push(EpochStats {
            stage,
            epoch,
            train_loss,
            val_w_genuine,
            val_w_false,
            val_bce,
        });
        last_good = params.clone();
    }
    Ok(report)
}

/// Stage 1: contrastive training of the encoders and the speaker-audio
/// projection; fusion, exchange, and both heads stay frozen.
pub fn train_stage1(
    params: &mut ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    tc: &TrainConfig,
    train: &SceneSource,
    val: &SceneSource,
) -> Result<Vec<EpochStats>, TrainError> {
    run_stage(params, config, spec, tc, StagePlan::Contrastive, train, val)
}

/// Stage 2: activity training of fusion, exchange, and both heads with the
/// feature extraction stack frozen.
pub fn train_stage2(
    params: &mut ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    tc: &TrainConfig,
    train: &SceneSource,
    val: &SceneSource,
) -> Result<Vec<EpochStats>, TrainError> {
    run_stage(params, config, spec, tc, StagePlan::Activity, train, val)
}

/// Stage 3: joint training of the whole network at the reduced rate, with
/// the scaled contrastive term and optional visual corruption.
pub fn train_stage3(
    params: &mut ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    tc: &TrainConfig,
    train: &SceneSource,
    val: &SceneSource,
) -> Result<Vec<EpochStats>, TrainError> {
    run_stage(params, config, spec, tc, StagePlan::Joint, train, val)
}

/// Runs all three stages, writing `stage1.ckpt`, `stage2.ckpt`,
/// `final.ckpt`, and `train_log.csv` into `out_dir`. Returns the combined
/// epoch log.
pub fn train_all(
    params: &mut ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    tc: &TrainConfig,
    train: &SceneSource,
    val: &SceneSource,
    out_dir: &Path,
) -> Result<Vec<EpochStats>, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io(format!("{out_dir:?}: {e}")))?;
    let save = |params: &ParamSet, name: &str| {
        params
            .save(&out_dir.join(name))
            .map_err(|e| TrainError::Io(format!("{name}: {e}")))
    };
    let mut log = train_stage1(params, config, spec, tc, train, val)?;
    save(params, "stage1.ckpt")?;
    log.extend(train_stage2(params, config, spec, tc, train, val)?);
    save(params, "stage2.ckpt")?;
    log.extend(train_stage3(params, config, spec, tc, train, val)?);
    params.set_all_frozen(false);
    save(params, "final.ckpt")?;
    write_log_csv(&out_dir.join("train_log.csv"), &log)?;
    Ok(log)
}
