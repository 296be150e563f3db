//! End-to-end inference: enrollment, chunked forward passes, thresholding,
//! gap merging, RTTM emission, and enrollment re-estimation.
//!
//! The segment/RTTM layer lives in [`segments`] and is shared with the
//! synthetic corpus (ground-truth label files) and the scorer (hypothesis and
//! reference input).
//!
//! Long scenes run through the model in fixed-size chunks so attention cost
//! and graph memory stay bounded; each chunk sees only its own frames, so
//! posteriors near chunk boundaries lack a few frames of context. Enrollment
//! bootstraps from the visual speech head intersected with an energy gate,
//! and can then be re-estimated from the system's own single-speaker output
//! segments.

pub mod segments;

pub use segments::{rttm_read, rttm_write, RttmError, Segment, SegmentList};

use crate::encoders::{
    audio_encode, speaker_embed, visual_encode, vvad_head, AttributedFrames, EncoderError,
    SpeakerEmbeddingSet, MIN_ENROLL_FRAMES,
};
use crate::exchange::{forward_nodes, ActivityPosterior, ExchangeError};
use crate::frontend::fbank::NUM_FILTERS;
use crate::frontend::{AudioFeatures, MAX_LENGTH_DIVERGENCE};
use crate::fusion::FusionSpec;
use crate::numerics::NumericsError;
use crate::synth::{ActivityLabels, Scene, FRAMES_PER_VIDEO_FRAME, FRAME_SECONDS};
use crate::{ModelConfig, ParamSet, Tensor};
use thiserror::Error;

/// Audio frames per inference chunk (three seconds).
pub const CHUNK_FRAMES: usize = 300;
/// A final chunk shorter than this merges into the one before it.
const MIN_TAIL_FRAMES: usize = 20;
/// Noise-floor percentile of the energy gate used for enrollment.
pub const ENERGY_FLOOR_PERCENTILE: f64 = 20.0;
/// Posteriors are pushed off exact 0/1 by this much before validation, since
/// a saturated sigmoid can round to the boundary in floating point.
const PROB_CLAMP: f64 = 1e-12;

/// Errors from inference configuration or a forward pass.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// Invalid pipeline configuration or mismatched inputs.
    #[error("pipeline configuration: {0}")]
    BadConfig(String),
    /// Segment emission failure.
    #[error(transparent)]
    Rttm(#[from] RttmError),
    /// Encoder failure.
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    /// Model forward failure.
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    /// Tensor failure.
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Inference-time knobs: the activity threshold and the segment
/// post-processing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Activity threshold in `(0, 1)`; also gates the visual speech head
    /// during enrollment.
    pub threshold: f64,
    /// Silences shorter than this many seconds are merged away.
    pub min_gap: f64,
    /// Segments shorter than this many seconds are dropped after merging.
    pub min_duration: f64,
    /// Enrollment re-estimation rounds; one means a single pass.
    pub enroll_iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            threshold: 0.5,
            min_gap: 0.3,
            min_duration: 0.2,
            enroll_iters: 2,
        }
    }
}

impl PipelineConfig {
    /// Checks every field range.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(PipelineError::BadConfig(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.min_gap > 0.0) || !self.min_gap.is_finite() {
            return Err(PipelineError::BadConfig(format!(
                "min_gap must be positive, got {}",
                self.min_gap
            )));
        }
        if !(self.min_duration > 0.0) || !self.min_duration.is_finite() {
            return Err(PipelineError::BadConfig(format!(
                "min_duration must be positive, got {}",
                self.min_duration
            )));
        }
        if self.enroll_iters == 0 {
            return Err(PipelineError::BadConfig(
                "enroll_iters must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mean log-mel value per frame, the energy proxy of the enrollment gate.
fn frame_energies(audio: &AudioFeatures) -> Vec<f64> {
    (0..audio.num_frames())
        .map(|t| audio.frames.row(t).iter().sum::<f64>() / NUM_FILTERS as f64)
        .collect()
}

/// Linear-interpolation percentile of an unsorted slice; `p` in `[0, 100]`.
fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("energies are finite"));
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Frames whose energy clears the scene's noise-floor percentile.
pub fn energy_vad(audio: &AudioFeatures) -> Vec<bool> {
    let energies = frame_energies(audio);
    let floor = percentile(&energies, ENERGY_FLOOR_PERCENTILE);
    energies.iter().map(|&e| e > floor).collect()
}

/// Per-speaker frames usable for enrollment: the speaker's visual speech
/// posterior clears `threshold`, nobody else's does, and the energy gate is
/// open. `vvad` is `[N x T]`; frames past either input's length are ignored.
pub fn enrollment_frames(vvad: &Tensor, energy: &[bool], threshold: f64) -> Vec<Vec<usize>> {
    let n = vvad.rows();
    let t_max = vvad.cols().min(energy.len());
    let mut out = vec![Vec::new(); n];
    for t in 0..t_max {
        if !energy[t] {
            continue;
        }
        let over: Vec<usize> = (0..n).filter(|&m| vvad.at(m, t) > threshold).collect();
        if let [only] = over[..] {
            out[only].push(t);
        }
    }
    out
}

/// The zero-information embedding used when a speaker has no usable frames.
fn fallback_vector(d_i: usize) -> Vec<f64> {
    vec![1.0 / (d_i as f64).sqrt(); d_i]
}

/// Embeds each speaker from its attributed frames over `e_a`, falling back
/// per speaker: fewer than [`MIN_ENROLL_FRAMES`] usable frames keep the
/// matching row of `previous`, or the all-equal unit vector without one.
fn embed_with_fallback(
    params: &ParamSet,
    e_a: &Tensor,
    frames: &[Vec<usize>],
    names: &[String],
    d_i: usize,
    previous: Option<&SpeakerEmbeddingSet>,
) -> Result<SpeakerEmbeddingSet, PipelineError> {
    let mut rows = Vec::with_capacity(frames.len());
    for (n, speaker_frames) in frames.iter().enumerate() {
        if speaker_frames.len() >= MIN_ENROLL_FRAMES {
            let attributed = AttributedFrames {
                speaker: names[n].clone(),
                frames: speaker_frames.clone(),
            };
            let set = speaker_embed(params, e_a, &[attributed])?;
            rows.push(set.vector(0).to_vec());
        } else if let Some(prev) = previous {
            rows.push(prev.vector(n).to_vec());
        } else {
            rows.push(fallback_vector(d_i));
        }
    }
    Ok(SpeakerEmbeddingSet::new(
        Tensor::from_rows(&rows).map_err(NumericsError::from)?,
    )?)
}

/// Bootstraps one enrolled vector per speaker from the scene itself: visual
/// speech posteriors intersected with the single-active rule and the energy
/// gate select each speaker's frames; speakers without enough usable frames
/// get the all-equal unit vector.
pub fn initial_enrollment(
    params: &ParamSet,
    config: &ModelConfig,
    pipeline: &PipelineConfig,
    scene: &Scene,
) -> Result<SpeakerEmbeddingSet, PipelineError> {
    let e_v = visual_encode(params, &scene.visual, &scene.miss_mask)?;
    let vvad = vvad_head(params, &e_v)?;
    let energy = energy_vad(&scene.audio);
    let frames = enrollment_frames(&vvad, &energy, pipeline.threshold);
    let e_a = audio_encode(params, &scene.audio)?;
    embed_with_fallback(params, &e_a, &frames, &scene.speaker_names, config.d_i, None)
}

/// Re-estimates enrollment from a hypothesis: each speaker's single-speaker
/// (non-overlapped) hypothesis frames feed the embedding; a speaker without
/// enough such frames keeps its row of `previous`.
pub fn re_enrollment(
    params: &ParamSet,
    e_a: &Tensor,
    hypothesis: &SegmentList,
    uri: &str,
    names: &[String],
    previous: &SpeakerEmbeddingSet,
) -> Result<SpeakerEmbeddingSet, PipelineError> {
    let labels = ActivityLabels::from_segments(hypothesis, uri, names, e_a.rows(), FRAME_SECONDS);
    let frames: Vec<Vec<usize>> = (0..names.len())
        .map(|n| {
            (0..labels.num_frames())
                .filter(|&t| labels.is_active(n, t) && labels.active_count(t) == 1)
                .collect()
        })
        .collect();
    embed_with_fallback(
        params,
        e_a,
        &frames,
        names,
        previous.dim(),
        Some(previous),
    )
}

/// Splits `t` frames into chunk spans `(start, len)`; every span is a
/// multiple of [`FRAMES_PER_VIDEO_FRAME`] long except possibly the last, and
/// a tail shorter than the minimum merges into the span before it.
fn chunk_spans(t: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    while start < t {
        let len = CHUNK_FRAMES.min(t - start);
        spans.push((start, len));
        start += len;
    }
    if spans.len() >= 2 && spans.last().expect("nonempty").1 < MIN_TAIL_FRAMES {
        let (_, tail) = spans.pop().expect("nonempty");
        spans.last_mut().expect("nonempty").1 += tail;
    }
    spans
}

/// Runs the full model over a scene in chunks and assembles the `[N x T]`
/// activity posterior, with `T` the common audio/visual length rounded down
/// to the video grid.
pub fn infer(
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    scene: &Scene,
    enrollment: &SpeakerEmbeddingSet,
) -> Result<ActivityPosterior, PipelineError> {
    let n = scene.n_speakers();
    if enrollment.n_speakers() != n {
        return Err(PipelineError::BadConfig(format!(
            "{} enrolled speakers for a {n}-speaker scene",
            enrollment.n_speakers()
        )));
    }
    let t_audio = scene.audio.num_frames();
    let t_visual = scene.num_video_frames() * FRAMES_PER_VIDEO_FRAME;
    if t_audio.abs_diff(t_visual) > MAX_LENGTH_DIVERGENCE {
        return Err(ExchangeError::LengthDivergence {
            audio: t_audio,
            visual: t_visual,
        }
        .into());
    }
    let t = t_audio.min(t_visual) / FRAMES_PER_VIDEO_FRAME * FRAMES_PER_VIDEO_FRAME;
    let mut rows = vec![Vec::with_capacity(t); n];
    for (start, len) in chunk_spans(t) {
        let audio = AudioFeatures::new(
            Tensor::from_vec(
                &[len, NUM_FILTERS],
                scene.audio.frames.data()[start * NUM_FILTERS..(start + len) * NUM_FILTERS]
                    .to_vec(),
            )
            .expect("chunk stays inside the scene"),
        )
        .expect("chunk keeps the filter count");
        let v0 = start / FRAMES_PER_VIDEO_FRAME;
        let v_len = len / FRAMES_PER_VIDEO_FRAME;
        let patches: Vec<Tensor> = (0..n)
            .map(|s| {
                let p = scene.visual[s].cols();
                Tensor::from_vec(
                    &[v_len, p],
                    scene.visual[s].data()[v0 * p..(v0 + v_len) * p].to_vec(),
                )
                .expect("chunk stays inside the scene")
            })
            .collect();
        let miss: Vec<Vec<bool>> = (0..n)
            .map(|s| scene.miss_mask[s][v0..v0 + v_len].to_vec())
            .collect();
        let mut graph = crate::Graph::new();
        let vectors: Vec<crate::NodeId> = (0..n)
            .map(|s| {
                graph.input(
                    Tensor::from_vec(&[1, enrollment.dim()], enrollment.vector(s).to_vec())
                        .expect("enrollment rows are rank 2"),
                )
            })
            .collect();
        let out = forward_nodes(
            &mut graph, params, config, spec, &patches, &miss, &audio, &vectors,
        )?;
        for (s, &id) in out.posteriors.iter().enumerate() {
            rows[s].extend(
                graph
                    .value(id)
                    .data()
                    .iter()
                    .map(|&p| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)),
            );
        }
    }
    Ok(ActivityPosterior::new(
        Tensor::from_rows(&rows).map_err(NumericsError::from)?,
    )?)
}

/// Thresholds a posterior into frame activity: probability at or above
/// `threshold` counts as speech.
pub fn binarize(
    posterior: &ActivityPosterior,
    threshold: f64,
) -> Result<ActivityLabels, PipelineError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(PipelineError::BadConfig(format!(
            "threshold must be in (0, 1), got {threshold}"
        )));
    }
    let probs = posterior.probs();
    let rows: Vec<Vec<bool>> = (0..probs.rows())
        .map(|n| probs.row(n).iter().map(|&p| p >= threshold).collect())
        .collect();
    Ok(ActivityLabels::from_rows(rows))
}

/// Turns frame activity into segments: per speaker, gaps shorter than
/// `min_gap` seconds are merged first, then segments shorter than
/// `min_duration` seconds are dropped. Zero for either leaves runs as they
/// are.
pub fn merge_and_filter(
    labels: &ActivityLabels,
    uri: &str,
    names: &[String],
    min_gap: f64,
    min_duration: f64,
) -> Result<SegmentList, PipelineError> {
    if names.len() != labels.n_speakers() {
        return Err(PipelineError::BadConfig(format!(
            "{} names for {} label rows",
            names.len(),
            labels.n_speakers()
        )));
    }
    if !(min_gap >= 0.0) || !(min_duration >= 0.0) {
        return Err(PipelineError::BadConfig(format!(
            "min_gap {min_gap} and min_duration {min_duration} must be nonnegative"
        )));
    }
    let mut segments = Vec::new();
    for (n, name) in names.iter().enumerate() {
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (start, len) in labels.active_runs(n) {
            match merged.last_mut() {
                Some((prev_start, prev_len))
                    if (start - (*prev_start + *prev_len)) as f64 * FRAME_SECONDS < min_gap =>
                {
                    *prev_len = start + len - *prev_start;
                }
                _ => merged.push((start, len)),
            }
        }
        for (start, len) in merged {
            let duration = len as f64 * FRAME_SECONDS;
            if duration < min_duration {
                continue;
            }
            segments.push(Segment {
                uri: uri.to_string(),
                onset: start as f64 * FRAME_SECONDS,
                duration,
                speaker: name.clone(),
            });
        }
    }
    Ok(SegmentList::new(segments)?)
}

/// Full inference with enrollment re-estimation: bootstrap enrollment, then
/// `enroll_iters` rounds of forward pass, thresholding, and segment
/// post-processing, re-deriving enrollment from each round's single-speaker
/// output. Returns the final round's segments.
pub fn enroll_iterate(
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    pipeline: &PipelineConfig,
    scene: &Scene,
) -> Result<SegmentList, PipelineError> {
    enroll_iterate_with_posterior(params, config, spec, pipeline, scene).map(|(segs, _)| segs)
}

/// [`enroll_iterate`] that also returns the final round's raw posterior, for
/// callers that dump probabilities alongside segments.
pub fn enroll_iterate_with_posterior(
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    pipeline: &PipelineConfig,
    scene: &Scene,
) -> Result<(SegmentList, ActivityPosterior), PipelineError> {
    pipeline.validate()?;
    let mut enrollment = initial_enrollment(params, config, pipeline, scene)?;
    let e_a = audio_encode(params, &scene.audio)?;
    let mut last = None;
    for round in 0..pipeline.enroll_iters {
        if round > 0 {
            let (hypothesis, _) = last.as_ref().expect("previous round ran");
            enrollment = re_enrollment(
                params,
                &e_a,
                hypothesis,
                &scene.uri,
                &scene.speaker_names,
                &enrollment,
            )?;
        }
        let posterior = infer(params, config, spec, scene, &enrollment)?;
        let labels = binarize(&posterior, pipeline.threshold)?;
        let hypothesis = merge_and_filter(
            &labels,
            &scene.uri,
            &scene.speaker_names,
            pipeline.min_gap,
            pipeline.min_duration,
        )?;
        last = Some((hypothesis, posterior));
    }
    Ok(last.expect("enroll_iters >= 1"))
}

/// Serializes a posterior as CSV: a header of speaker names after the frame
/// column, then one row per frame with full-precision probabilities.
pub fn posterior_to_csv(posterior: &ActivityPosterior, names: &[String]) -> String {
    let probs = posterior.probs();
    let mut out = String::from("frame");
    for name in names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for t in 0..probs.cols() {
        out.push_str(&t.to_string());
        for n in 0..probs.rows() {
            out.push(',');
            out.push_str(&probs.at(n, t).to_string());
        }
        out.push('\n');
    }
    out
}
