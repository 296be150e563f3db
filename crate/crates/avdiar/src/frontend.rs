//! Audio signal frontend and audio/video frame-rate alignment.
//!
//! The path from disk to model input is: [`load_wav`] reads a RIFF/WAVE file
//! into a [`Waveform`], [`fbank`] turns it into log mel filterbank features at
//! a 10 ms hop, [`align_video`] repeats 25 fps visual rows to the same 100 Hz
//! grid, and [`trim_to_common_length`] reconciles the small length mismatch
//! the two clocks leave behind.
//!
//! Synthetic scenes store features directly (see the `synth` module), so the
//! WAV reader is exercised mainly by external recordings and the CLI.

pub mod fbank;
pub mod wav;

pub use fbank::{
    fbank, frame_count, mel_filterbank, read_frames_csv, write_frames_csv, AudioFeatures,
};
pub use wav::{load_wav, Waveform};

use crate::Tensor;
use thiserror::Error;

/// How far the audio and aligned-video frame counts may drift before
/// [`trim_to_common_length`] refuses to reconcile them.
pub const MAX_LENGTH_DIVERGENCE: usize = 8;

/// Errors from WAV parsing, feature extraction, and alignment.
#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a RIFF/WAVE file: {0}")]
    BadHeader(String),
    #[error("unsupported WAV encoding: format tag {format}, {bits} bits per sample (need PCM16)")]
    UnsupportedEncoding { format: u16, bits: u16 },
    #[error("expected mono audio, file has {channels} channels")]
    NotMono { channels: u16 },
    #[error("expected a {expect} Hz sample rate, file has {got} Hz")]
    BadRate { expect: u32, got: u32 },
    #[error("input has {got} samples but at least {need} are required for one frame")]
    TooShort { got: usize, need: usize },
    #[error("audio features must be [T x 40], got shape {shape:?}")]
    BadFeatureShape { shape: Vec<usize> },
    #[error("audio ({audio} frames) and aligned video ({visual} frames) diverge by more than {MAX_LENGTH_DIVERGENCE} frames")]
    LengthDivergence { audio: usize, visual: usize },
    #[error("bad CSV on line {line}: {message}")]
    BadCsv { line: usize, message: String },
}

/// Repeats each row of a per-video-frame feature tensor `factor` times so a
/// 25 fps visual stream lands on the 100 Hz audio feature grid (factor 4).
///
/// `[a, b]` with factor 4 becomes `[a, a, a, a, b, b, b, b]`. Factor 1 is the
/// identity.
///
/// # Panics
/// If `factor` is zero.
pub fn align_video(features: &Tensor, factor: usize) -> Tensor {
    assert!(factor >= 1, "align_video requires factor >= 1");
    assert!(features.is_rank2(), "align_video expects a [T x D] tensor");
    let rows = features.rows();
    let cols = features.cols();
    let mut data = Vec::with_capacity(rows * factor * cols);
    for r in 0..rows {
        let row = features.row(r);
        for _ in 0..factor {
            data.extend_from_slice(row);
        }
    }
    Tensor::from_vec(&[rows * factor, cols], data).expect("repeat preserves element count")
}

/// Truncates the audio features and an already-aligned visual tensor to their
/// common length.
///
/// The two clocks (10 ms audio hop vs repeated 25 fps video) disagree by a
/// couple of frames at the end of a recording. A divergence of up to
/// [`MAX_LENGTH_DIVERGENCE`] frames is trimmed silently; anything larger is a
/// sign of desynchronized inputs and is rejected.
pub fn trim_to_common_length(
    audio: AudioFeatures,
    visual: Tensor,
) -> Result<(AudioFeatures, Tensor), FrontendError> {
    let t_audio = audio.frames.rows();
    let t_visual = visual.rows();
    if t_audio == 0 || t_visual == 0 {
        return Err(FrontendError::TooShort {
            got: 0,
            need: 1,
        });
    }
    let diff = t_audio.abs_diff(t_visual);
    if diff > MAX_LENGTH_DIVERGENCE {
        return Err(FrontendError::LengthDivergence {
            audio: t_audio,
            visual: t_visual,
        });
    }
    let keep = t_audio.min(t_visual);
    Ok((audio.truncated(keep), truncate_rows(&visual, keep)))
}

fn truncate_rows(t: &Tensor, keep: usize) -> Tensor {
    if keep == t.rows() {
        return t.clone();
    }
    let cols = t.cols();
    let data = t.data()[..keep * cols].to_vec();
    Tensor::from_vec(&[keep, cols], data).expect("prefix preserves row length")
}
