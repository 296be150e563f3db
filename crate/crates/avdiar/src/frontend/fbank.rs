//! Log mel filterbank feature extraction.
//!
//! Fixed conventions, chosen once and relied on by golden tests elsewhere in
//! the crate:
//!
//! * 25 ms frames (400 samples) every 10 ms (160 samples), no padding: the
//!   final partial frame is dropped, so `T = (S - 400) / 160 + 1`.
//! * pre-emphasis `y[n] = x[n] - 0.97 x[n-1]` applied to the whole signal
//!   before framing; the first sample is emphasized against itself.
//! * symmetric Hamming window `0.54 - 0.46 cos(2 pi n / (N - 1))`.
//! * 512-point FFT of the zero-padded frame; raw power spectrum (no 1/N
//!   scaling) over the 257 non-redundant bins.
//! * 40 triangular mel filters spanning 0 to 8000 Hz, mel-spaced centers
//!   (`mel = 2595 log10(1 + hz/700)`), triangle weights linear in Hz, unit
//!   peak height.
//! * natural log of each filter energy, floored at 1e-10.

use super::{wav::Waveform, FrontendError};
use crate::Tensor;
use rustfft::{num_complex::Complex, FftPlanner};
use std::io::{BufRead, Write};

/// Samples per frame at 16 kHz (25 ms).
pub const FRAME_LENGTH: usize = 400;
/// Samples per hop at 16 kHz (10 ms).
pub const FRAME_SHIFT: usize = 160;
/// FFT size; frames are zero-padded from 400 to this length.
pub const FFT_SIZE: usize = 512;
/// Number of mel filters, and therefore the feature dimension.
pub const NUM_FILTERS: usize = 40;
/// Pre-emphasis coefficient.
pub const PRE_EMPHASIS: f64 = 0.97;
/// Filter energies below this are clamped before the log.
pub const LOG_FLOOR: f64 = 1e-10;
/// Lower edge of the mel filterbank in Hz.
pub const MEL_LOW_HZ: f64 = 0.0;
/// Upper edge of the mel filterbank in Hz (Nyquist for 16 kHz audio).
pub const MEL_HIGH_HZ: f64 = 8000.0;

/// Log mel filterbank features on the 10 ms grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    /// `[T x 40]` log filter energies.
    pub frames: Tensor,
    /// Hop between frames; always 10 for features produced here.
    pub frame_shift_ms: u32,
    /// Analysis window length; always 25 for features produced here.
    pub frame_length_ms: u32,
}

impl AudioFeatures {
    /// Wraps a `[T x 40]` tensor, rejecting any other shape.
    pub fn new(frames: Tensor) -> Result<Self, FrontendError> {
        if !frames.is_rank2() || frames.cols() != NUM_FILTERS {
            return Err(FrontendError::BadFeatureShape {
                shape: frames.shape().to_vec(),
            });
        }
        Ok(Self {
            frames,
            frame_shift_ms: 10,
            frame_length_ms: 25,
        })
    }

    /// Number of feature frames.
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Keeps only the first `keep` frames.
    pub fn truncated(self, keep: usize) -> Self {
        if keep >= self.frames.rows() {
            return self;
        }
        let data = self.frames.data()[..keep * NUM_FILTERS].to_vec();
        let frames = Tensor::from_vec(&[keep, NUM_FILTERS], data)
            .expect("prefix preserves row length");
        Self { frames, ..self }
    }
}

/// Number of frames produced from `num_samples` samples; zero when the input
/// cannot fill a single frame.
pub fn frame_count(num_samples: usize) -> usize {
    if num_samples < FRAME_LENGTH {
        0
    } else {
        (num_samples - FRAME_LENGTH) / FRAME_SHIFT + 1
    }
}

/// Extracts `[T x 40]` log mel filterbank features from a waveform.
///
/// Fails when the input is shorter than one frame.
pub fn fbank(w: &Waveform) -> Result<AudioFeatures, FrontendError> {
    let s = &w.samples;
    if s.len() < FRAME_LENGTH {
        return Err(FrontendError::TooShort {
            got: s.len(),
            need: FRAME_LENGTH,
        });
    }
    let t = frame_count(s.len());

    let mut emphasized = Vec::with_capacity(s.len());
    emphasized.push(s[0] - PRE_EMPHASIS * s[0]);
    for i in 1..s.len() {
        emphasized.push(s[i] - PRE_EMPHASIS * s[i - 1]);
    }

    let window: Vec<f64> = (0..FRAME_LENGTH).map(hamming).collect();
    let bank = mel_filterbank();
    let bins = FFT_SIZE / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut power = vec![0.0; bins];

    let mut data = Vec::with_capacity(t * NUM_FILTERS);
    for frame in 0..t {
        let start = frame * FRAME_SHIFT;
        for i in 0..FRAME_LENGTH {
            buf[i] = Complex::new(emphasized[start + i] * window[i], 0.0);
        }
        for slot in buf[FRAME_LENGTH..].iter_mut() {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(buf.iter()) {
            *p = c.re * c.re + c.im * c.im;
        }
        for k in 0..NUM_FILTERS {
            let energy: f64 = bank
                .row(k)
                .iter()
                .zip(power.iter())
                .map(|(w, p)| w * p)
                .sum();
            data.push(energy.max(LOG_FLOOR).ln());
        }
    }
    AudioFeatures::new(
        Tensor::from_vec(&[t, NUM_FILTERS], data).expect("frame loop fills t*40 values"),
    )
}

fn hamming(n: usize) -> f64 {
    use std::f64::consts::PI;
    0.54 - 0.46 * (2.0 * PI * n as f64 / (FRAME_LENGTH as f64 - 1.0)).cos()
}

/// Converts Hz to mel.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Converts mel back to Hz.
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Builds the `[40 x 257]` triangular filterbank described in the module docs.
///
/// Row `k` holds filter `k`'s weight at each FFT bin; the 42 edge frequencies
/// are equally spaced in mel between [`MEL_LOW_HZ`] and [`MEL_HIGH_HZ`], and
/// filter `k` rises from edge `k` to a unit peak at edge `k+1`, then falls to
/// zero at edge `k+2`.
pub fn mel_filterbank() -> Tensor {
    let bins = FFT_SIZE / 2 + 1;
    let mel_lo = hz_to_mel(MEL_LOW_HZ);
    let mel_hi = hz_to_mel(MEL_HIGH_HZ);
    let points: Vec<f64> = (0..NUM_FILTERS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (NUM_FILTERS + 1) as f64))
        .collect();
    let hz_per_bin = super::wav::SAMPLE_RATE as f64 / FFT_SIZE as f64;

    let mut data = vec![0.0; NUM_FILTERS * bins];
    for k in 0..NUM_FILTERS {
        let (lo, mid, hi) = (points[k], points[k + 1], points[k + 2]);
        for (b, slot) in data[k * bins..(k + 1) * bins].iter_mut().enumerate() {
            let hz = b as f64 * hz_per_bin;
            *slot = if hz <= lo || hz >= hi {
                0.0
            } else if hz <= mid {
                (hz - lo) / (mid - lo)
            } else {
                (hi - hz) / (hi - mid)
            };
        }
    }
    Tensor::from_vec(&[NUM_FILTERS, bins], data).expect("loop fills 40*257 weights")
}

/// Writes a `[T x D]` tensor as CSV, one frame per row.
///
/// Values are printed with Rust's shortest round-trip formatting, so a
/// [`read_frames_csv`] of the output reproduces the tensor bit for bit.
pub fn write_frames_csv(frames: &Tensor, mut w: impl Write) -> Result<(), FrontendError> {
    for r in 0..frames.rows() {
        let row = frames.row(r);
        let mut line = String::new();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Reads a CSV written by [`write_frames_csv`] back into a `[T x D]` tensor.
///
/// Every row must have the same number of columns; parse failures report the
/// 1-based line number.
pub fn read_frames_csv(r: impl BufRead) -> Result<Tensor, FrontendError> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut this_cols = 0usize;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| FrontendError::BadCsv {
                line: idx + 1,
                message: format!("cannot parse {:?} as a number", field.trim()),
            })?;
            data.push(v);
            this_cols += 1;
        }
        match cols {
            None => cols = Some(this_cols),
            Some(c) if c != this_cols => {
                return Err(FrontendError::BadCsv {
                    line: idx + 1,
                    message: format!("row has {this_cols} columns, expected {c}"),
                })
            }
            Some(_) => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or(FrontendError::BadCsv {
        line: 0,
        message: "no rows".into(),
    })?;
    Ok(Tensor::from_vec(&[rows, cols], data).expect("column counts were checked per row"))
}
