//! Controlled degradation of a scene's visual and audio streams.
//!
//! Visual corruption hits a `miss_rate` fraction of (speaker, video frame)
//! cells. Zeroing marks the cell in the miss mask; random fill and lip
//! swapping leave the mask untouched so those cells look like ordinary (but
//! wrong) lips to the model. A resolution factor blurs every patch through a
//! block-average downsample and nearest upsample, and an optional SNR knob
//! mixes white noise into the audio energies.

use super::render::quantize;
use super::{Scene, SynthError};
use crate::frontend::fbank::{AudioFeatures, LOG_FLOOR};
use crate::numerics::rng::{seeded_rng, split_seed};
use crate::Tensor;
use rand::Rng;

/// What happens to a visual cell selected for corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionMode {
    /// Replace the patch with zeros and flag it in the miss mask.
    Zeros,
    /// Replace every pixel with a uniform draw from the 256-level grid.
    RandomValues,
    /// Replace the patch with another speaker's patch from the same frame.
    SwapLips,
}

impl CorruptionMode {
    /// Parses the config-file spelling of a mode.
    pub fn parse(s: &str) -> Result<Self, SynthError> {
        match s {
            "zeros" => Ok(Self::Zeros),
            "random_values" => Ok(Self::RandomValues),
            "swap_lips" => Ok(Self::SwapLips),
            other => Err(SynthError::BadConfig(format!(
                "unknown corruption mode {other:?} (expected zeros, random_values, or swap_lips)"
            ))),
        }
    }

    /// The config-file spelling of this mode.
    pub fn name(self) -> &'static str {
        match self {
            Self::Zeros => "zeros",
            Self::RandomValues => "random_values",
            Self::SwapLips => "swap_lips",
        }
    }
}

/// A full degradation recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationSpec {
    /// Fraction of (speaker, video frame) cells to corrupt, in `[0, 1]`.
    pub miss_rate: f64,
    /// Blur factor; must be one of {1, 2, 4, 8} and divide both patch dims.
    pub resolution_factor: usize,
    /// What corruption does to a selected cell.
    pub corruption_mode: CorruptionMode,
    /// White-noise SNR in dB mixed into the audio; `None` leaves audio alone.
    pub audio_noise_snr: Option<f64>,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            miss_rate: 0.0,
            resolution_factor: 1,
            corruption_mode: CorruptionMode::Zeros,
            audio_noise_snr: None,
        }
    }
}

impl DegradationSpec {
    /// True when this spec changes nothing.
    pub fn is_neutral(&self) -> bool {
        self.miss_rate == 0.0 && self.resolution_factor == 1 && self.audio_noise_snr.is_none()
    }

    fn validate(&self, patch_h: usize, patch_w: usize) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(SynthError::BadConfig(format!(
                "miss_rate {} outside [0, 1]",
                self.miss_rate
            )));
        }
        if ![1, 2, 4, 8].contains(&self.resolution_factor) {
            return Err(SynthError::BadConfig(format!(
                "resolution_factor {} not in {{1, 2, 4, 8}}",
                self.resolution_factor
            )));
        }
        if patch_h % self.resolution_factor != 0 || patch_w % self.resolution_factor != 0 {
            return Err(SynthError::BadConfig(format!(
                "resolution_factor {} does not divide the {patch_h}x{patch_w} patch",
                self.resolution_factor
            )));
        }
        Ok(())
    }
}

/// Applies a degradation recipe to a scene, returning the degraded copy.
///
/// A neutral spec returns the scene bitwise unchanged. Cell selection and
/// replacement content come from independent derived RNG streams, so the set
/// of corrupted cells depends only on `(seed, miss_rate)` and not on the
/// corruption mode.
pub fn corrupt(scene: &Scene, spec: &DegradationSpec, seed: u64) -> Result<Scene, SynthError> {
    spec.validate(scene.patch_h, scene.patch_w)?;
    let mut out = scene.clone();
    if spec.is_neutral() {
        return Ok(out);
    }

    let n = scene.n_speakers();
    let t_v = scene.num_video_frames();
    let p = scene.patch_h * scene.patch_w;

    if spec.miss_rate > 0.0 {
        let mut pick = seeded_rng(split_seed(seed, "miss", 0));
        let mut fill = seeded_rng(split_seed(seed, "vals", 0));
        for spk in 0..n {
            for tau in 0..t_v {
                if !pick.gen_bool(spec.miss_rate) {
                    continue;
                }
                let start = tau * p;
                match spec.corruption_mode {
                    CorruptionMode::Zeros => {
                        out.visual[spk].data_mut()[start..start + p].fill(0.0);
                        out.miss_mask[spk][tau] = true;
                    }
                    CorruptionMode::RandomValues => {
                        for slot in &mut out.visual[spk].data_mut()[start..start + p] {
                            *slot = fill.gen_range(0..=255u16) as f64 / 255.0;
                        }
                    }
                    CorruptionMode::SwapLips => {
                        let replacement = if n > 1 {
                            let mut other = fill.gen_range(0..n - 1);
                            if other >= spk {
                                other += 1;
                            }
                            scene.visual[other].row(tau).to_vec()
                        } else {
                            let mut other_tau = fill.gen_range(0..t_v.saturating_sub(1).max(1));
                            if other_tau >= tau {
                                other_tau += 1;
                            }
                            scene.visual[0].row(other_tau.min(t_v - 1)).to_vec()
                        };
                        out.visual[spk].data_mut()[start..start + p]
                            .copy_from_slice(&replacement);
                    }
                }
            }
        }
    }

    if spec.resolution_factor > 1 {
        for tensor in &mut out.visual {
            blur_patches(tensor, scene.patch_h, scene.patch_w, spec.resolution_factor);
        }
    }

    if let Some(snr_db) = spec.audio_noise_snr {
        out.audio = add_audio_noise(&out.audio, snr_db, split_seed(seed, "audio", 0));
    }

    Ok(out)
}

/// Block-averages each patch over `factor x factor` cells and writes the
/// average back to every pixel of the block, re-quantized to the 256-level
/// grid.
fn blur_patches(patches: &mut Tensor, patch_h: usize, patch_w: usize, factor: usize) {
    let p = patch_h * patch_w;
    let frames = patches.rows();
    let data = patches.data_mut();
    for f in 0..frames {
        let patch = &mut data[f * p..(f + 1) * p];
        for by in (0..patch_h).step_by(factor) {
            for bx in (0..patch_w).step_by(factor) {
                let mut sum = 0.0;
                for y in by..by + factor {
                    for x in bx..bx + factor {
                        sum += patch[y * patch_w + x];
                    }
                }
                let avg = quantize(sum / (factor * factor) as f64);
                for y in by..by + factor {
                    for x in bx..bx + factor {
                        patch[y * patch_w + x] = avg;
                    }
                }
            }
        }
    }
}

/// Adds white noise in the linear energy domain at the given SNR relative to
/// the scene's mean energy.
fn add_audio_noise(audio: &AudioFeatures, snr_db: f64, seed: u64) -> AudioFeatures {
    let energies: Vec<f64> = audio.frames.data().iter().map(|f| f.exp()).collect();
    let signal_power = energies.iter().sum::<f64>() / energies.len() as f64;
    let noise_level = signal_power / 10f64.powf(snr_db / 10.0);
    let mut rng = seeded_rng(seed);
    let noisy: Vec<f64> = energies
        .iter()
        .map(|e| (e + noise_level * rng.gen_range(0.5..1.5)).max(LOG_FLOOR).ln())
        .collect();
    let frames = Tensor::from_vec(&[audio.frames.rows(), audio.frames.cols()], noisy)
        .expect("same element count");
    AudioFeatures::new(frames).expect("shape preserved")
}
