//! Feature-space rendering of audio and lips.
//!
//! Audio frames are built directly in the linear filterbank energy domain:
//! a per-bin noise floor plus, for every active speaker, that speaker's
//! spectral prototype scaled by a slowly varying random envelope. The log of
//! the sum is the feature. Overlap is therefore exactly additive in energy.
//!
//! Lips are parametric mouth patches: an elliptical opening whose height
//! follows a 2-6 Hz oscillation while the speaker talks and collapses to
//! near-zero jitter while silent. Pixel values are quantized to the `k/255`
//! grid at render time so scenes survive disk round trips bit for bit.

use super::dialog::ActivityLabels;
use super::{SynthError, FRAMES_PER_VIDEO_FRAME};
use crate::frontend::fbank::{AudioFeatures, LOG_FLOOR, NUM_FILTERS};
use crate::numerics::rng::{seeded_rng, split_seed};
use crate::Tensor;
use rand::Rng;

/// Scale of the background noise floor in linear energy.
const NOISE_FLOOR: f64 = 1e-4;
/// Cosine similarity above which two prototypes count as indistinct.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.8;
/// Envelope smoothing window in frames (0.25 s).
const ENVELOPE_WINDOW: usize = 25;
/// Mouth oscillation frequency range in Hz while speaking.
const OPENING_HZ: (f64, f64) = (2.0, 6.0);
/// Video frame rate.
const VIDEO_FPS: f64 = 25.0;

/// Draws a pool of distinct speaker spectral prototypes.
///
/// Each prototype is a positive, unit-L2 40-dim pattern made of a few smooth
/// spectral bumps over a small base level; candidates too similar to an
/// earlier pool member (cosine >= 0.8) are redrawn. Deterministic in
/// `(seed, pool_size)`.
pub fn speaker_pool(seed: u64, pool_size: usize) -> Tensor {
    let mut rng = seeded_rng(split_seed(seed, "pool", 0));
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(pool_size);
    while rows.len() < pool_size {
        let mut attempts = 0;
        let candidate = loop {
            let c = prototype_candidate(&mut rng);
            if rows.iter().all(|r| cosine(r, &c) < MAX_PROTOTYPE_COSINE) {
                break c;
            }
            attempts += 1;
            assert!(
                attempts < 1000,
                "could not draw a distinct prototype after 1000 tries"
            );
        };
        rows.push(candidate);
    }
    Tensor::from_rows(&rows).expect("prototypes share a length")
}

fn prototype_candidate(rng: &mut impl Rng) -> Vec<f64> {
    let mut v = vec![0.05f64; NUM_FILTERS];
    for _ in 0..3 {
        let center: f64 = rng.gen_range(2.0..38.0);
        let width: f64 = rng.gen_range(1.5..4.0);
        let height: f64 = rng.gen_range(0.5..1.0);
        for (b, slot) in v.iter_mut().enumerate() {
            let d = (b as f64 - center) / width;
            *slot += height * (-0.5 * d * d).exp();
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Renders `[T x 40]` log filterbank features for the given activity.
///
/// Requires one 40-dim prototype row per speaker, pairwise cosine below 0.8.
/// The envelope and noise streams are drawn for every frame regardless of
/// activity, so renderings of different label patterns under the same seed
/// share their noise floor and envelopes exactly.
pub fn render_audio(
    labels: &ActivityLabels,
    prototypes: &Tensor,
    seed: u64,
) -> Result<AudioFeatures, SynthError> {
    let n = labels.n_speakers();
    let t = labels.num_frames();
    if prototypes.shape() != [n, NUM_FILTERS] {
        return Err(SynthError::BadConfig(format!(
            "prototypes shape {:?} does not match {n} speakers x {NUM_FILTERS} bins",
            prototypes.shape()
        )));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let c = cosine(prototypes.row(i), prototypes.row(j));
            if c >= MAX_PROTOTYPE_COSINE {
                return Err(SynthError::BadConfig(format!(
                    "prototypes {i} and {j} are indistinct (cosine {c:.3})"
                )));
            }
        }
    }

    let mut floor_rng = seeded_rng(split_seed(seed, "floor", 0));
    let floor: Vec<f64> = (0..NUM_FILTERS)
        .map(|_| NOISE_FLOOR * (0.8 + 0.4 * floor_rng.gen::<f64>()))
        .collect();

    let envelopes: Vec<Vec<f64>> = (0..n)
        .map(|spk| {
            let mut rng = seeded_rng(split_seed(seed, "env", spk as u64));
            let raw: Vec<f64> = (0..t).map(|_| rng.gen::<f64>()).collect();
            smooth(&raw, ENVELOPE_WINDOW)
                .into_iter()
                .map(|s| 0.5 + 0.5 * s)
                .collect()
        })
        .collect();

    let mut noise_rng = seeded_rng(split_seed(seed, "noise", 0));
    let mut data = Vec::with_capacity(t * NUM_FILTERS);
    for frame in 0..t {
        for b in 0..NUM_FILTERS {
            let mut energy = floor[b] * (0.9 + 0.2 * noise_rng.gen::<f64>());
            for spk in 0..n {
                if labels.is_active(spk, frame) {
                    energy += envelopes[spk][frame] * prototypes.at(spk, b);
                }
            }
            data.push(energy.max(LOG_FLOOR).ln());
        }
    }
    Ok(AudioFeatures::new(
        Tensor::from_vec(&[t, NUM_FILTERS], data).expect("loop fills t*40 values"),
    )?)
}

/// Centered moving average with clipped edges (the divisor is the actual
/// number of samples inside the window).
fn smooth(raw: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..raw.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(raw.len());
            raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Renders per-speaker lip patch streams and an all-false miss mask.
///
/// Returns one `[T_v x patch_h*patch_w]` tensor per speaker, where
/// `T_v = T / 4`. Each patch is a mouth ellipse whose opening follows a
/// per-turn oscillation drawn from 2-6 Hz while the speaker is active and
/// holds a small per-speaker rest opening while silent.
pub fn render_visual(
    labels: &ActivityLabels,
    patch_h: usize,
    patch_w: usize,
    seed: u64,
) -> (Vec<Tensor>, Vec<Vec<bool>>) {
    let n = labels.n_speakers();
    let t_v = labels.num_frames() / FRAMES_PER_VIDEO_FRAME;
    let p = patch_h * patch_w;

    let mut visual = Vec::with_capacity(n);
    for spk in 0..n {
        let mut rng = seeded_rng(split_seed(seed, "vis", spk as u64));
        let skin = 0.30 + 0.10 * rng.gen::<f64>();
        let lip = 0.72 + 0.12 * rng.gen::<f64>();
        let mouth = 0.08 + 0.06 * rng.gen::<f64>();
        let rest_opening = 0.02 * rng.gen::<f64>();

        let mut data = Vec::with_capacity(t_v * p);
        let mut freq = 0.0f64;
        let mut phase = 0.0f64;
        let mut run_start = 0usize;
        let mut was_active = false;
        for tau in 0..t_v {
            let active = labels.is_active(spk, tau * FRAMES_PER_VIDEO_FRAME);
            if active && !was_active {
                freq = rng.gen_range(OPENING_HZ.0..OPENING_HZ.1);
                phase = rng.gen_range(0.0..std::f64::consts::TAU);
                run_start = tau;
            }
            let opening = if active {
                let x = (tau - run_start) as f64 / VIDEO_FPS;
                0.5 + 0.45 * (std::f64::consts::TAU * freq * x + phase).sin()
            } else {
                rest_opening
            };
            was_active = active;
            draw_patch(&mut data, patch_h, patch_w, opening, skin, lip, mouth);
        }
        visual.push(Tensor::from_vec(&[t_v, p], data).expect("loop fills t_v*p values"));
    }
    let miss_mask = vec![vec![false; t_v]; n];
    (visual, miss_mask)
}

/// Appends one quantized patch: skin everywhere, an elliptical lip ring, and
/// a dark mouth opening whose height scales with `opening`.
fn draw_patch(
    data: &mut Vec<f64>,
    patch_h: usize,
    patch_w: usize,
    opening: f64,
    skin: f64,
    lip: f64,
    mouth: f64,
) {
    let cy = (patch_h as f64 - 1.0) / 2.0;
    let cx = (patch_w as f64 - 1.0) / 2.0;
    let a = patch_w as f64 / 3.0;
    let b = (0.05 + 0.30 * opening) * patch_h as f64;
    for y in 0..patch_h {
        for x in 0..patch_w {
            let dy = (y as f64 - cy) / b;
            let dx = (x as f64 - cx) / a;
            let r2 = dx * dx + dy * dy;
            let v = if r2 <= 1.0 {
                mouth
            } else if r2 <= 1.8 {
                lip
            } else {
                skin
            };
            data.push(quantize(v));
        }
    }
}

/// Snaps a unit-interval value onto the `k/255` grid.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_pool(n: usize) -> Tensor {
        let pool = speaker_pool(1234, n.max(4));
        let rows: Vec<Vec<f64>> = (0..n).map(|i| pool.row(i).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn pool_rows_are_unit_and_distinct() {
        let pool = speaker_pool(7, 12);
        assert_eq!(pool.shape(), &[12, 40]);
        for i in 0..12 {
            let norm: f64 = pool.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(pool.row(i).iter().all(|&x| x > 0.0));
            for j in (i + 1)..12 {
                assert!(cosine(pool.row(i), pool.row(j)) < MAX_PROTOTYPE_COSINE);
            }
        }
        assert_eq!(speaker_pool(7, 12), pool);
    }

    #[test]
    fn silence_stays_near_the_noise_floor() {
        let labels = ActivityLabels::silent(2, 400);
        let feats = render_audio(&labels, &test_pool(2), 5).unwrap();
        for t in 0..400 {
            let mean_energy: f64 =
                feats.frames.row(t).iter().map(|f| f.exp()).sum::<f64>() / 40.0;
            assert!(mean_energy < 1e-3, "frame {t} energy {mean_energy}");
        }
    }

    #[test]
    fn speech_rises_above_the_noise_floor() {
        let labels = ActivityLabels::from_rows(vec![vec![true; 400]]);
        let feats = render_audio(&labels, &test_pool(1), 5).unwrap();
        for t in 0..400 {
            let mean_energy: f64 =
                feats.frames.row(t).iter().map(|f| f.exp()).sum::<f64>() / 40.0;
            assert!(mean_energy > 1e-3, "frame {t} energy {mean_energy}");
        }
    }

    #[test]
    fn single_active_frames_classify_by_cosine() {
        let labels = super::super::dialog::gen_dialog(3, 10.0, 0.25, 8).unwrap();
        let protos = test_pool(3);
        let feats = render_audio(&labels, &protos, 9).unwrap();
        let mut total = 0usize;
        let mut correct = 0usize;
        for t in 0..labels.num_frames() {
            let active: Vec<usize> = (0..3).filter(|&n| labels.is_active(n, t)).collect();
            if active.len() != 1 {
                continue;
            }
            let energy: Vec<f64> = feats.frames.row(t).iter().map(|f| f.exp()).collect();
            let best = (0..3)
                .max_by(|&i, &j| {
                    cosine(&energy, protos.row(i))
                        .partial_cmp(&cosine(&energy, protos.row(j)))
                        .unwrap()
                })
                .unwrap();
            total += 1;
            if best == active[0] {
                correct += 1;
            }
        }
        assert!(total > 100, "need single-active frames to classify");
        let accuracy = correct as f64 / total as f64;
        assert!(accuracy >= 0.95, "accuracy {accuracy} on {total} frames");
    }

    #[test]
    fn overlap_is_additive_in_energy() {
        let t = 200;
        let only_a = ActivityLabels::from_rows(vec![vec![true; t], vec![false; t]]);
        let only_b = ActivityLabels::from_rows(vec![vec![false; t], vec![true; t]]);
        let both = ActivityLabels::from_rows(vec![vec![true; t], vec![true; t]]);
        let neither = ActivityLabels::silent(2, t);
        let protos = test_pool(2);
        let fa = render_audio(&only_a, &protos, 3).unwrap();
        let fb = render_audio(&only_b, &protos, 3).unwrap();
        let fab = render_audio(&both, &protos, 3).unwrap();
        let f0 = render_audio(&neither, &protos, 3).unwrap();
        for i in 0..t * 40 {
            let got = fab.frames.data()[i].exp();
            let want =
                fa.frames.data()[i].exp() + fb.frames.data()[i].exp() - f0.frames.data()[i].exp();
            assert!(
                (got - want).abs() <= 1e-12 * got.abs().max(1.0),
                "cell {i}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn indistinct_prototypes_are_rejected() {
        let row = test_pool(1).row(0).to_vec();
        let twins = Tensor::from_rows(&[row.clone(), row]).unwrap();
        let labels = ActivityLabels::silent(2, 100);
        assert!(matches!(
            render_audio(&labels, &twins, 0).unwrap_err(),
            SynthError::BadConfig(_)
        ));
    }

    #[test]
    fn audio_render_is_deterministic() {
        let labels = super::super::dialog::gen_dialog(2, 5.0, 0.2, 4).unwrap();
        let protos = test_pool(2);
        let a = render_audio(&labels, &protos, 77).unwrap();
        let b = render_audio(&labels, &protos, 77).unwrap();
        assert_eq!(a, b);
    }

    fn brightness_series(patches: &Tensor) -> Vec<f64> {
        (0..patches.rows())
            .map(|r| patches.row(r).iter().sum::<f64>() / patches.cols() as f64)
            .collect()
    }

    fn variance(series: &[f64]) -> f64 {
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / series.len() as f64
    }

    #[test]
    fn silent_speakers_barely_move() {
        let labels = ActivityLabels::from_rows(vec![vec![true; 800], vec![false; 800]]);
        let (visual, mask) = render_visual(&labels, 24, 24, 6);
        assert!(mask.iter().flatten().all(|m| !m));
        let talking = variance(&brightness_series(&visual[0]));
        let silent = variance(&brightness_series(&visual[1]));
        assert!(silent < 1e-6, "silent variance {silent}");
        assert!(talking > 1e-4, "talking variance {talking}");
        assert!(talking > 100.0 * silent.max(1e-12));
    }

    #[test]
    fn all_silent_labels_give_near_constant_patches() {
        let labels = ActivityLabels::silent(2, 400);
        let (visual, _) = render_visual(&labels, 24, 24, 2);
        for v in &visual {
            assert!(variance(&brightness_series(v)) < 1e-6);
        }
    }

    /// Quadratic DFT peak pick over the brightness series, written against
    /// the definition rather than any FFT library.
    fn dominant_frequency_hz(series: &[f64], fps: f64) -> f64 {
        let n = series.len();
        let mean = series.iter().sum::<f64>() / n as f64;
        let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
        let mut best = (0usize, f64::MIN);
        for bin in 1..n / 2 {
            let mut re = 0.0;
            let mut im = 0.0;
            for (i, &x) in centered.iter().enumerate() {
                let theta = -std::f64::consts::TAU * (bin * i) as f64 / n as f64;
                re += x * theta.cos();
                im += x * theta.sin();
            }
            let power = re * re + im * im;
            if power > best.1 {
                best = (bin, power);
            }
        }
        best.0 as f64 * fps / n as f64
    }

    #[test]
    fn speaking_lips_oscillate_in_band() {
        for seed in [1u64, 2, 3] {
            let labels = ActivityLabels::from_rows(vec![vec![true; 800]]);
            let (visual, _) = render_visual(&labels, 24, 24, seed);
            let series = brightness_series(&visual[0]);
            let peak = dominant_frequency_hz(&series, 25.0);
            assert!(
                (1.5..=6.5).contains(&peak),
                "seed {seed}: spectral peak at {peak} Hz"
            );
        }
    }

    #[test]
    fn patches_sit_on_the_quantization_grid() {
        let labels = ActivityLabels::from_rows(vec![vec![true; 200]]);
        let (visual, _) = render_visual(&labels, 24, 24, 9);
        for v in visual[0].data() {
            let scaled = v * 255.0;
            assert!((scaled - scaled.round()).abs() < 1e-9);
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn visual_render_is_deterministic() {
        let labels = super::super::dialog::gen_dialog(2, 5.0, 0.2, 4).unwrap();
        let (a, _) = render_visual(&labels, 24, 24, 12);
        let (b, _) = render_visual(&labels, 24, 24, 12);
        assert_eq!(a, b);
    }

    #[test]
    fn patch_dimensions_are_respected() {
        let labels = ActivityLabels::silent(1, 40);
        let (visual, mask) = render_visual(&labels, 16, 8, 0);
        assert_eq!(visual[0].shape(), &[10, 128]);
        assert_eq!(mask[0].len(), 10);
    }
}
