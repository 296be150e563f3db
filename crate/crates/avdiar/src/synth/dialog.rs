//! Speaker activity generation: who talks when.
//!
//! Each speaker is an independent on/off semi-Markov chain with exponential
//! holding times (mean turn 2 s; mean gap tuned so the expected overlap ratio
//! hits the target). An off-starting speaker draws its first gap truncated to
//! the opening stretch of the scene, so short scenes still hear from every
//! speaker. Chains are resampled until the realized overlap lands within five
//! points of the target and every speaker has enough solo speech to be
//! enrollable. A target of exactly zero switches to a structural turn-taking
//! generator that cannot produce overlap at all.

use super::{SynthError, FRAME_SECONDS};
use crate::numerics::rng::{seeded_rng, split_seed};
use crate::pipeline::segments::{RttmError, Segment, SegmentList};
use crate::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};

/// Mean turn length in frames (2 s at the 10 ms hop).
const MEAN_TURN_FRAMES: f64 = 200.0;
/// Accepted distance between realized and target overlap.
const OVERLAP_BAND: f64 = 0.05;
/// Resample attempts before giving up.
const MAX_ATTEMPTS: usize = 100;
/// Minimum solo frames a speaker needs across the scene.
const MIN_SOLO_FRAMES: usize = 60;
/// Minimum length of a speaker's longest solo run.
const MIN_SOLO_RUN: usize = 40;

/// Binary per-speaker, per-frame activity.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityLabels {
    active: Vec<Vec<bool>>,
}

impl ActivityLabels {
    /// All-silent labels for `n_speakers` over `num_frames`.
    pub fn silent(n_speakers: usize, num_frames: usize) -> Self {
        Self {
            active: vec![vec![false; num_frames]; n_speakers],
        }
    }

    /// Builds labels from per-speaker rows; rows must share a length.
    pub fn from_rows(active: Vec<Vec<bool>>) -> Self {
        if let Some(first) = active.first() {
            assert!(
                active.iter().all(|r| r.len() == first.len()),
                "label rows must share a length"
            );
        }
        Self { active }
    }

    /// Number of speakers.
    pub fn n_speakers(&self) -> usize {
        self.active.len()
    }

    /// Number of frames.
    pub fn num_frames(&self) -> usize {
        self.active.first().map_or(0, |r| r.len())
    }

    /// Whether speaker `n` is active at frame `t`.
    pub fn is_active(&self, n: usize, t: usize) -> bool {
        self.active[n][t]
    }

    /// Sets one cell.
    pub fn set(&mut self, n: usize, t: usize, value: bool) {
        self.active[n][t] = value;
    }

    /// How many speakers are active at frame `t`.
    pub fn active_count(&self, t: usize) -> usize {
        self.active.iter().filter(|r| r[t]).count()
    }

    /// Frames with two or more active speakers over frames with at least one;
    /// zero for fully silent labels.
    pub fn overlap_ratio(&self) -> f64 {
        let mut any = 0usize;
        let mut multi = 0usize;
        for t in 0..self.num_frames() {
            let c = self.active_count(t);
            if c >= 1 {
                any += 1;
            }
            if c >= 2 {
                multi += 1;
            }
        }
        if any == 0 {
            0.0
        } else {
            multi as f64 / any as f64
        }
    }

    /// Maximal active runs of speaker `n` as `(start, len)` pairs.
    pub fn active_runs(&self, n: usize) -> Vec<(usize, usize)> {
        runs_of(&self.active[n], |&a| a)
    }

    /// Maximal runs where speaker `n` is active and everyone else is silent.
    pub fn solo_runs(&self, n: usize) -> Vec<(usize, usize)> {
        let solo: Vec<bool> = (0..self.num_frames())
            .map(|t| self.active[n][t] && self.active_count(t) == 1)
            .collect();
        runs_of(&solo, |&a| a)
    }

    /// Total frames where speaker `n` talks alone.
    pub fn solo_frames(&self, n: usize) -> usize {
        self.solo_runs(n).iter().map(|(_, len)| len).sum()
    }

    /// Activity as a `[N x T]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self
            .active
            .iter()
            .map(|r| r.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect())
            .collect();
        Tensor::from_rows(&rows).expect("label rows share a length")
    }

    /// Converts runs to a segment list; frame `t` covers
    /// `[t * frame_s, (t+1) * frame_s)`.
    pub fn to_segments(
        &self,
        uri: &str,
        speaker_names: &[String],
        frame_s: f64,
    ) -> Result<SegmentList, RttmError> {
        assert_eq!(speaker_names.len(), self.n_speakers());
        let mut segments = Vec::new();
        for (n, name) in speaker_names.iter().enumerate() {
            for (start, len) in self.active_runs(n) {
                segments.push(Segment {
                    uri: uri.to_string(),
                    onset: start as f64 * frame_s,
                    duration: len as f64 * frame_s,
                    speaker: name.clone(),
                });
            }
        }
        SegmentList::new(segments)
    }

    /// Rebuilds frame labels from segments, the inverse of [`to_segments`].
    ///
    /// A frame is active when its start time falls inside a segment, which
    /// reproduces the original labels exactly for segment times on the frame
    /// grid.
    pub fn from_segments(
        list: &SegmentList,
        uri: &str,
        speaker_names: &[String],
        num_frames: usize,
        frame_s: f64,
    ) -> Self {
        let mut labels = Self::silent(speaker_names.len(), num_frames);
        for seg in list.for_uri(uri) {
            let Some(n) = speaker_names.iter().position(|s| *s == seg.speaker) else {
                continue;
            };
            let start = (seg.onset / frame_s).round() as usize;
            let len = (seg.duration / frame_s).round() as usize;
            for t in start..(start + len).min(num_frames) {
                labels.active[n][t] = true;
            }
        }
        labels
    }
}

fn runs_of<T>(row: &[T], pred: impl Fn(&T) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, v) in row.iter().enumerate() {
        match (pred(v), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - s));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, row.len() - s));
    }
    out
}

/// Expected overlap ratio of `n` independent chains with duty cycle `p`.
fn expected_overlap(n: usize, p: f64) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let q = 1.0 - p;
    let p0 = q.powi(n as i32);
    let p1 = n as f64 * p * q.powi(n as i32 - 1);
    let any = 1.0 - p0;
    if any < 1e-12 {
        0.0
    } else {
        (any - p1) / any
    }
}

/// Duty cycle whose expected overlap ratio equals `target`, by bisection.
fn duty_cycle_for_overlap(n: usize, target: f64) -> f64 {
    let mut lo = 1e-4;
    let mut hi = 0.97;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if expected_overlap(n, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generates activity labels for `n_speakers` over `duration_s` seconds,
/// resampling until the realized overlap is within five points of
/// `target_overlap` and every speaker has usable solo speech.
///
/// Deterministic given the seed. Fails with
/// [`SynthError::OverlapUnreachable`] when 100 attempts cannot satisfy the
/// constraints (for example a single speaker with a large overlap target).
pub fn gen_dialog(
    n_speakers: usize,
    duration_s: f64,
    target_overlap: f64,
    seed: u64,
) -> Result<ActivityLabels, SynthError> {
    if n_speakers == 0 {
        return Err(SynthError::BadConfig("n_speakers must be >= 1".into()));
    }
    if !(0.0..=0.6).contains(&target_overlap) {
        return Err(SynthError::BadConfig(format!(
            "target_overlap {target_overlap} outside [0, 0.6]"
        )));
    }
    let num_frames = (duration_s / FRAME_SECONDS).round() as usize;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seeded_rng(split_seed(seed, "attempt", attempt as u64));
        let labels = if target_overlap == 0.0 {
            turn_taking(n_speakers, num_frames, &mut rng)
        } else if attempt >= MAX_ATTEMPTS / 2 {
            overlap_taking(n_speakers, num_frames, target_overlap, &mut rng)
        } else {
            independent_chains(n_speakers, num_frames, target_overlap, &mut rng)
        };
        if accepts(&labels, target_overlap) {
            return Ok(labels);
        }
    }
    Err(SynthError::OverlapUnreachable {
        target: target_overlap,
        attempts: MAX_ATTEMPTS,
    })
}

fn accepts(labels: &ActivityLabels, target: f64) -> bool {
    if (labels.overlap_ratio() - target).abs() > OVERLAP_BAND {
        return false;
    }
    (0..labels.n_speakers()).all(|n| {
        labels.solo_frames(n) >= MIN_SOLO_FRAMES
            && labels
                .solo_runs(n)
                .iter()
                .any(|&(_, len)| len >= MIN_SOLO_RUN)
    })
}

fn independent_chains(
    n_speakers: usize,
    num_frames: usize,
    target: f64,
    rng: &mut impl Rng,
) -> ActivityLabels {
    let p = if n_speakers == 1 {
        0.5
    } else {
        duty_cycle_for_overlap(n_speakers, target)
    };
    let mean_gap = (MEAN_TURN_FRAMES * (1.0 - p) / p).max(10.0);
    let turn_dist = Exp::new(1.0 / MEAN_TURN_FRAMES).expect("positive rate");
    let gap_dist = Exp::new(1.0 / mean_gap).expect("positive rate");
    let first_cap = (num_frames * 4 / 5).max(20);

    let mut rows = Vec::with_capacity(n_speakers);
    for _ in 0..n_speakers {
        let mut row = vec![false; num_frames];
        let mut talking = rng.gen_bool(p);
        let mut first = true;
        let mut t = 0usize;
        while t < num_frames {
            let len = if talking {
                clamp_frames(turn_dist.sample(rng), 20, 1500)
            } else if first {
                truncated_gap(gap_dist, first_cap, rng)
            } else {
                clamp_frames(gap_dist.sample(rng), 10, 2500)
            };
            first = false;
            if talking {
                for slot in row.iter_mut().skip(t).take(len) {
                    *slot = true;
                }
            }
            t += len;
            talking = !talking;
        }
        rows.push(row);
    }
    ActivityLabels::from_rows(rows)
}

/// Rescue proposal for scenes too short to hit the band with equilibrium
/// chains: speakers take the floor round-robin and consecutive turns overlap
/// by a handoff sized so the scene ratio lands near the target.
fn overlap_taking(
    n_speakers: usize,
    num_frames: usize,
    target: f64,
    rng: &mut impl Rng,
) -> ActivityLabels {
    let turn_dist = Exp::new(1.0 / MEAN_TURN_FRAMES).expect("positive rate");
    let gap_dist = Exp::new(1.0 / 50.0).expect("positive rate");
    let handoff = target / (1.0 + target) / 0.9;
    let turn_cap = (num_frames / 2).clamp(60, 500);
    let mut rows = vec![vec![false; num_frames]; n_speakers];
    let mut order: Vec<usize> = (0..n_speakers).collect();
    order.shuffle(rng);
    let mut slot = 0usize;
    let mut start = 0usize;
    loop {
        let speaker = order[slot % n_speakers];
        let turn = clamp_frames(turn_dist.sample(rng), 50, turn_cap);
        for cell in rows[speaker].iter_mut().skip(start).take(turn) {
            *cell = true;
        }
        if start + turn >= num_frames {
            break;
        }
        if rng.gen_bool(0.1) {
            start += turn + clamp_frames(gap_dist.sample(rng), 10, 80);
        } else {
            let raw = handoff * turn as f64 * rng.gen_range(0.5..1.5);
            start += turn - (raw.round() as usize).min(4 * turn / 5);
        }
        slot += 1;
    }
    ActivityLabels::from_rows(rows)
}

/// Gap sample conditioned to end inside the opening stretch of the scene, so
/// an off-starting speaker still shows up when the scene is short relative to
/// the tuned mean gap.
fn truncated_gap(dist: Exp<f64>, cap: usize, rng: &mut impl Rng) -> usize {
    for _ in 0..64 {
        let g = clamp_frames(dist.sample(rng), 10, 2500);
        if g <= cap {
            return g;
        }
    }
    clamp_frames(rng.gen_range(10.0..cap as f64), 10, cap)
}

/// Zero-overlap generator: speakers hold the floor one at a time, in shuffled
/// round-robin order with short gaps.
fn turn_taking(n_speakers: usize, num_frames: usize, rng: &mut impl Rng) -> ActivityLabels {
    let turn_dist = Exp::new(1.0 / MEAN_TURN_FRAMES).expect("positive rate");
    let gap_dist = Exp::new(1.0 / 50.0).expect("positive rate");
    let mut rows = vec![vec![false; num_frames]; n_speakers];
    let mut order: Vec<usize> = (0..n_speakers).collect();
    order.shuffle(rng);
    let mut t = 0usize;
    let mut slot = 0usize;
    while t < num_frames {
        let speaker = order[slot % n_speakers];
        let turn = clamp_frames(turn_dist.sample(rng), 50, 400);
        for cell in rows[speaker].iter_mut().skip(t).take(turn) {
            *cell = true;
        }
        t += turn + clamp_frames(gap_dist.sample(rng), 10, 150);
        slot += 1;
    }
    ActivityLabels::from_rows(rows)
}

fn clamp_frames(sample: f64, min: usize, max: usize) -> usize {
    (sample.ceil() as usize).clamp(min, max)
}
