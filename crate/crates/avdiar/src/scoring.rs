//! Diarization error rate: an interval-exact engine with collar handling and
//! optimal speaker mapping, a brute-force frame-level oracle that checks it,
//! and development-set threshold tuning.
//!
//! The engine splits the timeline at every segment boundary and collar edge,
//! so each elementary interval has constant speaker activity and a constant
//! scored/excluded status, and error seconds are exact sums of interval
//! lengths. Speaker mapping maximizes the scored time shared between
//! reference and hypothesis speakers, solved exactly per recording; ties are
//! broken toward the lexicographically first (reference, hypothesis) pairs.
//! Overlapped speech counts every simultaneous reference speaker, and the
//! collar excludes time around reference boundaries only.

use crate::fusion::FusionSpec;
use crate::pipeline::{enroll_iterate, PipelineConfig, PipelineError, Segment, SegmentList};
use crate::synth::{SceneSource, SynthError};
use crate::{ModelConfig, ParamSet};
use thiserror::Error;

/// Widest speaker set the frame oracle will enumerate mappings for.
pub const ORACLE_MAX_SPEAKERS: usize = 8;
/// Slack when comparing assignment totals during lexicographic tie fixing;
/// genuine overlap differences are far larger than float summation noise.
const ASSIGN_EPS: f64 = 1e-9;

/// Errors from scoring configuration or the evaluation loop.
#[derive(Debug, Error)]
pub enum ScoreError {
    /// Invalid collar, grid, or inputs.
    #[error("scoring configuration: {0}")]
    BadConfig(String),
    /// The frame oracle refuses combinatorial mapping searches this wide.
    #[error("frame oracle limited to {max} speakers per side, got {got}")]
    TooManySpeakers { got: usize, max: usize },
    /// Scene generation or loading failed during tuning.
    #[error(transparent)]
    Synth(#[from] SynthError),
    /// Inference failed during tuning.
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// One entry of the optimal speaker mapping; only pairs that share scored
/// time are reported.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct MappedPair {
    /// Recording the mapping belongs to; mappings are per recording.
    pub uri: String,
    /// Hypothesis speaker label.
    pub hypothesis: String,
    /// Reference speaker label it is scored against.
    pub reference: String,
}

/// Diarization error rate and its components, all in seconds of scored time.
#[derive(Debug, Clone, PartialEq)]
pub struct DerReport {
    /// Hypothesis speech time with no reference speaker to absorb it.
    pub fa_s: f64,
    /// Reference speech time with no hypothesis speaker to cover it.
    pub miss_s: f64,
    /// Speech time attributed to the wrong speaker.
    pub spkerr_s: f64,
    /// Scored reference speech time, overlap counted per speaker.
    pub total_ref_speech_s: f64,
    /// `(fa + miss + spkerr) / total`; zero when nothing was scored and no
    /// errors exist, infinite when errors exist against zero reference time.
    pub der: f64,
    /// Optimal hypothesis-to-reference assignment per recording.
    pub mapping: Vec<MappedPair>,
}

/// Exact maximum-total assignment on a rectangular overlap matrix.
///
/// Returns the optimal total and one optimal set of (row, column) pairs.
/// Implemented as the potentials-based shortest-augmenting-path algorithm on
/// the squared, negated matrix.
fn hungarian_max(overlap: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let r = overlap.len();
    let h = overlap.first().map_or(0, Vec::len);
    let n = r.max(h);
    if n == 0 {
        return (0.0, Vec::new());
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < r && j < h {
            -overlap[i][j]
        } else {
            0.0
        }
    };
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::new();
    let mut total = 0.0;
    for j in 1..=n {
        let i = matched_row[j];
        if i >= 1 && i - 1 < r && j - 1 < h {
            pairs.push((i - 1, j - 1));
            total += overlap[i - 1][j - 1];
        }
    }
    pairs.sort_unstable();
    (total, pairs)
}

/// Optimal assignment value over the rows and columns not yet taken.
fn hungarian_max_remaining(overlap: &[Vec<f64>], row_taken: &[bool], col_taken: &[bool]) -> f64 {
    let rows: Vec<usize> = (0..overlap.len()).filter(|&i| !row_taken[i]).collect();
    let cols: Vec<usize> = (0..col_taken.len()).filter(|&j| !col_taken[j]).collect();
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let reduced: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| cols.iter().map(|&j| overlap[i][j]).collect())
        .collect();
    hungarian_max(&reduced).0
}

/// Optimal assignment with ties broken toward lexicographically first
/// (row, column) pairs: scanning pairs in order, each one is kept whenever
/// keeping it still reaches the optimal total.
fn assign_lexicographic(overlap: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let r = overlap.len();
    let h = overlap.first().map_or(0, Vec::len);
    if r == 0 || h == 0 {
        return Vec::new();
    }
    let (best, _) = hungarian_max(overlap);
    let target = r.min(h);
    let mut row_taken = vec![false; r];
    let mut col_taken = vec![false; h];
    let mut fixed = Vec::with_capacity(target);
    let mut fixed_total = 0.0;
    'scan: for i in 0..r {
        if row_taken[i] {
            continue;
        }
        for j in 0..h {
            if col_taken[j] {
                continue;
            }
            row_taken[i] = true;
            col_taken[j] = true;
            let reachable =
                fixed_total + overlap[i][j] + hungarian_max_remaining(overlap, &row_taken, &col_taken);
            if reachable >= best - ASSIGN_EPS {
                fixed.push((i, j));
                fixed_total += overlap[i][j];
                if fixed.len() == target {
                    break 'scan;
                }
                break;
            }
            row_taken[i] = false;
            col_taken[j] = false;
        }
    }
    fixed
}

/// Sorted distinct speaker labels of one recording's segments.
fn speaker_labels(segs: &[&Segment]) -> Vec<String> {
    let mut out: Vec<String> = segs.iter().map(|s| s.speaker.clone()).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Speakers active at time `t`, as indices into `labels`.
fn active_at(segs: &[&Segment], labels: &[String], t: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for (n, label) in labels.iter().enumerate() {
        let on = segs
            .iter()
            .any(|s| s.speaker == *label && s.onset <= t && t < s.offset());
        if on {
            out.push(n);
        }
    }
    out
}

/// True when `t` falls inside the collar zone of any reference boundary.
fn in_collar(ref_boundaries: &[f64], collar_s: f64, t: f64) -> bool {
    collar_s > 0.0
        && ref_boundaries
            .iter()
            .any(|&b| b - collar_s < t && t < b + collar_s)
}

struct UriScore {
    fa_s: f64,
    miss_s: f64,
    spkerr_s: f64,
    total_ref_s: f64,
    mapping: Vec<MappedPair>,
}

/// Scores one recording with the interval engine.
fn score_uri(
    uri: &str,
    ref_segs: &[&Segment],
    hyp_segs: &[&Segment],
    collar_s: f64,
) -> UriScore {
    let ref_labels = speaker_labels(ref_segs);
    let hyp_labels = speaker_labels(hyp_segs);
    let mut ref_boundaries = Vec::with_capacity(ref_segs.len() * 2);
    for s in ref_segs {
        ref_boundaries.push(s.onset);
        ref_boundaries.push(s.offset());
    }
    let mut events: Vec<f64> = Vec::new();
    for s in ref_segs.iter().chain(hyp_segs) {
        events.push(s.onset);
        events.push(s.offset());
    }
    if collar_s > 0.0 {
        for &b in &ref_boundaries {
            events.push((b - collar_s).max(0.0));
            events.push(b + collar_s);
        }
    }
    events.sort_by(|a, b| a.partial_cmp(b).expect("segment times are finite"));
    events.dedup();

    let mut regions: Vec<(f64, Vec<usize>, Vec<usize>)> = Vec::new();
    let mut overlap = vec![vec![0.0f64; hyp_labels.len()]; ref_labels.len()];
    let mut total_ref_s = 0.0;
    for w in events.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let dur = t1 - t0;
        if dur <= 0.0 {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        if in_collar(&ref_boundaries, collar_s, mid) {
            continue;
        }
        let active_ref = active_at(ref_segs, &ref_labels, mid);
        let active_hyp = active_at(hyp_segs, &hyp_labels, mid);
        if active_ref.is_empty() && active_hyp.is_empty() {
            continue;
        }
        total_ref_s += active_ref.len() as f64 * dur;
        for &ri in &active_ref {
            for &hj in &active_hyp {
                overlap[ri][hj] += dur;
            }
        }
        regions.push((dur, active_ref, active_hyp));
    }

    let pairs = assign_lexicographic(&overlap);
    let mut fa_s = 0.0;
    let mut miss_s = 0.0;
    let mut spkerr_s = 0.0;
    for (dur, active_ref, active_hyp) in &regions {
        let n_ref = active_ref.len();
        let n_hyp = active_hyp.len();
        let matched = pairs
            .iter()
            .filter(|(ri, hj)| active_ref.contains(ri) && active_hyp.contains(hj))
            .count();
        fa_s += n_hyp.saturating_sub(n_ref) as f64 * dur;
        miss_s += n_ref.saturating_sub(n_hyp) as f64 * dur;
        spkerr_s += (n_ref.min(n_hyp) - matched) as f64 * dur;
    }
    let mapping = pairs
        .iter()
        .filter(|&&(ri, hj)| overlap[ri][hj] > 0.0)
        .map(|&(ri, hj)| MappedPair {
            uri: uri.to_string(),
            hypothesis: hyp_labels[hj].clone(),
            reference: ref_labels[ri].clone(),
        })
        .collect();
    UriScore {
        fa_s,
        miss_s,
        spkerr_s,
        total_ref_s,
        mapping,
    }
}

fn union_uris(reference: &SegmentList, hypothesis: &SegmentList) -> Vec<String> {
    let mut uris: Vec<String> = reference
        .uris()
        .into_iter()
        .chain(hypothesis.uris())
        .map(str::to_string)
        .collect();
    uris.sort_unstable();
    uris.dedup();
    uris
}

fn finish_report(
    fa_s: f64,
    miss_s: f64,
    spkerr_s: f64,
    total_ref_speech_s: f64,
    mut mapping: Vec<MappedPair>,
) -> DerReport {
    mapping.sort_unstable();
    let errors = fa_s + miss_s + spkerr_s;
    let der = if total_ref_speech_s > 0.0 {
        errors / total_ref_speech_s
    } else if errors == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    DerReport {
        fa_s,
        miss_s,
        spkerr_s,
        total_ref_speech_s,
        der,
        mapping,
    }
}

/// Computes the diarization error rate of a hypothesis against a reference.
///
/// Both lists may span several recordings; error seconds and reference time
/// aggregate across them while speaker mapping stays per recording. Time
/// within `collar_s` of any reference boundary is excluded from all
/// bookkeeping. An empty reference against hypothesis speech yields an
/// infinite rate with `total_ref_speech_s` zero.
pub fn der(
    reference: &SegmentList,
    hypothesis: &SegmentList,
    collar_s: f64,
) -> Result<DerReport, ScoreError> {
    if !(collar_s >= 0.0) || !collar_s.is_finite() {
        return Err(ScoreError::BadConfig(format!(
            "collar must be a nonnegative finite number of seconds, got {collar_s}"
        )));
    }
    let mut fa_s = 0.0;
    let mut miss_s = 0.0;
    let mut spkerr_s = 0.0;
    let mut total = 0.0;
    let mut mapping = Vec::new();
    for uri in union_uris(reference, hypothesis) {
        let score = score_uri(
            &uri,
            &reference.for_uri(&uri),
            &hypothesis.for_uri(&uri),
            collar_s,
        );
        fa_s += score.fa_s;
        miss_s += score.miss_s;
        spkerr_s += score.spkerr_s;
        total += score.total_ref_s;
        mapping.extend(score.mapping);
    }
    Ok(finish_report(fa_s, miss_s, spkerr_s, total, mapping))
}

/// Per-recording reports in uri order, for breakdown tables.
pub fn der_per_uri(
    reference: &SegmentList,
    hypothesis: &SegmentList,
    collar_s: f64,
) -> Result<Vec<(String, DerReport)>, ScoreError> {
    if !(collar_s >= 0.0) || !collar_s.is_finite() {
        return Err(ScoreError::BadConfig(format!(
            "collar must be a nonnegative finite number of seconds, got {collar_s}"
        )));
    }
    let mut out = Vec::new();
    for uri in union_uris(reference, hypothesis) {
        let score = score_uri(
            &uri,
            &reference.for_uri(&uri),
            &hypothesis.for_uri(&uri),
            collar_s,
        );
        out.push((
            uri,
            finish_report(
                score.fa_s,
                score.miss_s,
                score.spkerr_s,
                score.total_ref_s,
                score.mapping,
            ),
        ));
    }
    Ok(out)
}

/// Enumerates injective mappings of the smaller speaker side into the larger
/// and returns the pairs of the first mapping reaching the maximum summed
/// overlap, as (row, column) pairs.
fn brute_force_assignment(overlap: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let r = overlap.len();
    let h = overlap.first().map_or(0, Vec::len);
    if r == 0 || h == 0 {
        return Vec::new();
    }
    let transpose = r > h;
    let (small, large) = if transpose { (h, r) } else { (r, h) };
    let value = |s: usize, l: usize| {
        if transpose {
            overlap[l][s]
        } else {
            overlap[s][l]
        }
    };
    let mut best_total = f64::NEG_INFINITY;
    let mut best: Vec<usize> = Vec::new();
    let mut current = vec![usize::MAX; small];
    let mut used = vec![false; large];
    fn recurse(
        s: usize,
        small: usize,
        large: usize,
        value: &dyn Fn(usize, usize) -> f64,
        current: &mut Vec<usize>,
        used: &mut Vec<bool>,
        total: f64,
        best_total: &mut f64,
        best: &mut Vec<usize>,
    ) {
        if s == small {
            if total > *best_total {
                *best_total = total;
                *best = current.clone();
            }
            return;
        }
        for l in 0..large {
            if used[l] {
                continue;
            }
            used[l] = true;
            current[s] = l;
            recurse(
                s + 1,
                small,
                large,
                value,
                current,
                used,
                total + value(s, l),
                best_total,
                best,
            );
            used[l] = false;
        }
    }
    recurse(
        0,
        small,
        large,
        &value,
        &mut current,
        &mut used,
        0.0,
        &mut best_total,
        &mut best,
    );
    best.iter()
        .enumerate()
        .map(|(s, &l)| if transpose { (l, s) } else { (s, l) })
        .collect()
}

/// Brute-force frame-level rate: the timeline is quantized into `step_s`
/// frames scored at their midpoints, and speaker mapping is an exhaustive
/// search. Agrees with [`der`] up to one frame per boundary; refuses more
/// than [`ORACLE_MAX_SPEAKERS`] speakers on either side of a recording.
pub fn der_frame_oracle(
    reference: &SegmentList,
    hypothesis: &SegmentList,
    step_s: f64,
    collar_s: f64,
) -> Result<DerReport, ScoreError> {
    if !(step_s > 0.0) || !step_s.is_finite() {
        return Err(ScoreError::BadConfig(format!(
            "frame step must be positive, got {step_s}"
        )));
    }
    if !(collar_s >= 0.0) || !collar_s.is_finite() {
        return Err(ScoreError::BadConfig(format!(
            "collar must be a nonnegative finite number of seconds, got {collar_s}"
        )));
    }
    let mut fa_s = 0.0;
    let mut miss_s = 0.0;
    let mut spkerr_s = 0.0;
    let mut total = 0.0;
    let mut mapping = Vec::new();
    for uri in union_uris(reference, hypothesis) {
        let ref_segs = reference.for_uri(&uri);
        let hyp_segs = hypothesis.for_uri(&uri);
        let ref_labels = speaker_labels(&ref_segs);
        let hyp_labels = speaker_labels(&hyp_segs);
        let widest = ref_labels.len().max(hyp_labels.len());
        if widest > ORACLE_MAX_SPEAKERS {
            return Err(ScoreError::TooManySpeakers {
                got: widest,
                max: ORACLE_MAX_SPEAKERS,
            });
        }
        let mut ref_boundaries = Vec::new();
        let mut end: f64 = 0.0;
        for s in &ref_segs {
            ref_boundaries.push(s.onset);
            ref_boundaries.push(s.offset());
            end = end.max(s.offset());
        }
        for s in &hyp_segs {
            end = end.max(s.offset());
        }
        let frames = ((end + collar_s) / step_s).ceil() as usize + 1;
        let mut overlap = vec![vec![0.0f64; hyp_labels.len()]; ref_labels.len()];
        let mut cells: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for k in 0..frames {
            let mid = (k as f64 + 0.5) * step_s;
            if in_collar(&ref_boundaries, collar_s, mid) {
                continue;
            }
            let active_ref = active_at(&ref_segs, &ref_labels, mid);
            let active_hyp = active_at(&hyp_segs, &hyp_labels, mid);
            if active_ref.is_empty() && active_hyp.is_empty() {
                continue;
            }
            total += active_ref.len() as f64 * step_s;
            for &ri in &active_ref {
                for &hj in &active_hyp {
                    overlap[ri][hj] += step_s;
                }
            }
            cells.push((active_ref, active_hyp));
        }
        let pairs = brute_force_assignment(&overlap);
        for (active_ref, active_hyp) in &cells {
            let n_ref = active_ref.len();
            let n_hyp = active_hyp.len();
            let matched = pairs
                .iter()
                .filter(|(ri, hj)| active_ref.contains(ri) && active_hyp.contains(hj))
                .count();
            fa_s += n_hyp.saturating_sub(n_ref) as f64 * step_s;
            miss_s += n_ref.saturating_sub(n_hyp) as f64 * step_s;
            spkerr_s += (n_ref.min(n_hyp) - matched) as f64 * step_s;
        }
        mapping.extend(
            pairs
                .iter()
                .filter(|&&(ri, hj)| overlap[ri][hj] > 0.0)
                .map(|&(ri, hj)| MappedPair {
                    uri: uri.clone(),
                    hypothesis: hyp_labels[hj].clone(),
                    reference: ref_labels[ri].clone(),
                }),
        );
    }
    Ok(finish_report(fa_s, miss_s, spkerr_s, total, mapping))
}

/// Among measured (threshold, rate) points, the winner has the lowest rate;
/// rate ties prefer the threshold closest to one half, distance ties the
/// smaller threshold.
fn pick_best(measured: &[(f64, f64)]) -> f64 {
    let mut best = measured[0];
    for &(theta, rate) in &measured[1..] {
        let better = rate < best.1
            || (rate == best.1
                && ((theta - 0.5).abs() < (best.0 - 0.5).abs()
                    || ((theta - 0.5).abs() == (best.0 - 0.5).abs() && theta < best.0)));
        if better {
            best = (theta, rate);
        }
    }
    best.0
}

/// Picks the activity threshold minimizing mean development-set DER.
///
/// Every grid point runs the full enrollment-and-inference loop on every
/// scene with the base configuration's other knobs, scoring against the
/// scenes' ground truth at `collar_s`. Ties prefer one half, then the
/// smaller threshold.
pub fn tune_threshold(
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    base: &PipelineConfig,
    scenes: &SceneSource,
    grid: &[f64],
    collar_s: f64,
) -> Result<f64, ScoreError> {
    if grid.is_empty() {
        return Err(ScoreError::BadConfig("threshold grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(ScoreError::BadConfig(format!(
            "grid threshold {bad} outside (0, 1)"
        )));
    }
    if scenes.is_empty() {
        return Err(ScoreError::BadConfig("no development scenes".into()));
    }
    let mut measured = Vec::with_capacity(grid.len());
    for &theta in grid {
        let cfg = PipelineConfig {
            threshold: theta,
            ..base.clone()
        };
        let mut sum = 0.0;
        for idx in 0..scenes.len() {
            let scene = scenes.scene(idx)?;
            let hypothesis = enroll_iterate(params, config, spec, &cfg, &scene)?;
            let report = der(&scene.reference_segments(), &hypothesis, collar_s)?;
            sum += report.der;
        }
        measured.push((theta, sum / scenes.len() as f64));
    }
    Ok(pick_best(&measured))
}
