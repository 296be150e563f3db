//! Speaker turn segments and their RTTM serialization.
//!
//! The on-disk format is one line per segment:
//!
//! ```text
//! SPEAKER <uri> 1 <onset> <duration> <NA> <NA> <speaker> <NA> <NA>
//! ```
//!
//! with onset and duration in seconds printed to three decimals. The reader
//! accepts any amount of whitespace between fields and skips blank lines, but
//! rejects lines that are not ten fields or whose type is not `SPEAKER`.

use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// One labeled speaker turn.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Recording or scene identifier.
    pub uri: String,
    /// Start time in seconds.
    pub onset: f64,
    /// Length in seconds; always positive.
    pub duration: f64,
    /// Speaker label.
    pub speaker: String,
}

impl Segment {
    /// End time in seconds.
    pub fn offset(&self) -> f64 {
        self.onset + self.duration
    }
}

/// A validated collection of segments, sorted by (uri, onset, speaker), with
/// no overlap between segments of the same speaker within a uri.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentList {
    segments: Vec<Segment>,
}

/// Errors from segment validation and RTTM parsing.
#[derive(Debug, Error)]
pub enum RttmError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    BadLine { line: usize, message: String },
    #[error("segment has onset {onset} and duration {duration}; onset must be >= 0 and duration > 0")]
    BadTimes { onset: f64, duration: f64 },
    #[error("speaker {speaker:?} in {uri:?} has overlapping segments at {at:.3} s")]
    SpeakerOverlap {
        uri: String,
        speaker: String,
        at: f64,
    },
}

impl SegmentList {
    /// Validates and sorts segments.
    ///
    /// Rejects negative onsets, non-positive durations, and any pair of
    /// same-speaker segments within a uri that overlap (touching endpoints are
    /// allowed).
    pub fn new(mut segments: Vec<Segment>) -> Result<Self, RttmError> {
        for s in &segments {
            if !(s.onset >= 0.0) || !(s.duration > 0.0) {
                return Err(RttmError::BadTimes {
                    onset: s.onset,
                    duration: s.duration,
                });
            }
        }
        segments.sort_by(|a, b| {
            (a.uri.as_str(), a.onset, a.speaker.as_str())
                .partial_cmp(&(b.uri.as_str(), b.onset, b.speaker.as_str()))
                .expect("onsets are finite")
        });
        let mut last_end: std::collections::HashMap<(&str, &str), f64> =
            std::collections::HashMap::new();
        for s in &segments {
            let key = (s.uri.as_str(), s.speaker.as_str());
            if let Some(end) = last_end.get(&key) {
                if s.onset < end - 1e-9 {
                    return Err(RttmError::SpeakerOverlap {
                        uri: s.uri.clone(),
                        speaker: s.speaker.clone(),
                        at: s.onset,
                    });
                }
            }
            let entry = last_end.entry(key).or_insert(f64::NEG_INFINITY);
            *entry = entry.max(s.offset());
        }
        let list = Self { segments };
        Ok(list)
    }

    /// Segments in sorted order.
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Number of segments.
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    /// True when there are no segments.
    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Distinct uris, in first-appearance (sorted) order.
    pub fn uris(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.segments {
            if out.last() != Some(&s.uri.as_str()) {
                out.push(&s.uri);
            }
        }
        out
    }

    /// Distinct speaker labels within one uri, sorted.
    pub fn speakers(&self, uri: &str) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .segments
            .iter()
            .filter(|s| s.uri == uri)
            .map(|s| s.speaker.as_str())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Segments belonging to one uri, in onset order.
    pub fn for_uri(&self, uri: &str) -> Vec<&Segment> {
        self.segments.iter().filter(|s| s.uri == uri).collect()
    }

    /// Total speech duration in seconds (overlap counted per speaker).
    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

/// Serializes segments in the RTTM line format, onset and duration to three
/// decimals.
pub fn rttm_write(list: &SegmentList) -> String {
    let mut out = String::new();
    for s in list.segments() {
        writeln!(
            out,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            s.uri, s.onset, s.duration, s.speaker
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Writes an RTTM file to disk.
pub fn rttm_save(list: &SegmentList, path: impl AsRef<Path>) -> Result<(), RttmError> {
    std::fs::write(path, rttm_write(list))?;
    Ok(())
}

/// Parses RTTM text into a validated [`SegmentList`].
///
/// Lines must carry exactly ten whitespace-separated fields starting with
/// `SPEAKER`; parse failures report the 1-based line number.
pub fn rttm_read(text: &str) -> Result<SegmentList, RttmError> {
    let mut segments = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(RttmError::BadLine {
                line,
                message: format!("expected 10 fields, found {}", fields.len()),
            });
        }
        if fields[0] != "SPEAKER" {
            return Err(RttmError::BadLine {
                line,
                message: format!("unsupported record type {:?}", fields[0]),
            });
        }
        let onset: f64 = fields[3].parse().map_err(|_| RttmError::BadLine {
            line,
            message: format!("cannot parse onset {:?}", fields[3]),
        })?;
        let duration: f64 = fields[4].parse().map_err(|_| RttmError::BadLine {
            line,
            message: format!("cannot parse duration {:?}", fields[4]),
        })?;
        segments.push(Segment {
            uri: fields[1].to_string(),
            onset,
            duration,
            speaker: fields[7].to_string(),
        });
    }
    SegmentList::new(segments)
}

/// Reads an RTTM file from disk.
pub fn rttm_load(path: impl AsRef<Path>) -> Result<SegmentList, RttmError> {
    let text = std::fs::read_to_string(path)?;
    rttm_read(&text)
}
