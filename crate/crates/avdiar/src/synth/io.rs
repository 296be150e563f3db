//! Scene directories on disk.
//!
//! One directory per scene, four files:
//!
//! * `audio.csv` — `[T x 40]` features, one frame per row, round-trip exact.
//! * `visual.bin` — magic `AVVISBIN`, version u32, then n/t_v/p as u32,
//!   `n*t_v*p` pixel bytes (speaker-major, frame-major, 0..=255 for the
//!   `k/255` grid), then `n*t_v` mask bytes (0 or 1).
//! * `labels.rttm` — ground-truth turns in RTTM format.
//! * `meta.toml` — `key = value` lines carrying scene metadata and the
//!   speaker prototypes.
//!
//! Saving then loading reproduces the in-memory scene bit for bit; loaders
//! verify cross-file consistency and the masked-frames-are-zero invariant.

use super::dialog::ActivityLabels;
use super::{Scene, SynthError, FRAMES_PER_VIDEO_FRAME, FRAME_SECONDS};
use crate::frontend::{read_frames_csv, write_frames_csv, AudioFeatures};
use crate::pipeline::segments::{rttm_load, rttm_save};
use crate::Tensor;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const VISUAL_MAGIC: &[u8; 8] = b"AVVISBIN";
const VISUAL_VERSION: u32 = 1;

/// Writes a scene into `dir`, creating it if needed.
pub fn save_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let audio = File::create(dir.join("audio.csv"))?;
    write_frames_csv(&scene.audio.frames, BufWriter::new(audio))?;

    write_visual_bin(scene, &dir.join("visual.bin"))?;
    rttm_save(&scene.reference_segments(), dir.join("labels.rttm"))?;
    write_meta(scene, &dir.join("meta.toml"))?;
    Ok(())
}

/// Loads a scene directory written by [`save_scene`].
pub fn load_scene(dir: impl AsRef<Path>) -> Result<Scene, SynthError> {
    let dir = dir.as_ref();
    let meta = read_meta(&dir.join("meta.toml"))?;

    let audio_file = File::open(dir.join("audio.csv"))?;
    let frames = read_frames_csv(BufReader::new(audio_file))?;
    if frames.rows() != meta.num_frames {
        return Err(SynthError::BadSceneFile {
            path: dir.join("audio.csv"),
            message: format!(
                "audio has {} frames but meta says {}",
                frames.rows(),
                meta.num_frames
            ),
        });
    }
    let audio = AudioFeatures::new(frames)?;

    let (visual, miss_mask) = read_visual_bin(
        &dir.join("visual.bin"),
        meta.speakers.len(),
        meta.num_video_frames,
        meta.patch_h * meta.patch_w,
    )?;
    for (spk, mask) in miss_mask.iter().enumerate() {
        for (tau, &missing) in mask.iter().enumerate() {
            if missing && visual[spk].row(tau).iter().any(|&v| v != 0.0) {
                return Err(SynthError::BadSceneFile {
                    path: dir.join("visual.bin"),
                    message: format!("masked frame {tau} of speaker {spk} is not all-zero"),
                });
            }
        }
    }
    let t = audio.num_frames();
    let tv4 = meta.num_video_frames * FRAMES_PER_VIDEO_FRAME;
    if t.abs_diff(tv4) > crate::frontend::MAX_LENGTH_DIVERGENCE {
        return Err(SynthError::BadSceneFile {
            path: dir.to_path_buf(),
            message: format!("audio length {t} and video length x4 {tv4} diverge"),
        });
    }

    let segments = rttm_load(dir.join("labels.rttm"))?;
    let labels = ActivityLabels::from_segments(
        &segments,
        &meta.uri,
        &meta.speakers,
        meta.num_frames,
        FRAME_SECONDS,
    );

    let prototypes =
        Tensor::from_rows(&meta.prototypes).expect("meta reader checks prototype lengths");

    Ok(Scene {
        uri: meta.uri,
        audio,
        visual,
        miss_mask,
        speaker_prototypes: prototypes,
        speaker_names: meta.speakers,
        labels,
        patch_h: meta.patch_h,
        patch_w: meta.patch_w,
        target_overlap: meta.target_overlap,
        realized_overlap: meta.realized_overlap,
    })
}

fn write_visual_bin(scene: &Scene, path: &Path) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VISUAL_MAGIC)?;
    w.write_all(&VISUAL_VERSION.to_le_bytes())?;
    let n = scene.n_speakers() as u32;
    let t_v = scene.num_video_frames() as u32;
    let p = (scene.patch_h * scene.patch_w) as u32;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&t_v.to_le_bytes())?;
    w.write_all(&p.to_le_bytes())?;
    for tensor in &scene.visual {
        let bytes: Vec<u8> = tensor
            .data()
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
    }
    for mask in &scene.miss_mask {
        let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

#[allow(clippy::type_complexity)]
fn read_visual_bin(
    path: &Path,
    n: usize,
    t_v: usize,
    p: usize,
) -> Result<(Vec<Tensor>, Vec<Vec<bool>>), SynthError> {
    let bad = |message: String| SynthError::BadSceneFile {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 {
        return Err(bad("file shorter than the header".into()));
    }
    if &bytes[0..8] != VISUAL_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |off: usize| {
        u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
    };
    if u32_at(8) != VISUAL_VERSION {
        return Err(bad(format!("unsupported version {}", u32_at(8))));
    }
    let (fn_, ft, fp) = (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
    if bytes.len() < 24 {
        return Err(bad("file shorter than the header".into()));
    }
    if (fn_, ft, fp) != (n, t_v, p) {
        return Err(bad(format!(
            "header says {fn_} x {ft} x {fp}, meta says {n} x {t_v} x {p}"
        )));
    }
    let expect = 24 + n * t_v * p + n * t_v;
    if bytes.len() != expect {
        return Err(bad(format!(
            "file is {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let mut off = 24;
    let mut visual = Vec::with_capacity(n);
    for _ in 0..n {
        let data: Vec<f64> = bytes[off..off + t_v * p]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        visual.push(Tensor::from_vec(&[t_v, p], data).expect("sizes checked above"));
        off += t_v * p;
    }
    let mut miss_mask = Vec::with_capacity(n);
    for _ in 0..n {
        let mask: Result<Vec<bool>, SynthError> = bytes[off..off + t_v]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(bad(format!("mask byte {other} is neither 0 nor 1"))),
            })
            .collect();
        miss_mask.push(mask?);
        off += t_v;
    }
    Ok((visual, miss_mask))
}

fn write_meta(scene: &Scene, path: &Path) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "uri = {}", scene.uri)?;
    writeln!(w, "speakers = {}", scene.speaker_names.join(","))?;
    writeln!(w, "num_frames = {}", scene.num_frames())?;
    writeln!(w, "num_video_frames = {}", scene.num_video_frames())?;
    writeln!(w, "patch_h = {}", scene.patch_h)?;
    writeln!(w, "patch_w = {}", scene.patch_w)?;
    writeln!(w, "target_overlap = {}", scene.target_overlap)?;
    writeln!(w, "realized_overlap = {}", scene.realized_overlap)?;
    for (i, name) in scene.speaker_names.iter().enumerate() {
        let row: Vec<String> = scene
            .speaker_prototypes
            .row(i)
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        writeln!(w, "proto_{name} = {}", row.join(","))?;
    }
    Ok(())
}

struct Meta {
    uri: String,
    speakers: Vec<String>,
    num_frames: usize,
    num_video_frames: usize,
    patch_h: usize,
    patch_w: usize,
    target_overlap: f64,
    realized_overlap: f64,
    prototypes: Vec<Vec<f64>>,
}

fn read_meta(path: &Path) -> Result<Meta, SynthError> {
    let text = std::fs::read_to_string(path)?;
    let mut values: BTreeMap<String, String> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let Some((key, value)) = raw.split_once('=') else {
            return Err(SynthError::BadMeta {
                line,
                message: format!("expected `key = value`, got {raw:?}"),
            });
        };
        let key = key.trim().to_string();
        if values
            .insert(key.clone(), value.trim().to_string())
            .is_some()
        {
            return Err(SynthError::BadMeta {
                line,
                message: format!("duplicate key {key:?}"),
            });
        }
    }

    let mut take = |key: &str| -> Result<String, SynthError> {
        values.remove(key).ok_or_else(|| SynthError::BadMeta {
            line: 0,
            message: format!("missing key {key:?}"),
        })
    };
    let uri = take("uri")?;
    let speakers: Vec<String> = take("speakers")?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let parse_usize = |key: &str, v: String| -> Result<usize, SynthError> {
        v.parse().map_err(|_| SynthError::BadMeta {
            line: 0,
            message: format!("key {key:?} is not an integer: {v:?}"),
        })
    };
    let parse_f64 = |key: &str, v: String| -> Result<f64, SynthError> {
        v.parse().map_err(|_| SynthError::BadMeta {
            line: 0,
            message: format!("key {key:?} is not a number: {v:?}"),
        })
    };
    let num_frames = parse_usize("num_frames", take("num_frames")?)?;
    let num_video_frames = parse_usize("num_video_frames", take("num_video_frames")?)?;
    let patch_h = parse_usize("patch_h", take("patch_h")?)?;
    let patch_w = parse_usize("patch_w", take("patch_w")?)?;
    let target_overlap = parse_f64("target_overlap", take("target_overlap")?)?;
    let realized_overlap = parse_f64("realized_overlap", take("realized_overlap")?)?;

    let mut prototypes = Vec::with_capacity(speakers.len());
    for name in &speakers {
        let key = format!("proto_{name}");
        let raw = take(&key)?;
        let row: Result<Vec<f64>, SynthError> = raw
            .split(',')
            .map(|v| parse_f64(&key, v.trim().to_string()))
            .collect();
        let row = row?;
        if row.len() != crate::frontend::fbank::NUM_FILTERS {
            return Err(SynthError::BadMeta {
                line: 0,
                message: format!(
                    "key {key:?} has {} values, expected {}",
                    row.len(),
                    crate::frontend::fbank::NUM_FILTERS
                ),
            });
        }
        prototypes.push(row);
    }

    if let Some((key, _)) = values.into_iter().next() {
        return Err(SynthError::BadMeta {
            line: 0,
            message: format!("unknown key {key:?}"),
        });
    }

    Ok(Meta {
        uri,
        speakers,
        num_frames,
        num_video_frames,
        patch_h,
        patch_w,
        target_overlap,
        realized_overlap,
        prototypes,
    })
}
