//! Minimal RIFF/WAVE reader for 16-bit PCM mono recordings at 16 kHz.
//!
//! Only the subset of the container needed here is supported: a `RIFF` header
//! with a `WAVE` form type, one `fmt ` chunk describing PCM16 audio, and one
//! `data` chunk. Unknown chunks (`LIST`, `fact`, cue points) are skipped.
//! Anything outside that envelope is rejected with a typed error rather than
//! decoded on a best-effort basis.

use super::FrontendError;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

/// Sample rate every waveform must arrive at, in Hz.
pub const SAMPLE_RATE: u32 = 16_000;

/// PCM16 full-scale divisor: sample `s` becomes `s / 32768`, so values live in
/// `[-1, 32767/32768]`.
const PCM_SCALE: f64 = 32_768.0;

/// A validated mono waveform at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Samples in `[-1, 1]`.
    pub samples: Vec<f64>,
    /// Always [`SAMPLE_RATE`] once validated.
    pub rate: u32,
}

impl Waveform {
    /// Wraps raw samples, enforcing the fixed sample rate.
    pub fn new(samples: Vec<f64>, rate: u32) -> Result<Self, FrontendError> {
        if rate != SAMPLE_RATE {
            return Err(FrontendError::BadRate {
                expect: SAMPLE_RATE,
                got: rate,
            });
        }
        Ok(Self { samples, rate })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// True when the waveform holds no samples.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a RIFF/WAVE file containing mono PCM16 at 16 kHz.
///
/// Stereo files, non-PCM encodings, other bit depths, and other sample rates
/// are rejected; re-encode upstream instead of resampling here.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, FrontendError> {
    let file = File::open(path.as_ref())?;
    parse_wav(BufReader::new(file))
}

/// Parses WAV bytes from any reader. Split out from [`load_wav`] so tests can
/// feed byte buffers directly.
pub fn parse_wav(mut r: impl Read) -> Result<Waveform, FrontendError> {
    let mut riff = [0u8; 12];
    r.read_exact(&mut riff)
        .map_err(|_| FrontendError::BadHeader("file shorter than a RIFF header".into()))?;
    if &riff[0..4] != b"RIFF" {
        return Err(FrontendError::BadHeader("missing RIFF magic".into()));
    }
    if &riff[8..12] != b"WAVE" {
        return Err(FrontendError::BadHeader("missing WAVE form type".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    loop {
        let mut head = [0u8; 8];
        match r.read_exact(&mut head) {
            Ok(()) => {}
            Err(_) => {
                return Err(FrontendError::BadHeader(
                    "reached end of file before a data chunk".into(),
                ))
            }
        }
        let id = [head[0], head[1], head[2], head[3]];
        let size = u32::from_le_bytes([head[4], head[5], head[6], head[7]]) as usize;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(FrontendError::BadHeader(format!(
                        "fmt chunk is {size} bytes, expected at least 16"
                    )));
                }
                let mut body = vec![0u8; size];
                r.read_exact(&mut body)
                    .map_err(|_| FrontendError::BadHeader("truncated fmt chunk".into()))?;
                skip_padding(&mut r, size)?;
                fmt = Some(FmtChunk::parse(&body)?);
            }
            b"data" => {
                let fmt = fmt.ok_or_else(|| {
                    FrontendError::BadHeader("data chunk appears before fmt chunk".into())
                })?;
                let mut body = vec![0u8; size];
                r.read_exact(&mut body)
                    .map_err(|_| FrontendError::BadHeader("truncated data chunk".into()))?;
                if size % 2 != 0 {
                    return Err(FrontendError::BadHeader(
                        "data chunk has an odd byte count for PCM16".into(),
                    ));
                }
                let samples = body
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / PCM_SCALE)
                    .collect();
                return Waveform::new(samples, fmt.sample_rate);
            }
            _ => {
                let mut sink = vec![0u8; size];
                r.read_exact(&mut sink)
                    .map_err(|_| FrontendError::BadHeader("truncated chunk body".into()))?;
                skip_padding(&mut r, size)?;
            }
        }
    }
}

/// RIFF chunks are word-aligned: an odd-sized body is followed by one pad byte.
fn skip_padding(r: &mut impl Read, size: usize) -> Result<(), FrontendError> {
    if size % 2 == 1 {
        let mut pad = [0u8; 1];
        r.read_exact(&mut pad)
            .map_err(|_| FrontendError::BadHeader("missing chunk pad byte".into()))?;
    }
    Ok(())
}

struct FmtChunk {
    sample_rate: u32,
}

impl FmtChunk {
    fn parse(body: &[u8]) -> Result<Self, FrontendError> {
        let format = u16::from_le_bytes([body[0], body[1]]);
        let channels = u16::from_le_bytes([body[2], body[3]]);
        let sample_rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
        let bits = u16::from_le_bytes([body[14], body[15]]);
        if format != 1 || bits != 16 {
            return Err(FrontendError::UnsupportedEncoding { format, bits });
        }
        if channels != 1 {
            return Err(FrontendError::NotMono { channels });
        }
        if sample_rate != SAMPLE_RATE {
            return Err(FrontendError::BadRate {
                expect: SAMPLE_RATE,
                got: sample_rate,
            });
        }
        Ok(Self { sample_rate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Assembles a complete WAV file in memory.
    fn wav_bytes(samples: &[i16], channels: u16, rate: u32, format: u16, bits: u16) -> Vec<u8> {
        let mut data = Vec::new();
        for s in samples {
            data.extend_from_slice(&s.to_le_bytes());
        }
        let mut out = Vec::new();
        let body_len = 4 + 8 + 16 + 8 + data.len();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        let byte_rate = rate * channels as u32 * (bits as u32 / 8);
        out.extend_from_slice(&byte_rate.to_le_bytes());
        let block_align = channels * (bits / 8);
        out.extend_from_slice(&block_align.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(&data);
        out
    }

    #[test]
    fn one_second_of_silence_loads_as_zeros() {
        let bytes = wav_bytes(&vec![0i16; 16000], 1, 16000, 1, 16);
        let w = parse_wav(&bytes[..]).unwrap();
        assert_eq!(w.len(), 16000);
        assert_eq!(w.rate, 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_wave_normalizes_to_pcm_bounds() {
        let samples: Vec<i16> = (0..64)
            .map(|i| if i % 2 == 0 { i16::MAX } else { i16::MIN })
            .collect();
        let bytes = wav_bytes(&samples, 1, 16000, 1, 16);
        let w = parse_wav(&bytes[..]).unwrap();
        assert_eq!(w.samples[0], 32767.0 / 32768.0);
        assert_eq!(w.samples[1], -1.0);
    }

    #[test]
    fn wrong_sample_rate_is_a_rate_error() {
        let bytes = wav_bytes(&[0i16; 8], 1, 44100, 1, 16);
        let err = parse_wav(&bytes[..]).unwrap_err();
        assert!(matches!(
            err,
            FrontendError::BadRate {
                expect: 16000,
                got: 44100
            }
        ));
    }

    #[test]
    fn stereo_is_rejected() {
        let bytes = wav_bytes(&[0i16; 8], 2, 16000, 1, 16);
        let err = parse_wav(&bytes[..]).unwrap_err();
        assert!(matches!(err, FrontendError::NotMono { channels: 2 }));
    }

    #[test]
    fn non_pcm_and_wrong_depth_are_encoding_errors() {
        let float_fmt = wav_bytes(&[0i16; 8], 1, 16000, 3, 16);
        assert!(matches!(
            parse_wav(&float_fmt[..]).unwrap_err(),
            FrontendError::UnsupportedEncoding { format: 3, bits: 16 }
        ));
        let eight_bit = wav_bytes(&[0i16; 8], 1, 16000, 1, 8);
        assert!(matches!(
            parse_wav(&eight_bit[..]).unwrap_err(),
            FrontendError::UnsupportedEncoding { format: 1, bits: 8 }
        ));
    }

    #[test]
    fn unknown_chunks_before_data_are_skipped() {
        let clean = wav_bytes(&[100i16, -100, 200], 1, 16000, 1, 16);
        let data_at = clean.len() - (8 + 6);
        let mut with_list = clean[..data_at].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&5u32.to_le_bytes());
        with_list.extend_from_slice(b"INFOx");
        with_list.push(0);
        with_list.extend_from_slice(&clean[data_at..]);
        let w = parse_wav(&with_list[..]).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.samples[2], 200.0 / 32768.0);
    }

    #[test]
    fn garbage_is_a_header_error() {
        assert!(matches!(
            parse_wav(&b"OggS\x00\x00\x00\x00\x00\x00\x00\x00"[..]).unwrap_err(),
            FrontendError::BadHeader(_)
        ));
        assert!(matches!(
            parse_wav(&b"RI"[..]).unwrap_err(),
            FrontendError::BadHeader(_)
        ));
    }

    #[test]
    fn missing_data_chunk_is_reported() {
        let clean = wav_bytes(&[0i16; 4], 1, 16000, 1, 16);
        let truncated = &clean[..clean.len() - (8 + 8)];
        assert!(matches!(
            parse_wav(truncated).unwrap_err(),
            FrontendError::BadHeader(_)
        ));
    }

    #[test]
    fn load_wav_reads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        std::fs::write(&path, wav_bytes(&[1000i16; 32], 1, 16000, 1, 16)).unwrap();
        let w = load_wav(&path).unwrap();
        assert_eq!(w.len(), 32);
        assert!((w.samples[0] - 1000.0 / 32768.0).abs() < 1e-15);
    }
}
