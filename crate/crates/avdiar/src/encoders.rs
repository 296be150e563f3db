//! Audio and visual feature encoders and per-speaker embeddings.
//!
//! Four latent streams feed the fusion stack:
//!
//! * `E_V`: per-speaker visual embeddings computed from lip patches.
//! * `E_A`: a single audio embedding stream shared by all speakers.
//! * `I`: one fixed-dimension vector per enrolled speaker.
//! * `E_IA`: the audio stream specialized to each speaker by concatenating
//!   that speaker's vector onto every frame.
//!
//! Every encoder is a shallow per-frame MLP with bounded temporal context, so
//! parameter counts are independent of speaker count and scene length and a
//! full forward pass stays differentiable on the tape. Each operation comes
//! in two forms: a `*_nodes` variant that builds onto a caller-owned
//! [`Graph`] for training, and a plain variant that runs a throwaway graph
//! and returns concrete tensors.

use crate::frontend::fbank::{AudioFeatures, NUM_FILTERS};
use crate::numerics::rng::{normal_init, seeded_rng, split_seed};
use crate::numerics::NumericsError;
use crate::{Graph, NodeId, ParamSet, Tensor};
use thiserror::Error;

/// Hidden width of the visual per-frame MLP.
pub const HIDDEN_VISUAL: usize = 128;
/// Temporal context radius, in frames, of both encoders (audio context
/// stacking and visual window averaging).
pub const CONTEXT_RADIUS: usize = 2;
/// Minimum attributed frames needed to enroll a speaker.
pub const MIN_ENROLL_FRAMES: usize = 10;
/// Video-to-audio frame rate ratio; each video frame covers this many
/// audio frames.
pub const VIDEO_UPSAMPLING: usize = 4;

/// Errors from encoder configuration, shapes, or enrollment.
#[derive(Debug, Error)]
pub enum EncoderError {
    /// Invalid or inconsistent model configuration.
    #[error("configuration: {0}")]
    BadConfig(String),
    /// Audio input shorter than the context window.
    #[error("audio too short: {got} frames, need at least {need}")]
    TooShort { got: usize, need: usize },
    /// A speaker lacks the attributed speech needed for enrollment.
    #[error("speaker {speaker}: {got} attributed frames, need at least {need}")]
    Enrollment {
        speaker: String,
        got: usize,
        need: usize,
    },
    /// Underlying tensor or tape failure.
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Dimensions and depths of the full model.
///
/// The default is the desk-scale configuration every test and bundled run
/// uses; [`ModelConfig::full_scale`] records the reference dimensions this
/// build shrinks from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Visual embedding dimension.
    pub d_v: usize,
    /// Audio embedding dimension.
    pub d_a: usize,
    /// Speaker-specialized audio embedding dimension; must equal `d_v` so
    /// the two streams live in one space for the sync distance.
    pub d_ia: usize,
    /// Speaker vector dimension.
    pub d_i: usize,
    /// Attention heads in both fusion and exchange blocks.
    pub heads: usize,
    /// Quality-aware fusion blocks.
    pub qa_layers: usize,
    /// Cross-speaker exchange blocks.
    pub xs_layers: usize,
    /// Feed-forward width multiplier inside attention blocks.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 64,
            d_a: 64,
            d_ia: 64,
            d_i: 64,
            heads: 4,
            qa_layers: 3,
            xs_layers: 4,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    /// Configuration at the reference scale this desk-scale build shrinks
    /// from: 256-dim embedding streams with 100-dim speaker vectors.
    /// Training it is outside the bundled compute budget; it exists so the
    /// larger dimensions stay recorded and constructible.
    pub fn full_scale() -> Self {
        Self {
            d_v: 256,
            d_a: 256,
            d_ia: 256,
            d_i: 100,
            ..Self::default()
        }
    }

    /// Checks internal consistency.
    pub fn validate(&self) -> Result<(), EncoderError> {
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_a", self.d_a),
            ("d_ia", self.d_ia),
            ("d_i", self.d_i),
            ("heads", self.heads),
            ("qa_layers", self.qa_layers),
            ("xs_layers", self.xs_layers),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return Err(EncoderError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.d_ia != self.d_v {
            return Err(EncoderError::BadConfig(format!(
                "d_ia ({}) must equal d_v ({}): the sync distance compares the two streams",
                self.d_ia, self.d_v
            )));
        }
        if self.d_v % self.heads != 0 {
            return Err(EncoderError::BadConfig(format!(
                "heads ({}) must divide d_v ({})",
                self.heads, self.d_v
            )));
        }
        Ok(())
    }
}

/// Which latent stream a set of per-speaker embeddings represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// `E_V`: visual embeddings.
    Visual,
    /// `E_A` copied to every speaker.
    AudioBroadcast,
    /// `E_IA`: speaker-specialized audio embeddings.
    SpeakerAudio,
    /// `E_AV`: fused audio-visual embeddings.
    Fused,
}

/// Per-speaker embedding sequences of one scene: `N` tensors of shape
/// `[T x D]`, all finite, tagged with the stream they represent.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStream {
    modality: Modality,
    streams: Vec<Tensor>,
}

impl EmbeddingStream {
    /// Validates and wraps per-speaker embedding tensors.
    pub fn new(modality: Modality, streams: Vec<Tensor>) -> Result<Self, EncoderError> {
        let first = streams
            .first()
            .ok_or_else(|| EncoderError::BadConfig("empty embedding stream".into()))?;
        if !first.is_rank2() {
            return Err(EncoderError::BadConfig(format!(
                "embedding streams must be rank 2, got shape {:?}",
                first.shape()
            )));
        }
        for (n, s) in streams.iter().enumerate() {
            if s.shape() != first.shape() {
                return Err(EncoderError::BadConfig(format!(
                    "speaker {n} stream shape {:?} differs from {:?}",
                    s.shape(),
                    first.shape()
                )));
            }
            if !s.all_finite() {
                return Err(EncoderError::BadConfig(format!(
                    "speaker {n} stream contains non-finite values"
                )));
            }
        }
        Ok(Self { modality, streams })
    }

    /// Copies one shared stream to every speaker.
    pub fn broadcast(modality: Modality, shared: &Tensor, n_speakers: usize) -> Result<Self, EncoderError> {
        Self::new(modality, vec![shared.clone(); n_speakers])
    }

    /// Stream tag.
    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Number of speakers.
    pub fn n_speakers(&self) -> usize {
        self.streams.len()
    }

    /// Frames per speaker.
    pub fn num_frames(&self) -> usize {
        self.streams[0].rows()
    }

    /// Embedding dimension.
    pub fn dim(&self) -> usize {
        self.streams[0].cols()
    }

    /// Embeddings of speaker `n` as `[T x D]`.
    pub fn speaker(&self, n: usize) -> &Tensor {
        &self.streams[n]
    }

    /// All per-speaker tensors in speaker order.
    pub fn speakers(&self) -> &[Tensor] {
        &self.streams
    }
}

/// One enrolled vector per speaker: `[N x D_I]` with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbeddingSet {
    embeddings: Tensor,
}

impl SpeakerEmbeddingSet {
    /// Validates row norms and wraps the matrix.
    pub fn new(embeddings: Tensor) -> Result<Self, EncoderError> {
        if !embeddings.is_rank2() || embeddings.rows() == 0 {
            return Err(EncoderError::BadConfig(format!(
                "speaker embeddings must be a nonempty rank-2 matrix, got {:?}",
                embeddings.shape()
            )));
        }
        for n in 0..embeddings.rows() {
            let norm = embeddings.row(n).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm.is_finite() && (norm - 1.0).abs() < 1e-9) {
                return Err(EncoderError::BadConfig(format!(
                    "speaker {n} embedding norm {norm} is not 1"
                )));
            }
        }
        Ok(Self { embeddings })
    }

    /// Number of speakers.
    pub fn n_speakers(&self) -> usize {
        self.embeddings.rows()
    }

    /// Vector dimension.
    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Vector of speaker `n`.
    pub fn vector(&self, n: usize) -> &[f64] {
        self.embeddings.row(n)
    }

    /// The full `[N x D_I]` matrix.
    pub fn matrix(&self) -> &Tensor {
        &self.embeddings
    }

    /// Cosine similarity between two enrolled speakers.
    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        self.vector(a)
            .iter()
            .zip(self.vector(b))
            .map(|(x, y)| x * y)
            .sum()
    }
}

/// Frames of one speaker's non-overlapped speech, used for enrollment.
#[derive(Debug, Clone)]
pub struct AttributedFrames {
    /// Speaker name, used in error messages and output labels.
    pub speaker: String,
    /// Audio frame indices attributed to this speaker alone.
    pub frames: Vec<usize>,
}

/// Registers one affine layer's weight and bias, drawn deterministically
/// from the seed and the parameter name.
pub(crate) fn add_affine(
    params: &mut ParamSet,
    seed: u64,
    w_name: &str,
    b_name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let mut rng = seeded_rng(split_seed(seed, w_name, 0));
    params.insert(w_name, normal_init(&[fan_in, fan_out], scale, &mut rng));
    params.insert(b_name, Tensor::zeros(&[1, fan_out]));
}

/// Registers one layer-norm site's gain (ones) and shift (zeros).
pub(crate) fn add_layer_norm(params: &mut ParamSet, gain_name: &str, shift_name: &str, dim: usize) {
    params.insert(gain_name, Tensor::full(&[1, dim], 1.0));
    params.insert(shift_name, Tensor::zeros(&[1, dim]));
}

/// Registers all encoder parameters under the `vis.`, `aud.`, `spk.`,
/// `ia.`, and `vvad.` prefixes. `patch_dim` is the flattened lip patch size
/// the visual encoder will consume.
pub fn init_encoder_params(
    params: &mut ParamSet,
    config: &ModelConfig,
    patch_dim: usize,
    seed: u64,
) -> Result<(), EncoderError> {
    config.validate()?;
    if patch_dim == 0 {
        return Err(EncoderError::BadConfig("patch_dim must be positive".into()));
    }
    add_affine(params, seed, "vis.w1", "vis.b1", patch_dim, HIDDEN_VISUAL);
    add_affine(params, seed, "vis.w2", "vis.b2", HIDDEN_VISUAL, config.d_v);
    add_layer_norm(params, "vis.ln_g", "vis.ln_b", config.d_v);
    add_affine(params, seed, "vis.tw", "vis.tb", config.d_v, config.d_v);
    let stacked = (2 * CONTEXT_RADIUS + 1) * NUM_FILTERS;
    add_affine(params, seed, "aud.w", "aud.b", stacked, config.d_a);
    add_layer_norm(params, "aud.ln_g", "aud.ln_b", config.d_a);
    add_affine(params, seed, "spk.w", "spk.b", config.d_a, config.d_i);
    add_affine(
        params,
        seed,
        "ia.w",
        "ia.b",
        config.d_a + config.d_i,
        config.d_ia,
    );
    add_layer_norm(params, "ia.ln_g", "ia.ln_b", config.d_ia);
    add_affine(params, seed, "vvad.w", "vvad.b", config.d_v, 1);
    Ok(())
}

/// Builds the visual encoder for each speaker onto `graph`, returning one
/// `[4*T_v x D_V]` node per speaker.
///
/// Each patch row runs through a two-layer MLP with relu and layer norm,
/// then a window average over +-2 video frames with an affine on top, and is
/// finally repeated to the audio frame rate. Rows flagged in `miss_mask`
/// enter the network as the all-zero patch.
pub fn visual_encode_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    patches: &[Tensor],
    miss_mask: &[Vec<bool>],
) -> Result<Vec<NodeId>, EncoderError> {
    if patches.len() != miss_mask.len() {
        return Err(EncoderError::BadConfig(format!(
            "{} patch streams but {} mask rows",
            patches.len(),
            miss_mask.len()
        )));
    }
    let w1 = graph.param(params, "vis.w1")?;
    let b1 = graph.param(params, "vis.b1")?;
    let w2 = graph.param(params, "vis.w2")?;
    let b2 = graph.param(params, "vis.b2")?;
    let ln_g = graph.param(params, "vis.ln_g")?;
    let ln_b = graph.param(params, "vis.ln_b")?;
    let tw = graph.param(params, "vis.tw")?;
    let tb = graph.param(params, "vis.tb")?;

    let mut out = Vec::with_capacity(patches.len());
    for (patch, mask) in patches.iter().zip(miss_mask) {
        if patch.rows() != mask.len() {
            return Err(EncoderError::BadConfig(format!(
                "patch stream has {} rows but mask has {}",
                patch.rows(),
                mask.len()
            )));
        }
        let mut zeroed = patch.clone();
        for (tau, missing) in mask.iter().enumerate() {
            if *missing {
                for x in 0..zeroed.cols() {
                    zeroed.set(tau, x, 0.0);
                }
            }
        }
        let x = graph.input(zeroed);
        let h = graph.affine(x, w1, b1)?;
        let h = graph.relu(h);
        let h = graph.affine(h, w2, b2)?;
        let h = graph.layer_norm(h, ln_g, ln_b)?;
        let m = graph.window_mean(h, CONTEXT_RADIUS)?;
        let m = graph.affine(m, tw, tb)?;
        out.push(graph.repeat_rows(m, VIDEO_UPSAMPLING)?);
    }
    Ok(out)
}

/// Runs the visual encoder outside any training loop.
pub fn visual_encode(
    params: &ParamSet,
    patches: &[Tensor],
    miss_mask: &[Vec<bool>],
) -> Result<EmbeddingStream, EncoderError> {
    let mut graph = Graph::new();
    let nodes = visual_encode_nodes(&mut graph, params, patches, miss_mask)?;
    EmbeddingStream::new(
        Modality::Visual,
        nodes.iter().map(|&id| graph.value(id).clone()).collect(),
    )
}

/// Builds the audio encoder onto `graph`: context stacking over +-2 frames,
/// one affine to `D_A`, relu, layer norm. Output keeps the input length
/// (edges use replication padding).
pub fn audio_encode_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    features: &AudioFeatures,
) -> Result<NodeId, EncoderError> {
    let t = features.num_frames();
    let need = 2 * CONTEXT_RADIUS + 1;
    if t < need {
        return Err(EncoderError::TooShort { got: t, need });
    }
    let w = graph.param(params, "aud.w")?;
    let b = graph.param(params, "aud.b")?;
    let ln_g = graph.param(params, "aud.ln_g")?;
    let ln_b = graph.param(params, "aud.ln_b")?;
    let x = graph.input(features.frames.clone());
    let h = graph.stack_context(x, CONTEXT_RADIUS)?;
    let h = graph.affine(h, w, b)?;
    let h = graph.relu(h);
    Ok(graph.layer_norm(h, ln_g, ln_b)?)
}

/// Runs the audio encoder outside any training loop, returning `[T x D_A]`.
pub fn audio_encode(params: &ParamSet, features: &AudioFeatures) -> Result<Tensor, EncoderError> {
    let mut graph = Graph::new();
    let id = audio_encode_nodes(&mut graph, params, features)?;
    Ok(graph.value(id).clone())
}

/// Builds one enrolled speaker vector per entry of `attributed` from the
/// audio embedding node `e_a`, returning `[1 x D_I]` unit-norm nodes.
///
/// Each vector is the mean of `e_a` over the speaker's attributed frames,
/// projected to `D_I` and normalized. Frame order and duplicates do not
/// matter; indices are sorted and deduplicated first.
pub fn speaker_embed_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    e_a: NodeId,
    attributed: &[AttributedFrames],
) -> Result<Vec<NodeId>, EncoderError> {
    let t = graph.value(e_a).rows();
    let w = graph.param(params, "spk.w")?;
    let b = graph.param(params, "spk.b")?;
    let mut out = Vec::with_capacity(attributed.len());
    for entry in attributed {
        let mut frames = entry.frames.clone();
        frames.sort_unstable();
        frames.dedup();
        if frames.len() < MIN_ENROLL_FRAMES {
            return Err(EncoderError::Enrollment {
                speaker: entry.speaker.clone(),
                got: frames.len(),
                need: MIN_ENROLL_FRAMES,
            });
        }
        if let Some(&last) = frames.last() {
            if last >= t {
                return Err(EncoderError::BadConfig(format!(
                    "speaker {}: attributed frame {last} outside the {t}-frame scene",
                    entry.speaker
                )));
            }
        }
        let rows = graph.select_rows(e_a, &frames)?;
        let mean = graph.mean_axis(rows, 0)?;
        let vec = graph.affine(mean, w, b)?;
        out.push(graph.l2_normalize_rows(vec)?);
    }
    Ok(out)
}

/// Enrolls speakers outside any training loop.
pub fn speaker_embed(
    params: &ParamSet,
    e_a: &Tensor,
    attributed: &[AttributedFrames],
) -> Result<SpeakerEmbeddingSet, EncoderError> {
    let mut graph = Graph::new();
    let e_a = graph.input(e_a.clone());
    let nodes = speaker_embed_nodes(&mut graph, params, e_a, attributed)?;
    let rows: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&id| graph.value(id).data().to_vec())
        .collect();
    SpeakerEmbeddingSet::new(Tensor::from_rows(&rows).map_err(NumericsError::from)?)
}

/// Builds the speaker-specialized audio stream for each speaker: every frame
/// of `e_a` concatenated with that speaker's vector, one affine to `D_IA`,
/// layer norm. Returns one `[T x D_IA]` node per speaker.
pub fn fuse_speaker_audio_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    e_a: NodeId,
    speaker_vectors: &[NodeId],
) -> Result<Vec<NodeId>, EncoderError> {
    let t = graph.value(e_a).rows();
    let d_a = graph.value(e_a).cols();
    let w = graph.param(params, "ia.w")?;
    let b = graph.param(params, "ia.b")?;
    let ln_g = graph.param(params, "ia.ln_g")?;
    let ln_b = graph.param(params, "ia.ln_b")?;
    let expect = graph.value(w).rows();
    let mut out = Vec::with_capacity(speaker_vectors.len());
    for &vec in speaker_vectors {
        let d_i = graph.value(vec).cols();
        if d_a + d_i != expect {
            return Err(EncoderError::BadConfig(format!(
                "concatenated width {} does not match the fusion affine input {expect}",
                d_a + d_i
            )));
        }
        let tiled = graph.repeat_rows(vec, t)?;
        let joint = graph.concat_cols(&[e_a, tiled])?;
        let h = graph.affine(joint, w, b)?;
        out.push(graph.layer_norm(h, ln_g, ln_b)?);
    }
    Ok(out)
}

/// Runs speaker-audio fusion outside any training loop.
pub fn fuse_speaker_audio(
    params: &ParamSet,
    e_a: &Tensor,
    speakers: &SpeakerEmbeddingSet,
) -> Result<EmbeddingStream, EncoderError> {
    let mut graph = Graph::new();
    let e_a = graph.input(e_a.clone());
    let vectors: Vec<NodeId> = (0..speakers.n_speakers())
        .map(|n| {
            graph.input(
                Tensor::from_rows(&[speakers.vector(n).to_vec()]).expect("row vector is rank 2"),
            )
        })
        .collect();
    let nodes = fuse_speaker_audio_nodes(&mut graph, params, e_a, &vectors)?;
    EmbeddingStream::new(
        Modality::SpeakerAudio,
        nodes.iter().map(|&id| graph.value(id).clone()).collect(),
    )
}

/// Builds the visual-only speech probability head: one shared affine from
/// `D_V` to a single logit, then sigmoid. Returns one `[T x 1]` node per
/// speaker.
pub fn vvad_head_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    e_v: &[NodeId],
) -> Result<Vec<NodeId>, EncoderError> {
    let w = graph.param(params, "vvad.w")?;
    let b = graph.param(params, "vvad.b")?;
    let mut out = Vec::with_capacity(e_v.len());
    for &stream in e_v {
        let logits = graph.affine(stream, w, b)?;
        out.push(graph.sigmoid(logits));
    }
    Ok(out)
}

/// Runs the visual speech head outside any training loop, returning
/// `[N x T]` probabilities in `(0, 1)`.
pub fn vvad_head(params: &ParamSet, e_v: &EmbeddingStream) -> Result<Tensor, EncoderError> {
    let mut graph = Graph::new();
    let nodes: Vec<NodeId> = e_v.speakers().iter().map(|s| graph.input(s.clone())).collect();
    let probs = vvad_head_nodes(&mut graph, params, &nodes)?;
    let rows: Vec<Vec<f64>> = probs
        .iter()
        .map(|&id| graph.value(id).data().to_vec())
        .collect();
    Ok(Tensor::from_rows(&rows).map_err(NumericsError::from)?)
}
