//! Cross-speaker information exchange and the shared activity head.
//!
//! After fusion each speaker carries an independent embedding sequence.
//! The exchange stack lets speakers see each other: every layer queries a
//! speaker's own stream against the average of all other speakers'
//! streams, through multi-head attention with one parameter set shared by
//! every speaker. A shared affine-plus-sigmoid head then maps each frame
//! to a speech probability. Because the combiner averages rather than
//! concatenates, the same parameters serve any speaker count, and
//! [`forward`] composes the whole model from raw per-scene inputs to
//! posteriors.

use crate::encoders::{
    add_affine, audio_encode_nodes, fuse_speaker_audio_nodes, visual_encode_nodes,
    vvad_head_nodes, EmbeddingStream, EncoderError, Modality, SpeakerEmbeddingSet,
};
use crate::frontend::{AudioFeatures, MAX_LENGTH_DIVERGENCE};
use crate::fusion::{
    fuse_nodes, multi_head_attention, residual_block, resolve_stream, FusionError, FusionSpec,
    StreamParams,
};
use crate::numerics::NumericsError;
use crate::{Graph, ModelConfig, NodeId, ParamSet, Tensor};
use thiserror::Error;

const HEAD_W: &str = "xs.head.w";
const HEAD_B: &str = "xs.head.b";

/// Errors from the exchange stack or the full-model forward pass.
#[derive(Debug, Error)]
pub enum ExchangeError {
    /// Invalid dimensions or layer setup.
    #[error("exchange configuration: {0}")]
    BadConfig(String),
    /// Inputs disagree in speaker count, length, or width.
    #[error("stream mismatch: {0}")]
    StreamMismatch(String),
    /// Audio and upsampled visual streams are too far apart to trim.
    #[error(
        "audio ({audio} frames) and upsampled visual ({visual} frames) diverge \
         by more than {MAX_LENGTH_DIVERGENCE} frames"
    )]
    LengthDivergence { audio: usize, visual: usize },
    /// Failure in the encoder stage.
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    /// Failure in the fusion stage.
    #[error(transparent)]
    Fusion(#[from] FusionError),
    /// Underlying tensor or tape failure.
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Parameter names of the exchange stack: one shared attention block per
/// layer plus the activity head. Parameter count depends only on the
/// configured dimensions, never on speaker count or scene length.
#[derive(Debug, Clone)]
pub struct ExchangeParams {
    /// Per-layer attention block names, shared across speakers.
    pub layers: Vec<StreamParams>,
    /// Activity head weight name.
    pub head_w: String,
    /// Activity head bias name.
    pub head_b: String,
}

impl ExchangeParams {
    /// Name table for a stack of `xs_layers` layers.
    pub fn named(xs_layers: usize) -> Self {
        ExchangeParams {
            layers: (0..xs_layers)
                .map(|l| StreamParams::named(&xs_block_prefix(l)))
                .collect(),
            head_w: HEAD_W.to_string(),
            head_b: HEAD_B.to_string(),
        }
    }
}

fn xs_block_prefix(layer: usize) -> String {
    format!("xs.l{layer}")
}

/// Registers the exchange stack and activity head under the `xs.` prefix.
pub fn init_exchange_params(
    params: &mut ParamSet,
    config: &ModelConfig,
    seed: u64,
) -> Result<ExchangeParams, ExchangeError> {
    config.validate()?;
    let d = config.d_ia;
    let layers = (0..config.xs_layers)
        .map(|l| StreamParams::register(params, &xs_block_prefix(l), d, config.ffn_mult, seed))
        .collect();
    add_affine(params, seed, HEAD_W, HEAD_B, d, 1);
    Ok(ExchangeParams {
        layers,
        head_w: HEAD_W.to_string(),
        head_b: HEAD_B.to_string(),
    })
}

/// Per-speaker per-frame speech probabilities: `[N x T]` strictly inside
/// `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityPosterior {
    probs: Tensor,
}

impl ActivityPosterior {
    /// Wraps a probability matrix, checking every entry lies strictly in
    /// `(0, 1)`.
    pub fn new(probs: Tensor) -> Result<Self, ExchangeError> {
        if !probs.is_rank2() || probs.rows() == 0 || probs.cols() == 0 {
            return Err(ExchangeError::BadConfig(format!(
                "posteriors must be a nonempty rank-2 matrix, got shape {:?}",
                probs.shape()
            )));
        }
        for (i, &p) in probs.data().iter().enumerate() {
            if !p.is_finite() || p <= 0.0 || p >= 1.0 {
                return Err(ExchangeError::BadConfig(format!(
                    "posterior {p} at flat index {i} outside the open interval (0, 1)"
                )));
            }
        }
        Ok(ActivityPosterior { probs })
    }

    /// Probability matrix `[N x T]`.
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    /// Number of speakers.
    pub fn n_speakers(&self) -> usize {
        self.probs.rows()
    }

    /// Number of frames.
    pub fn num_frames(&self) -> usize {
        self.probs.cols()
    }

    /// Per-frame probabilities of speaker `n`.
    pub fn speaker(&self, n: usize) -> &[f64] {
        self.probs.row(n)
    }
}

/// Checks one per-speaker node list and returns the shared `(T, D)`.
fn check_speaker_nodes(graph: &Graph, e_av: &[NodeId]) -> Result<(usize, usize), ExchangeError> {
    let first = e_av.first().ok_or_else(|| {
        ExchangeError::StreamMismatch("need at least one speaker stream".into())
    })?;
    let v0 = graph.value(*first);
    if !v0.is_rank2() {
        return Err(ExchangeError::StreamMismatch(format!(
            "stream nodes must be rank 2, got shape {:?}",
            v0.shape()
        )));
    }
    let (t, d) = (v0.rows(), v0.cols());
    for &node in e_av {
        let v = graph.value(node);
        if !v.is_rank2() || v.rows() != t || v.cols() != d {
            return Err(ExchangeError::StreamMismatch(format!(
                "every stream node must be [{t} x {d}], got {:?}",
                v.shape()
            )));
        }
    }
    Ok((t, d))
}

fn check_fused_stream(e_av: &EmbeddingStream) -> Result<(), ExchangeError> {
    if e_av.modality() != Modality::Fused {
        return Err(ExchangeError::StreamMismatch(format!(
            "exchange expects a fused stream, got {:?}",
            e_av.modality()
        )));
    }
    Ok(())
}

/// Builds the combiner of speaker `n` on the graph: the average of every
/// other speaker's stream, or the speaker's own stream when it is alone.
pub fn combiner_nodes(
    graph: &mut Graph,
    e_av: &[NodeId],
    n: usize,
) -> Result<NodeId, ExchangeError> {
    check_speaker_nodes(graph, e_av)?;
    if n >= e_av.len() {
        return Err(ExchangeError::StreamMismatch(format!(
            "speaker index {n} out of range for {} speakers",
            e_av.len()
        )));
    }
    if e_av.len() == 1 {
        return Ok(e_av[0]);
    }
    let mut acc: Option<NodeId> = None;
    for (i, &node) in e_av.iter().enumerate() {
        if i == n {
            continue;
        }
        acc = Some(match acc {
            None => node,
            Some(sum) => graph.add(sum, node)?,
        });
    }
    let sum = acc.expect("two or more speakers leave at least one other");
    Ok(graph.affine_const(sum, 1.0 / (e_av.len() - 1) as f64, 0.0))
}

/// Average of the other speakers' streams as a concrete `[T x D]` tensor.
pub fn combiner(e_av: &EmbeddingStream, n: usize) -> Result<Tensor, ExchangeError> {
    check_fused_stream(e_av)?;
    let mut graph = Graph::new();
    let nodes: Vec<NodeId> = e_av.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let h = combiner_nodes(&mut graph, &nodes, n)?;
    Ok(graph.value(h).clone())
}

/// Updated streams and attention probabilities of one exchange layer;
/// `probs` holds each speaker's head matrices in head order.
pub struct ExchangeLayerNodes {
    pub e_av: Vec<NodeId>,
    pub probs: Vec<NodeId>,
}

/// One cross-speaker attention layer. Speaker `n` projects queries from
/// its own stream and keys and values from the averaged other speakers,
/// runs multi-head attention over all frames, and finishes with the
/// shared feed-forward half, residuals, and layer norms.
pub fn cross_speaker_layer_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    names: &StreamParams,
    heads: usize,
    e_av: &[NodeId],
) -> Result<ExchangeLayerNodes, ExchangeError> {
    let (_, d) = check_speaker_nodes(graph, e_av)?;
    if heads == 0 || d % heads != 0 {
        return Err(ExchangeError::BadConfig(format!(
            "stream width {d} must be a positive multiple of the head count {heads}"
        )));
    }
    let s = resolve_stream(graph, params, names)?;
    let mut out = ExchangeLayerNodes {
        e_av: Vec::with_capacity(e_av.len()),
        probs: Vec::new(),
    };
    for n in 0..e_av.len() {
        let h = combiner_nodes(graph, e_av, n)?;
        let q = graph.affine(e_av[n], s.wq, s.bq)?;
        let k = graph.affine(h, s.wk, s.bk)?;
        let v = graph.affine(h, s.wv, s.bv)?;
        let att = multi_head_attention(graph, q, k, v, heads, &mut out.probs)?;
        out.e_av.push(residual_block(graph, &s, e_av[n], att)?);
    }
    Ok(out)
}

/// Runs exchange layer `layer` once over a concrete fused stream.
pub fn cross_speaker_layer(
    params: &ParamSet,
    config: &ModelConfig,
    layer: usize,
    e_av: &EmbeddingStream,
) -> Result<EmbeddingStream, ExchangeError> {
    check_fused_stream(e_av)?;
    let mut graph = Graph::new();
    let nodes: Vec<NodeId> = e_av.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let names = StreamParams::named(&xs_block_prefix(layer));
    let out = cross_speaker_layer_nodes(&mut graph, params, &names, config.heads, &nodes)?;
    let streams = out
        .e_av
        .iter()
        .map(|&id| graph.value(id).clone())
        .collect();
    Ok(EmbeddingStream::new(Modality::Fused, streams)?)
}

/// Applies the whole exchange stack on the graph.
pub fn exchange_stack_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    config: &ModelConfig,
    e_av: &[NodeId],
) -> Result<Vec<NodeId>, ExchangeError> {
    let mut current = e_av.to_vec();
    for layer in 0..config.xs_layers {
        let names = StreamParams::named(&xs_block_prefix(layer));
        current = cross_speaker_layer_nodes(graph, params, &names, config.heads, &current)?.e_av;
    }
    Ok(current)
}

/// Shared activity head on the graph: affine to one logit per frame, then
/// sigmoid; one `[T x 1]` column per speaker.
pub fn output_head_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    e_av: &[NodeId],
) -> Result<Vec<NodeId>, ExchangeError> {
    check_speaker_nodes(graph, e_av)?;
    let w = graph.param(params, HEAD_W)?;
    let b = graph.param(params, HEAD_B)?;
    let mut out = Vec::with_capacity(e_av.len());
    for &node in e_av {
        let logits = graph.affine(node, w, b)?;
        out.push(graph.sigmoid(logits));
    }
    Ok(out)
}

/// Maps a concrete fused stream to per-speaker activity posteriors.
pub fn output_head(
    params: &ParamSet,
    e_av: &EmbeddingStream,
) -> Result<ActivityPosterior, ExchangeError> {
    check_fused_stream(e_av)?;
    let mut graph = Graph::new();
    let nodes: Vec<NodeId> = e_av.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let cols = output_head_nodes(&mut graph, params, &nodes)?;
    let rows: Vec<Vec<f64>> = cols
        .into_iter()
        .map(|id| graph.value(id).data().to_vec())
        .collect();
    ActivityPosterior::new(Tensor::from_rows(&rows)?)
}

/// Every stage output of one full forward pass, as graph nodes.
pub struct ForwardNodes {
    /// Visual embeddings per speaker, `[T x D_V]`, trimmed to the common
    /// length.
    pub e_v: Vec<NodeId>,
    /// Speaker-specialized audio embeddings per speaker, `[T x D_IA]`.
    pub e_ia: Vec<NodeId>,
    /// Fused embeddings per speaker, `[T x D_AV]`.
    pub fused: Vec<NodeId>,
    /// Sync-weight columns per speaker when the strategy computes them.
    pub sync: Option<Vec<NodeId>>,
    /// Fused embeddings after the exchange stack.
    pub exchanged: Vec<NodeId>,
    /// Activity posteriors per speaker, `[T x 1]`.
    pub posteriors: Vec<NodeId>,
    /// Visual voice-activity posteriors per speaker, `[T x 1]`.
    pub vvad: Vec<NodeId>,
}

/// Builds the complete model on the graph: encoders, fusion, exchange
/// stack, and both heads. Audio and upsampled visual lengths may disagree
/// by at most [`MAX_LENGTH_DIVERGENCE`] frames; both are trimmed to the
/// common length. `speaker_vectors` holds one `[1 x D_I]` unit-norm node
/// per speaker, matching `patches` in order and count.
pub fn forward_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    patches: &[Tensor],
    miss: &[Vec<bool>],
    audio: &AudioFeatures,
    speaker_vectors: &[NodeId],
) -> Result<ForwardNodes, ExchangeError> {
    if patches.is_empty() {
        return Err(ExchangeError::StreamMismatch(
            "need at least one speaker".into(),
        ));
    }
    if speaker_vectors.len() != patches.len() {
        return Err(ExchangeError::StreamMismatch(format!(
            "{} patch streams but {} speaker vectors",
            patches.len(),
            speaker_vectors.len()
        )));
    }
    let mut e_v = visual_encode_nodes(graph, params, patches, miss)?;
    let mut e_a = audio_encode_nodes(graph, params, audio)?;
    let t_visual = graph.value(e_v[0]).rows();
    let t_audio = graph.value(e_a).rows();
    if t_audio.abs_diff(t_visual) > MAX_LENGTH_DIVERGENCE {
        return Err(ExchangeError::LengthDivergence {
            audio: t_audio,
            visual: t_visual,
        });
    }
    let t = t_audio.min(t_visual);
    let keep: Vec<usize> = (0..t).collect();
    if t_audio > t {
        e_a = graph.select_rows(e_a, &keep)?;
    }
    if t_visual > t {
        e_v = e_v
            .into_iter()
            .map(|node| graph.select_rows(node, &keep))
            .collect::<Result<Vec<_>, _>>()?;
    }
    let e_ia = fuse_speaker_audio_nodes(graph, params, e_a, speaker_vectors)?;
    let fusion = fuse_nodes(graph, params, config, spec, &e_ia, &e_v)?;
    let exchanged = exchange_stack_nodes(graph, params, config, &fusion.fused)?;
    let posteriors = output_head_nodes(graph, params, &exchanged)?;
    let vvad = vvad_head_nodes(graph, params, &e_v)?;
    Ok(ForwardNodes {
        e_v,
        e_ia,
        fused: fusion.fused,
        sync: fusion.sync,
        exchanged,
        posteriors,
        vvad,
    })
}

/// Runs the complete model over one scene and returns the activity
/// posteriors.
pub fn forward(
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    patches: &[Tensor],
    miss: &[Vec<bool>],
    audio: &AudioFeatures,
    speakers: &SpeakerEmbeddingSet,
) -> Result<ActivityPosterior, ExchangeError> {
    if speakers.n_speakers() != patches.len() {
        return Err(ExchangeError::StreamMismatch(format!(
            "{} patch streams but {} enrolled speakers",
            patches.len(),
            speakers.n_speakers()
        )));
    }
    let mut graph = Graph::new();
    let vectors: Vec<NodeId> = (0..speakers.n_speakers())
        .map(|n| {
            graph.input(
                Tensor::from_vec(&[1, speakers.dim()], speakers.vector(n).to_vec()).unwrap(),
            )
        })
        .collect();
    let out = forward_nodes(
        &mut graph, params, config, spec, patches, miss, audio, &vectors,
    )?;
    let rows: Vec<Vec<f64>> = out
        .posteriors
        .iter()
        .map(|&id| graph.value(id).data().to_vec())
        .collect();
    ActivityPosterior::new(Tensor::from_rows(&rows)?)
}
