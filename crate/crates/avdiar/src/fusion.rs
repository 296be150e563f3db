//! Sync-confidence-weighted audio-visual fusion and three reference
//! baselines.
//!
//! The quality-aware path turns per-frame audio-visual agreement into a
//! weight `W = m / (m + L)`, where `L` is a window-averaged Euclidean
//! distance between the speaker-specialized audio stream and the visual
//! stream. `W` close to 1 means the two modalities agree, so attention
//! queries come from the opposite modality (full cross attention); `W`
//! close to 0 degrades each stream to self attention on its own modality.
//! Stacked attention blocks share one `W` computed from the block inputs,
//! and the final audio and visual streams are multiplied elementwise into
//! the fused per-speaker embedding.
//!
//! The baselines, selected through [`FusionStrategy`], fuse the same two
//! streams by per-frame concatenation, by sigmoid-gated acoustic subspaces,
//! or by plain two-way cross attention. All four strategies keep parameter
//! counts independent of speaker count and scene length, and all come in
//! `*_nodes` form for a caller-owned [`Graph`] plus a plain evaluation form.

use crate::encoders::{add_affine, add_layer_norm, EmbeddingStream, EncoderError, Modality};
use crate::numerics::NumericsError;
use crate::{Graph, ModelConfig, NodeId, ParamSet, Tensor};
use thiserror::Error;

/// Number of acoustic subspaces in the factorized baseline.
pub const FACTOR_SUBSPACES: usize = 4;
/// Default radius, in audio frames, of the sync-distance window.
pub const DEFAULT_SYNC_WINDOW: usize = 12;
/// Default scale constant `m` in the weight formula `m / (m + L)`.
pub const DEFAULT_SYNC_SCALE: f64 = 1.0;

/// Errors from fusion configuration or mismatched embedding streams.
#[derive(Debug, Error)]
pub enum FusionError {
    /// Invalid strategy, scale, or dimension setup.
    #[error("fusion configuration: {0}")]
    BadConfig(String),
    /// Input streams disagree in speaker count, length, width, or kind.
    #[error("stream mismatch: {0}")]
    StreamMismatch(String),
    /// Failure while assembling or validating embedding streams.
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    /// Underlying tensor or tape failure.
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How the audio and visual streams are combined into one embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    /// Sync-confidence-weighted cross attention.
    QualityAware,
    /// Per-frame concatenation followed by a single affine map.
    Concat,
    /// Sigmoid-gated acoustic subspaces.
    Factorized,
    /// Two-way cross attention with per-frame concatenation of the streams.
    Cross,
}

impl FusionStrategy {
    /// Every strategy, in the order used by comparison sweeps.
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::QualityAware,
        FusionStrategy::Concat,
        FusionStrategy::Factorized,
        FusionStrategy::Cross,
    ];

    /// Parses the configuration name of a strategy.
    pub fn parse(name: &str) -> Result<Self, FusionError> {
        match name {
            "qa" => Ok(FusionStrategy::QualityAware),
            "concat" => Ok(FusionStrategy::Concat),
            "factorized" => Ok(FusionStrategy::Factorized),
            "cross" => Ok(FusionStrategy::Cross),
            other => Err(FusionError::BadConfig(format!(
                "unknown fusion strategy `{other}`; expected qa, concat, factorized, or cross"
            ))),
        }
    }

    /// Configuration name, the inverse of [`FusionStrategy::parse`].
    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::QualityAware => "qa",
            FusionStrategy::Concat => "concat",
            FusionStrategy::Factorized => "factorized",
            FusionStrategy::Cross => "cross",
        }
    }
}

/// Fusion choice plus the sync-weighting knobs the quality-aware path uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionSpec {
    /// Which fusion structure to build.
    pub strategy: FusionStrategy,
    /// Window radius for the sync distance, in audio frames.
    pub sync_window: usize,
    /// Scale constant `m` of the weight formula; must be positive.
    pub sync_scale: f64,
}

impl Default for FusionSpec {
    fn default() -> Self {
        FusionSpec {
            strategy: FusionStrategy::QualityAware,
            sync_window: DEFAULT_SYNC_WINDOW,
            sync_scale: DEFAULT_SYNC_SCALE,
        }
    }
}

impl FusionSpec {
    /// Checks the numeric knobs.
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.sync_scale > 0.0) || !self.sync_scale.is_finite() {
            return Err(FusionError::BadConfig(format!(
                "sync scale must be positive and finite, got {}",
                self.sync_scale
            )));
        }
        Ok(())
    }
}

/// Per-frame sync confidence of every speaker: `[N x T]` with entries in
/// `(0, 1]`, falling as the window-averaged audio-visual distance grows and
/// reaching 1 exactly when that distance is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncWeights {
    weights: Tensor,
    window: usize,
    scale: f64,
}

impl SyncWeights {
    /// Wraps a weight matrix, checking every entry lies in `(0, 1]`.
    pub fn new(weights: Tensor, window: usize, scale: f64) -> Result<Self, FusionError> {
        if !weights.is_rank2() || weights.rows() == 0 || weights.cols() == 0 {
            return Err(FusionError::BadConfig(format!(
                "sync weights must be a nonempty rank-2 matrix, got shape {:?}",
                weights.shape()
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(FusionError::BadConfig(format!(
                "sync scale must be positive and finite, got {scale}"
            )));
        }
        for (i, &w) in weights.data().iter().enumerate() {
            if !w.is_finite() || w <= 0.0 || w > 1.0 {
                return Err(FusionError::BadConfig(format!(
                    "sync weight {w} at flat index {i} outside (0, 1]"
                )));
            }
        }
        Ok(SyncWeights {
            weights,
            window,
            scale,
        })
    }

    /// Weight matrix `[N x T]`.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Number of speakers.
    pub fn n_speakers(&self) -> usize {
        self.weights.rows()
    }

    /// Number of frames.
    pub fn num_frames(&self) -> usize {
        self.weights.cols()
    }

    /// Window radius the distances were averaged over.
    pub fn window(&self) -> usize {
        self.window
    }

    /// Scale constant `m` used in `m / (m + L)`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Weights of speaker `n` as a `[T x 1]` column, ready to enter a graph.
    pub fn speaker_column(&self, n: usize) -> Tensor {
        let t = self.num_frames();
        Tensor::from_vec(&[t, 1], self.weights.row(n).to_vec()).unwrap()
    }
}

/// Parameter names of one attention stream: query/key/value projections,
/// the feed-forward pair, and the two layer norms.
#[derive(Debug, Clone)]
pub struct StreamParams {
    pub wq: String,
    pub bq: String,
    pub wk: String,
    pub bk: String,
    pub wv: String,
    pub bv: String,
    pub f1: String,
    pub fb1: String,
    pub f2: String,
    pub fb2: String,
    pub ln1_gain: String,
    pub ln1_shift: String,
    pub ln2_gain: String,
    pub ln2_shift: String,
}

impl StreamParams {
    pub(crate) fn named(prefix: &str) -> Self {
        StreamParams {
            wq: format!("{prefix}.wq"),
            bq: format!("{prefix}.bq"),
            wk: format!("{prefix}.wk"),
            bk: format!("{prefix}.bk"),
            wv: format!("{prefix}.wv"),
            bv: format!("{prefix}.bv"),
            f1: format!("{prefix}.f1"),
            fb1: format!("{prefix}.fb1"),
            f2: format!("{prefix}.f2"),
            fb2: format!("{prefix}.fb2"),
            ln1_gain: format!("{prefix}.ln1_g"),
            ln1_shift: format!("{prefix}.ln1_b"),
            ln2_gain: format!("{prefix}.ln2_g"),
            ln2_shift: format!("{prefix}.ln2_b"),
        }
    }

    pub(crate) fn register(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        ffn_mult: usize,
        seed: u64,
    ) -> Self {
        let names = Self::named(prefix);
        add_affine(params, seed, &names.wq, &names.bq, dim, dim);
        add_affine(params, seed, &names.wk, &names.bk, dim, dim);
        add_affine(params, seed, &names.wv, &names.bv, dim, dim);
        add_affine(params, seed, &names.f1, &names.fb1, dim, ffn_mult * dim);
        add_affine(params, seed, &names.f2, &names.fb2, ffn_mult * dim, dim);
        add_layer_norm(params, &names.ln1_gain, &names.ln1_shift, dim);
        add_layer_norm(params, &names.ln2_gain, &names.ln2_shift, dim);
        names
    }

    /// All fourteen names in registration order.
    pub fn names(&self) -> [&str; 14] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.f1,
            &self.fb1,
            &self.f2,
            &self.fb2,
            &self.ln1_gain,
            &self.ln1_shift,
            &self.ln2_gain,
            &self.ln2_shift,
        ]
    }
}

/// Parameter names of one fusion block: separate audio and visual streams.
#[derive(Debug, Clone)]
pub struct QABlockParams {
    /// Stream fed by the speaker-specialized audio embedding.
    pub audio: StreamParams,
    /// Stream fed by the visual embedding.
    pub visual: StreamParams,
}

impl QABlockParams {
    /// Name table of the block stored under `prefix`.
    pub fn named(prefix: &str) -> Self {
        QABlockParams {
            audio: StreamParams::named(&format!("{prefix}.ia")),
            visual: StreamParams::named(&format!("{prefix}.v")),
        }
    }

    /// Registers both streams of one block and returns the name table.
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        ffn_mult: usize,
        seed: u64,
    ) -> Self {
        QABlockParams {
            audio: StreamParams::register(params, &format!("{prefix}.ia"), dim, ffn_mult, seed),
            visual: StreamParams::register(params, &format!("{prefix}.v"), dim, ffn_mult, seed),
        }
    }
}

fn qa_block_prefix(layer: usize) -> String {
    format!("fuse.qa.l{layer}")
}

fn cross_block_prefix(layer: usize) -> String {
    format!("fuse.cross.l{layer}")
}

const CONCAT_W: &str = "fuse.concat.w";
const CONCAT_B: &str = "fuse.concat.b";
const CROSS_PROJ_W: &str = "fuse.cross.proj.w";
const CROSS_PROJ_B: &str = "fuse.cross.proj.b";
const FACT_AUDIO_W: &str = "fuse.fact.audio_w";
const FACT_AUDIO_B: &str = "fuse.fact.audio_b";
const FACT_VIS_W: &str = "fuse.fact.vis_w";
const FACT_VIS_B: &str = "fuse.fact.vis_b";
const FACT_OUT_W: &str = "fuse.fact.out_w";
const FACT_OUT_B: &str = "fuse.fact.out_b";

/// Registers the parameters of one fusion strategy under the `fuse.`
/// prefix. The fused width always equals the shared stream width
/// `config.d_ia`.
pub fn init_fusion_params(
    params: &mut ParamSet,
    config: &ModelConfig,
    strategy: FusionStrategy,
    seed: u64,
) -> Result<(), FusionError> {
    config.validate()?;
    let d = config.d_ia;
    match strategy {
        FusionStrategy::QualityAware => {
            for layer in 0..config.qa_layers {
                QABlockParams::register(params, &qa_block_prefix(layer), d, config.ffn_mult, seed);
            }
        }
        FusionStrategy::Concat => {
            add_affine(params, seed, CONCAT_W, CONCAT_B, 2 * d, d);
        }
        FusionStrategy::Factorized => {
            if d % FACTOR_SUBSPACES != 0 {
                return Err(FusionError::BadConfig(format!(
                    "factorized fusion needs the stream width divisible by \
                     {FACTOR_SUBSPACES}, got {d}"
                )));
            }
            add_affine(params, seed, FACT_AUDIO_W, FACT_AUDIO_B, d, d);
            add_affine(params, seed, FACT_VIS_W, FACT_VIS_B, d, d / FACTOR_SUBSPACES);
            add_affine(params, seed, FACT_OUT_W, FACT_OUT_B, d, d);
        }
        FusionStrategy::Cross => {
            for layer in 0..config.qa_layers {
                QABlockParams::register(
                    params,
                    &cross_block_prefix(layer),
                    d,
                    config.ffn_mult,
                    seed,
                );
            }
            add_affine(params, seed, CROSS_PROJ_W, CROSS_PROJ_B, 2 * d, d);
        }
    }
    Ok(())
}

/// Checks an eval-level stream pair: speaker-specialized audio on the left,
/// visual on the right, equal speaker counts, lengths, and widths.
fn check_stream_pair(e_ia: &EmbeddingStream, e_v: &EmbeddingStream) -> Result<(), FusionError> {
    if e_ia.modality() != Modality::SpeakerAudio {
        return Err(FusionError::StreamMismatch(format!(
            "audio-side input must be a speaker-specialized audio stream, got {:?}",
            e_ia.modality()
        )));
    }
    if e_v.modality() != Modality::Visual {
        return Err(FusionError::StreamMismatch(format!(
            "visual-side input must be a visual stream, got {:?}",
            e_v.modality()
        )));
    }
    if e_ia.n_speakers() != e_v.n_speakers() {
        return Err(FusionError::StreamMismatch(format!(
            "speaker counts differ: audio {} vs visual {}",
            e_ia.n_speakers(),
            e_v.n_speakers()
        )));
    }
    if e_ia.num_frames() != e_v.num_frames() {
        return Err(FusionError::StreamMismatch(format!(
            "frame counts differ: audio {} vs visual {}",
            e_ia.num_frames(),
            e_v.num_frames()
        )));
    }
    if e_ia.dim() != e_v.dim() {
        return Err(FusionError::StreamMismatch(format!(
            "stream widths differ: audio {} vs visual {}",
            e_ia.dim(),
            e_v.dim()
        )));
    }
    Ok(())
}

/// Checks a node-level stream pair and returns the shared `(T, D)`.
fn check_node_pair(
    graph: &Graph,
    e_ia: &[NodeId],
    e_v: &[NodeId],
) -> Result<(usize, usize), FusionError> {
    if e_ia.is_empty() || e_ia.len() != e_v.len() {
        return Err(FusionError::StreamMismatch(format!(
            "need matching nonempty speaker lists, got audio {} vs visual {}",
            e_ia.len(),
            e_v.len()
        )));
    }
    let first = graph.value(e_ia[0]);
    if !first.is_rank2() {
        return Err(FusionError::StreamMismatch(format!(
            "stream nodes must be rank 2, got shape {:?}",
            first.shape()
        )));
    }
    let (t, d) = (first.rows(), first.cols());
    for &node in e_ia.iter().chain(e_v) {
        let v = graph.value(node);
        if !v.is_rank2() || v.rows() != t || v.cols() != d {
            return Err(FusionError::StreamMismatch(format!(
                "every stream node must be [{t} x {d}], got {:?}",
                v.shape()
            )));
        }
    }
    Ok((t, d))
}

/// Builds the window-averaged per-frame audio-visual distance of every
/// speaker: `[T x 1]` per speaker, each frame the mean Euclidean distance
/// over frames `t-window ..= t+window` clipped to the scene.
pub fn sync_distance_nodes(
    graph: &mut Graph,
    e_ia: &[NodeId],
    e_v: &[NodeId],
    window: usize,
) -> Result<Vec<NodeId>, FusionError> {
    check_node_pair(graph, e_ia, e_v)?;
    let mut out = Vec::with_capacity(e_ia.len());
    for (&a, &v) in e_ia.iter().zip(e_v) {
        let per_frame = graph.l2_distance(a, v)?;
        out.push(graph.window_mean(per_frame, window)?);
    }
    Ok(out)
}

/// Window-averaged audio-visual distance of every speaker as `[N x T]`.
pub fn sync_distance(
    e_ia: &EmbeddingStream,
    e_v: &EmbeddingStream,
    window: usize,
) -> Result<Tensor, FusionError> {
    check_stream_pair(e_ia, e_v)?;
    let mut graph = Graph::new();
    let a_nodes: Vec<NodeId> = e_ia.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let v_nodes: Vec<NodeId> = e_v.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let cols = sync_distance_nodes(&mut graph, &a_nodes, &v_nodes, window)?;
    let rows: Vec<Vec<f64>> = cols
        .into_iter()
        .map(|id| graph.value(id).data().to_vec())
        .collect();
    Ok(Tensor::from_rows(&rows)?)
}

/// Maps distance columns to weight columns `m / (m + L)` on the graph.
pub fn sync_weight_nodes(
    graph: &mut Graph,
    distances: &[NodeId],
    scale: f64,
) -> Result<Vec<NodeId>, FusionError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(FusionError::BadConfig(format!(
            "sync scale must be positive and finite, got {scale}"
        )));
    }
    let mut out = Vec::with_capacity(distances.len());
    for &l in distances {
        let shifted = graph.affine_const(l, 1.0 / scale, 1.0);
        out.push(graph.recip(shifted));
    }
    Ok(out)
}

/// Turns a distance matrix into sync weights `m / (m + L)`.
pub fn sync_weight(distances: &Tensor, scale: f64, window: usize) -> Result<SyncWeights, FusionError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(FusionError::BadConfig(format!(
            "sync scale must be positive and finite, got {scale}"
        )));
    }
    if !distances.is_rank2() {
        return Err(FusionError::BadConfig(format!(
            "distances must be rank 2, got shape {:?}",
            distances.shape()
        )));
    }
    for (i, &l) in distances.data().iter().enumerate() {
        if !l.is_finite() || l < 0.0 {
            return Err(FusionError::BadConfig(format!(
                "distance {l} at flat index {i} must be finite and nonnegative"
            )));
        }
    }
    SyncWeights::new(distances.map(|l| scale / (scale + l)), window, scale)
}

/// Resolved tape nodes of one attention stream's parameters.
pub(crate) struct StreamNodes {
    pub(crate) wq: NodeId,
    pub(crate) bq: NodeId,
    pub(crate) wk: NodeId,
    pub(crate) bk: NodeId,
    pub(crate) wv: NodeId,
    pub(crate) bv: NodeId,
    pub(crate) f1: NodeId,
    pub(crate) fb1: NodeId,
    pub(crate) f2: NodeId,
    pub(crate) fb2: NodeId,
    pub(crate) ln1_gain: NodeId,
    pub(crate) ln1_shift: NodeId,
    pub(crate) ln2_gain: NodeId,
    pub(crate) ln2_shift: NodeId,
}

pub(crate) fn resolve_stream(
    graph: &mut Graph,
    params: &ParamSet,
    names: &StreamParams,
) -> Result<StreamNodes, NumericsError> {
    Ok(StreamNodes {
        wq: graph.param(params, &names.wq)?,
        bq: graph.param(params, &names.bq)?,
        wk: graph.param(params, &names.wk)?,
        bk: graph.param(params, &names.bk)?,
        wv: graph.param(params, &names.wv)?,
        bv: graph.param(params, &names.bv)?,
        f1: graph.param(params, &names.f1)?,
        fb1: graph.param(params, &names.fb1)?,
        f2: graph.param(params, &names.f2)?,
        fb2: graph.param(params, &names.fb2)?,
        ln1_gain: graph.param(params, &names.ln1_gain)?,
        ln1_shift: graph.param(params, &names.ln1_shift)?,
        ln2_gain: graph.param(params, &names.ln2_gain)?,
        ln2_shift: graph.param(params, &names.ln2_shift)?,
    })
}

fn qkv(
    graph: &mut Graph,
    x: NodeId,
    s: &StreamNodes,
) -> Result<(NodeId, NodeId, NodeId), NumericsError> {
    Ok((
        graph.affine(x, s.wq, s.bq)?,
        graph.affine(x, s.wk, s.bk)?,
        graph.affine(x, s.wv, s.bv)?,
    ))
}

/// Scaled-dot-product attention over `heads` column blocks; pushes each
/// head's probability matrix onto `probs`.
pub(crate) fn multi_head_attention(
    graph: &mut Graph,
    query: NodeId,
    key: NodeId,
    value: NodeId,
    heads: usize,
    probs: &mut Vec<NodeId>,
) -> Result<NodeId, NumericsError> {
    let d = graph.value(query).cols();
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = graph.slice_cols(query, h * d_head, d_head)?;
        let k = graph.slice_cols(key, h * d_head, d_head)?;
        let v = graph.slice_cols(value, h * d_head, d_head)?;
        let scores = graph.matmul_nt(q, k)?;
        let scaled = graph.affine_const(scores, scale, 0.0);
        let p = graph.softmax_rows(scaled)?;
        probs.push(p);
        outs.push(graph.matmul(p, v)?);
    }
    graph.concat_cols(&outs)
}

/// Post-attention half of a block: layer norm over the attention residual,
/// then a two-layer feed-forward with its own residual and layer norm.
pub(crate) fn residual_block(
    graph: &mut Graph,
    s: &StreamNodes,
    x: NodeId,
    attended: NodeId,
) -> Result<NodeId, NumericsError> {
    let summed = graph.add(x, attended)?;
    let h = graph.layer_norm(summed, s.ln1_gain, s.ln1_shift)?;
    let hidden = graph.affine(h, s.f1, s.fb1)?;
    let hidden = graph.relu(hidden);
    let ffn = graph.affine(hidden, s.f2, s.fb2)?;
    let summed2 = graph.add(h, ffn)?;
    graph.layer_norm(summed2, s.ln2_gain, s.ln2_shift)
}

/// Outputs of one fusion layer: the updated per-speaker streams and every
/// attention probability matrix, ordered per speaker as audio-stream heads
/// then visual-stream heads.
pub struct FusionLayerNodes {
    pub e_ia: Vec<NodeId>,
    pub e_v: Vec<NodeId>,
    pub probs: Vec<NodeId>,
}

fn check_heads(d: usize, heads: usize) -> Result<(), FusionError> {
    if heads == 0 || d % heads != 0 {
        return Err(FusionError::BadConfig(format!(
            "stream width {d} must be a positive multiple of the head count {heads}"
        )));
    }
    Ok(())
}

/// One sync-weighted fusion block. Each stream projects its own queries,
/// keys, and values; the effective query of the audio stream at frame `t`
/// is `w(t) * q_visual(t) + (1 - w(t)) * q_audio(t)` attending over audio
/// keys and values, and symmetrically for the visual stream. Each stream
/// then passes through its feed-forward half with residuals and layer
/// norms.
pub fn qa_attention_layer_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    block: &QABlockParams,
    heads: usize,
    e_ia: &[NodeId],
    e_v: &[NodeId],
    sync: &[NodeId],
) -> Result<FusionLayerNodes, FusionError> {
    let (t, d) = check_node_pair(graph, e_ia, e_v)?;
    check_heads(d, heads)?;
    if sync.len() != e_ia.len() {
        return Err(FusionError::StreamMismatch(format!(
            "need one weight column per speaker, got {} for {} speakers",
            sync.len(),
            e_ia.len()
        )));
    }
    for &w in sync {
        let v = graph.value(w);
        if !v.is_rank2() || v.rows() != t || v.cols() != 1 {
            return Err(FusionError::StreamMismatch(format!(
                "weight columns must be [{t} x 1], got {:?}",
                v.shape()
            )));
        }
    }
    let audio_nodes = resolve_stream(graph, params, &block.audio)?;
    let visual_nodes = resolve_stream(graph, params, &block.visual)?;
    let mut out = FusionLayerNodes {
        e_ia: Vec::with_capacity(e_ia.len()),
        e_v: Vec::with_capacity(e_v.len()),
        probs: Vec::new(),
    };
    for n in 0..e_ia.len() {
        let (q_ia, k_ia, v_ia) = qkv(graph, e_ia[n], &audio_nodes)?;
        let (q_v, k_v, v_v) = qkv(graph, e_v[n], &visual_nodes)?;
        let w = sync[n];
        let anti = graph.affine_const(w, -1.0, 1.0);
        let mixed_audio = {
            let cross = graph.scale_rows(q_v, w)?;
            let own = graph.scale_rows(q_ia, anti)?;
            graph.add(cross, own)?
        };
        let mixed_visual = {
            let cross = graph.scale_rows(q_ia, w)?;
            let own = graph.scale_rows(q_v, anti)?;
            graph.add(cross, own)?
        };
        let att_audio =
            multi_head_attention(graph, mixed_audio, k_ia, v_ia, heads, &mut out.probs)?;
        let att_visual =
            multi_head_attention(graph, mixed_visual, k_v, v_v, heads, &mut out.probs)?;
        out.e_ia
            .push(residual_block(graph, &audio_nodes, e_ia[n], att_audio)?);
        out.e_v
            .push(residual_block(graph, &visual_nodes, e_v[n], att_visual)?);
    }
    Ok(out)
}

/// Runs fusion block `layer` once and returns the updated streams.
pub fn qa_attention_layer(
    params: &ParamSet,
    config: &ModelConfig,
    layer: usize,
    e_ia: &EmbeddingStream,
    e_v: &EmbeddingStream,
    sync: &SyncWeights,
) -> Result<(EmbeddingStream, EmbeddingStream), FusionError> {
    check_stream_pair(e_ia, e_v)?;
    if sync.n_speakers() != e_ia.n_speakers() || sync.num_frames() != e_ia.num_frames() {
        return Err(FusionError::StreamMismatch(format!(
            "sync weights are [{} x {}] but streams are [{} x {}]",
            sync.n_speakers(),
            sync.num_frames(),
            e_ia.n_speakers(),
            e_ia.num_frames()
        )));
    }
    let mut graph = Graph::new();
    let a_nodes: Vec<NodeId> = e_ia.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let v_nodes: Vec<NodeId> = e_v.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let w_nodes: Vec<NodeId> = (0..e_ia.n_speakers())
        .map(|n| graph.input(sync.speaker_column(n)))
        .collect();
    let block = QABlockParams::named(&qa_block_prefix(layer));
    let out = qa_attention_layer_nodes(
        &mut graph,
        params,
        &block,
        config.heads,
        &a_nodes,
        &v_nodes,
        &w_nodes,
    )?;
    let audio = out
        .e_ia
        .iter()
        .map(|&id| graph.value(id).clone())
        .collect();
    let visual = out.e_v.iter().map(|&id| graph.value(id).clone()).collect();
    Ok((
        EmbeddingStream::new(Modality::SpeakerAudio, audio)?,
        EmbeddingStream::new(Modality::Visual, visual)?,
    ))
}

/// Per-speaker fused embeddings, plus the sync-weight columns when the
/// strategy computes them.
pub struct FusionNodes {
    pub fused: Vec<NodeId>,
    pub sync: Option<Vec<NodeId>>,
}

/// Full quality-aware fusion on the graph: weights from the input streams,
/// stacked attention blocks sharing those weights, and an elementwise
/// product of the final streams.
pub fn qa_fusion_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    config: &ModelConfig,
    window: usize,
    scale: f64,
    e_ia: &[NodeId],
    e_v: &[NodeId],
) -> Result<FusionNodes, FusionError> {
    let (_, d) = check_node_pair(graph, e_ia, e_v)?;
    check_heads(d, config.heads)?;
    if config.qa_layers == 0 {
        return Err(FusionError::BadConfig(
            "quality-aware fusion needs at least one block".into(),
        ));
    }
    let distances = sync_distance_nodes(graph, e_ia, e_v, window)?;
    let sync = sync_weight_nodes(graph, &distances, scale)?;
    let mut audio = e_ia.to_vec();
    let mut visual = e_v.to_vec();
    for layer in 0..config.qa_layers {
        let block = QABlockParams::named(&qa_block_prefix(layer));
        let out = qa_attention_layer_nodes(
            graph,
            params,
            &block,
            config.heads,
            &audio,
            &visual,
            &sync,
        )?;
        audio = out.e_ia;
        visual = out.e_v;
    }
    let fused = audio
        .iter()
        .zip(&visual)
        .map(|(&a, &v)| graph.mul(a, v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FusionNodes {
        fused,
        sync: Some(sync),
    })
}

/// Quality-aware fusion of two streams; returns the fused stream and the
/// sync weights it used.
pub fn qa_fusion(
    params: &ParamSet,
    config: &ModelConfig,
    window: usize,
    scale: f64,
    e_ia: &EmbeddingStream,
    e_v: &EmbeddingStream,
) -> Result<(EmbeddingStream, SyncWeights), FusionError> {
    check_stream_pair(e_ia, e_v)?;
    let mut graph = Graph::new();
    let a_nodes: Vec<NodeId> = e_ia.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let v_nodes: Vec<NodeId> = e_v.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let out = qa_fusion_nodes(&mut graph, params, config, window, scale, &a_nodes, &v_nodes)?;
    let fused = out
        .fused
        .iter()
        .map(|&id| graph.value(id).clone())
        .collect();
    let w_rows: Vec<Vec<f64>> = out
        .sync
        .expect("quality-aware fusion always produces weights")
        .iter()
        .map(|&id| graph.value(id).data().to_vec())
        .collect();
    let weights = SyncWeights::new(Tensor::from_rows(&w_rows)?, window, scale)?;
    Ok((EmbeddingStream::new(Modality::Fused, fused)?, weights))
}

/// Concatenation baseline on the graph: per-frame concat of the two
/// streams followed by one shared affine map back to the stream width.
pub fn concat_fusion_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    e_ia: &[NodeId],
    e_v: &[NodeId],
) -> Result<FusionNodes, FusionError> {
    check_node_pair(graph, e_ia, e_v)?;
    let w = graph.param(params, CONCAT_W)?;
    let b = graph.param(params, CONCAT_B)?;
    let mut fused = Vec::with_capacity(e_ia.len());
    for (&a, &v) in e_ia.iter().zip(e_v) {
        let cat = graph.concat_cols(&[a, v])?;
        fused.push(graph.affine(cat, w, b)?);
    }
    Ok(FusionNodes { fused, sync: None })
}

/// Concatenation baseline over concrete streams.
pub fn baseline_concat(
    params: &ParamSet,
    e_ia: &EmbeddingStream,
    e_v: &EmbeddingStream,
) -> Result<EmbeddingStream, FusionError> {
    check_stream_pair(e_ia, e_v)?;
    let mut graph = Graph::new();
    let a_nodes: Vec<NodeId> = e_ia.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let v_nodes: Vec<NodeId> = e_v.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let out = concat_fusion_nodes(&mut graph, params, &a_nodes, &v_nodes)?;
    let fused = out
        .fused
        .iter()
        .map(|&id| graph.value(id).clone())
        .collect();
    Ok(EmbeddingStream::new(Modality::Fused, fused)?)
}

/// Factorized baseline on the graph. The audio affine output is split into
/// [`FACTOR_SUBSPACES`] equal column blocks; the visual affine produces one
/// low-dimensional vector whose sigmoid gates every block elementwise; the
/// gated blocks are re-concatenated and mapped back to the stream width.
pub fn factorized_fusion_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    e_ia: &[NodeId],
    e_v: &[NodeId],
) -> Result<FusionNodes, FusionError> {
    let (_, d) = check_node_pair(graph, e_ia, e_v)?;
    if d % FACTOR_SUBSPACES != 0 {
        return Err(FusionError::BadConfig(format!(
            "factorized fusion needs the stream width divisible by \
             {FACTOR_SUBSPACES}, got {d}"
        )));
    }
    let sub = d / FACTOR_SUBSPACES;
    let aw = graph.param(params, FACT_AUDIO_W)?;
    let ab = graph.param(params, FACT_AUDIO_B)?;
    let vw = graph.param(params, FACT_VIS_W)?;
    let vb = graph.param(params, FACT_VIS_B)?;
    let ow = graph.param(params, FACT_OUT_W)?;
    let ob = graph.param(params, FACT_OUT_B)?;
    let mut fused = Vec::with_capacity(e_ia.len());
    for (&a, &v) in e_ia.iter().zip(e_v) {
        let subspaces = graph.affine(a, aw, ab)?;
        let low = graph.affine(v, vw, vb)?;
        let gate = graph.sigmoid(low);
        let mut gated = Vec::with_capacity(FACTOR_SUBSPACES);
        for i in 0..FACTOR_SUBSPACES {
            let block = graph.slice_cols(subspaces, i * sub, sub)?;
            gated.push(graph.mul(gate, block)?);
        }
        let cat = graph.concat_cols(&gated)?;
        fused.push(graph.affine(cat, ow, ob)?);
    }
    Ok(FusionNodes { fused, sync: None })
}

/// Factorized baseline over concrete streams.
pub fn baseline_factorized(
    params: &ParamSet,
    e_ia: &EmbeddingStream,
    e_v: &EmbeddingStream,
) -> Result<EmbeddingStream, FusionError> {
    check_stream_pair(e_ia, e_v)?;
    let mut graph = Graph::new();
    let a_nodes: Vec<NodeId> = e_ia.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let v_nodes: Vec<NodeId> = e_v.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let out = factorized_fusion_nodes(&mut graph, params, &a_nodes, &v_nodes)?;
    let fused = out
        .fused
        .iter()
        .map(|&id| graph.value(id).clone())
        .collect();
    Ok(EmbeddingStream::new(Modality::Fused, fused)?)
}

/// One plain two-way cross-attention block: the audio stream is queried by
/// the visual stream's projected queries and vice versa, with the same
/// feed-forward halves as the sync-weighted block.
pub(crate) fn cross_attention_layer_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    block: &QABlockParams,
    heads: usize,
    e_ia: &[NodeId],
    e_v: &[NodeId],
) -> Result<FusionLayerNodes, FusionError> {
    let (_, d) = check_node_pair(graph, e_ia, e_v)?;
    check_heads(d, heads)?;
    let audio_nodes = resolve_stream(graph, params, &block.audio)?;
    let visual_nodes = resolve_stream(graph, params, &block.visual)?;
    let mut out = FusionLayerNodes {
        e_ia: Vec::with_capacity(e_ia.len()),
        e_v: Vec::with_capacity(e_v.len()),
        probs: Vec::new(),
    };
    for n in 0..e_ia.len() {
        let (q_ia, k_ia, v_ia) = qkv(graph, e_ia[n], &audio_nodes)?;
        let (q_v, k_v, v_v) = qkv(graph, e_v[n], &visual_nodes)?;
        let att_audio = multi_head_attention(graph, q_v, k_ia, v_ia, heads, &mut out.probs)?;
        let att_visual = multi_head_attention(graph, q_ia, k_v, v_v, heads, &mut out.probs)?;
        out.e_ia
            .push(residual_block(graph, &audio_nodes, e_ia[n], att_audio)?);
        out.e_v
            .push(residual_block(graph, &visual_nodes, e_v[n], att_visual)?);
    }
    Ok(out)
}

/// Cross-attention baseline on the graph: stacked two-way cross-attention
/// blocks, then per-frame concatenation of the two final streams projected
/// back to the stream width.
pub fn cross_fusion_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    config: &ModelConfig,
    e_ia: &[NodeId],
    e_v: &[NodeId],
) -> Result<FusionNodes, FusionError> {
    let (_, d) = check_node_pair(graph, e_ia, e_v)?;
    check_heads(d, config.heads)?;
    if config.qa_layers == 0 {
        return Err(FusionError::BadConfig(
            "cross-attention fusion needs at least one block".into(),
        ));
    }
    let mut audio = e_ia.to_vec();
    let mut visual = e_v.to_vec();
    for layer in 0..config.qa_layers {
        let block = QABlockParams::named(&cross_block_prefix(layer));
        let out =
            cross_attention_layer_nodes(graph, params, &block, config.heads, &audio, &visual)?;
        audio = out.e_ia;
        visual = out.e_v;
    }
    let w = graph.param(params, CROSS_PROJ_W)?;
    let b = graph.param(params, CROSS_PROJ_B)?;
    let mut fused = Vec::with_capacity(audio.len());
    for (&a, &v) in audio.iter().zip(&visual) {
        let cat = graph.concat_cols(&[a, v])?;
        fused.push(graph.affine(cat, w, b)?);
    }
    Ok(FusionNodes { fused, sync: None })
}

/// Cross-attention baseline over concrete streams.
pub fn baseline_cross_attention(
    params: &ParamSet,
    config: &ModelConfig,
    e_ia: &EmbeddingStream,
    e_v: &EmbeddingStream,
) -> Result<EmbeddingStream, FusionError> {
    check_stream_pair(e_ia, e_v)?;
    let mut graph = Graph::new();
    let a_nodes: Vec<NodeId> = e_ia.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let v_nodes: Vec<NodeId> = e_v.speakers().iter().map(|t| graph.input(t.clone())).collect();
    let out = cross_fusion_nodes(&mut graph, params, config, &a_nodes, &v_nodes)?;
    let fused = out
        .fused
        .iter()
        .map(|&id| graph.value(id).clone())
        .collect();
    Ok(EmbeddingStream::new(Modality::Fused, fused)?)
}

/// Builds the fusion stage selected by `spec` on the graph.
pub fn fuse_nodes(
    graph: &mut Graph,
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    e_ia: &[NodeId],
    e_v: &[NodeId],
) -> Result<FusionNodes, FusionError> {
    spec.validate()?;
    match spec.strategy {
        FusionStrategy::QualityAware => qa_fusion_nodes(
            graph,
            params,
            config,
            spec.sync_window,
            spec.sync_scale,
            e_ia,
            e_v,
        ),
        FusionStrategy::Concat => concat_fusion_nodes(graph, params, e_ia, e_v),
        FusionStrategy::Factorized => factorized_fusion_nodes(graph, params, e_ia, e_v),
        FusionStrategy::Cross => cross_fusion_nodes(graph, params, config, e_ia, e_v),
    }
}

/// Fuses two concrete streams with the strategy selected by `spec`; the
/// sync weights are returned only for the quality-aware strategy.
pub fn fuse(
    params: &ParamSet,
    config: &ModelConfig,
    spec: &FusionSpec,
    e_ia: &EmbeddingStream,
    e_v: &EmbeddingStream,
) -> Result<(EmbeddingStream, Option<SyncWeights>), FusionError> {
    check_stream_pair(e_ia, e_v)?;
    spec.validate()?;
    match spec.strategy {
        FusionStrategy::QualityAware => {
            let (fused, weights) = qa_fusion(
                params,
                config,
                spec.sync_window,
                spec.sync_scale,
                e_ia,
                e_v,
            )?;
            Ok((fused, Some(weights)))
        }
        FusionStrategy::Concat => Ok((baseline_concat(params, e_ia, e_v)?, None)),
        FusionStrategy::Factorized => Ok((baseline_factorized(params, e_ia, e_v)?, None)),
        FusionStrategy::Cross => Ok((
            baseline_cross_attention(params, config, e_ia, e_v)?,
            None,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_params, GradCheckOpts};
    use crate::numerics::rng::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    const LAYER_NORM_EPS: f64 = 1e-5;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_v: 8,
            d_a: 8,
            d_ia: 8,
            d_i: 6,
            heads: 2,
            qa_layers: 1,
            xs_layers: 1,
            ffn_mult: 2,
        }
    }

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>() - 0.5).collect();
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }

    fn random_stream(modality: Modality, n: usize, t: usize, d: usize, seed: u64) -> EmbeddingStream {
        let streams = (0..n)
            .map(|i| random_tensor(t, d, seed.wrapping_add(i as u64)))
            .collect();
        EmbeddingStream::new(modality, streams).unwrap()
    }

    fn jitter(params: &mut ParamSet, seed: u64) {
        let mut rng = seeded_rng(seed);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            for v in params.value_mut(&name).unwrap().data_mut() {
                *v += 0.01 * (rng.gen::<f64>() - 0.5);
            }
        }
    }

    fn weighted_scalar_loss(graph: &mut Graph, node: NodeId, seed: u64) -> NodeId {
        let shape = graph.value(node).shape().to_vec();
        let mut rng = seeded_rng(seed);
        let weights: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen::<f64>() - 0.5)
            .collect();
        let w = graph.input(Tensor::from_vec(&shape, weights).unwrap());
        let prod = graph.mul(node, w).unwrap();
        graph.sum_all(prod)
    }

    fn fuse_param_names(params: &ParamSet) -> Vec<String> {
        params
            .names()
            .filter(|n| n.starts_with("fuse."))
            .map(str::to_string)
            .collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn affine_ref(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (t, k) = (x.rows(), x.cols());
        let n = w.cols();
        let mut out = vec![0.0; t * n];
        for i in 0..t {
            for j in 0..n {
                let mut acc = b.at(0, j);
                for c in 0..k {
                    acc += x.at(i, c) * w.at(c, j);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_vec(&[t, n], out).unwrap()
    }

    fn layer_norm_ref(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Tensor {
        let (t, d) = (x.rows(), x.cols());
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[i * d + j] = gain.at(0, j) * ((row[j] - mean) * inv) + shift.at(0, j);
            }
        }
        Tensor::from_vec(&[t, d], out).unwrap()
    }

    fn add_ref(a: &Tensor, b: &Tensor) -> Tensor {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x + y)
            .collect();
        Tensor::from_vec(a.shape(), data).unwrap()
    }

    /// Plain self-attention block over one stream, written with loops only.
    fn self_attention_block_ref(
        x: &Tensor,
        params: &ParamSet,
        names: &StreamParams,
        heads: usize,
    ) -> Tensor {
        let get = |n: &str| params.value(n).unwrap();
        let q = affine_ref(x, get(&names.wq), get(&names.bq));
        let k = affine_ref(x, get(&names.wk), get(&names.bk));
        let v = affine_ref(x, get(&names.wv), get(&names.bv));
        let (t, d) = (x.rows(), x.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut att = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                    }
                    *s = dot * scale;
                }
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += exps[j] / z * v.at(j, h * dh + c);
                    }
                    att[i * d + h * dh + c] = acc;
                }
            }
        }
        let att = Tensor::from_vec(&[t, d], att).unwrap();
        let h1 = layer_norm_ref(
            &add_ref(x, &att),
            get(&names.ln1_gain),
            get(&names.ln1_shift),
        );
        let hidden = affine_ref(&h1, get(&names.f1), get(&names.fb1)).map(|v| v.max(0.0));
        let ffn = affine_ref(&hidden, get(&names.f2), get(&names.fb2));
        layer_norm_ref(
            &add_ref(&h1, &ffn),
            get(&names.ln2_gain),
            get(&names.ln2_shift),
        )
    }

    #[test]
    fn sync_distance_is_zero_for_identical_streams() {
        let shared = random_stream(Modality::Visual, 2, 11, 6, 3);
        let audio = EmbeddingStream::new(
            Modality::SpeakerAudio,
            shared.speakers().to_vec(),
        )
        .unwrap();
        let l = sync_distance(&audio, &shared, 3).unwrap();
        assert_eq!(l.shape(), &[2, 11]);
        assert!(l.data().iter().all(|&v| v.abs() < 1e-15));
        let w = sync_weight(&l, 1.0, 3).unwrap();
        assert!(w.weights().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn sync_distance_recovers_single_frame_norm() {
        let base = random_tensor(1, 6, 7);
        let mut shifted = base.clone();
        shifted.set(0, 0, base.at(0, 0) + 3.0);
        shifted.set(0, 1, base.at(0, 1) + 4.0);
        let audio = EmbeddingStream::new(Modality::SpeakerAudio, vec![shifted]).unwrap();
        let visual = EmbeddingStream::new(Modality::Visual, vec![base]).unwrap();
        let l = sync_distance(&audio, &visual, 0).unwrap();
        assert!((l.at(0, 0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn sync_distance_matches_windowed_oracle() {
        let (n, t, d, window) = (3, 17, 6, 2usize);
        let audio = random_stream(Modality::SpeakerAudio, n, t, d, 100);
        let visual = random_stream(Modality::Visual, n, t, d, 200);
        let got = sync_distance(&audio, &visual, window).unwrap();
        for sp in 0..n {
            let a = audio.speaker(sp);
            let v = visual.speaker(sp);
            for frame in 0..t {
                let lo = frame.saturating_sub(window);
                let hi = (frame + window).min(t - 1);
                let mut acc = 0.0;
                for tau in lo..=hi {
                    let mut sq = 0.0;
                    for c in 0..d {
                        let diff = a.at(tau, c) - v.at(tau, c);
                        sq += diff * diff;
                    }
                    acc += sq.sqrt();
                }
                let expect = acc / (hi - lo + 1) as f64;
                assert!(
                    (got.at(sp, frame) - expect).abs() < 1e-12,
                    "speaker {sp} frame {frame}: {} vs {expect}",
                    got.at(sp, frame)
                );
            }
        }
    }

    #[test]
    fn sync_weight_matches_formula_points() {
        let l = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 3.0]).unwrap();
        let w = sync_weight(&l, 1.0, 12).unwrap();
        assert!((w.weights().at(0, 0) - 1.0).abs() < 1e-15);
        assert!((w.weights().at(0, 1) - 0.5).abs() < 1e-15);
        assert!((w.weights().at(0, 2) - 0.25).abs() < 1e-15);
        let w2 = sync_weight(&Tensor::from_vec(&[1, 1], vec![2.0]).unwrap(), 2.0, 12).unwrap();
        assert!((w2.weights().at(0, 0) - 0.5).abs() < 1e-15);
        assert_eq!(w.window(), 12);
        assert!((w.scale() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sync_weight_rejects_bad_inputs() {
        let l = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            sync_weight(&l, 0.0, 12),
            Err(FusionError::BadConfig(_))
        ));
        assert!(matches!(
            sync_weight(&l, -1.0, 12),
            Err(FusionError::BadConfig(_))
        ));
        let neg = Tensor::from_vec(&[1, 1], vec![-0.5]).unwrap();
        assert!(matches!(
            sync_weight(&neg, 1.0, 12),
            Err(FusionError::BadConfig(_))
        ));
        let nan = Tensor::from_vec(&[1, 1], vec![f64::NAN]).unwrap();
        assert!(sync_weight(&nan, 1.0, 12).is_err());
    }

    #[test]
    fn sync_weights_validate_range() {
        let ok = Tensor::from_vec(&[1, 2], vec![0.5, 1.0]).unwrap();
        let w = SyncWeights::new(ok, 4, 1.0).unwrap();
        assert_eq!(w.n_speakers(), 1);
        assert_eq!(w.num_frames(), 2);
        assert_eq!(w.speaker_column(0).shape(), &[2, 1]);
        let zero = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        assert!(SyncWeights::new(zero, 4, 1.0).is_err());
        let above = Tensor::from_vec(&[1, 1], vec![1.2]).unwrap();
        assert!(SyncWeights::new(above, 4, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn prop_sync_weight_unit_range_and_monotone(
            mut ls in proptest::collection::vec(0.0f64..50.0, 2..12),
            scale in 0.1f64..5.0,
        ) {
            ls.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ls.dedup();
            let t = Tensor::from_vec(&[1, ls.len()], ls.clone()).unwrap();
            let w = sync_weight(&t, scale, 0).unwrap();
            let data = w.weights().data();
            for &v in data {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
            for pair in data.windows(2) {
                prop_assert!(pair[0] > pair[1]);
            }
            prop_assert_eq!(data[0] == 1.0, ls[0] == 0.0);
        }
    }

    #[test]
    fn qa_layer_matches_cross_attention_layer_when_fully_synced() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 5).unwrap();
        init_fusion_params(&mut params, &config, FusionStrategy::Cross, 5).unwrap();
        let qa_block = QABlockParams::named(&qa_block_prefix(0));
        let cross_block = QABlockParams::named(&cross_block_prefix(0));
        for (stream_from, stream_to) in [
            (&qa_block.audio, &cross_block.audio),
            (&qa_block.visual, &cross_block.visual),
        ] {
            for (src, dst) in stream_from.names().iter().zip(stream_to.names()) {
                let value = params.value(src).unwrap().clone();
                *params.value_mut(dst).unwrap() = value;
            }
        }
        let (n, t, d) = (2, 7, config.d_ia);
        let mut graph = Graph::new();
        let a_nodes: Vec<NodeId> = (0..n)
            .map(|i| graph.input(random_tensor(t, d, 60 + i as u64)))
            .collect();
        let v_nodes: Vec<NodeId> = (0..n)
            .map(|i| graph.input(random_tensor(t, d, 70 + i as u64)))
            .collect();
        let ones: Vec<NodeId> = (0..n)
            .map(|_| graph.input(Tensor::full(&[t, 1], 1.0)))
            .collect();
        let qa = qa_attention_layer_nodes(
            &mut graph,
            &params,
            &qa_block,
            config.heads,
            &a_nodes,
            &v_nodes,
            &ones,
        )
        .unwrap();
        let cross = cross_attention_layer_nodes(
            &mut graph,
            &params,
            &cross_block,
            config.heads,
            &a_nodes,
            &v_nodes,
        )
        .unwrap();
        for sp in 0..n {
            let d_ia = max_abs_diff(
                graph.value(qa.e_ia[sp]).data(),
                graph.value(cross.e_ia[sp]).data(),
            );
            let d_v = max_abs_diff(
                graph.value(qa.e_v[sp]).data(),
                graph.value(cross.e_v[sp]).data(),
            );
            assert!(d_ia < 1e-10, "audio stream diverges by {d_ia}");
            assert!(d_v < 1e-10, "visual stream diverges by {d_v}");
        }
    }

    #[test]
    fn qa_layer_matches_self_attention_oracle_when_desynced() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 9).unwrap();
        jitter(&mut params, 10);
        let block = QABlockParams::named(&qa_block_prefix(0));
        let (t, d) = (5, config.d_ia);
        let a_in = random_tensor(t, d, 80);
        let v_in = random_tensor(t, d, 81);
        let mut graph = Graph::new();
        let a_nodes = vec![graph.input(a_in.clone())];
        let v_nodes = vec![graph.input(v_in.clone())];
        let zeros = vec![graph.input(Tensor::zeros(&[t, 1]))];
        let out = qa_attention_layer_nodes(
            &mut graph,
            &params,
            &block,
            config.heads,
            &a_nodes,
            &v_nodes,
            &zeros,
        )
        .unwrap();
        let expect_a = self_attention_block_ref(&a_in, &params, &block.audio, config.heads);
        let expect_v = self_attention_block_ref(&v_in, &params, &block.visual, config.heads);
        assert!(max_abs_diff(graph.value(out.e_ia[0]).data(), expect_a.data()) < 1e-10);
        assert!(max_abs_diff(graph.value(out.e_v[0]).data(), expect_v.data()) < 1e-10);
    }

    #[test]
    fn qa_layer_attention_rows_sum_to_one() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 11).unwrap();
        let block = QABlockParams::named(&qa_block_prefix(0));
        let (n, t, d) = (2, 9, config.d_ia);
        let mut graph = Graph::new();
        let a_nodes: Vec<NodeId> = (0..n)
            .map(|i| graph.input(random_tensor(t, d, 90 + i as u64)))
            .collect();
        let v_nodes: Vec<NodeId> = (0..n)
            .map(|i| graph.input(random_tensor(t, d, 95 + i as u64)))
            .collect();
        let mut rng = seeded_rng(42);
        let w_nodes: Vec<NodeId> = (0..n)
            .map(|_| {
                let col: Vec<f64> = (0..t).map(|_| rng.gen_range(0.05..1.0)).collect();
                graph.input(Tensor::from_vec(&[t, 1], col).unwrap())
            })
            .collect();
        let out = qa_attention_layer_nodes(
            &mut graph,
            &params,
            &block,
            config.heads,
            &a_nodes,
            &v_nodes,
            &w_nodes,
        )
        .unwrap();
        assert_eq!(out.probs.len(), n * 2 * config.heads);
        for &p in &out.probs {
            let probs = graph.value(p);
            assert_eq!(probs.shape(), &[t, t]);
            for i in 0..t {
                let sum: f64 = probs.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            }
        }
    }

    #[test]
    fn qa_attention_layer_keeps_stream_shapes() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 13).unwrap();
        let (n, t, d) = (3, 6, config.d_ia);
        let audio = random_stream(Modality::SpeakerAudio, n, t, d, 300);
        let visual = random_stream(Modality::Visual, n, t, d, 400);
        let l = sync_distance(&audio, &visual, 2).unwrap();
        let w = sync_weight(&l, 1.0, 2).unwrap();
        let (a_out, v_out) = qa_attention_layer(&params, &config, 0, &audio, &visual, &w).unwrap();
        assert_eq!(a_out.modality(), Modality::SpeakerAudio);
        assert_eq!(v_out.modality(), Modality::Visual);
        assert_eq!(a_out.n_speakers(), n);
        assert_eq!(a_out.num_frames(), t);
        assert_eq!(a_out.dim(), d);
        assert_eq!(v_out.dim(), d);
    }

    #[test]
    fn qa_fusion_produces_fused_shape_and_weights() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 17).unwrap();
        let (n, t, d) = (2, 9, config.d_ia);
        let audio = random_stream(Modality::SpeakerAudio, n, t, d, 500);
        let visual = random_stream(Modality::Visual, n, t, d, 600);
        let (fused, weights) = qa_fusion(&params, &config, 3, 1.0, &audio, &visual).unwrap();
        assert_eq!(fused.modality(), Modality::Fused);
        assert_eq!(fused.n_speakers(), n);
        assert_eq!(fused.num_frames(), t);
        assert_eq!(fused.dim(), d);
        assert_eq!(weights.weights().shape(), &[n, t]);
        assert_eq!(weights.window(), 3);
        assert!(weights
            .weights()
            .data()
            .iter()
            .all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn qa_fusion_zero_visual_stream_zeroes_fused_frames() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 19).unwrap();
        let last = QABlockParams::named(&qa_block_prefix(config.qa_layers - 1));
        *params.value_mut(&last.visual.ln2_gain).unwrap() = Tensor::zeros(&[1, config.d_ia]);
        *params.value_mut(&last.visual.ln2_shift).unwrap() = Tensor::zeros(&[1, config.d_ia]);
        let audio = random_stream(Modality::SpeakerAudio, 2, 7, config.d_ia, 700);
        let visual = random_stream(Modality::Visual, 2, 7, config.d_ia, 800);
        let (fused, _) = qa_fusion(&params, &config, 2, 1.0, &audio, &visual).unwrap();
        for sp in 0..2 {
            assert!(fused.speaker(sp).data().iter().all(|&v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn fusion_ops_are_permutation_equivariant() {
        let config = tiny_config();
        let (n, t, d) = (3, 8, config.d_ia);
        let perm = [2usize, 0, 1];
        for strategy in FusionStrategy::ALL {
            let mut params = ParamSet::new();
            init_fusion_params(&mut params, &config, strategy, 23).unwrap();
            let audio = random_stream(Modality::SpeakerAudio, n, t, d, 900);
            let visual = random_stream(Modality::Visual, n, t, d, 950);
            let spec = FusionSpec {
                strategy,
                sync_window: 2,
                sync_scale: 1.0,
            };
            let (fused, weights) = fuse(&params, &config, &spec, &audio, &visual).unwrap();
            let audio_p = EmbeddingStream::new(
                Modality::SpeakerAudio,
                perm.iter().map(|&i| audio.speaker(i).clone()).collect(),
            )
            .unwrap();
            let visual_p = EmbeddingStream::new(
                Modality::Visual,
                perm.iter().map(|&i| visual.speaker(i).clone()).collect(),
            )
            .unwrap();
            let (fused_p, weights_p) = fuse(&params, &config, &spec, &audio_p, &visual_p).unwrap();
            for (out_idx, &src) in perm.iter().enumerate() {
                assert_eq!(
                    fused_p.speaker(out_idx).data(),
                    fused.speaker(src).data(),
                    "strategy {} speaker {src}",
                    strategy.name()
                );
            }
            match (weights, weights_p) {
                (Some(w), Some(wp)) => {
                    for (out_idx, &src) in perm.iter().enumerate() {
                        assert_eq!(wp.weights().row(out_idx), w.weights().row(src));
                    }
                }
                (None, None) => {}
                _ => panic!("strategies must be consistent about weights"),
            }
        }
    }

    #[test]
    fn fusion_params_are_scene_size_independent() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 29).unwrap();
        let before = params.n_entries();
        for (n, t) in [(2usize, 7usize), (4, 13)] {
            let audio = random_stream(Modality::SpeakerAudio, n, t, config.d_ia, 1000);
            let visual = random_stream(Modality::Visual, n, t, config.d_ia, 1100);
            qa_fusion(&params, &config, 2, 1.0, &audio, &visual).unwrap();
        }
        assert_eq!(params.n_entries(), before);
    }

    #[test]
    fn init_fusion_params_registers_expected_counts() {
        let config = tiny_config();
        let per_block = 2 * 14;
        let mut qa = ParamSet::new();
        init_fusion_params(&mut qa, &config, FusionStrategy::QualityAware, 1).unwrap();
        assert_eq!(qa.n_entries(), config.qa_layers * per_block);
        let mut cross = ParamSet::new();
        init_fusion_params(&mut cross, &config, FusionStrategy::Cross, 1).unwrap();
        assert_eq!(cross.n_entries(), config.qa_layers * per_block + 2);
        let mut concat = ParamSet::new();
        init_fusion_params(&mut concat, &config, FusionStrategy::Concat, 1).unwrap();
        assert_eq!(concat.n_entries(), 2);
        let mut fact = ParamSet::new();
        init_fusion_params(&mut fact, &config, FusionStrategy::Factorized, 1).unwrap();
        assert_eq!(fact.n_entries(), 6);
        let narrow = ModelConfig {
            d_v: 6,
            d_a: 8,
            d_ia: 6,
            d_i: 6,
            heads: 2,
            qa_layers: 1,
            xs_layers: 1,
            ffn_mult: 2,
        };
        let mut bad = ParamSet::new();
        assert!(matches!(
            init_fusion_params(&mut bad, &narrow, FusionStrategy::Factorized, 1),
            Err(FusionError::BadConfig(_))
        ));
    }

    #[test]
    fn qa_fusion_gradients_match_finite_differences() {
        let config = ModelConfig {
            qa_layers: 2,
            ..tiny_config()
        };
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 31).unwrap();
        jitter(&mut params, 32);
        let (n, t, d) = (2, 7, config.d_ia);
        let audio: Vec<Tensor> = (0..n).map(|i| random_tensor(t, d, 1200 + i as u64)).collect();
        let visual: Vec<Tensor> = (0..n).map(|i| random_tensor(t, d, 1300 + i as u64)).collect();
        let names = fuse_param_names(&params);
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = check_params(
            &mut params,
            &name_refs,
            |p| {
                let mut g = Graph::new();
                let a_nodes: Vec<NodeId> = audio.iter().map(|x| g.input(x.clone())).collect();
                let v_nodes: Vec<NodeId> = visual.iter().map(|x| g.input(x.clone())).collect();
                let out = qa_fusion_nodes(&mut g, p, &config, 2, 1.0, &a_nodes, &v_nodes)
                    .map_err(|e| match e {
                        FusionError::Numerics(err) => err,
                        other => panic!("unexpected fusion error: {other}"),
                    })?;
                let mut loss = weighted_scalar_loss(&mut g, out.fused[0], 50);
                for (i, &id) in out.fused.iter().enumerate().skip(1) {
                    let piece = weighted_scalar_loss(&mut g, id, 51 + i as u64);
                    loss = g.add(loss, piece)?;
                }
                Ok((g, loss))
            },
            // Key-projection biases shift every score in an attention row
            // uniformly, which row softmax cancels, so their true gradient
            // is zero and finite differences see only roundoff; the raised
            // floor keeps that noise from registering as error.
            GradCheckOpts {
                step: 1e-6,
                rel_floor: 1e-4,
                ..GradCheckOpts::default()
            },
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} coord {}: {} vs {}",
            report.worst_param,
            report.worst_coord,
            report.worst_tape,
            report.worst_fd
        );
    }

    #[test]
    fn key_projection_bias_gradients_vanish() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 33).unwrap();
        jitter(&mut params, 34);
        let mut graph = Graph::new();
        let a = graph.input(random_tensor(7, config.d_ia, 1250));
        let v = graph.input(random_tensor(7, config.d_ia, 1350));
        let out = qa_fusion_nodes(&mut graph, &params, &config, 2, 1.0, &[a], &[v]).unwrap();
        let loss = weighted_scalar_loss(&mut graph, out.fused[0], 55);
        graph.backward(loss).unwrap();
        let grads = graph.param_grads();
        let bq_peak = grads["fuse.qa.l0.ia.bq"]
            .data()
            .iter()
            .fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(bq_peak > 1e-6, "query bias gradient unexpectedly tiny");
        for name in ["fuse.qa.l0.ia.bk", "fuse.qa.l0.v.bk"] {
            for &g in grads[name].data() {
                assert!(g.abs() < 1e-12, "{name} gradient {g} should cancel");
            }
        }
    }

    #[test]
    fn baseline_concat_keeps_shape() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::Concat, 37).unwrap();
        let audio = random_stream(Modality::SpeakerAudio, 2, 6, config.d_ia, 1400);
        let visual = random_stream(Modality::Visual, 2, 6, config.d_ia, 1500);
        let fused = baseline_concat(&params, &audio, &visual).unwrap();
        assert_eq!(fused.modality(), Modality::Fused);
        assert_eq!(fused.n_speakers(), 2);
        assert_eq!(fused.num_frames(), 6);
        assert_eq!(fused.dim(), config.d_ia);
    }

    #[test]
    fn baseline_concat_gradients_match_finite_differences() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::Concat, 41).unwrap();
        jitter(&mut params, 42);
        let audio = random_tensor(6, config.d_ia, 1600);
        let visual = random_tensor(6, config.d_ia, 1700);
        let report = check_params(
            &mut params,
            &[CONCAT_W, CONCAT_B],
            |p| {
                let mut g = Graph::new();
                let a = g.input(audio.clone());
                let v = g.input(visual.clone());
                let out = concat_fusion_nodes(&mut g, p, &[a], &[v]).map_err(|e| match e {
                    FusionError::Numerics(err) => err,
                    other => panic!("unexpected fusion error: {other}"),
                })?;
                let loss = weighted_scalar_loss(&mut g, out.fused[0], 60);
                Ok((g, loss))
            },
            GradCheckOpts {
                step: 1e-6,
                ..GradCheckOpts::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn baseline_factorized_gates_with_sigmoid_of_bias_at_zero_visual() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::Factorized, 43).unwrap();
        jitter(&mut params, 44);
        let (t, d) = (5, config.d_ia);
        let sub = d / FACTOR_SUBSPACES;
        let audio_in = random_tensor(t, d, 1800);
        let audio =
            EmbeddingStream::new(Modality::SpeakerAudio, vec![audio_in.clone()]).unwrap();
        let visual =
            EmbeddingStream::new(Modality::Visual, vec![Tensor::zeros(&[t, d])]).unwrap();
        let fused = baseline_factorized(&params, &audio, &visual).unwrap();
        let get = |n: &str| params.value(n).unwrap();
        let subspaces = affine_ref(&audio_in, get(FACT_AUDIO_W), get(FACT_AUDIO_B));
        let vis_bias = get(FACT_VIS_B);
        let gate: Vec<f64> = (0..sub)
            .map(|j| 1.0 / (1.0 + (-vis_bias.at(0, j)).exp()))
            .collect();
        let mut gated = vec![0.0; t * d];
        for i in 0..t {
            for block in 0..FACTOR_SUBSPACES {
                for j in 0..sub {
                    gated[i * d + block * sub + j] =
                        gate[j] * subspaces.at(i, block * sub + j);
                }
            }
        }
        let gated = Tensor::from_vec(&[t, d], gated).unwrap();
        let expect = affine_ref(&gated, get(FACT_OUT_W), get(FACT_OUT_B));
        assert!(max_abs_diff(fused.speaker(0).data(), expect.data()) < 1e-12);
    }

    #[test]
    fn baseline_factorized_gradients_match_finite_differences() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::Factorized, 47).unwrap();
        jitter(&mut params, 48);
        let audio = random_tensor(6, config.d_ia, 1900);
        let visual = random_tensor(6, config.d_ia, 2000);
        let names = fuse_param_names(&params);
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = check_params(
            &mut params,
            &name_refs,
            |p| {
                let mut g = Graph::new();
                let a = g.input(audio.clone());
                let v = g.input(visual.clone());
                let out = factorized_fusion_nodes(&mut g, p, &[a], &[v]).map_err(|e| match e {
                    FusionError::Numerics(err) => err,
                    other => panic!("unexpected fusion error: {other}"),
                })?;
                let loss = weighted_scalar_loss(&mut g, out.fused[0], 70);
                Ok((g, loss))
            },
            GradCheckOpts {
                step: 1e-6,
                ..GradCheckOpts::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn baseline_cross_matches_stacked_synced_qa_layers() {
        let config = ModelConfig {
            qa_layers: 2,
            ..tiny_config()
        };
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 53).unwrap();
        init_fusion_params(&mut params, &config, FusionStrategy::Cross, 53).unwrap();
        for layer in 0..config.qa_layers {
            let qa_block = QABlockParams::named(&qa_block_prefix(layer));
            let cross_block = QABlockParams::named(&cross_block_prefix(layer));
            for (stream_from, stream_to) in [
                (&qa_block.audio, &cross_block.audio),
                (&qa_block.visual, &cross_block.visual),
            ] {
                for (src, dst) in stream_from.names().iter().zip(stream_to.names()) {
                    let value = params.value(src).unwrap().clone();
                    *params.value_mut(dst).unwrap() = value;
                }
            }
        }
        let (n, t, d) = (2, 6, config.d_ia);
        let audio = random_stream(Modality::SpeakerAudio, n, t, d, 2100);
        let visual = random_stream(Modality::Visual, n, t, d, 2200);
        let fused = baseline_cross_attention(&params, &config, &audio, &visual).unwrap();

        let mut graph = Graph::new();
        let mut a_nodes: Vec<NodeId> =
            audio.speakers().iter().map(|x| graph.input(x.clone())).collect();
        let mut v_nodes: Vec<NodeId> =
            visual.speakers().iter().map(|x| graph.input(x.clone())).collect();
        let ones: Vec<NodeId> = (0..n)
            .map(|_| graph.input(Tensor::full(&[t, 1], 1.0)))
            .collect();
        for layer in 0..config.qa_layers {
            let block = QABlockParams::named(&qa_block_prefix(layer));
            let out = qa_attention_layer_nodes(
                &mut graph,
                &params,
                &block,
                config.heads,
                &a_nodes,
                &v_nodes,
                &ones,
            )
            .unwrap();
            a_nodes = out.e_ia;
            v_nodes = out.e_v;
        }
        let w = graph.param(&params, CROSS_PROJ_W).unwrap();
        let b = graph.param(&params, CROSS_PROJ_B).unwrap();
        for sp in 0..n {
            let cat = graph.concat_cols(&[a_nodes[sp], v_nodes[sp]]).unwrap();
            let expect = graph.affine(cat, w, b).unwrap();
            let diff = max_abs_diff(fused.speaker(sp).data(), graph.value(expect).data());
            assert!(diff < 1e-10, "speaker {sp} diverges by {diff}");
        }
    }

    #[test]
    fn baseline_cross_attention_rows_sum_to_one() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::Cross, 59).unwrap();
        let block = QABlockParams::named(&cross_block_prefix(0));
        let (t, d) = (7, config.d_ia);
        let mut graph = Graph::new();
        let a = graph.input(random_tensor(t, d, 2300));
        let v = graph.input(random_tensor(t, d, 2400));
        let out = cross_attention_layer_nodes(
            &mut graph,
            &params,
            &block,
            config.heads,
            &[a],
            &[v],
        )
        .unwrap();
        assert_eq!(out.probs.len(), 2 * config.heads);
        for &p in &out.probs {
            let probs = graph.value(p);
            for i in 0..t {
                let sum: f64 = probs.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_strategy_parses_config_names() {
        for strategy in FusionStrategy::ALL {
            assert_eq!(FusionStrategy::parse(strategy.name()).unwrap(), strategy);
        }
        assert!(matches!(
            FusionStrategy::parse("attention"),
            Err(FusionError::BadConfig(_))
        ));
        let spec = FusionSpec::default();
        assert_eq!(spec.strategy, FusionStrategy::QualityAware);
        assert_eq!(spec.sync_window, DEFAULT_SYNC_WINDOW);
        assert!((spec.sync_scale - DEFAULT_SYNC_SCALE).abs() < 1e-15);
        assert!(FusionSpec {
            sync_scale: 0.0,
            ..FusionSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn fusion_ops_validate_stream_shapes() {
        let config = tiny_config();
        let mut params = ParamSet::new();
        init_fusion_params(&mut params, &config, FusionStrategy::QualityAware, 61).unwrap();
        let audio = random_stream(Modality::SpeakerAudio, 2, 6, config.d_ia, 2500);
        let short = random_stream(Modality::Visual, 2, 5, config.d_ia, 2600);
        assert!(matches!(
            qa_fusion(&params, &config, 2, 1.0, &audio, &short),
            Err(FusionError::StreamMismatch(_))
        ));
        let swapped = random_stream(Modality::Visual, 2, 6, config.d_ia, 2700);
        assert!(matches!(
            qa_fusion(&params, &config, 2, 1.0, &swapped.clone(), &swapped),
            Err(FusionError::StreamMismatch(_))
        ));
        let fewer = random_stream(Modality::Visual, 1, 6, config.d_ia, 2800);
        assert!(matches!(
            sync_distance(&audio, &fewer, 2),
            Err(FusionError::StreamMismatch(_))
        ));
    }
}
