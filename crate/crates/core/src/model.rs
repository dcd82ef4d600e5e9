//! Learnable state of one participant: MLP extractor, class embeddings,
//! cosine adapter and the negative-selection gate, with hand-written
//! forward/backward passes and a flat little-endian serialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, normalize_backward, Mat, Rng, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden: vec![64, 64],
            embed_dim: 32,
            activation: Activation::Tanh,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("extractor dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// One affine layer; `weight` is `(in × out)` so the forward pass is `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros(input, output),
            bias: vec![0.0; output],
        }
    }
}

/// Feature extractor. The activation is applied after every layer except
/// the last, which is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl ExtractorParams {
    pub fn init(cfg: &ExtractorConfig, rng: &mut Rng) -> Self {
        let dims = Self::dims(cfg);
        let layers = dims
            .windows(2)
            .map(|w| {
                let sigma = (1.0 / w[0] as f64).sqrt();
                Dense {
                    weight: Mat::gaussian(rng, w[0], w[1], sigma),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self {
            layers,
            activation: cfg.activation,
        }
    }

    pub fn zeros(cfg: &ExtractorConfig) -> Self {
        let dims = Self::dims(cfg);
        Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            activation: cfg.activation,
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            activation: self.activation,
        }
    }

    fn dims(cfg: &ExtractorConfig) -> Vec<usize> {
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.embed_dim);
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    /// Layers in order, each as row-major weight followed by bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat) onto this parameter layout.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "ExtractorParams::with_flat",
                self.num_params(),
                flat.len(),
            ));
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in &mut out.layers {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(out)
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.weight.data_mut().iter_mut().for_each(&mut f);
            l.bias.iter_mut().for_each(&mut f);
        }
    }

    /// Visit `(param, grad, buffer)` triples in flat order.
    pub fn zip_update(
        &mut self,
        grads: &ExtractorParams,
        buf: &mut ExtractorParams,
        mut f: impl FnMut(&mut f64, f64, &mut f64),
    ) {
        for ((l, g), b) in self.layers.iter_mut().zip(&grads.layers).zip(&mut buf.layers) {
            for ((p, &gv), bv) in l
                .weight
                .data_mut()
                .iter_mut()
                .zip(g.weight.data())
                .zip(b.weight.data_mut().iter_mut())
            {
                f(p, gv, bv);
            }
            for ((p, &gv), bv) in l.bias.iter_mut().zip(&g.bias).zip(&mut b.bias) {
                f(p, gv, bv);
            }
        }
    }

    /// Hash of the exact parameter bits, used to pair caches with params.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for x in l.weight.data().iter().chain(&l.bias) {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3).rotate_left(17);
            }
        }
        h
    }
}

/// Activations retained from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    inputs: Mat,
    hidden: Vec<Mat>,
}

#[derive(Debug, Clone)]
pub struct Extracted {
    pub features: Mat,
    pub cache: ForwardCache,
}

/// Features plus the local class index of each row.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub features: Mat,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(features: Mat, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape("EmbeddingBatch", features.rows(), labels.len()));
        }
        Ok(Self { features, labels })
    }
}

fn affine(x: &Mat, layer: &Dense) -> Result<Mat> {
    let mut out = x.matmul(&layer.weight)?;
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(&layer.bias) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn extract(params: &ExtractorParams, inputs: &Mat) -> Result<Extracted> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::shape("extract", params.input_dim(), inputs.cols()));
    }
    let n = params.layers.len();
    let mut hidden = Vec::with_capacity(n.saturating_sub(1));
    let mut x = inputs.clone();
    for (li, layer) in params.layers.iter().enumerate() {
        let mut y = affine(&x, layer)?;
        if li + 1 < n {
            y.data_mut().iter_mut().for_each(|v| *v = params.activation.apply(*v));
            hidden.push(y.clone());
        }
        x = y;
    }
    Ok(Extracted {
        features: x,
        cache: ForwardCache {
            fingerprint: params.fingerprint(),
            inputs: inputs.clone(),
            hidden,
        },
    })
}

/// Forward pass without a cache.
pub fn embed(params: &ExtractorParams, inputs: &Mat) -> Result<Mat> {
    Ok(extract(params, inputs)?.features)
}

/// Gradients w.r.t. every extractor parameter and w.r.t. the inputs.
pub fn extract_backward(
    params: &ExtractorParams,
    cache: &ForwardCache,
    grad_out: &Mat,
) -> Result<(ExtractorParams, Mat)> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache);
    }
    let batch = cache.inputs.rows();
    if grad_out.shape() != (batch, params.embed_dim()) {
        return Err(Error::shape(
            "extract_backward",
            format!("{}x{}", batch, params.embed_dim()),
            format!("{}x{}", grad_out.rows(), grad_out.cols()),
        ));
    }
    let mut grads = params.zeros_like();
    let mut delta = grad_out.clone();
    for li in (0..params.layers.len()).rev() {
        let input = if li == 0 { &cache.inputs } else { &cache.hidden[li - 1] };
        grads.layers[li].weight = input.t_matmul(&delta)?;
        let gb = &mut grads.layers[li].bias;
        for r in delta.iter_rows() {
            for (g, d) in gb.iter_mut().zip(r) {
                *g += d;
            }
        }
        let mut upstream = delta.matmul_t(&params.layers[li].weight)?;
        if li > 0 {
            for (u, y) in upstream.data_mut().iter_mut().zip(input.data()) {
                *u *= params.activation.derivative_from_output(*y);
            }
        }
        delta = upstream;
    }
    Ok((grads, delta))
}

/// Per-class adapter directions and the learned bias of the adapter loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub rows: Mat,
    pub bias: f64,
}

/// Unit-normalized Gaussian rows.
pub fn unit_rows(rng: &mut Rng, rows: usize, dim: usize) -> Mat {
    let mut m = Mat::gaussian(rng, rows, dim, 1.0);
    for i in 0..rows {
        let n = numkit::norm(m.row(i)).max(NORM_EPS);
        m.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    m
}

impl AdapterParams {
    pub fn init(rng: &mut Rng, classes: usize, dim: usize) -> Self {
        Self {
            rows: unit_rows(rng, classes, dim),
            bias: 0.0,
        }
    }
}

/// Cosine of each normalized feature against each normalized adapter row;
/// `batch × classes`.
pub fn adapter_scores(theta: &AdapterParams, feats: &Mat) -> Result<Mat> {
    if feats.cols() != theta.rows.cols() {
        return Err(Error::shape("adapter_scores", theta.rows.cols(), feats.cols()));
    }
    let (f, _) = feats.normalized_rows()?;
    let (t, _) = theta.rows.normalized_rows()?;
    f.matmul_t(&t)
}

/// Chain a gradient on adapter scores back to the raw adapter rows.
pub fn adapter_scores_backward(theta: &AdapterParams, feats: &Mat, grad_scores: &Mat) -> Result<Mat> {
    if grad_scores.shape() != (feats.rows(), theta.rows.rows()) {
        return Err(Error::shape(
            "adapter_scores_backward",
            format!("{}x{}", feats.rows(), theta.rows.rows()),
            format!("{}x{}", grad_scores.rows(), grad_scores.cols()),
        ));
    }
    let (f, _) = feats.normalized_rows()?;
    let (t, norms) = theta.rows.normalized_rows()?;
    // d score[b, c] / d t̂_c = f̂_b
    let grad_unit = grad_scores.t_matmul(&f)?;
    let mut out = Mat::zeros(t.rows(), t.cols());
    for c in 0..t.rows() {
        let g = normalize_backward(t.row(c), norms[c], grad_unit.row(c));
        out.row_mut(c).copy_from_slice(&g);
    }
    Ok(out)
}

/// Unconstrained gate pre-activations ψ; the exposed gate is `sigmoid(ψ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub psi: Vec<f64>,
}

/// Bounds keeping φ strictly inside (0, 1) in floating point.
const GATE_LO: f64 = f64::MIN_POSITIVE;
const GATE_HI: f64 = 1.0 - f64::EPSILON / 2.0;

impl GateParams {
    pub fn zeros(g: usize) -> Self {
        Self { psi: vec![0.0; g] }
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }
}

pub fn gate_values(gate: &GateParams) -> Vec<f64> {
    gate.psi
        .iter()
        .map(|&p| numkit::sigmoid(p).clamp(GATE_LO, GATE_HI))
        .collect()
}

/// `ln φ` computed directly from ψ.
pub fn log_gate(psi: f64) -> f64 {
    -numkit::softplus(-psi)
}

/// Normalized mean public-class features, one unit row per public identity
/// (`G × d`). Rebuilt by the server every round.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalRepresentations {
    rows: Mat,
}

impl GlobalRepresentations {
    /// Rows are normalized on construction.
    pub fn new(raw: &Mat) -> Result<Self> {
        Ok(Self {
            rows: raw.normalized_rows()?.0,
        })
    }

    pub fn matrix(&self) -> &Mat {
        &self.rows
    }

    pub fn count(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

/// Everything a client owns. Only `extractor` ever leaves the client.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: ExtractorParams,
    pub class_embeddings: Mat,
    pub adapter: AdapterParams,
    pub gate: GateParams,
}

const MODEL_MAGIC: &[u8; 4] = b"FRMP";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse("truncated parameter stream".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| {
                let mut a = [0u8; 8];
                a.copy_from_slice(c);
                f64::from_le_bytes(a)
            })
            .collect())
    }
}

fn encode_extractor_header(out: &mut Vec<u8>, ex: &ExtractorParams) {
    put_u32(out, ex.layers.len());
    out.push(match ex.activation {
        Activation::Tanh => 0,
        Activation::Identity => 1,
    });
    for (r, c) in ex.layer_shapes() {
        put_u32(out, r);
        put_u32(out, c);
    }
}

fn decode_extractor_header(rd: &mut Reader<'_>) -> Result<ExtractorParams> {
    let n = rd.u32()?;
    let activation = match rd.take(1)?[0] {
        0 => Activation::Tanh,
        1 => Activation::Identity,
        t => return Err(Error::Parse(format!("unknown activation tag {t}"))),
    };
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let (r, c) = (rd.u32()?, rd.u32()?);
        layers.push(Dense::zeros(r, c));
    }
    for w in layers.windows(2) {
        if w[0].weight.cols() != w[1].weight.rows() {
            return Err(Error::Parse("inconsistent layer shapes".into()));
        }
    }
    Ok(ExtractorParams { layers, activation })
}

impl ModelParams {
    /// Header (magic, layer shapes, z/θ/ψ shapes) followed by one LE f64
    /// stream: extractor layers, z, θ rows, θ bias, ψ.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        encode_extractor_header(&mut out, &self.extractor);
        put_u32(&mut out, self.class_embeddings.rows());
        put_u32(&mut out, self.class_embeddings.cols());
        put_u32(&mut out, self.adapter.rows.rows());
        put_u32(&mut out, self.adapter.rows.cols());
        put_u32(&mut out, self.gate.len());
        put_f64s(&mut out, &self.extractor.to_flat());
        put_f64s(&mut out, self.class_embeddings.data());
        put_f64s(&mut out, self.adapter.rows.data());
        put_f64s(&mut out, &[self.adapter.bias]);
        put_f64s(&mut out, &self.gate.psi);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf, pos: 0 };
        if rd.take(4)? != MODEL_MAGIC {
            return Err(Error::Parse("bad model magic".into()));
        }
        let shell = decode_extractor_header(&mut rd)?;
        let (zr, zc) = (rd.u32()?, rd.u32()?);
        let (tr, tc) = (rd.u32()?, rd.u32()?);
        let g = rd.u32()?;
        let extractor = shell.with_flat(&rd.f64s(shell.num_params())?)?;
        let class_embeddings = Mat::from_vec(zr, zc, rd.f64s(zr * zc)?)?;
        let rows = Mat::from_vec(tr, tc, rd.f64s(tr * tc)?)?;
        let bias = rd.f64s(1)?[0];
        let psi = rd.f64s(g)?;
        if rd.pos != buf.len() {
            return Err(Error::Parse("trailing bytes after parameter stream".into()));
        }
        Ok(Self {
            extractor,
            class_embeddings,
            adapter: AdapterParams { rows, bias },
            gate: GateParams { psi },
        })
    }
}

const UPLOAD_MAGIC: &[u8; 4] = b"FRUP";

/// Wire form of a client upload / server checkpoint: magic, round index,
/// extractor header, then the extractor parameters as LE f64.
pub fn encode_extractor(round: u64, ex: &ExtractorParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + ex.num_params() * 8);
    out.extend_from_slice(UPLOAD_MAGIC);
    out.extend_from_slice(&round.to_le_bytes());
    encode_extractor_header(&mut out, ex);
    put_f64s(&mut out, &ex.to_flat());
    out
}

pub fn decode_extractor(buf: &[u8]) -> Result<(u64, ExtractorParams)> {
    let mut rd = Reader { buf, pos: 0 };
    if rd.take(4)? != UPLOAD_MAGIC {
        return Err(Error::Parse("bad upload magic".into()));
    }
    let round = rd.u64()?;
    let shell = decode_extractor_header(&mut rd)?;
    let ex = shell.with_flat(&rd.f64s(shell.num_params())?)?;
    if rd.pos != buf.len() {
        return Err(Error::Parse("trailing bytes after upload".into()));
    }
    Ok((round, ex))
}
