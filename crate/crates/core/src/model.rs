//! Per-pixel segmentation network and the warm-up domain discriminator.
//!
//! The segmentation model is split the usual way: an encoder, a feature
//! transform whose output is the alignment feature space, and a single
//! linear classifier on top of it. The feature transform has no output
//! nonlinearity, so f_D features can take either sign.
//!
//! ```text
//! x ─ Linear(D→hidden) ─ ReLU ─ Linear(hidden→E) ─ ReLU      encoder
//!   ─ Linear(E→F)                                            feature transform
//!   ─ Linear(F→C) ─ softmax                                  classifier
//! ```
//!
//! The discriminator maps an `F`-dim feature to one logit through a hidden
//! layer with leaky-ReLU (slope 0.2).

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::synth::LabeledGrid;
use crate::tensor::{Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"CAGM";
const VERSION: u16 = 1;
const KIND_SEGMENTER: u8 = 0;
const KIND_DISCRIMINATOR: u8 = 1;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Input feature dimension `D`.
    pub input: usize,
    pub hidden: usize,
    /// Encoder output `E`.
    pub embed: usize,
    /// Alignment feature dimension `F`.
    pub feature: usize,
    /// Category count `C`.
    pub categories: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input: 8,
            hidden: 32,
            embed: 16,
            feature: 16,
            categories: 6,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.input,
            self.hidden,
            self.embed,
            self.feature,
            self.categories,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!(
                "model dims must be positive: {self:?}"
            )));
        }
        if self.categories < 2 {
            return Err(Error::Config("model needs at least 2 categories".into()));
        }
        Ok(())
    }

    fn layers(&self) -> [(usize, usize); 4] {
        [
            (self.input, self.hidden),
            (self.hidden, self.embed),
            (self.embed, self.feature),
            (self.feature, self.categories),
        ]
    }

    fn as_array(&self) -> [usize; 5] {
        [
            self.input,
            self.hidden,
            self.embed,
            self.feature,
            self.categories,
        ]
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases,
/// drawn layer by layer from one seeded stream.
fn init_layers(layers: &[(usize, usize)], seed: u64, purpose: Purpose) -> Result<Vec<Tensor>> {
    let mut rng = rng::stream(seed, purpose, 0);
    let mut params = Vec::with_capacity(layers.len() * 2);
    for &(fan_in, fan_out) in layers {
        let bound = glorot_bound(fan_in, fan_out);
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        params.push(Tensor::matrix(fan_in, fan_out, w)?.requiring_grad());
        params.push(Tensor::zeros(vec![fan_out])?.requiring_grad());
    }
    Ok(params)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn check_shapes(params: &[Tensor], layers: &[(usize, usize)]) -> Result<()> {
    if params.len() != layers.len() * 2 {
        return Err(Error::Contract(format!(
            "expected {} parameter tensors, got {}",
            layers.len() * 2,
            params.len()
        )));
    }
    for (i, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let w = &params[2 * i];
        let b = &params[2 * i + 1];
        if w.shape() != [fan_in, fan_out] {
            return Err(Error::shape("layer weight", &[fan_in, fan_out], w.shape()));
        }
        if b.shape() != [fan_out] {
            return Err(Error::shape("layer bias", &[fan_out], b.shape()));
        }
    }
    Ok(())
}

/// Parameters recorded on a tape for one pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps tape variables already holding the parameters, in layer order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn bind_params(params: &[Tensor], tape: &mut Tape, trainable: bool) -> Bound {
    let vars = params
        .iter()
        .map(|p| {
            if trainable {
                tape.leaf(p)
            } else {
                tape.constant(p.shape().to_vec(), p.values().to_vec())
                    .expect("parameter shapes are valid")
            }
        })
        .collect();
    Bound { vars }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// Outputs of one segmentation forward pass. `features` is the classifier
/// input itself, not a recomputation.
#[derive(Clone, Copy, Debug)]
pub struct SegOutputs {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    dims: ModelDims,
    params: Vec<Tensor>,
}

impl SegModel {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let params = init_layers(&dims.layers(), seed, Purpose::ModelInit)?;
        Ok(Self { dims, params })
    }

    pub fn from_params(dims: ModelDims, params: Vec<Tensor>) -> Result<Self> {
        dims.validate()?;
        check_shapes(&params, &dims.layers())?;
        let params = params
            .into_iter()
            .map(|p| {
                if p.requires_grad() {
                    p
                } else {
                    p.requiring_grad()
                }
            })
            .collect();
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Classifier weight `[F × C]` and bias `[C]`.
    pub fn classifier_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        let (w, b) = self.params[6..8].split_at_mut(1);
        (&mut w[0], &mut b[0])
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        bind_params(&self.params, tape, trainable)
    }

    /// Forward pass of `input` `[P × D]` with parameters already on the tape.
    pub fn forward_on(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<SegOutputs> {
        match tape.shape(input) {
            [_, d] if *d == self.dims.input => {}
            other => {
                return Err(Error::shape(
                    "model input",
                    &[usize::MAX, self.dims.input],
                    other,
                ))
            }
        }
        let v = &bound.vars;
        let h = linear(tape, input, v[0], v[1])?;
        let h = tape.relu(h);
        let h = linear(tape, h, v[2], v[3])?;
        let h = tape.relu(h);
        let features = linear(tape, h, v[4], v[5])?;
        let logits = linear(tape, features, v[6], v[7])?;
        let probs = tape.softmax(logits)?;
        Ok(SegOutputs {
            features,
            logits,
            probs,
        })
    }

    /// Records `grid` as a constant `[H·W × D]` input.
    pub fn input_var(&self, tape: &mut Tape, grid_features: Vec<f64>) -> Result<Var> {
        let d = self.dims.input;
        if !grid_features.len().is_multiple_of(d) {
            return Err(Error::shape("model input", &[d], &[grid_features.len()]));
        }
        tape.constant(vec![grid_features.len() / d, d], grid_features)
    }

    /// Untracked forward over a flat `[P × D]` feature buffer, returning
    /// `(features [P × F], probabilities [P × C])`.
    pub fn forward_features(&self, input: Vec<f64>) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = self.input_var(&mut tape, input)?;
        let out = self.forward_on(&mut tape, &bound, x)?;
        Ok((tape.to_tensor(out.features), tape.to_tensor(out.probs)))
    }

    pub fn forward(&self, grid: &LabeledGrid) -> Result<(Tensor, Tensor)> {
        if grid.feature_dim() != self.dims.input {
            return Err(Error::shape(
                "model input",
                &[self.dims.input],
                &[grid.feature_dim()],
            ));
        }
        self.forward_features(grid.features_f64())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        encode(KIND_SEGMENTER, &self.dims.as_array(), &self.params)?.write_to(path)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(encode(KIND_SEGMENTER, &self.dims.as_array(), &self.params)?.into_inner())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, params) = decode(bytes, KIND_SEGMENTER, 5)?;
        let dims = ModelDims {
            input: dims[0],
            hidden: dims[1],
            embed: dims[2],
            feature: dims[3],
            categories: dims[4],
        };
        Self::from_params(dims, params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorDims {
    pub feature: usize,
    pub hidden: usize,
}

impl DiscriminatorDims {
    fn layers(&self) -> [(usize, usize); 2] {
        [(self.feature, self.hidden), (self.hidden, 1)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    dims: DiscriminatorDims,
    params: Vec<Tensor>,
}

impl Discriminator {
    pub fn init(dims: DiscriminatorDims, seed: u64) -> Result<Self> {
        if dims.feature == 0 || dims.hidden == 0 {
            return Err(Error::Config(format!(
                "discriminator dims must be positive: {dims:?}"
            )));
        }
        let params = init_layers(&dims.layers(), seed, Purpose::DiscriminatorInit)?;
        Ok(Self { dims, params })
    }

    pub fn from_params(dims: DiscriminatorDims, params: Vec<Tensor>) -> Result<Self> {
        check_shapes(&params, &dims.layers())?;
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> DiscriminatorDims {
        self.dims
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        bind_params(&self.params, tape, trainable)
    }

    /// One domain logit per row of `features` `[P × F]`, shape `[P × 1]`.
    pub fn logits_on(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let v = &bound.vars;
        let h = linear(tape, features, v[0], v[1])?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        linear(tape, h, v[2], v[3])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        encode(
            KIND_DISCRIMINATOR,
            &[self.dims.feature, self.dims.hidden],
            &self.params,
        )?
        .write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (dims, params) = decode(&read_file(path)?, KIND_DISCRIMINATOR, 2)?;
        Self::from_params(
            DiscriminatorDims {
                feature: dims[0],
                hidden: dims[1],
            },
            params,
        )
    }
}

// Checkpoint layout, little-endian:
//   magic b"CAGM", version u16, kind u8, ndims u8, dims u32 × ndims,
//   nparams u32, then per tensor: rank u8, shape u32 × rank, f64 × numel.
fn encode(kind: u8, dims: &[usize], params: &[Tensor]) -> Result<ByteWriter> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u8(kind);
    w.u8(dims.len() as u8);
    for &d in dims {
        w.len_u32(d)?;
    }
    w.len_u32(params.len())?;
    for p in params {
        w.u8(p.shape().len() as u8);
        for &s in p.shape() {
            w.len_u32(s)?;
        }
        for &v in p.values() {
            w.f64(v);
        }
    }
    Ok(w)
}

fn decode(bytes: &[u8], kind: u8, ndims: usize) -> Result<(Vec<usize>, Vec<Tensor>)> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC, VERSION)?;
    let found = r.u8()?;
    if found != kind {
        return Err(Error::Version(format!(
            "checkpoint kind {found}, expected {kind}"
        )));
    }
    let n = r.u8()? as usize;
    if n != ndims {
        return Err(r.parse_error(format!("{n} header dims, expected {ndims}")));
    }
    let dims = (0..n).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
    let count = r.usize32()?;
    let mut params = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        r.expect_remaining(numel.saturating_mul(8), "parameter values")?;
        let values = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let at = r.offset();
        let t = Tensor::new(shape, values).map_err(|e| Error::Parse {
            offset: at,
            reason: e.to_string(),
        })?;
        params.push(t.requiring_grad());
    }
    r.finish()?;
    Ok((dims, params))
}

/// Per-row argmax with ties going to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted category for every pixel of a `[P × C]` probability tensor.
pub fn predict_labels(probs: &Tensor) -> Result<Vec<usize>> {
    let (_, c) = probs.dims2()?;
    Ok(probs.values().chunks(c).map(argmax).collect())
}
