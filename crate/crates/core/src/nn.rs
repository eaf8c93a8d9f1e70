//! Map networks over a flat parameter vector.
//!
//! Every architecture stores its weights in one `Vec<f64>`; the forward pass
//! takes slices of it as tape views so a single backward sweep yields the
//! whole gradient in the same layout.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Initial negative-side slope of every PReLU layer.
pub const PRELU_INIT_SLOPE: f64 = -0.25;

const CHECKPOINT_MAGIC: &[u8; 12] = b"DPOT-MAPNET\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Rows evaluated per tape during inference.
const INFERENCE_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has {got} columns, network expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("parameter vector has {got} entries, architecture needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("non-finite gradient at optimizer step {step} in {layer}")]
    NonFiniteGradient { step: u64, layer: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    ModifiedMlp,
    ResNet,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Mlp => "mlp",
            ArchKind::ModifiedMlp => "modified-mlp",
            ArchKind::ResNet => "resnet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mlp" => Some(ArchKind::Mlp),
            "modified-mlp" => Some(ArchKind::ModifiedMlp),
            "resnet" => Some(ArchKind::ResNet),
            _ => None,
        }
    }

    fn code(self) -> u64 {
        match self {
            ArchKind::Mlp => 0,
            ArchKind::ModifiedMlp => 1,
            ArchKind::ResNet => 2,
        }
    }

    fn from_code(c: u64) -> Option<Self> {
        match c {
            0 => Some(ArchKind::Mlp),
            1 => Some(ArchKind::ModifiedMlp),
            2 => Some(ArchKind::ResNet),
            _ => None,
        }
    }
}

/// Shape of a map network.
///
/// For the two MLPs `depth` counts hidden layers. For the ResNet, `depth` is
/// the number of residual blocks and `block_layers` the dense layers inside
/// each block; `block_layers` is ignored otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub d_in: usize,
    pub d_out: usize,
    pub width: usize,
    pub depth: usize,
    pub block_layers: usize,
}

impl ArchSpec {
    pub fn mlp(d_in: usize, d_out: usize, width: usize, depth: usize) -> Self {
        Self {
            kind: ArchKind::Mlp,
            d_in,
            d_out,
            width,
            depth,
            block_layers: 0,
        }
    }

    pub fn modified_mlp(d_in: usize, d_out: usize, width: usize, depth: usize) -> Self {
        Self {
            kind: ArchKind::ModifiedMlp,
            d_in,
            d_out,
            width,
            depth,
            block_layers: 0,
        }
    }

    pub fn resnet(d_in: usize, d_out: usize, width: usize, blocks: usize, block_layers: usize) -> Self {
        Self {
            kind: ArchKind::ResNet,
            d_in,
            d_out,
            width,
            depth: blocks,
            block_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::Architecture(m.to_string()));
        if self.d_in == 0 || self.d_out == 0 || self.width == 0 {
            return bad("dimensions and width must be positive");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.kind == ArchKind::ResNet && self.block_layers == 0 {
            return bad("resnet blocks need at least one layer");
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (i, o, w, k) = (self.d_in, self.d_out, self.width, self.depth);
        let head = w * o + o;
        match self.kind {
            ArchKind::Mlp => (i * w + w) + (k - 1) * (w * w + w) + head,
            ArchKind::ModifiedMlp => 3 * (i * w + w) + (k - 1) * (w * w + w) + head,
            ArchKind::ResNet => (i * w + w) + k * self.block_layers * (w * w + w + 1) + head,
        }
    }
}

/// A named slice of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Xavier fan dimensions, or `None` for biases and slopes.
    fan: Option<(usize, usize)>,
    init: f64,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default)]
struct LayoutBuilder {
    slots: Vec<Slot>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, fan: Option<(usize, usize)>, init: f64) -> usize {
        let idx = self.slots.len();
        let len: usize = shape.iter().product();
        self.slots.push(Slot {
            name,
            offset: self.offset,
            shape,
            fan,
            init,
        });
        self.offset += len;
        idx
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize) -> (usize, usize) {
        let w = self.push(format!("{name}.weight"), vec![n_in, n_out], Some((n_in, n_out)), 0.0);
        let b = self.push(format!("{name}.bias"), vec![1, n_out], None, 0.0);
        (w, b)
    }
}

fn layout(spec: &ArchSpec) -> Vec<Slot> {
    let mut b = LayoutBuilder::default();
    let (i, o, w) = (spec.d_in, spec.d_out, spec.width);
    match spec.kind {
        ArchKind::Mlp => {
            for l in 0..spec.depth {
                b.dense(&format!("hidden{l}"), if l == 0 { i } else { w }, w);
            }
        }
        ArchKind::ModifiedMlp => {
            b.dense("gate_u", i, w);
            b.dense("gate_v", i, w);
            for l in 0..spec.depth {
                b.dense(&format!("hidden{l}"), if l == 0 { i } else { w }, w);
            }
        }
        ArchKind::ResNet => {
            b.dense("input", i, w);
            for blk in 0..spec.depth {
                for l in 0..spec.block_layers {
                    let name = format!("block{blk}.layer{l}");
                    b.dense(&name, w, w);
                    b.push(format!("{name}.slope"), vec![1], None, PRELU_INIT_SLOPE);
                }
            }
        }
    }
    b.dense("output", w, o);
    b.slots
}

/// Xavier (Glorot) normal initialisation: entries drawn from
/// `N(0, σ²)` with `σ = 1/√((n_in + n_out)/2)`.
pub fn xavier_init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Tensor {
    let sigma = xavier_sigma(n_in, n_out);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let data = (0..n_in * n_out).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(n_in, n_out, data).expect("xavier shape")
}

pub fn xavier_sigma(n_in: usize, n_out: usize) -> f64 {
    1.0 / ((n_in + n_out) as f64 / 2.0).sqrt()
}

/// A parameterised map `T_θ: R^{d_in} → R^{d_out}`.
///
/// Conditional networks take the condition as trailing input columns, see
/// [`crate::batch::append_condition`].
#[derive(Debug, Clone, PartialEq)]
pub struct MapNetwork {
    spec: ArchSpec,
    slots: Vec<Slot>,
    theta: Vec<f64>,
}

impl MapNetwork {
    /// Xavier-initialised weights, zero biases, PReLU slopes at
    /// [`PRELU_INIT_SLOPE`].
    pub fn new<R: Rng + ?Sized>(spec: ArchSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let slots = layout(&spec);
        let mut theta = Vec::with_capacity(spec.param_count());
        for s in &slots {
            match s.fan {
                Some((n_in, n_out)) => theta.extend(xavier_init(n_in, n_out, rng).into_data()),
                None => theta.extend(std::iter::repeat_n(s.init, s.len())),
            }
        }
        Ok(Self { spec, slots, theta })
    }

    pub fn from_params(spec: ArchSpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let slots = layout(&spec);
        let expected: usize = slots.iter().map(Slot::len).sum();
        if theta.len() != expected {
            return Err(NnError::ParamCount {
                expected,
                got: theta.len(),
            });
        }
        Ok(Self { spec, slots, theta })
    }

    /// Zeroes the output projection weights, so the initial map is the
    /// constant output bias. Avoids starting from a randomly oriented
    /// (possibly reflected) linear map that a frozen plan can lock in.
    pub fn zero_output_weights(&mut self) {
        if let Some(s) = self.slots.iter().find(|s| s.name == "output.weight") {
            let (a, b) = (s.offset, s.offset + s.len());
            self.theta[a..b].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Name of the slot holding parameter `index`.
    pub fn layer_of(&self, index: usize) -> String {
        self.slots
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len())
            .map(|s| s.name.clone())
            .unwrap_or_else(|| format!("param[{index}]"))
    }

    /// Records `θ` on the tape as a trainable leaf.
    pub fn param_var(&self, tape: &mut Tape) -> Var {
        tape.param(Tensor::vector(self.theta.clone()))
    }

    /// Records `θ` on the tape as fixed data.
    pub fn const_var(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::vector(self.theta.clone()))
    }

    fn view(&self, tape: &mut Tape, theta: Var, idx: usize) -> Result<Var> {
        let s = &self.slots[idx];
        Ok(tape.view(theta, s.offset, &s.shape)?)
    }

    fn dense(&self, tape: &mut Tape, theta: Var, x: Var, idx: usize) -> Result<Var> {
        let w = self.view(tape, theta, idx)?;
        let b = self.view(tape, theta, idx + 1)?;
        let xw = tape.matmul(x, w)?;
        Ok(tape.add_row_bias(xw, b)?)
    }

    /// Forward pass recorded on `tape`, with `theta` from [`Self::param_var`]
    /// or [`Self::const_var`] and `x` an `N × d_in` node.
    pub fn forward_on(&self, tape: &mut Tape, theta: Var, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if tape.value(x).shape().len() != 2 || cols != self.spec.d_in {
            return Err(NnError::Dimension {
                expected: self.spec.d_in,
                got: cols,
            });
        }
        match self.spec.kind {
            ArchKind::Mlp => self.forward_mlp(tape, theta, x),
            ArchKind::ModifiedMlp => self.forward_modified_mlp(tape, theta, x),
            ArchKind::ResNet => self.forward_resnet(tape, theta, x),
        }
    }

    fn forward_mlp(&self, tape: &mut Tape, theta: Var, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.spec.depth {
            let z = self.dense(tape, theta, h, 2 * l)?;
            h = tape.relu(z)?;
        }
        self.dense(tape, theta, h, 2 * self.spec.depth)
    }

    /// `U` and `V` come from the network input and are shared by every hidden
    /// layer; `Z` comes from the running hidden state.
    fn forward_modified_mlp(&self, tape: &mut Tape, theta: Var, x: Var) -> Result<Var> {
        let u = self.dense(tape, theta, x, 0)?;
        let u = tape.relu(u)?;
        let v = self.dense(tape, theta, x, 2)?;
        let v = tape.relu(v)?;
        let mut h = x;
        for l in 0..self.spec.depth {
            let z = self.dense(tape, theta, h, 4 + 2 * l)?;
            let z = tape.relu(z)?;
            let zu = tape.mul(z, u)?;
            let one_minus_z = tape.affine(z, -1.0, 1.0)?;
            let zv = tape.mul(one_minus_z, v)?;
            h = tape.add(zu, zv)?;
        }
        self.dense(tape, theta, h, 4 + 2 * self.spec.depth)
    }

    fn forward_resnet(&self, tape: &mut Tape, theta: Var, x: Var) -> Result<Var> {
        let mut h = self.dense(tape, theta, x, 0)?;
        let mut idx = 2;
        for _ in 0..self.spec.depth {
            let mut inner = h;
            for _ in 0..self.spec.block_layers {
                let z = self.dense(tape, theta, inner, idx)?;
                let slope = self.view(tape, theta, idx + 2)?;
                inner = tape.prelu(z, slope)?;
                idx += 3;
            }
            h = tape.add(h, inner)?;
        }
        self.dense(tape, theta, h, idx)
    }

    /// Inference on an `N × d_in` matrix, evaluated in row chunks.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.spec.d_in {
            return Err(NnError::Dimension {
                expected: self.spec.d_in,
                got: x.cols(),
            });
        }
        let mut parts = Vec::with_capacity(x.rows().div_ceil(INFERENCE_CHUNK));
        let mut start = 0;
        while start < x.rows() {
            let end = (start + INFERENCE_CHUNK).min(x.rows());
            let mut tape = Tape::new();
            let theta = self.const_var(&mut tape);
            let xv = tape.constant(x.slice_rows(start, end));
            let y = self.forward_on(&mut tape, theta, xv)?;
            parts.push(tape.value(y).clone());
            start = end;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.spec.d_out]));
        }
        Ok(Tensor::vstack(&parts)?)
    }

    /// Forward pass on a single point.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, x.len(), x.to_vec()).map_err(NnError::from)?;
        Ok(self.forward(&t)?.into_data())
    }

    /// Adam update of `θ` from a gradient in the same layout.
    pub fn adam_step(&mut self, state: &mut AdamState, grad: &[f64]) -> Result<()> {
        let names = self.slots.clone();
        state.step(&mut self.theta, grad, |i| {
            names
                .iter()
                .find(|s| i >= s.offset && i < s.offset + s.len())
                .map(|s| s.name.clone())
                .unwrap_or_else(|| format!("param[{i}]"))
        })
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let s = &self.spec;
        let header = [
            s.kind.code(),
            s.d_in as u64,
            s.d_out as u64,
            s.width as u64,
            s.depth as u64,
            s.block_layers as u64,
            self.theta.len() as u64,
        ];
        for h in header {
            w.write_all(&h.to_le_bytes())?;
        }
        for p in &self.theta {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 12];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut next = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let kind = ArchKind::from_code(next()?).ok_or_else(|| NnError::Checkpoint("unknown architecture".into()))?;
        let spec = ArchSpec {
            kind,
            d_in: next()? as usize,
            d_out: next()? as usize,
            width: next()? as usize,
            depth: next()? as usize,
            block_layers: next()? as usize,
        };
        spec.validate()?;
        let n = next()? as usize;
        if n != spec.param_count() {
            return Err(NnError::ParamCount {
                expected: spec.param_count(),
                got: n,
            });
        }
        let mut theta = Vec::with_capacity(n);
        for _ in 0..n {
            theta.push(f64::from_bits(next()?));
        }
        Self::from_params(spec, theta)
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Defaults: lr 1e-3, β = (0.9, 0.999), ε = 1e-8.
    pub fn new(n: usize) -> Self {
        Self::with_lr(n, 1e-3)
    }

    pub fn with_lr(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update in place. A non-finite gradient entry aborts before any
    /// parameter changes; `layer_of` names the offending entry.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], layer_of: impl Fn(usize) -> String) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(NnError::ParamCount {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient {
                step: self.t + 1,
                layer: layer_of(i),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
