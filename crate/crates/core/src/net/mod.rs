//! The SDF network: a fully connected MLP with input skip connections.
//!
//! [`MlpParams::forward_tape`] pushes the value and its three input
//! tangents (the Jacobian columns `∂/∂q_k`) through every layer together.
//! [`MlpParams::backward_tape`] is one reverse sweep over that augmented
//! computation, so losses that use `∇_q f` get exact parameter gradients,
//! mixed `∂²f/∂θ∂q` terms included.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdamSnapshot, Checkpoint, CHECKPOINT_MAGIC};

use crate::geom::{self, Vec3};
use crate::pointcloud::SyntheticShape;
use crate::rng;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

/// Radius of the sphere a geometrically initialized network starts from.
pub const GEOMETRIC_INIT_RADIUS: f64 = 0.5;

/// Below this input-gradient norm the pull direction is undefined.
pub const GRAD_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Softplus { beta: f64 },
}

impl Activation {
    #[inline]
    fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Activation::Softplus { beta } => {
                let t = beta * z;
                let s = 1.0 / (1.0 + (-t).exp());
                let v = if t > 30.0 { z } else { t.exp().ln_1p() / beta };
                (v, s, beta * s * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Geometric,
    Uniform,
}

/// `relu` or `softplus:BETA`.
impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("relu"),
            Activation::Softplus { beta } => write!(f, "softplus:{beta}"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "relu" {
            return Ok(Activation::Relu);
        }
        if let Some(b) = t.strip_prefix("softplus") {
            let beta = match b.strip_prefix(':') {
                Some(v) => v.parse().map_err(|_| Error::InvalidArgument(format!("bad softplus beta in {s:?}")))?,
                None if b.is_empty() => 100.0,
                None => return Err(Error::InvalidArgument(format!("unknown activation {s:?}"))),
            };
            return Ok(Activation::Softplus { beta });
        }
        Err(Error::InvalidArgument(format!("unknown activation {s:?} (expected relu or softplus:BETA)")))
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Geometric => "geometric",
            InitScheme::Uniform => "uniform",
        })
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "geometric" => Ok(InitScheme::Geometric),
            "uniform" => Ok(InitScheme::Uniform),
            _ => Err(Error::InvalidArgument(format!("unknown init scheme {s:?} (expected geometric or uniform)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Number of linear layers, output layer included.
    pub depth: usize,
    pub width: usize,
    /// Layers whose input is `[h, q] / √2`.
    pub skip_layers: Vec<usize>,
    pub activation: Activation,
    pub init: InitScheme,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 256,
            skip_layers: vec![4],
            activation: Activation::Relu,
            init: InitScheme::Geometric,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!("net.depth must be >= 2, got {}", self.depth)));
        }
        if self.width < 1 {
            return Err(Error::InvalidArgument("net.width must be >= 1".into()));
        }
        if let Some(s) = self.skip_layers.iter().find(|&&s| s < 1 || s >= self.depth) {
            return Err(Error::InvalidArgument(format!(
                "net.skip_layers entry {s} outside [1, {}]",
                self.depth - 1
            )));
        }
        if let Activation::Softplus { beta } = self.activation {
            if !(beta > 0.0) {
                return Err(Error::InvalidArgument("softplus beta must be > 0".into()));
            }
        }
        Ok(())
    }

    fn layout(&self) -> Vec<LayerShape> {
        let mut out = Vec::with_capacity(self.depth);
        let mut offset = 0;
        for l in 0..self.depth {
            let base = if l == 0 { 3 } else { self.width };
            let n_in = if self.skip_layers.contains(&l) { base + 3 } else { base };
            let n_out = if l + 1 == self.depth { 1 } else { self.width };
            out.push(LayerShape {
                n_in,
                n_out,
                skip: l > 0 && self.skip_layers.contains(&l),
                w_off: offset,
                b_off: offset + n_in * n_out,
            });
            offset += n_in * n_out + n_out;
        }
        out
    }

    pub fn num_weights(&self) -> usize {
        self.layout().iter().map(|l| l.n_in * l.n_out + l.n_out).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    n_in: usize,
    n_out: usize,
    skip: bool,
    w_off: usize,
    b_off: usize,
}

/// All trainable state: layer weights (row-major `W` then `b`, layer by
/// layer, in one flat buffer) and the two loss weights of the combined
/// objective.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    config: NetConfig,
    layout: Vec<LayerShape>,
    pub values: Vec<f64>,
    pub loss_weights: [f64; 2],
}

/// Gradients congruent with [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub values: Vec<f64>,
    pub loss_weights: [f64; 2],
}

impl ParamGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            values: vec![0.0; params.values.len()],
            loss_weights: [0.0; 2],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.loss_weights[0] += other.loss_weights[0];
        self.loss_weights[1] += other.loss_weights[1];
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
        self.loss_weights[0] *= s;
        self.loss_weights[1] *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(&self.loss_weights).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedOutput {
    pub value: f64,
    pub input_grad: Vec3,
}

/// Anything that can be queried as a signed distance field.
pub trait SdfField {
    fn value(&self, q: Vec3) -> f64;
    fn value_and_grad(&self, q: Vec3) -> AugmentedOutput;
}

impl SdfField for SyntheticShape {
    fn value(&self, q: Vec3) -> f64 {
        self.sdf(q)
    }

    fn value_and_grad(&self, q: Vec3) -> AugmentedOutput {
        AugmentedOutput {
            value: self.sdf(q),
            input_grad: self.gradient(q),
        }
    }
}

impl SdfField for MlpParams {
    fn value(&self, q: Vec3) -> f64 {
        self.forward(q)
    }

    fn value_and_grad(&self, q: Vec3) -> AugmentedOutput {
        self.forward_with_input_grad(q)
    }
}

/// Projects `q` onto the zero level set along the normalized gradient:
/// `q - f(q) ∇f(q) / ‖∇f(q)‖`. `None` when the gradient norm is at or below
/// [`GRAD_NORM_FLOOR`].
pub fn pull<F: SdfField + ?Sized>(field: &F, q: Vec3) -> Option<Vec3> {
    let out = field.value_and_grad(q);
    pull_from(q, &out)
}

pub fn pull_from(q: Vec3, out: &AugmentedOutput) -> Option<Vec3> {
    let n = geom::norm(out.input_grad);
    if !(n > GRAD_NORM_FLOOR) {
        return None;
    }
    Some(geom::sub(q, geom::scale(out.input_grad, out.value / n)))
}

/// Recorded augmented forward pass of one query, reusable across queries.
#[derive(Debug, Clone)]
pub struct Tape {
    q: Vec3,
    /// Per layer: input activation (n_in) followed by its 3 tangent columns.
    inputs: Vec<f64>,
    /// Per layer: pre-activation (n_out) followed by its 3 tangent columns.
    pre: Vec<f64>,
    in_off: Vec<usize>,
    pre_off: Vec<usize>,
    n_weights: usize,
    pub output: AugmentedOutput,
}

impl Tape {
    pub fn query(&self) -> Vec3 {
        self.q
    }

    /// Smallest |pre-activation| over hidden units; distance from a ReLU kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        let hidden = self.pre_off.len() - 1;
        let mut m = f64::INFINITY;
        for l in 0..hidden {
            let n = (self.pre_off[l + 1] - self.pre_off[l]) / 4;
            for v in &self.pre[self.pre_off[l]..self.pre_off[l] + n] {
                m = m.min(v.abs());
            }
        }
        m
    }
}

/// Scratch buffers for [`MlpParams::backward_tape`].
#[derive(Debug, Clone, Default)]
pub struct BackwardScratch {
    z_bar: Vec<f64>,
    a_bar: Vec<f64>,
}

impl MlpParams {
    /// Fresh parameters; `λ1 = λ2 = 1`.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let n: usize = layout.iter().map(|l| l.n_in * l.n_out + l.n_out).sum();
        let mut values = vec![0.0; n];
        let mut rng = rng::rng_from(seed);
        let last = layout.len() - 1;
        for (l, shape) in layout.iter().enumerate() {
            let w = &mut values[shape.w_off..shape.w_off + shape.n_in * shape.n_out];
            match config.init {
                InitScheme::Geometric => {
                    let dist = if l == last {
                        Normal::new(PI.sqrt() / (shape.n_in as f64).sqrt(), 1e-4)
                    } else {
                        Normal::new(0.0, 2f64.sqrt() / (shape.n_out as f64).sqrt())
                    }
                    .expect("positive std");
                    w.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
                    if l == last {
                        values[shape.b_off] = -GEOMETRIC_INIT_RADIUS;
                    }
                }
                InitScheme::Uniform => {
                    let bound = 1.0 / (shape.n_in as f64).sqrt();
                    for v in w.iter_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                    for v in &mut values[shape.b_off..shape.b_off + shape.n_out] {
                        *v = rng.random_range(-bound..bound);
                    }
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
            loss_weights: [1.0, 1.0],
        })
    }

    /// Parameters from an explicit flat weight vector.
    pub fn from_values(config: &NetConfig, values: Vec<f64>, loss_weights: [f64; 2]) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let n: usize = layout.iter().map(|l| l.n_in * l.n_out + l.n_out).sum();
        if values.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "expected {n} weights for this configuration, got {}",
                values.len()
            )));
        }
        if values.iter().chain(&loss_weights).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
            loss_weights,
        })
    }

    /// A two-layer ReLU network approximating `‖q‖ - radius`:
    /// `(4/N) Σ_i relu(d_i·q) - radius` over `N` Fibonacci-sphere directions,
    /// using `E[max(0, d·u)] = 1/4` for uniform unit `d`.
    pub fn sphere_like(directions: usize, radius: f64) -> Result<Self> {
        let config = NetConfig {
            depth: 2,
            width: directions,
            skip_layers: vec![],
            activation: Activation::Relu,
            init: InitScheme::Geometric,
        };
        let golden = PI * (3.0 - 5f64.sqrt());
        let mut values = Vec::with_capacity(5 * directions + 1);
        for i in 0..directions {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / directions as f64;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            values.extend_from_slice(&[r * t.cos(), y, r * t.sin()]);
        }
        values.extend(std::iter::repeat_n(0.0, directions));
        values.extend(std::iter::repeat_n(4.0 / directions as f64, directions));
        values.push(-radius);
        Self::from_values(&config, values, [1.0, 1.0])
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn num_weights(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(&self.loss_weights).all(|v| v.is_finite())
    }

    /// Value only, no tangents.
    pub fn forward(&self, q: Vec3) -> f64 {
        let mut a: Vec<f64> = q.to_vec();
        let mut next = Vec::with_capacity(self.config.width + 3);
        let last = self.layout.len() - 1;
        for (l, s) in self.layout.iter().enumerate() {
            if s.skip {
                a.extend_from_slice(&q);
                a.iter_mut().for_each(|v| *v *= FRAC_1_SQRT_2);
            }
            next.clear();
            let w = &self.values[s.w_off..s.w_off + s.n_in * s.n_out];
            let b = &self.values[s.b_off..s.b_off + s.n_out];
            for o in 0..s.n_out {
                let row = &w[o * s.n_in..(o + 1) * s.n_in];
                let z = b[o] + dot(row, &a);
                next.push(if l == last { z } else { self.config.activation.eval(z).0 });
            }
            std::mem::swap(&mut a, &mut next);
        }
        a[0]
    }

    pub fn forward_batch(&self, qs: &[Vec3]) -> Vec<f64> {
        qs.iter().map(|&q| self.forward(q)).collect()
    }

    pub fn new_tape(&self) -> Tape {
        let mut in_off = Vec::with_capacity(self.layout.len());
        let mut pre_off = Vec::with_capacity(self.layout.len());
        let (mut ni, mut np) = (0, 0);
        for s in &self.layout {
            in_off.push(ni);
            pre_off.push(np);
            ni += 4 * s.n_in;
            np += 4 * s.n_out;
        }
        Tape {
            q: [0.0; 3],
            inputs: vec![0.0; ni],
            pre: vec![0.0; np],
            in_off,
            pre_off,
            n_weights: self.values.len(),
            output: AugmentedOutput {
                value: 0.0,
                input_grad: [0.0; 3],
            },
        }
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        let expected: usize = self.layout.iter().map(|s| 4 * s.n_in).sum();
        if tape.n_weights != self.values.len() || tape.inputs.len() != expected {
            return Err(Error::ShapeMismatch(
                "tape was recorded for a different network layout".into(),
            ));
        }
        Ok(())
    }

    /// Augmented forward pass recorded into `tape`; returns the output.
    pub fn forward_tape(&self, q: Vec3, tape: &mut Tape) -> AugmentedOutput {
        tape.q = q;
        let act = self.config.activation;
        let last = self.layout.len() - 1;
        {
            let s0 = &self.layout[0];
            let x = &mut tape.inputs[tape.in_off[0]..tape.in_off[0] + 4 * s0.n_in];
            x.fill(0.0);
            x[..3].copy_from_slice(&q);
            for k in 0..3 {
                x[(k + 1) * s0.n_in + k] = 1.0;
            }
        }
        for (l, s) in self.layout.iter().enumerate() {
            let (n_in, n_out) = (s.n_in, s.n_out);
            let w = &self.values[s.w_off..s.w_off + n_in * n_out];
            let b = &self.values[s.b_off..s.b_off + n_out];
            let x = &tape.inputs[tape.in_off[l]..tape.in_off[l] + 4 * n_in];
            let (a, da) = x.split_at(n_in);
            let z = &mut tape.pre[tape.pre_off[l]..tape.pre_off[l] + 4 * n_out];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let (v, t0, t1, t2) = dot4(row, a, &da[..n_in], &da[n_in..2 * n_in], &da[2 * n_in..]);
                z[o] = b[o] + v;
                z[n_out + o] = t0;
                z[2 * n_out + o] = t1;
                z[3 * n_out + o] = t2;
            }
            if l == last {
                break;
            }
            // activation output becomes the next layer's input
            let nxt = &self.layout[l + 1];
            let xn = &mut tape.inputs[tape.in_off[l + 1]..tape.in_off[l + 1] + 4 * nxt.n_in];
            let z = &tape.pre[tape.pre_off[l]..tape.pre_off[l] + 4 * n_out];
            let scale = if nxt.skip { FRAC_1_SQRT_2 } else { 1.0 };
            for o in 0..n_out {
                let (v, d1, _) = act.eval(z[o]);
                xn[o] = scale * v;
                for k in 0..3 {
                    xn[(k + 1) * nxt.n_in + o] = scale * d1 * z[(k + 1) * n_out + o];
                }
            }
            if nxt.skip {
                for k in 0..3 {
                    xn[n_out + k] = scale * q[k];
                    for c in 0..3 {
                        xn[(c + 1) * nxt.n_in + n_out + k] = if c == k { scale } else { 0.0 };
                    }
                }
            }
        }
        let s = &self.layout[last];
        let z = &tape.pre[tape.pre_off[last]..tape.pre_off[last] + 4 * s.n_out];
        tape.output = AugmentedOutput {
            value: z[0],
            input_grad: [z[1], z[2], z[3]],
        };
        tape.output
    }

    pub fn forward_with_input_grad(&self, q: Vec3) -> AugmentedOutput {
        let mut tape = self.new_tape();
        self.forward_tape(q, &mut tape)
    }

    /// Reverse sweep of one recorded query. Adds `∂loss/∂θ` into `grads`,
    /// given `value_adj = ∂loss/∂f` and `grad_adj = ∂loss/∂(∇_q f)`.
    pub fn backward_tape(
        &self,
        tape: &Tape,
        value_adj: f64,
        grad_adj: Vec3,
        grads: &mut [f64],
        scratch: &mut BackwardScratch,
    ) {
        debug_assert_eq!(grads.len(), self.values.len());
        let act = self.config.activation;
        let last = self.layout.len() - 1;
        let max_n = self.config.width + 3;
        scratch.z_bar.resize(4 * max_n, 0.0);
        scratch.a_bar.resize(4 * max_n, 0.0);

        // z̄ for the output layer: value and three tangent adjoints
        let zb = &mut scratch.z_bar;
        zb[0] = value_adj;
        zb[1] = grad_adj[0];
        zb[2] = grad_adj[1];
        zb[3] = grad_adj[2];

        for l in (0..=last).rev() {
            let s = self.layout[l];
            let (n_in, n_out) = (s.n_in, s.n_out);
            let x = &tape.inputs[tape.in_off[l]..tape.in_off[l] + 4 * n_in];
            let zb = &scratch.z_bar[..4 * n_out];
            // parameter gradients
            {
                let (gw, gb) = grads[s.w_off..s.b_off + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let c = [zb[o], zb[n_out + o], zb[2 * n_out + o], zb[3 * n_out + o]];
                    gb[o] += c[0];
                    if c == [0.0; 4] {
                        continue;
                    }
                    let row = &mut gw[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        row[i] += c[0] * x[i]
                            + c[1] * x[n_in + i]
                            + c[2] * x[2 * n_in + i]
                            + c[3] * x[3 * n_in + i];
                    }
                }
            }
            if l == 0 {
                break;
            }
            // adjoints of this layer's input (value + tangents)
            let w = &self.values[s.w_off..s.w_off + n_in * n_out];
            let ab = &mut scratch.a_bar[..4 * n_in];
            ab.fill(0.0);
            for o in 0..n_out {
                let c = [zb[o], zb[n_out + o], zb[2 * n_out + o], zb[3 * n_out + o]];
                if c == [0.0; 4] {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    let wi = row[i];
                    ab[i] += wi * c[0];
                    ab[n_in + i] += wi * c[1];
                    ab[2 * n_in + i] += wi * c[2];
                    ab[3 * n_in + i] += wi * c[3];
                }
            }
            // through the previous layer's activation (and skip scaling)
            let ps = self.layout[l - 1];
            let m = ps.n_out;
            let scale = if s.skip { FRAC_1_SQRT_2 } else { 1.0 };
            let zp = &tape.pre[tape.pre_off[l - 1]..tape.pre_off[l - 1] + 4 * m];
            let zb = &mut scratch.z_bar[..4 * m];
            for j in 0..m {
                let (_, d1, d2) = act.eval(zp[j]);
                let av = scale * ab[j];
                let at = [scale * ab[n_in + j], scale * ab[2 * n_in + j], scale * ab[3 * n_in + j]];
                let dz = [zp[m + j], zp[2 * m + j], zp[3 * m + j]];
                zb[j] = av * d1 + d2 * (at[0] * dz[0] + at[1] * dz[1] + at[2] * dz[2]);
                zb[m + j] = at[0] * d1;
                zb[2 * m + j] = at[1] * d1;
                zb[3 * m + j] = at[2] * d1;
            }
        }
    }

    /// Parameter gradients for a batch of recorded queries and their
    /// adjoints, accumulated in index order.
    pub fn backward(&self, tapes: &[Tape], adjoints: &[(f64, Vec3)]) -> Result<ParamGrads> {
        if tapes.len() != adjoints.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tapes but {} adjoints",
                tapes.len(),
                adjoints.len()
            )));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let mut scratch = BackwardScratch::default();
        for (tape, &(df, dg)) in tapes.iter().zip(adjoints) {
            self.check_tape(tape)?;
            self.backward_tape(tape, df, dg, &mut grads.values, &mut scratch);
        }
        Ok(grads)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn dot4(row: &[f64], a: &[f64], t0: &[f64], t1: &[f64], t2: &[f64]) -> (f64, f64, f64, f64) {
    let (mut s, mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..row.len() {
        let w = row[i];
        s += w * a[i];
        s0 += w * t0[i];
        s1 += w * t1[i];
        s2 += w * t2[i];
    }
    (s, s0, s1, s2)
}
