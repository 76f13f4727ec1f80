//! Layer primitives assembled from tape operations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

/// Single-layer feed-forward network `act(x · W + b)` with `W[in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.w"), vec![in_dim, out_dim], in_dim, out_dim, rng);
        let bias = store.add_zeros(format!("{name}.b"), vec![out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, act: Activation) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        feed_forward(tape, x, w, b, act)
    }
}

pub fn feed_forward<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let y = tape.add_row(xw, b)?;
    Ok(match act {
        Activation::Identity => y,
        Activation::Relu => tape.relu(y),
    })
}

/// Gated recurrent unit:
///
/// ```text
/// r  = σ(x·Wr + h·Ur + br)
/// z  = σ(x·Wz + h·Uz + bz)
/// n  = tanh(x·Wn + (r ⊙ h)·Un + bn)
/// h' = z ⊙ h + (1 − z) ⊙ n
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    pub input: [ParamId; 3],
    pub recurrent: [ParamId; 3],
    pub bias: [ParamId; 3],
    pub in_dim: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["reset", "update", "cand"];

impl Gru {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let input = GATES.map(|g| store.add_glorot(format!("{name}.{g}.wx"), vec![in_dim, hidden], in_dim, hidden, rng));
        let recurrent = GATES.map(|g| store.add_glorot(format!("{name}.{g}.wh"), vec![hidden, hidden], hidden, hidden, rng));
        let bias = GATES.map(|g| store.add_zeros(format!("{name}.{g}.b"), vec![hidden]));
        Self {
            input,
            recurrent,
            bias,
            in_dim,
            hidden,
        }
    }

    /// Input projections `x·W + b` for every gate, computed for all rows at once.
    fn project<F: Scalar>(&self, tape: &mut Tape<'_, F>, xs: Var) -> Result<[Var; 3]> {
        let mut out = [xs; 3];
        for (k, slot) in out.iter_mut().enumerate() {
            let w = tape.param(self.input[k]);
            let b = tape.param(self.bias[k]);
            let xw = tape.matmul(xs, w)?;
            *slot = tape.add_row(xw, b)?;
        }
        Ok(out)
    }

    fn step_projected<F: Scalar>(&self, tape: &mut Tape<'_, F>, h: Var, px: [Var; 3]) -> Result<Var> {
        let ur = tape.param(self.recurrent[0]);
        let uz = tape.param(self.recurrent[1]);
        let un = tape.param(self.recurrent[2]);
        let hr = tape.matmul(h, ur)?;
        let r = tape.add(px[0], hr)?;
        let r = tape.sigmoid(r);
        let hz = tape.matmul(h, uz)?;
        let z = tape.add(px[1], hz)?;
        let z = tape.sigmoid(z);
        let rh = tape.mul(r, h)?;
        let rhu = tape.matmul(rh, un)?;
        let n = tape.add(px[2], rhu)?;
        let n = tape.tanh(n);
        let zh = tape.mul(z, h)?;
        let one_minus_z = tape.one_minus(z);
        let zn = tape.mul(one_minus_z, n)?;
        tape.add(zh, zn)
    }

    /// One recurrence step for `h_prev[1×hidden]`, `x[1×in]`.
    pub fn step<F: Scalar>(&self, tape: &mut Tape<'_, F>, h_prev: Var, x: Var) -> Result<Var> {
        let px = self.project(tape, x)?;
        self.step_projected(tape, h_prev, px)
    }

    pub fn zero_state<F: Scalar>(&self, tape: &mut Tape<'_, F>) -> Var {
        tape.constant(crate::tensor::Tensor::zeros(vec![1, self.hidden]))
    }

    /// Runs over the rows of `xs[T×in]` where `mask` is set, starting from a
    /// zero state. Returns one hidden state per consumed row, in order, and the
    /// row index each came from.
    pub fn run<F: Scalar>(&self, tape: &mut Tape<'_, F>, xs: Var, mask: &[bool]) -> Result<Vec<(usize, Var)>> {
        let px = self.project(tape, xs)?;
        let mut h = self.zero_state(tape);
        let mut states = Vec::new();
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let step_in = [
                tape.slice_row(px[0], i)?,
                tape.slice_row(px[1], i)?,
                tape.slice_row(px[2], i)?,
            ];
            h = self.step_projected(tape, h, step_in)?;
            states.push((i, h));
        }
        Ok(states)
    }

    /// Final hidden state after the masked rows; errors when nothing is unmasked.
    pub fn last_state<F: Scalar>(&self, tape: &mut Tape<'_, F>, xs: Var, mask: &[bool]) -> Result<Var> {
        self.run(tape, xs, mask)?
            .last()
            .map(|&(_, h)| h)
            .ok_or_else(|| Error::InvalidMask("recurrence over zero unmasked rows".into()))
    }
}

/// One-dimensional convolution with SAME padding and ReLU.
///
/// `filters` is `[s × (h·d)]`: filter `i` stores its `h` rows of width `d`
/// consecutively, row `o` covering input position `j + o − (h−1)/2`.
pub fn conv1d<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, filters: Var, bias: Var, height: usize) -> Result<Var> {
    let windows = tape.unfold1d(x, height)?;
    let y = tape.matmul_nt(windows, filters)?;
    let y = tape.add_row(y, bias)?;
    Ok(tape.relu(y))
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub filters: ParamId,
    pub bias: ParamId,
    pub height: usize,
}

impl Conv1d {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        filters: usize,
        height: usize,
    ) -> Result<Self> {
        if height.is_multiple_of(2) {
            return Err(Error::Config(format!("convolution height must be odd, got {height}")));
        }
        let fan_in = height * in_dim;
        let w = store.add_glorot(format!("{name}.w"), vec![filters, fan_in], fan_in, filters, rng);
        let b = store.add_zeros(format!("{name}.b"), vec![filters]);
        Ok(Self {
            filters: w,
            bias: b,
            height,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let w = tape.param(self.filters);
        let b = tape.param(self.bias);
        conv1d(tape, x, w, b, self.height)
    }
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d_k)·V`, with key positions
/// outside `key_mask` excluded.
pub fn attention<F: Scalar>(tape: &mut Tape<'_, F>, q: Var, k: Var, v: Var, key_mask: &[bool]) -> Result<Var> {
    let weights = attention_weights(tape, q, k, key_mask)?;
    tape.matmul(weights, v)
}

/// The `[m × n]` row-stochastic weights used by [`attention`].
pub fn attention_weights<F: Scalar>(tape: &mut Tape<'_, F>, q: Var, k: Var, key_mask: &[bool]) -> Result<Var> {
    let (m, dk) = tape.value(q).dims2()?;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (dk as f64).sqrt());
    let mask: Vec<bool> = (0..m).flat_map(|_| key_mask.iter().copied()).collect();
    tape.softmax_rows(logits, Some(&mask))
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{name}.gain"), vec![dim], 1.0),
            offset: store.add_zeros(format!("{name}.offset"), vec![dim]),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let o = tape.param(self.offset);
        tape.layer_norm(x, g, o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Max,
    Mean,
    Gru,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            "gru" => Ok(Pooling::Gru),
            other => Err(Error::Config(format!("unknown pooling {other:?} (max|mean|gru)"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
            Pooling::Gru => "gru",
        })
    }
}

/// Reduces `x[T×d]` to `[1×d]` over the rows where `mask` is set.
pub fn pool<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: Var,
    mask: &[bool],
    strategy: Pooling,
    gru: Option<&Gru>,
) -> Result<Var> {
    match strategy {
        Pooling::Max => tape.max_rows(x, mask),
        Pooling::Mean => tape.mean_rows(x, mask),
        Pooling::Gru => {
            let gru = gru.ok_or_else(|| Error::Config("gru pooling requires a pooling GRU".into()))?;
            gru.last_state(tape, x, mask)
        }
    }
}
