//! Semantic representation block: self-representation, cross-representation,
//! two-step fusion, and the normalized transition into the next block.

use rand::Rng;

use super::config::SelfRepKind;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{attention, Activation, Conv1d, Gru, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub enum SelfRep {
    Cnn(Conv1d),
    Gru(Gru),
    /// Parameter-free masked self-attention, no positional information.
    Attention,
}

impl SelfRep {
    pub fn new<F: Scalar, R: Rng>(
        kind: SelfRepKind,
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(match kind {
            SelfRepKind::Cnn => SelfRep::Cnn(Conv1d::new(store, rng, &format!("{name}.conv"), dim, dim, kernel)?),
            SelfRepKind::Gru => SelfRep::Gru(Gru::new(store, rng, &format!("{name}.gru"), dim, dim)),
            SelfRepKind::Attention => SelfRep::Attention,
        })
    }
}

/// Contextualizes each position of `x[T×d]` within its own sentence.
pub fn self_representation<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, mask: &[bool], rep: &SelfRep) -> Result<Var> {
    match rep {
        SelfRep::Cnn(conv) => conv.forward(tape, x),
        SelfRep::Gru(gru) => {
            let states = gru.run(tape, x, mask)?;
            let mut rows = vec![None; mask.len()];
            for (i, h) in states {
                rows[i] = Some(h);
            }
            tape.stack_rows(&rows, gru.hidden)
        }
        SelfRep::Attention => attention(tape, x, x, x, mask),
    }
}

/// `Û = att(F₁(U), F₂(R), R)` and `R̂ = att(F₂(R), F₁(U), U)`; the attended
/// values are the raw inputs, not their projections.
pub fn cross_representation<F: Scalar>(
    tape: &mut Tape<'_, F>,
    u: Var,
    r: Var,
    f1: &Linear,
    f2: &Linear,
    u_mask: &[bool],
    r_mask: &[bool],
) -> Result<(Var, Var)> {
    let pu = f1.forward(tape, u, Activation::Identity)?;
    let pr = f2.forward(tape, r, Activation::Identity)?;
    let u_hat = attention(tape, pu, pr, r, r_mask)?;
    let r_hat = attention(tape, pr, pu, u, u_mask)?;
    Ok((u_hat, r_hat))
}

/// `[X, Y, X − Y, X ⊙ Y]` along the feature axis.
pub fn interaction<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, y: Var) -> Result<Var> {
    let diff = tape.sub(x, y)?;
    let prod = tape.mul(x, y)?;
    tape.concat_cols(&[x, y, diff, prod])
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub with_self: Option<Linear>,
    pub with_cross: Option<Linear>,
    pub merge: Linear,
}

impl Fusion {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        self_enabled: bool,
        cross_enabled: bool,
    ) -> Self {
        let with_self = self_enabled.then(|| Linear::new(store, rng, &format!("{name}.g1"), 4 * dim, dim));
        let with_cross = cross_enabled.then(|| Linear::new(store, rng, &format!("{name}.g2"), 4 * dim, dim));
        let branches = usize::from(self_enabled) + usize::from(cross_enabled);
        let merge = Linear::new(store, rng, &format!("{name}.g"), branches * dim, dim);
        Self {
            with_self,
            with_cross,
            merge,
        }
    }
}

/// `X̃₁ = G₁([X, X̄, X−X̄, X⊙X̄])`, `X̃₂ = G₂([X, X̂, X−X̂, X⊙X̂])`,
/// `X̃ = G([X̃₁, X̃₂])`, all with ReLU. A disabled branch is left out of `G`.
pub fn fuse<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: Var,
    x_bar: Option<Var>,
    x_hat: Option<Var>,
    fusion: &Fusion,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    for (rep, net) in [(x_bar, &fusion.with_self), (x_hat, &fusion.with_cross)] {
        match (rep, net) {
            (Some(rep), Some(net)) => {
                if tape.shape(rep) != tape.shape(x) {
                    return Err(Error::Shape {
                        op: "fuse",
                        lhs: tape.shape(x).to_vec(),
                        rhs: tape.shape(rep).to_vec(),
                    });
                }
                let inter = interaction(tape, x, rep)?;
                parts.push(net.forward(tape, inter, Activation::Relu)?);
            }
            (None, None) => {}
            _ => return Err(Error::Contract("fusion branch does not match the representations given".into())),
        }
    }
    let joined = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
    fusion.merge.forward(tape, joined, Activation::Relu)
}

/// Zeroes padded rows of a `[T×d]` value.
pub fn apply_row_mask<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, mask: &[bool]) -> Result<Var> {
    let (t, d) = tape.value(x).dims2()?;
    if mask.len() != t {
        return Err(Error::Shape {
            op: "row_mask",
            lhs: vec![t, d],
            rhs: vec![mask.len()],
        });
    }
    let data: Vec<F> = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { F::one() } else { F::zero() }, d))
        .collect();
    let m = tape.constant(Tensor::new(vec![t, d], data)?);
    tape.mul(x, m)
}

/// `layer_norm(X̃ + X_prev + E)`: residual plus direct connection from the
/// word embeddings. Padded rows are zeroed afterwards.
pub fn block_transition<F: Scalar>(
    tape: &mut Tape<'_, F>,
    fused: Var,
    prev: Var,
    embedded: Var,
    norm: &LayerNorm,
    mask: &[bool],
) -> Result<Var> {
    let s = tape.add(fused, prev)?;
    let s = tape.add(s, embedded)?;
    let y = norm.forward(tape, s)?;
    apply_row_mask(tape, y, mask)
}

#[derive(Debug, Clone)]
pub struct RepBlock {
    pub self_rep: Option<SelfRep>,
    pub cross: Option<(Linear, Linear)>,
    pub fusion: Fusion,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub u_bar: Option<Var>,
    pub r_bar: Option<Var>,
    pub u_hat: Option<Var>,
    pub r_hat: Option<Var>,
    pub u_fused: Var,
    pub r_fused: Var,
}

impl RepBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        kernel: usize,
        kind: SelfRepKind,
        self_enabled: bool,
        cross_enabled: bool,
    ) -> Result<Self> {
        let self_rep = if self_enabled {
            Some(SelfRep::new(kind, store, rng, &format!("{name}.self"), dim, kernel)?)
        } else {
            None
        };
        let cross = cross_enabled.then(|| {
            (
                Linear::new(store, rng, &format!("{name}.f1"), dim, dim),
                Linear::new(store, rng, &format!("{name}.f2"), dim, dim),
            )
        });
        let fusion = Fusion::new(store, rng, &format!("{name}.fuse"), dim, self_enabled, cross_enabled);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), dim);
        Ok(Self {
            self_rep,
            cross,
            fusion,
            norm,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        u: Var,
        r: Var,
        u_mask: &[bool],
        r_mask: &[bool],
    ) -> Result<BlockOutput> {
        let (u_bar, r_bar) = match &self.self_rep {
            Some(rep) => (
                Some(self_representation(tape, u, u_mask, rep)?),
                Some(self_representation(tape, r, r_mask, rep)?),
            ),
            None => (None, None),
        };
        let (u_hat, r_hat) = match &self.cross {
            Some((f1, f2)) => {
                let (a, b) = cross_representation(tape, u, r, f1, f2, u_mask, r_mask)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let u_fused = fuse(tape, u, u_bar, u_hat, &self.fusion)?;
        let r_fused = fuse(tape, r, r_bar, r_hat, &self.fusion)?;
        Ok(BlockOutput {
            u_bar,
            r_bar,
            u_hat,
            r_hat,
            u_fused,
            r_fused,
        })
    }
}
