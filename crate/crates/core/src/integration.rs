//! Word-similarity matching channel used by the I1/I2/I3 integration strategies.
//!
//! Per block, the channel stacks scaled similarity matrices of the
//! self-attended and cross-attended word representations, convolves them with
//! 3×3 filters, max-pools each filter over the real cells and projects the
//! result to a matching feature of the hidden size.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Activation, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use crate::model::config::Integration;

/// Stacks `A·Bᵀ/√d` for each `(A, B)` pair into `[C × Tu × Tr]`, zeroing
/// padded rows and columns.
pub fn similarity_matrices<F: Scalar>(
    tape: &mut Tape<'_, F>,
    pairs: &[(Var, Var)],
    u_mask: &[bool],
    r_mask: &[bool],
) -> Result<Var> {
    let (tu, tr) = (u_mask.len(), r_mask.len());
    let outer: Vec<F> = u_mask
        .iter()
        .flat_map(|&a| r_mask.iter().map(move |&b| if a && b { F::one() } else { F::zero() }))
        .collect();
    let outer = tape.constant(Tensor::new(vec![tu, tr], outer)?);
    let mut channels = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let d = tape.value(a).dims2()?.1;
        let sim = tape.matmul_nt(a, b)?;
        if tape.shape(sim) != [tu, tr] {
            return Err(Error::Shape {
                op: "similarity_matrices",
                lhs: tape.shape(sim).to_vec(),
                rhs: vec![tu, tr],
            });
        }
        let sim = tape.scale(sim, 1.0 / (d as f64).sqrt());
        let sim = tape.mul(sim, outer)?;
        channels.push(Some(tape.reshape(sim, vec![1, tu * tr])?));
    }
    let stacked = tape.stack_rows(&channels, tu * tr)?;
    tape.reshape(stacked, vec![pairs.len(), tu, tr])
}

#[derive(Debug, Clone)]
pub struct WordMatcher {
    /// `[filters × (channels·9)]`
    pub conv: ParamId,
    pub conv_bias: ParamId,
    pub proj: Linear,
    pub channels: usize,
}

impl WordMatcher {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
        filters: usize,
        hidden: usize,
    ) -> Self {
        let fan_in = channels * 9;
        let conv = store.add_glorot(format!("{name}.conv.w"), vec![filters, fan_in], fan_in, filters, rng);
        let conv_bias = store.add_zeros(format!("{name}.conv.b"), vec![filters]);
        let proj = Linear::new(store, rng, &format!("{name}.proj"), filters, hidden);
        Self {
            conv,
            conv_bias,
            proj,
            channels,
        }
    }
}

/// Convolution (SAME, stride 1) → ReLU → max over real cells → affine + ReLU.
pub fn word_channel_feature<F: Scalar>(
    tape: &mut Tape<'_, F>,
    sims: Var,
    u_mask: &[bool],
    r_mask: &[bool],
    matcher: &WordMatcher,
) -> Result<Var> {
    if tape.shape(sims)[0] != matcher.channels {
        return Err(Error::Shape {
            op: "word_channel_feature",
            lhs: tape.shape(sims).to_vec(),
            rhs: vec![matcher.channels],
        });
    }
    let patches = tape.unfold2d(sims)?;
    let w = tape.param(matcher.conv);
    let b = tape.param(matcher.conv_bias);
    let maps = tape.matmul_nt(patches, w)?;
    let maps = tape.add_row(maps, b)?;
    let maps = tape.relu(maps);
    let cells: Vec<bool> = u_mask
        .iter()
        .flat_map(|&a| r_mask.iter().map(move |&c| a && c))
        .collect();
    let pooled = tape.max_rows(maps, &cells)?;
    matcher.proj.forward(tape, pooled, Activation::Relu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_give_zero_similarity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[&[0.0, 3.0]]).unwrap());
        let m = similarity_matrices(&mut tape, &[(a, b), (b, a)], &[true], &[true]).unwrap();
        assert_eq!(tape.shape(m), &[2, 1, 1]);
        assert_eq!(tape.value(m).data(), &[0.0, 0.0]);
    }

    #[test]
    fn identical_rows_by_brute_force() {
        let rows = [[0.6, 0.8, 0.0], [0.0, 0.6, 0.8]];
        let d = 3.0f64;
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_rows(&[&rows[0], &rows[1]]).unwrap());
        let m = similarity_matrices(&mut tape, &[(a, a)], &[true, true], &[true, true]).unwrap();
        let v = tape.value(m).data();
        for i in 0..2 {
            for j in 0..2 {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(x, y)| x * y).sum();
                assert!((v[i * 2 + j] - dot / d.sqrt()).abs() < 1e-15);
            }
        }
        assert!((v[0] - 1.0 / d.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn padded_columns_are_zero_and_do_not_leak() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]).unwrap());
        let r1 = tape.constant(Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]).unwrap());
        let r2 = tape.constant(Tensor::from_rows(&[&[1.0, 1.0], &[9.0, -7.0]]).unwrap());
        let mask = [true, false];
        let m1 = similarity_matrices(&mut tape, &[(u, r1)], &[true, true], &mask).unwrap();
        let m2 = similarity_matrices(&mut tape, &[(u, r2)], &[true, true], &mask).unwrap();
        assert_eq!(tape.value(m1), tape.value(m2));
        assert_eq!(tape.value(m2).data()[1], 0.0);
        assert_eq!(tape.value(m2).data()[3], 0.0);
    }

    #[test]
    fn zero_matrices_propagate_biases() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = WordMatcher::new(&mut store, &mut rng, "w", 2, 4, 6);
        let cb = [0.3, -0.2, 0.0, 1.1];
        store.assign(m.conv_bias, Tensor::from_f64(vec![4], &cb).unwrap()).unwrap();
        let pw = store.value(m.proj.weight).to_f64_vec();
        let expected: Vec<f64> = (0..6)
            .map(|j| (0..4).map(|i| cb[i].max(0.0) * pw[i * 6 + j]).sum::<f64>().max(0.0))
            .collect();
        let mut tape = Tape::with_params(&store);
        let sims = tape.constant(Tensor::zeros(vec![2, 3, 5]));
        let f = word_channel_feature(&mut tape, sims, &[true; 3], &[true; 5], &m).unwrap();
        assert_eq!(tape.shape(f), &[1, 6]);
        for (a, b) in tape.value(f).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_length_is_independent_of_matrix_size() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = WordMatcher::new(&mut store, &mut rng, "w", 2, 16, 200);
        for (tu, tr) in [(1, 1), (3, 7), (12, 4)] {
            let mut tape = Tape::with_params(&store);
            let sims = tape.constant(Tensor::filled(vec![2, tu, tr], 0.1));
            let f = word_channel_feature(&mut tape, sims, &vec![true; tu], &vec![true; tr], &m).unwrap();
            assert_eq!(tape.shape(f), &[1, 200]);
        }
    }
}
