//! Finite-difference verification of the full training loss.
//!
//! Runs in 64-bit on a toy model and batch, comparing the analytic gradient
//! of every parameter element against central differences.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::{make_batch, Batch, EncodedSample, EmbeddingTable};
use crate::error::Result;
use crate::layers::Pooling;
use crate::model::{Integration, ModelConfig, S2mModel, SelfRepKind};
use crate::params::{GradBuffers, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub integration: Integration,
    pub self_rep: SelfRepKind,
    pub pooling: Pooling,
    pub stacks: usize,
    pub dim: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Scales the analytic gradient; anything but 1 must make the check fail.
    pub fault: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            integration: Integration::Pure,
            self_rep: SelfRepKind::Cnn,
            pooling: Pooling::Max,
            stacks: 2,
            dim: 8,
            seed: 7,
            step: 1e-5,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub max_error: f64,
    /// Elements that needed a finer step than the nominal one.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.config.tolerance
    }

    pub fn label(&self) -> String {
        let c = &self.config;
        format!("{}/{}/{}", c.integration, c.self_rep, c.pooling)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {}: max relative error {:.3e}",
            self.label(),
            if self.passed() { "ok" } else { "FAILED" },
            self.max_error()
        )?;
        for t in &self.tensors {
            write!(f, "  {:<32} {:>6} {:.3e}", t.name, t.elements, t.max_error)?;
            if t.kinks > 0 {
                write!(f, "  ({} kinks)", t.kinks)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Two samples with two and one real turns and padded tokens.
pub fn toy_batch() -> Batch {
    let samples = [
        EncodedSample {
            label: 1,
            context: vec![vec![2, 3, 4], vec![5, 6, 7, 8, 9]],
            response: vec![3, 10, 4],
        },
        EncodedSample {
            label: 0,
            context: vec![vec![7, 11]],
            response: vec![2, 11, 5, 6],
        },
    ];
    make_batch(&samples, 2, 5)
}

pub fn toy_model(cfg: &GradCheckConfig) -> Result<(S2mModel, ParamStore<f64>)> {
    let mc = ModelConfig {
        stacks: cfg.stacks,
        embed_dim: cfg.dim,
        hidden: cfg.dim,
        max_turns: 2,
        max_len: 5,
        self_rep: cfg.self_rep,
        pooling: cfg.pooling,
        integration: cfg.integration,
        word_filters: 3,
        vocab_size: 12,
        freeze_embeddings: false,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table = EmbeddingTable::<f64>::random(mc.vocab_size, mc.embed_dim, &mut rng);
    let (model, mut store) = S2mModel::new(mc, table.matrix, cfg.seed)?;
    // move every parameter off exact zeros and ones so no ReLU or max sits on a kink
    for i in 0..store.len() {
        let id = store.iter().nth(i).map(|(id, _)| id).expect("index in range");
        for x in store.value_mut(id).data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
    Ok((model, store))
}

fn loss(model: &S2mModel, store: &ParamStore<f64>, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::with_params(store);
    let l = model.batch_loss(&mut tape, batch)?;
    Ok(tape.value(l).data()[0])
}

const MIN_STEP: f64 = 1e-7;

pub fn check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (model, mut store) = toy_model(cfg)?;
    let batch = toy_batch();
    let mut analytic = GradBuffers::new(store.len());
    {
        let mut tape = Tape::with_params(&store);
        let mut l = model.batch_loss(&mut tape, &batch)?;
        if let Some(f) = cfg.fault {
            l = tape.scale_grad(l, f);
        }
        let grads = tape.backward(l)?;
        tape.param_grads(&grads, 1.0, &mut analytic);
    }
    let ids: Vec<_> = store.iter().map(|(id, e)| (id, e.name.clone())).collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for (id, name) in ids {
        let n = store.value(id).numel();
        let mut max_error = 0.0f64;
        let mut kinks = 0;
        for k in 0..n {
            let a = analytic.get(id).map_or(0.0, |g| g[k]);
            let mut step = cfg.step;
            let mut error = f64::INFINITY;
            let mut refined = false;
            // a ReLU or max switching inside the stencil spoils the central
            // difference; such elements are re-measured with finer steps
            while step >= MIN_STEP {
                let orig = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = orig + step;
                let up = loss(&model, &store, &batch)?;
                store.value_mut(id).data_mut()[k] = orig - step;
                let down = loss(&model, &store, &batch)?;
                store.value_mut(id).data_mut()[k] = orig;
                error = error.min(relative_error(a, (up - down) / (2.0 * step)));
                if error < cfg.tolerance {
                    break;
                }
                refined = true;
                step /= 10.0;
            }
            kinks += refined as usize;
            max_error = max_error.max(error);
        }
        tensors.push(TensorCheck {
            name,
            elements: n,
            max_error,
            kinks,
        });
    }
    Ok(GradCheckReport {
        config: cfg.clone(),
        tensors,
    })
}

/// Every integration strategy × self-representation × pooling combination.
pub fn all_combinations(base: &GradCheckConfig) -> Vec<GradCheckConfig> {
    let mut out = Vec::new();
    for integration in Integration::ALL {
        for self_rep in [SelfRepKind::Cnn, SelfRepKind::Gru, SelfRepKind::Attention] {
            for pooling in [Pooling::Max, Pooling::Mean, Pooling::Gru] {
                out.push(GradCheckConfig {
                    integration,
                    self_rep,
                    pooling,
                    ..base.clone()
                });
            }
        }
    }
    out
}
