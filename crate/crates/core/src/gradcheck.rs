//! Finite-difference checks for every differentiable operation and for
//! the full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::encoders::MlpSpec;
use crate::error::Result;
use crate::losses::{nll_loss, supcon_loss};
use crate::tensor::{grad_check, Mode, Tape, Tensor, Var};
use crate::trainer::{HyperParams, Trainer};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Entries with magnitude in `[0.2, 1)` and random sign, keeping relu
/// inputs away from the kink.
fn off_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, 0.2, 1.0, rng);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Reduces `y` to a scalar through a fixed random weighting so every
/// output entry contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone())?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn groups_with_positive(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    loop {
        let g: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        if (0..n).any(|i| (0..n).any(|j| i != j && g[i] == g[j])) {
            return g;
        }
    }
}

/// Worst relative error of each primitive operation for one seed.
pub fn check_ops(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k, m) = (4, 3, 5);
    let a = uniform(vec![n, k], -1.0, 1.0, &mut rng);
    let b = uniform(vec![k, m], -1.0, 1.0, &mut rng);
    let w_nm = uniform(vec![n, m], -1.0, 1.0, &mut rng);
    let w_nk = uniform(vec![n, k], -1.0, 1.0, &mut rng);
    let bias = uniform(vec![k], -1.0, 1.0, &mut rng);
    let other = uniform(vec![n, k], -1.0, 1.0, &mut rng);
    let kinked = off_zero(vec![n, k], &mut rng);
    let w_cat = uniform(vec![n, 2 * k], -1.0, 1.0, &mut rng);
    let drop_seed: u64 = rng.random();
    let feats = uniform(vec![6, 4], -1.0, 1.0, &mut rng);
    let groups = groups_with_positive(6, 2, &mut rng);
    let logits = uniform(vec![6, 3], -2.0, 2.0, &mut rng);
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
    let factor = rng.random_range(-2.0..2.0);

    let mut out = Vec::new();
    let mut check = |op: &'static str, f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor| -> Result<()> {
        let err = grad_check(f, x, STEP)?;
        out.push(OpCheck { op, max_rel_error: err });
        Ok(())
    };

    check(
        "matmul",
        &|t, x| {
            let bv = t.constant(b.clone())?;
            let y = t.matmul(x, bv)?;
            project(t, y, &w_nm)
        },
        &a,
    )?;
    check(
        "matmul_rhs",
        &|t, x| {
            let av = t.constant(a.clone())?;
            let y = t.matmul(av, x)?;
            project(t, y, &w_nm)
        },
        &b,
    )?;
    check(
        "add_bias",
        &|t, x| {
            let bv = t.constant(bias.clone())?;
            let y = t.add_bias(x, bv)?;
            project(t, y, &w_nk)
        },
        &a,
    )?;
    check(
        "add_bias_rhs",
        &|t, x| {
            let av = t.constant(a.clone())?;
            let y = t.add_bias(av, x)?;
            project(t, y, &w_nk)
        },
        &bias,
    )?;
    check(
        "relu",
        &|t, x| {
            let y = t.relu(x)?;
            project(t, y, &w_nk)
        },
        &kinked,
    )?;
    check(
        "dropout",
        &|t, x| {
            let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
            let (y, _) = t.dropout(x, 0.4, Mode::Train, None, &mut r)?;
            project(t, y, &w_nk)
        },
        &a,
    )?;
    check(
        "concat",
        &|t, x| {
            let o = t.constant(other.clone())?;
            let y = t.concat(x, o)?;
            let z = t.concat(o, x)?;
            let s = t.add(y, z)?;
            project(t, s, &w_cat)
        },
        &a,
    )?;
    check(
        "l2_normalize",
        &|t, x| {
            let y = t.l2_normalize(x)?;
            project(t, y, &w_nk)
        },
        &a,
    )?;
    check(
        "log_softmax",
        &|t, x| {
            let y = t.log_softmax(x)?;
            project(t, y, &w_nk)
        },
        &a,
    )?;
    check(
        "add",
        &|t, x| {
            let o = t.constant(other.clone())?;
            let y = t.add(x, o)?;
            let y = t.mul(y, y)?;
            project(t, y, &w_nk)
        },
        &a,
    )?;
    check(
        "sub",
        &|t, x| {
            let o = t.constant(other.clone())?;
            let y = t.sub(o, x)?;
            let y = t.mul(y, y)?;
            project(t, y, &w_nk)
        },
        &a,
    )?;
    check(
        "mul",
        &|t, x| {
            let o = t.constant(other.clone())?;
            let y = t.mul(x, o)?;
            let y = t.mul(y, x)?;
            project(t, y, &w_nk)
        },
        &a,
    )?;
    check(
        "scale",
        &|t, x| {
            let y = t.scale(x, factor)?;
            let y = t.mul(y, x)?;
            project(t, y, &w_nk)
        },
        &a,
    )?;
    check(
        "sum",
        &|t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        },
        &a,
    )?;
    check("supcon_loss", &|t, x| supcon_loss(t, x, &groups, 0.1), &feats)?;
    check("nll_loss", &|t, x| nll_loss(t, x, &labels), &logits)?;
    Ok(out)
}

/// Six instances over two domains and two classes, every cell nonempty.
pub fn composite_batch(input_dim: usize, rng: &mut ChaCha8Rng) -> Batch {
    Batch {
        x: uniform(vec![6, input_dim], 0.0, 1.0, rng),
        domains: vec![0, 0, 0, 1, 1, 1],
        labels: vec![0, 1, 0, 1, 0, 1],
    }
}

/// Worst relative error of the full training loss against every model
/// parameter. The adversarial noise and dropout masks are computed once
/// and held fixed across probes.
pub fn check_composite(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = 5;
    let hp = HyperParams {
        seed,
        hidden_dims: vec![6],
        repr_dim: 4,
        ..HyperParams::default()
    };
    let spec = MlpSpec {
        input_dim,
        hidden_dims: hp.hidden_dims.clone(),
        output_dim: hp.repr_dim,
        dropout_rate: hp.dropout,
    };
    let mut model = crate::encoders::ModelParams::with_extractor(spec, 2, seed)?;
    // Zero-initialized biases map a fully dropped hidden row to an exactly
    // zero feature row, which sits on the cosine norm floor. Random biases
    // move the check to a generic point.
    for bias in model.tensors_mut().into_iter().skip(1).step_by(2) {
        for v in bias.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let batch = composite_batch(input_dim, &mut rng);
    let base = Trainer::new(model, hp);

    let (_, _, noise) = base.clone().loss_and_grads(&batch, None)?;
    let (_, analytic, _) = base.clone().loss_and_grads(&batch, Some(&noise))?;

    let total_at = |shift: &dyn Fn(&mut Trainer)| -> Result<f64> {
        let mut t = base.clone();
        shift(&mut t);
        Ok(t.loss_and_grads(&batch, Some(&noise))?.0.l_total)
    };
    let mut worst = 0.0_f64;
    for (p, grads) in analytic.iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let plus = total_at(&|t| t.model.tensors_mut()[p].data_mut()[i] += STEP)?;
            let minus = total_at(&|t| t.model.tensors_mut()[p].data_mut()[i] -= STEP)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            let denom = g.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((g - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Per-op maxima over all seeds, followed by the composite loss as
/// `rca_total`.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<OpCheck>> {
    let mut merged: Vec<OpCheck> = Vec::new();
    for &seed in seeds {
        let mut row = check_ops(seed)?;
        row.push(OpCheck {
            op: "rca_total",
            max_rel_error: check_composite(seed)?,
        });
        for c in row {
            match merged.iter_mut().find(|m| m.op == c.op) {
                Some(m) => m.max_rel_error = m.max_rel_error.max(c.max_rel_error),
                None => merged.push(c),
            }
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_one_seed() {
        for c in run_suite(&[3]).unwrap() {
            assert!(c.max_rel_error <= TOLERANCE, "{}: {}", c.op, c.max_rel_error);
        }
    }
}
