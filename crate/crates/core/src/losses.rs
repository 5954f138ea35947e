//! Training objectives: supervised contrastive loss over cosine
//! similarities, negative log-likelihood classification loss, the
//! normalized-gradient input perturbation and the rule that mixes the
//! clean, perturbed and contrastive terms into one objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Tape, Tensor, Var, NORM_FLOOR};
use crate::trainer::{Ablation, HyperParams};

/// Whether the adversarial gradient is normalized per row or over the
/// whole batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScope {
    #[default]
    PerExample,
    PerBatch,
}

/// Loss value and `dL/dS` for `S = Z Zᵀ / τ` on unit-normalized rows `Z`.
///
/// Anchors without an in-batch positive are skipped. The denominator runs
/// over every row except the anchor, so positives appear in it too.
pub(crate) fn supcon_forward(z: &Tensor, groups: &[usize], tau: f64) -> Result<(f64, Vec<f64>)> {
    let (n, d) = z
        .dims2()
        .ok_or_else(|| Error::shape("supcon_loss", z.shape(), &[0, 0]))?;
    if !(tau > 0.0) {
        return Err(Error::InvalidParam(format!("temperature must be positive, got {tau}")));
    }
    if groups.len() != n {
        return Err(Error::shape("supcon_loss", z.shape(), &[groups.len()]));
    }
    if n < 2 {
        return Err(Error::Sampler(format!(
            "contrastive loss needs at least 2 rows, got {n}"
        )));
    }
    let zd = z.data();
    let mut sims = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dot: f64 = zd[i * d..(i + 1) * d]
                    .iter()
                    .zip(&zd[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                sims[i * n + j] = dot / tau;
            }
        }
    }
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|k| k != i && groups[k] == groups[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::Sampler(
            "no row has an in-batch positive; compose batches so every group appears at least twice"
                .into(),
        ));
    }
    let weight = 1.0 / anchors.len() as f64;
    let mut total = 0.0;
    let mut coeff = vec![0.0; n * n];
    let mut others = Vec::with_capacity(n - 1);
    for &i in &anchors {
        others.clear();
        others.extend((0..n).filter(|&j| j != i).map(|j| sims[i * n + j]));
        let lse = log_sum_exp(&others);
        let positives: Vec<usize> = (0..n).filter(|&k| k != i && groups[k] == groups[i]).collect();
        let inv_p = 1.0 / positives.len() as f64;
        let mean_pos: f64 = positives.iter().map(|&p| sims[i * n + p]).sum::<f64>() * inv_p;
        total += lse - mean_pos;
        for j in (0..n).filter(|&j| j != i) {
            coeff[i * n + j] = weight * (sims[i * n + j] - lse).exp();
        }
        for &p in &positives {
            coeff[i * n + p] -= weight * inv_p;
        }
    }
    Ok((total * weight, coeff))
}

/// Supervised contrastive loss of `features` with positives defined by
/// equal `groups` entries and cosine similarity scaled by `1/tau`.
pub fn supcon_loss(tape: &mut Tape, features: Var, groups: &[usize], tau: f64) -> Result<Var> {
    let z = tape.l2_normalize(features)?;
    let (loss, coeff) = supcon_forward(tape.value(z), groups, tau)?;
    let n = groups.len();
    let inv_tau = 1.0 / tau;
    tape.custom(
        "supcon_loss",
        &[z],
        Tensor::scalar(loss),
        Box::new(move |g, inputs| {
            let z = inputs[0];
            let d = z.len() / n;
            let zd = z.data();
            let mut gz = vec![0.0; z.len()];
            for k in 0..n {
                let row = &mut gz[k * d..(k + 1) * d];
                for j in 0..n {
                    let c = coeff[k * n + j] + coeff[j * n + k];
                    if c != 0.0 {
                        let scale = g[0] * inv_tau * c;
                        for (acc, v) in row.iter_mut().zip(&zd[j * d..(j + 1) * d]) {
                            *acc += scale * v;
                        }
                    }
                }
            }
            vec![gz]
        }),
    )
}

/// Mean negative log-probability of the true class.
pub fn nll_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape
        .value(logits)
        .dims2()
        .ok_or_else(|| Error::shape("nll_loss", tape.value(logits).shape(), &[0, 0]))?;
    if labels.len() != n {
        return Err(Error::shape("nll_loss", &[n, c], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidParam(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let logp = tape.log_softmax(logits)?;
    let lp = tape.value(logp).data();
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &l)| lp[i * c + l])
        .sum::<f64>()
        / n as f64;
    let labels = labels.to_vec();
    tape.custom(
        "nll_loss",
        &[logp],
        Tensor::scalar(loss),
        Box::new(move |g, _| {
            let mut gx = vec![0.0; n * c];
            let w = -g[0] / n as f64;
            for (i, &l) in labels.iter().enumerate() {
                gx[i * c + l] = w;
            }
            vec![gx]
        }),
    )
}

/// `ε · g / ‖g‖`, normalized per row or over the whole batch. Rows (or a
/// batch) whose gradient norm is below the floor yield zero noise.
pub fn adv_noise(grad: &Tensor, epsilon: f64, scope: NoiseScope) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidParam(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut out = grad.clone();
    let scale_chunk = |chunk: &mut [f64]| {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            chunk.iter_mut().for_each(|v| *v = 0.0);
        } else {
            chunk.iter_mut().for_each(|v| *v = epsilon * *v / norm);
        }
    };
    match scope {
        NoiseScope::PerBatch => scale_chunk(out.data_mut()),
        NoiseScope::PerExample => {
            let d = grad.shape().last().copied().unwrap_or(1).max(1);
            out.data_mut().chunks_mut(d).for_each(scale_chunk);
        }
    }
    Ok(out)
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_d: f64,
    pub l_c: f64,
    pub l_cls: f64,
    pub l_cls_adv: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub tau_domain: f64,
    pub tau_category: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub alpha: f64,
}

/// Recorded loss terms; `None` marks a term switched off by ablation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub classification: Var,
    pub adversarial: Option<Var>,
    pub domain: Option<Var>,
    pub category: Option<Var>,
}

fn check_weights(hp: &HyperParams) -> Result<()> {
    if !(0.0..=1.0).contains(&hp.lambda) {
        return Err(Error::InvalidParam(format!("lambda {} outside [0, 1]", hp.lambda)));
    }
    if !(hp.alpha >= 0.0) {
        return Err(Error::InvalidParam(format!("alpha must be >= 0, got {}", hp.alpha)));
    }
    Ok(())
}

fn bundle(hp: &HyperParams, l_cls: f64, l_cls_adv: f64, l_d: f64, l_c: f64, l_adv: f64, l_total: f64) -> LossBundle {
    LossBundle {
        l_d,
        l_c,
        l_cls,
        l_cls_adv,
        l_adv,
        l_total,
        tau_domain: hp.tau_domain,
        tau_category: hp.tau_category,
        epsilon: hp.epsilon,
        lambda: hp.lambda,
        alpha: hp.alpha,
    }
}

/// Mixes the recorded terms on the tape and returns the total-loss node.
///
/// `l_adv = l_C + λ(l_C′ − l_C)`, which is `(1 − λ)l_C + λl_C′` rearranged
/// so that it reduces to `l_C` exactly when `λ = 0` or `l_C′ = l_C`, and
/// `l_total = l_adv + α(l_d + l_c)`.
pub fn combine_losses(tape: &mut Tape, terms: LossTerms, hp: &HyperParams) -> Result<(Var, LossBundle)> {
    check_weights(hp)?;
    let cls = terms.classification;
    let (adv, l_cls_adv) = match terms.adversarial {
        Some(perturbed) if hp.ablation.al => {
            let diff = tape.sub(perturbed, cls)?;
            let weighted = tape.scale(diff, hp.lambda)?;
            (tape.add(cls, weighted)?, tape.scalar(perturbed))
        }
        _ => (cls, tape.scalar(cls)),
    };
    let domain = terms.domain.filter(|_| hp.ablation.dscl);
    let category = terms.category.filter(|_| hp.ablation.cscl);
    let pair = match (domain, category) {
        (Some(d), Some(c)) => Some(tape.add(d, c)?),
        (Some(v), None) | (None, Some(v)) => Some(v),
        (None, None) => None,
    };
    let total = match pair {
        Some(p) => {
            let weighted = tape.scale(p, hp.alpha)?;
            tape.add(adv, weighted)?
        }
        None => adv,
    };
    let l_d = domain.map_or(0.0, |v| tape.scalar(v));
    let l_c = category.map_or(0.0, |v| tape.scalar(v));
    let out = bundle(
        hp,
        tape.scalar(cls),
        l_cls_adv,
        l_d,
        l_c,
        tape.scalar(adv),
        tape.scalar(total),
    );
    Ok((total, out))
}

/// Same arithmetic as [`combine_losses`] on plain scalars.
pub fn combine_values(l_cls: f64, l_cls_adv: f64, l_d: f64, l_c: f64, hp: &HyperParams) -> Result<LossBundle> {
    check_weights(hp)?;
    let Ablation { dscl, cscl, al } = hp.ablation;
    let l_cls_adv = if al { l_cls_adv } else { l_cls };
    let l_adv = if al { l_cls + (l_cls_adv - l_cls) * hp.lambda } else { l_cls };
    let l_d = if dscl { l_d } else { 0.0 };
    let l_c = if cscl { l_c } else { 0.0 };
    let l_total = l_adv + (l_d + l_c) * hp.alpha;
    Ok(bundle(hp, l_cls, l_cls_adv, l_d, l_c, l_adv, l_total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn supcon_value(rows: &[&[f64]], groups: &[usize], tau: f64) -> f64 {
        let mut t = Tape::new();
        let f = t.leaf(features(rows)).unwrap();
        let l = supcon_loss(&mut t, f, groups, tau).unwrap();
        t.scalar(l)
    }

    #[test]
    fn supcon_single_pair_is_zero() {
        let v = supcon_value(&[&[0.3, 0.7], &[0.3, 0.7]], &[0, 0], 0.1);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn supcon_hand_case() {
        let v = supcon_value(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]], &[0, 0, 1, 1], 0.1);
        // Each anchor sees one positive at cosine 1 and two negatives at
        // cosine 0, so the denominator is e^10 + 2.
        let expected = (1.0 + 2.0 * (-10.0_f64).exp()).ln();
        assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
        assert!((v - 9.08e-5).abs() < 1e-7);
    }

    #[test]
    fn supcon_rejects_bad_input() {
        let mut t = Tape::new();
        let f = t.leaf(features(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!(matches!(supcon_loss(&mut t, f, &[0, 1], 0.1), Err(Error::Sampler(_))));
        assert!(matches!(supcon_loss(&mut t, f, &[0, 0], 0.0), Err(Error::InvalidParam(_))));
        assert!(supcon_loss(&mut t, f, &[0, 0, 0], 0.1).is_err());
    }

    #[test]
    fn supcon_skips_anchors_without_positives() {
        // Row 2 is alone in its group; only rows 0 and 1 are anchors.
        let a = supcon_value(&[&[1.0, 0.2], &[0.9, 0.1], &[-0.3, 1.0]], &[0, 0, 1], 0.5);
        assert!(a.is_finite() && a > 0.0);
    }

    #[test]
    fn nll_cases() {
        let mut t = Tape::new();
        let x = t.leaf(features(&[&[0.0, 0.0]])).unwrap();
        let l = nll_loss(&mut t, x, &[0]).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);

        let x = t.leaf(features(&[&[1e6, 0.0]])).unwrap();
        let l = nll_loss(&mut t, x, &[0]).unwrap();
        assert!(t.scalar(l).abs() < 1e-12);
        assert!(nll_loss(&mut t, x, &[2]).is_err());
    }

    #[test]
    fn nll_matches_direct_formula() {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..3).map(|j| ((i * 3 + j) as f64 * 0.77).sin() * 2.0).collect())
            .collect();
        let labels = [0, 2, 1, 1, 0];
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&rows).unwrap()).unwrap();
        let l = nll_loss(&mut t, x, &labels).unwrap();
        let direct = -rows
            .iter()
            .zip(&labels)
            .map(|(r, &y)| (r[y].exp() / r.iter().map(|v| v.exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / 5.0;
        assert!((t.scalar(l) - direct).abs() < 1e-10);
    }

    #[test]
    fn noise_cases() {
        let g = features(&[&[3.0, 4.0], &[0.0, 0.0]]);
        let n = adv_noise(&g, 0.3, NoiseScope::PerExample).unwrap();
        let v = n.data();
        assert!((v[0] - 0.18).abs() < 1e-15 && (v[1] - 0.24).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.0, 0.0]);
        let n = adv_noise(&g, 0.0, NoiseScope::PerExample).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
        let n = adv_noise(&g, 0.3, NoiseScope::PerBatch).unwrap();
        let norm: f64 = n.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.3).abs() < 1e-12);
        assert!(adv_noise(&g, -1.0, NoiseScope::PerExample).is_err());
    }

    #[test]
    fn combine_arithmetic() {
        let hp = HyperParams::default();
        let b = combine_values(1.0, 2.0, 3.0, 4.0, &hp).unwrap();
        assert!((b.l_adv - 1.3).abs() < 1e-12);
        assert!((b.l_total - 1.37).abs() < 1e-12);

        let mut hp0 = hp.clone();
        hp0.lambda = 0.0;
        let b = combine_values(1.7, 2.9, 3.0, 4.0, &hp0).unwrap();
        assert_eq!(b.l_adv, 1.7);
        let mut hp0 = hp.clone();
        hp0.alpha = 0.0;
        let b = combine_values(1.7, 2.9, 3.0, 4.0, &hp0).unwrap();
        assert_eq!(b.l_total, b.l_adv);

        let mut bad = hp.clone();
        bad.lambda = 1.5;
        assert!(combine_values(1.0, 1.0, 1.0, 1.0, &bad).is_err());
    }

    #[test]
    fn combine_ablation_zeroes_terms() {
        let hp = HyperParams {
            ablation: Ablation { dscl: false, cscl: true, al: false },
            ..HyperParams::default()
        };
        let b = combine_values(1.0, 2.0, 3.0, 4.0, &hp).unwrap();
        assert_eq!(b.l_d, 0.0);
        assert_eq!(b.l_adv, b.l_cls);
        assert_eq!(b.l_cls_adv, b.l_cls);
        assert_eq!(b.l_total, 1.0 + 4.0 * hp.alpha);
    }

    #[test]
    fn combine_on_tape_matches_scalar_rule() {
        let hp = HyperParams::default();
        let mut t = Tape::new();
        let vals = [0.81, 1.13, 2.4, 0.37];
        let vars: Vec<Var> = vals.iter().map(|&v| t.leaf(Tensor::scalar(v)).unwrap()).collect();
        let terms = LossTerms {
            classification: vars[0],
            adversarial: Some(vars[1]),
            domain: Some(vars[2]),
            category: Some(vars[3]),
        };
        let (total, b) = combine_losses(&mut t, terms, &hp).unwrap();
        let expect = combine_values(vals[0], vals[1], vals[2], vals[3], &hp).unwrap();
        assert_eq!(b, expect);
        t.backward(total).unwrap();
        let lam = hp.lambda;
        assert!((t.grad(vars[0])[0] - (1.0 - lam)).abs() < 1e-15);
        assert!((t.grad(vars[1])[0] - lam).abs() < 1e-15);
        assert_eq!(t.grad(vars[2])[0], hp.alpha);
    }
}
