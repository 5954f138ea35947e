//! Three-phase training step (clean forward, backward of the
//! classification loss to the input, adversarial forward), Adam and the
//! epoch loop with best-dev model selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, stratified_batches, Batch, Corpus};
use crate::encoders::{MlpSpec, ModelParams, REPR_DIM};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{adv_noise, combine_losses, nll_loss, supcon_loss, LossBundle, LossTerms, NoiseScope};
use crate::tensor::{Mode, Tape, Tensor};

/// Which auxiliary objectives are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Domain-grouped contrastive loss on the domain features.
    pub dscl: bool,
    /// Class-grouped contrastive loss on the category features.
    pub cscl: bool,
    /// Adversarial second forward pass.
    pub al: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            dscl: true,
            cscl: true,
            al: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub tau_domain: f64,
    pub tau_category: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    /// Instances drawn from each `(domain, class)` cell per batch.
    pub positives_per_cell: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub noise_scope: NoiseScope,
    pub detach_domain: bool,
    pub hidden_dims: Vec<usize>,
    pub repr_dim: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tau_domain: 0.1,
            tau_category: 0.1,
            epsilon: 0.3,
            lambda: 0.3,
            alpha: 0.01,
            learning_rate: 1e-4,
            dropout: 0.4,
            batch_size: 32,
            positives_per_cell: 4,
            epochs: 40,
            seed: 0,
            ablation: Ablation::default(),
            noise_scope: NoiseScope::PerExample,
            detach_domain: false,
            hidden_dims: vec![1024, 512],
            repr_dim: REPR_DIM,
        }
    }
}

impl HyperParams {
    /// Settings for the default synthetic benchmark: loss weights and
    /// temperatures as in [`Default`], but one hidden layer of 128 units,
    /// 20 epochs and a 1e-3 learning rate so that a 25-run ablation
    /// finishes in a few minutes on one core.
    pub fn synthetic_benchmark() -> Self {
        HyperParams {
            hidden_dims: vec![128],
            epochs: 20,
            learning_rate: 1e-3,
            ..HyperParams::default()
        }
    }

    pub fn extractor_spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.repr_dim,
            dropout_rate: self.dropout,
        }
    }

    /// Fresh model for `input_dim` features, seeded by `self.seed`.
    pub fn build_model(&self, input_dim: usize, num_classes: usize) -> Result<ModelParams> {
        let mut model = ModelParams::with_extractor(self.extractor_spec(input_dim), num_classes, self.seed)?;
        model.detach_domain = self.detach_domain;
        Ok(model)
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &ModelParams) -> Self {
        AdamState::new(model.named_tensors().iter().map(|(_, t)| t.len()))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `names` labels the parameters in
    /// diagnostics.
    pub fn apply(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64, names: &[String]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::InvalidParam(format!(
                "adam state tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[k].len() {
                return Err(Error::InvalidParam(format!("gradient shape mismatch for parameter {k}")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                let name = names.get(k).cloned().unwrap_or_else(|| format!("#{k}"));
                return Err(Error::non_finite(format!(
                    "gradient of {name} at adam step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to every model parameter.
pub fn adam_step(model: &mut ModelParams, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut params: Vec<&mut [f64]> = model.tensors_mut().into_iter().map(Tensor::data_mut).collect();
    let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    state.apply(&mut params, &grads, lr, &names)
}

/// How many passes of each kind the trainer executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub forwards: u64,
    pub backwards: u64,
    pub adversarial_forwards: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub losses: LossBundle,
    /// Correct clean-forward predictions in the batch.
    pub correct: usize,
}

/// Owns the model, optimizer state and dropout stream of one run. A clone
/// replays the same dropout masks as the original.
#[derive(Clone)]
pub struct Trainer {
    pub model: ModelParams,
    pub adam: AdamState,
    pub hp: HyperParams,
    pub counters: Counters,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: ModelParams, hp: HyperParams) -> Self {
        let adam = AdamState::for_model(&model);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, 1));
        Trainer {
            model,
            adam,
            hp,
            counters: Counters::default(),
            rng,
        }
    }

    /// Records every loss of one step on a fresh tape and returns the
    /// tape, the parameter handles and the total-loss node. `noise`
    /// overrides the computed perturbation.
    fn record(
        &mut self,
        batch: &Batch,
        fixed_noise: Option<&Tensor>,
    ) -> Result<(Tape, crate::encoders::ParamVars, crate::tensor::Var, LossBundle, usize, Tensor)> {
        let hp = &self.hp;
        let al = hp.ablation.al;
        let mut tape = Tape::new();
        let vars = self.model.register(&mut tape)?;
        let x = if al && fixed_noise.is_none() {
            tape.leaf(batch.x.clone())?
        } else {
            tape.constant(batch.x.clone())?
        };
        let clean = self
            .model
            .forward(&mut tape, &vars, x, Mode::Train, None, &mut self.rng)?;
        self.counters.forwards += 1;
        let domain = if hp.ablation.dscl {
            Some(supcon_loss(&mut tape, clean.f_d, &batch.domains, hp.tau_domain)?)
        } else {
            None
        };
        let category = if hp.ablation.cscl {
            Some(supcon_loss(&mut tape, clean.f_c, &batch.labels, hp.tau_category)?)
        } else {
            None
        };
        let cls = nll_loss(&mut tape, clean.logits, &batch.labels)?;
        let correct = count_correct(tape.value(clean.logits), &batch.labels);

        let mut noise = Tensor::zeros(batch.x.shape().to_vec());
        let adversarial = if al {
            noise = match fixed_noise {
                Some(n) => n.clone(),
                None => {
                    tape.backward_wrt(cls, &[x])?;
                    self.counters.backwards += 1;
                    let g = Tensor::new(batch.x.shape().to_vec(), tape.grad(x).to_vec())?;
                    tape.resume();
                    adv_noise(&g, hp.epsilon, hp.noise_scope)?
                }
            };
            let mut perturbed = batch.x.clone();
            for (v, n) in perturbed.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
            let xa = tape.constant(perturbed)?;
            let adv = self
                .model
                .forward(&mut tape, &vars, xa, Mode::Train, Some(&clean.masks), &mut self.rng)?;
            self.counters.forwards += 1;
            self.counters.adversarial_forwards += 1;
            Some(nll_loss(&mut tape, adv.logits, &batch.labels)?)
        } else {
            None
        };
        let terms = LossTerms {
            classification: cls,
            adversarial,
            domain,
            category,
        };
        let (total, losses) = combine_losses(&mut tape, terms, hp)?;
        Ok((tape, vars, total, losses, correct, noise))
    }

    /// Gradient of the total loss for every parameter, without updating.
    /// With `noise` given, the perturbation is held fixed instead of being
    /// derived from the input gradient.
    pub fn loss_and_grads(&mut self, batch: &Batch, noise: Option<&Tensor>) -> Result<(LossBundle, Vec<Vec<f64>>, Tensor)> {
        let (mut tape, vars, total, losses, _, noise) = self.record(batch, noise)?;
        let params = vars.all();
        tape.backward_wrt(total, &params)?;
        self.counters.backwards += 1;
        let grads = params.iter().map(|&v| tape.grad(v).to_vec()).collect();
        Ok((losses, grads, noise))
    }

    /// Forward, input-gradient backward, adversarial forward, final
    /// backward and one Adam update.
    pub fn step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let (mut tape, vars, total, losses, correct, _) = self.record(batch, None)?;
        if !losses.l_total.is_finite() {
            return Err(Error::non_finite(format!("total loss at step {}", self.counters.steps + 1)));
        }
        let params = vars.all();
        tape.backward_wrt(total, &params)?;
        self.counters.backwards += 1;
        let grads: Vec<Vec<f64>> = params.iter().map(|&v| tape.grad(v).to_vec()).collect();
        drop(tape);
        adam_step(&mut self.model, &grads, &mut self.adam, self.hp.learning_rate)?;
        self.counters.steps += 1;
        Ok(StepOutput { losses, correct })
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean losses and accuracies of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_total: f64,
    pub l_d: f64,
    pub l_c: f64,
    pub l_cls: f64,
    pub l_cls_adv: f64,
    pub l_adv: f64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub counters: Counters,
}

/// Trains and returns the parameters with the best dev macro-average
/// accuracy (earliest epoch on ties).
pub fn train(model: ModelParams, train_set: &Corpus, dev_set: &Corpus, hp: &HyperParams) -> Result<(ModelParams, TrainHistory)> {
    train_with(model, train_set, dev_set, hp, |_| Ok(()))
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F>(
    model: ModelParams,
    train_set: &Corpus,
    dev_set: &Corpus,
    hp: &HyperParams,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainHistory)>
where
    F: FnMut(&EpochRecord) -> Result<()>,
{
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::InvalidParam("training and dev sets must be nonempty".into()));
    }
    for (name, c) in [("training", train_set), ("dev", dev_set)] {
        if c.feature_dim != model.input_dim() {
            return Err(Error::Dimension(format!(
                "{name} set has {} features, model expects {}",
                c.feature_dim,
                model.input_dim()
            )));
        }
    }
    let mut history = TrainHistory::default();
    let mut best = (model.clone(), f64::NEG_INFINITY);
    let mut trainer = Trainer::new(model, hp.clone());
    for epoch in 0..hp.epochs {
        let seed = derive_seed(hp.seed, 1000 + epoch as u64);
        let batches = stratified_batches(train_set, hp.batch_size, hp.positives_per_cell, seed)?;
        let mut sums = [0.0; 6];
        let (mut correct, mut seen) = (0usize, 0usize);
        for idx in &batches {
            let batch = train_set.batch(idx);
            let out = trainer.step(&batch).map_err(|e| match e {
                Error::NonFinite { context } => Error::non_finite(format!("{context} (epoch {epoch})")),
                other => other,
            })?;
            let l = &out.losses;
            for (s, v) in sums.iter_mut().zip([l.l_total, l.l_d, l.l_c, l.l_cls, l.l_cls_adv, l.l_adv]) {
                *s += v;
            }
            correct += out.correct;
            seen += idx.len();
        }
        let n = batches.len().max(1) as f64;
        let dev = evaluate(&trainer.model, dev_set)?;
        let record = EpochRecord {
            epoch,
            l_total: sums[0] / n,
            l_d: sums[1] / n,
            l_c: sums[2] / n,
            l_cls: sums[3] / n,
            l_cls_adv: sums[4] / n,
            l_adv: sums[5] / n,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            dev_accuracy: dev.average_accuracy,
        };
        on_epoch(&record)?;
        if record.dev_accuracy > best.1 {
            best = (trainer.model.clone(), record.dev_accuracy);
            history.best_epoch = Some(epoch);
        }
        history.records.push(record);
    }
    history.counters = trainer.counters;
    Ok((best.0, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn defaults_match_published_settings() {
        let hp = HyperParams::default();
        assert_eq!((hp.tau_domain, hp.tau_category), (0.1, 0.1));
        assert_eq!((hp.epsilon, hp.lambda, hp.alpha), (0.3, 0.3, 0.01));
        assert_eq!((hp.batch_size, hp.learning_rate, hp.dropout), (32, 1e-4, 0.4));
        assert_eq!(hp.repr_dim, 128);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3, 0.5, -7.0] {
            let mut state = AdamState::new([1]);
            let mut theta = [1.0];
            state.apply(&mut [&mut theta], &[&[g]], 0.01, &[]).unwrap();
            let moved = 1.0 - theta[0];
            assert!((moved.abs() - 0.01).abs() < 1e-6, "{moved}");
            assert_eq!(moved.signum(), g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut state = AdamState::new([3]);
        let mut theta = [1.0, -2.0, 0.5];
        for _ in 0..5 {
            state.apply(&mut [&mut theta], &[&[0.0; 3]], 0.1, &[]).unwrap();
        }
        assert_eq!(theta, [1.0, -2.0, 0.5]);
        assert_eq!(state.step(), 5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut state = AdamState::new([1]);
        let mut theta = [1.0];
        for _ in 0..100 {
            let g = 2.0 * theta[0];
            state.apply(&mut [&mut theta], &[&[g]], 0.1, &[]).unwrap();
        }
        assert!(theta[0].abs() < 0.1, "{}", theta[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut state = AdamState::new([2]);
        let mut theta = [1.0, 1.0];
        let err = state
            .apply(&mut [&mut theta], &[&[0.0, f64::NAN]], 0.1, &["f_d.0.weight".into()])
            .unwrap_err();
        assert!(err.to_string().contains("f_d.0.weight") && err.to_string().contains("step 1"));
        assert_eq!(theta, [1.0, 1.0]);
        assert_eq!(state.step(), 0);
    }

    fn tiny_setup(al: bool) -> (Trainer, Batch) {
        let cfg = SynthConfig {
            num_domains: 2,
            per_cell_count: 4,
            feature_dim: 6,
            ..SynthConfig::default()
        };
        let corpus = synth_generate(&cfg).unwrap();
        let mut hp = HyperParams {
            hidden_dims: vec![8],
            repr_dim: 4,
            batch_size: 8,
            positives_per_cell: 2,
            ..HyperParams::default()
        };
        hp.ablation.al = al;
        let model = hp.build_model(6, 2).unwrap();
        let idx = stratified_batches(&corpus, 8, 2, 0).unwrap().remove(0);
        (Trainer::new(model, hp), corpus.batch(&idx))
    }

    #[test]
    fn zero_epsilon_reproduces_clean_loss() {
        let (mut trainer, batch) = tiny_setup(true);
        trainer.hp.epsilon = 0.0;
        let out = trainer.step(&batch).unwrap();
        assert_eq!(out.losses.l_cls_adv, out.losses.l_cls);
        assert_eq!(out.losses.l_adv, out.losses.l_cls);
        assert_eq!(
            out.losses.l_total,
            out.losses.l_cls + (out.losses.l_d + out.losses.l_c) * trainer.hp.alpha
        );
    }

    #[test]
    fn disabled_adversary_runs_one_forward_one_backward() {
        let (mut trainer, batch) = tiny_setup(false);
        trainer.hp.lambda = 0.9;
        let out = trainer.step(&batch).unwrap();
        assert_eq!(trainer.counters.forwards, 1);
        assert_eq!(trainer.counters.backwards, 1);
        assert_eq!(trainer.counters.adversarial_forwards, 0);
        assert_eq!(out.losses.l_cls_adv, out.losses.l_cls);
        assert_eq!(out.losses.l_adv, out.losses.l_cls);

        let (mut trainer, batch) = tiny_setup(true);
        trainer.step(&batch).unwrap();
        assert_eq!(trainer.counters.forwards, 2);
        assert_eq!(trainer.counters.backwards, 2);
        assert_eq!(trainer.counters.adversarial_forwards, 1);
    }

    #[test]
    fn adam_step_counter_increments_once_per_step() {
        let (mut trainer, batch) = tiny_setup(true);
        trainer.step(&batch).unwrap();
        trainer.step(&batch).unwrap();
        assert_eq!(trainer.adam.step(), 2);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let cfg = SynthConfig {
            per_cell_count: 5,
            feature_dim: 6,
            ..SynthConfig::default()
        };
        let corpus = synth_generate(&cfg).unwrap();
        let hp = HyperParams {
            epochs: 0,
            hidden_dims: vec![4],
            repr_dim: 3,
            ..HyperParams::default()
        };
        let model = hp.build_model(6, 2).unwrap();
        let (out, history) = train(model.clone(), &corpus, &corpus, &hp).unwrap();
        assert_eq!(out, model);
        assert!(history.records.is_empty());
        let empty = corpus.with_instances(vec![]);
        assert!(train(model.clone(), &empty, &corpus, &hp).is_err());
        let wrong = hp.build_model(7, 2).unwrap();
        assert!(matches!(train(wrong, &corpus, &corpus, &hp), Err(Error::Dimension(_))));
    }
}
