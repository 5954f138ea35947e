//! The network: a domain feature extractor, a category feature extractor
//! and a linear classifier over their concatenated outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DropoutMask, Mode, Tape, Tensor, Var};

/// Default width of each extractor's output representation.
pub const REPR_DIM: usize = 128;

/// Shape of one multilayer perceptron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
}

impl MlpSpec {
    /// `input → 1024 → 512 → 128` with dropout 0.4.
    pub fn extractor(input_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims: vec![1024, 512],
            output_dim: REPR_DIM,
            dropout_rate: 0.4,
        }
    }

    /// Single linear layer.
    pub fn classifier(input_dim: usize, num_classes: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims: Vec::new(),
            output_dim: num_classes,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidParam(format!("all layer widths must be >= 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParam(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Tape handles of one MLP's weights and biases.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::InvalidParam(e.to_string()))?;
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Ok(Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], data)?,
                    bias: Tensor::zeros(vec![fan_out]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { spec, layers })
    }

    pub fn register(&self, tape: &mut Tape) -> Result<MlpVars> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((tape.leaf(l.weight.clone())?, tape.leaf(l.bias.clone())?)))
            .collect::<Result<_>>()?;
        Ok(MlpVars { layers })
    }

    /// Linear → ReLU → dropout for every hidden layer, then a final linear
    /// layer. Supplied masks are reused; otherwise fresh ones are sampled.
    pub fn extract<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        x: Var,
        mode: Mode,
        masks: Option<&[DropoutMask]>,
        rng: &mut R,
    ) -> Result<(Var, Vec<DropoutMask>)> {
        let cols = tape.value(x).dims2().map(|d| d.1);
        if cols != Some(self.spec.input_dim) {
            return Err(Error::Dimension(format!(
                "input has shape {:?}, network expects {} features",
                tape.value(x).shape(),
                self.spec.input_dim
            )));
        }
        if let Some(m) = masks {
            if m.len() != self.spec.hidden_dims.len() {
                return Err(Error::InvalidParam(format!(
                    "expected {} dropout masks, got {}",
                    self.spec.hidden_dims.len(),
                    m.len()
                )));
            }
        }
        let last = vars.layers.len() - 1;
        let mut h = x;
        let mut used = Vec::with_capacity(last);
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if i < last {
                h = tape.relu(h)?;
                let mask = masks.map(|m| &m[i]);
                let (out, mask) = tape.dropout(h, self.spec.dropout_rate, mode, mask, rng)?;
                h = out;
                used.push(mask);
            }
        }
        Ok((h, used))
    }
}

/// Parameters of the whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub domain: Mlp,
    pub category: Mlp,
    pub classifier: Mlp,
    pub seed: u64,
    /// Stop classification gradients from reaching the domain extractor.
    pub detach_domain: bool,
}

#[derive(Clone, Debug)]
pub struct ParamVars {
    pub domain: MlpVars,
    pub category: MlpVars,
    pub classifier: MlpVars,
}

impl ParamVars {
    /// All handles in [`ModelParams::named_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        [&self.domain, &self.category, &self.classifier]
            .iter()
            .flat_map(|m| m.layers.iter().flat_map(|&(w, b)| [w, b]))
            .collect()
    }
}

/// Dropout masks of both extractors from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMasks {
    pub domain: Vec<DropoutMask>,
    pub category: Vec<DropoutMask>,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub f_d: Var,
    pub f_c: Var,
    pub h: Var,
    pub logits: Var,
    pub masks: ModelMasks,
}

/// Eval-mode outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct Features {
    pub f_d: Tensor,
    pub f_c: Tensor,
    pub logits: Tensor,
}

impl ModelParams {
    pub fn init(spec_d: MlpSpec, spec_c: MlpSpec, spec_clf: MlpSpec, seed: u64) -> Result<Self> {
        if spec_d.input_dim != spec_c.input_dim {
            return Err(Error::InvalidParam(format!(
                "extractor input widths differ: {} vs {}",
                spec_d.input_dim, spec_c.input_dim
            )));
        }
        if spec_clf.input_dim != spec_d.output_dim + spec_c.output_dim {
            return Err(Error::InvalidParam(format!(
                "classifier input {} != {} + {}",
                spec_clf.input_dim, spec_d.output_dim, spec_c.output_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelParams {
            domain: Mlp::init(spec_d, &mut rng)?,
            category: Mlp::init(spec_c, &mut rng)?,
            classifier: Mlp::init(spec_clf, &mut rng)?,
            seed,
            detach_domain: false,
        })
    }

    /// Both extractors share `extractor`; the classifier maps their
    /// concatenation to `num_classes` logits.
    pub fn with_extractor(extractor: MlpSpec, num_classes: usize, seed: u64) -> Result<Self> {
        let clf = MlpSpec::classifier(2 * extractor.output_dim, num_classes);
        ModelParams::init(extractor.clone(), extractor, clf, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.domain.spec.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.spec.output_dim
    }

    fn mlps(&self) -> [(&'static str, &Mlp); 3] {
        [("f_d", &self.domain), ("f_c", &self.category), ("clf", &self.classifier)]
    }

    /// Every parameter tensor with a stable name such as `f_d.0.weight`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, mlp) in self.mlps() {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [&mut self.domain, &mut self.category, &mut self.classifier]
            .into_iter()
            .flat_map(|m| m.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]))
            .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars> {
        Ok(ParamVars {
            domain: self.domain.register(tape)?,
            category: self.category.register(tape)?,
            classifier: self.classifier.register(tape)?,
        })
    }

    /// `f_d = F_d(x)`, `f_c = F_c(x)`, `h = [f_d, f_c]`, `logits = C(h)`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        mode: Mode,
        masks: Option<&ModelMasks>,
        rng: &mut R,
    ) -> Result<ForwardOut> {
        let (f_d, domain) =
            self.domain
                .extract(tape, &vars.domain, x, mode, masks.map(|m| m.domain.as_slice()), rng)?;
        let (f_c, category) = self.category.extract(
            tape,
            &vars.category,
            x,
            mode,
            masks.map(|m| m.category.as_slice()),
            rng,
        )?;
        let d_in = if self.detach_domain { tape.detach(f_d)? } else { f_d };
        let h = tape.concat(d_in, f_c)?;
        let (logits, _) =
            self.classifier
                .extract(tape, &vars.classifier, h, Mode::Eval, Some(&[]), rng)?;
        Ok(ForwardOut {
            f_d,
            f_c,
            h,
            logits,
            masks: ModelMasks { domain, category },
        })
    }

    /// Eval-mode features and logits for a dense input matrix.
    pub fn infer(&self, x: &Tensor) -> Result<Features> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &vars, xv, Mode::Eval, None, &mut rng)?;
        Ok(Features {
            f_d: tape.value(out.f_d).clone(),
            f_c: tape.value(out.f_c).clone(),
            logits: tape.value(out.logits).clone(),
        })
    }
}
