//! Accuracy metrics, feature-alignment diagnostics and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{split, Corpus, Splits};
use crate::encoders::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, NORM_FLOOR};
use crate::trainer::{argmax, train, Ablation, Counters, HyperParams};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_domain_accuracy: BTreeMap<usize, f64>,
    /// Unweighted mean over domains present in the corpus.
    pub average_accuracy: f64,
    pub n_per_domain: BTreeMap<usize, usize>,
}

impl Metrics {
    /// Accuracy per domain from parallel slices of domain ids, true labels
    /// and predictions.
    pub fn from_predictions(domains: &[usize], labels: &[usize], predictions: &[usize]) -> Self {
        let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for ((&d, &y), &p) in domains.iter().zip(labels).zip(predictions) {
            let e = hits.entry(d).or_default();
            e.0 += usize::from(y == p);
            e.1 += 1;
        }
        let per_domain_accuracy: BTreeMap<usize, f64> =
            hits.iter().map(|(&d, &(c, n))| (d, c as f64 / n as f64)).collect();
        let average_accuracy = if per_domain_accuracy.is_empty() {
            0.0
        } else {
            per_domain_accuracy.values().sum::<f64>() / per_domain_accuracy.len() as f64
        };
        Metrics {
            per_domain_accuracy,
            average_accuracy,
            n_per_domain: hits.iter().map(|(&d, &(_, n))| (d, n)).collect(),
        }
    }
}

fn check_dims(model: &ModelParams, corpus: &Corpus) -> Result<()> {
    if corpus.feature_dim != model.input_dim() {
        return Err(Error::Dimension(format!(
            "corpus has {} features but the model was trained on {}",
            corpus.feature_dim,
            model.input_dim()
        )));
    }
    if corpus.num_classes > model.num_classes() {
        return Err(Error::Dimension(format!(
            "corpus declares {} classes but the model predicts {}",
            corpus.num_classes,
            model.num_classes()
        )));
    }
    Ok(())
}

/// Eval-mode domain features, category features and logits for the whole
/// corpus, stacked in instance order.
pub fn corpus_features(model: &ModelParams, corpus: &Corpus) -> Result<(Tensor, Tensor, Tensor)> {
    check_dims(model, corpus)?;
    let mut parts: [Vec<f64>; 3] = Default::default();
    let all: Vec<usize> = (0..corpus.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let f = model.infer(&corpus.batch(chunk).x)?;
        for (acc, t) in parts.iter_mut().zip([f.f_d, f.f_c, f.logits]) {
            acc.extend(t.into_data());
        }
    }
    let n = corpus.len();
    let [d, c, l] = parts;
    Ok((
        Tensor::new(vec![n, model.domain.spec.output_dim], d)?,
        Tensor::new(vec![n, model.category.spec.output_dim], c)?,
        Tensor::new(vec![n, model.num_classes()], l)?,
    ))
}

/// Eval-mode accuracy per domain and macro average.
pub fn evaluate(model: &ModelParams, corpus: &Corpus) -> Result<Metrics> {
    if corpus.is_empty() {
        return Err(Error::InvalidParam("cannot evaluate an empty corpus".into()));
    }
    let (_, _, logits) = corpus_features(model, corpus)?;
    let predictions: Vec<usize> = (0..corpus.len()).map(|i| argmax(logits.row(i))).collect();
    let domains: Vec<usize> = corpus.instances.iter().map(|i| i.domain).collect();
    let labels: Vec<usize> = corpus.instances.iter().map(|i| i.label).collect();
    Ok(Metrics::from_predictions(&domains, &labels, &predictions))
}

/// Mean pairwise cosine similarity within and between groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineGap {
    pub within: f64,
    pub between: f64,
    pub gap: f64,
}

/// Uses group sums of unit rows, so it is linear in the number of rows:
/// the sum of `cos(i, j)` over ordered pairs `i ≠ j` in a set is
/// `‖Σ z‖² − Σ ‖z‖²`.
pub fn cosine_gap(features: &Tensor, groups: &[usize]) -> Result<CosineGap> {
    let (n, d) = features
        .dims2()
        .ok_or_else(|| Error::shape("cosine_gap", features.shape(), &[0, 0]))?;
    if groups.len() != n {
        return Err(Error::shape("cosine_gap", features.shape(), &[groups.len()]));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, f64, usize)> = BTreeMap::new();
    let mut total = vec![0.0; d];
    let mut self_total = 0.0;
    for (i, &g) in groups.iter().enumerate() {
        let row = features.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if norm < NORM_FLOOR { 0.0 } else { 1.0 / norm };
        let entry = sums.entry(g).or_insert_with(|| (vec![0.0; d], 0.0, 0));
        let sq = if inv == 0.0 { 0.0 } else { 1.0 };
        for j in 0..d {
            entry.0[j] += row[j] * inv;
            total[j] += row[j] * inv;
        }
        entry.1 += sq;
        entry.2 += 1;
        self_total += sq;
    }
    let sq_norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let (mut within_sum, mut within_pairs) = (0.0, 0usize);
    for (s, selfs, count) in sums.values() {
        within_sum += sq_norm(s) - selfs;
        within_pairs += count * (count - 1);
    }
    let all_sum = sq_norm(&total) - self_total;
    let between_pairs = n * n.saturating_sub(1) - within_pairs;
    let within = if within_pairs > 0 { within_sum / within_pairs as f64 } else { 0.0 };
    let between = if between_pairs > 0 {
        (all_sum - within_sum) / between_pairs as f64
    } else {
        0.0
    };
    Ok(CosineGap {
        within,
        between,
        gap: within - between,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Domain grouping on the domain features.
    pub domain_separation: CosineGap,
    /// Class grouping, pooled across domains, on the category features.
    pub category_alignment: CosineGap,
}

pub fn alignment_report(model: &ModelParams, corpus: &Corpus) -> Result<AlignmentReport> {
    let distinct = |f: fn(&crate::data::Instance) -> usize| {
        let mut v: Vec<usize> = corpus.instances.iter().map(f).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    if distinct(|i| i.domain) < 2 || distinct(|i| i.label) < 2 {
        return Err(Error::InvalidParam(
            "alignment report needs at least 2 domains and 2 classes".into(),
        ));
    }
    let (f_d, f_c, _) = corpus_features(model, corpus)?;
    let domains: Vec<usize> = corpus.instances.iter().map(|i| i.domain).collect();
    let labels: Vec<usize> = corpus.instances.iter().map(|i| i.label).collect();
    Ok(AlignmentReport {
        domain_separation: cosine_gap(&f_d, &domains)?,
        category_alignment: cosine_gap(&f_c, &labels)?,
    })
}

/// One training configuration of an ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoDscl,
    NoCscl,
    NoAl,
    /// All three auxiliary objectives off: a plain single classifier.
    Baseline,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Full, Arm::NoDscl, Arm::NoCscl, Arm::NoAl, Arm::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoDscl => "no_dscl",
            Arm::NoCscl => "no_cscl",
            Arm::NoAl => "no_al",
            Arm::Baseline => "baseline",
        }
    }

    pub fn ablation(self) -> Ablation {
        let on = Ablation::default();
        match self {
            Arm::Full => on,
            Arm::NoDscl => Ablation { dscl: false, ..on },
            Arm::NoCscl => Ablation { cscl: false, ..on },
            Arm::NoAl => Ablation { al: false, ..on },
            Arm::Baseline => Ablation {
                dscl: false,
                cscl: false,
                al: false,
            },
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::InvalidParam(format!("unknown ablation arm `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub metrics: Metrics,
    pub best_epoch: Option<usize>,
    pub counters: Counters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation; zero for a single run.
    pub std_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<ArmSummary>,
}

impl AblationTable {
    /// Summarizes test macro-accuracy per arm, in order of first
    /// appearance.
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let mut arms: Vec<Arm> = Vec::new();
        for r in &rows {
            if !arms.contains(&r.arm) {
                arms.push(r.arm);
            }
        }
        let summary = arms
            .into_iter()
            .map(|arm| {
                let acc: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.arm == arm)
                    .map(|r| r.metrics.average_accuracy)
                    .collect();
                let (mean, std) = mean_std(&acc);
                ArmSummary {
                    arm,
                    runs: acc.len(),
                    mean_accuracy: mean,
                    std_accuracy: std,
                }
            })
            .collect();
        AblationTable { rows, summary }
    }

    pub fn summary_for(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }
}

/// Everything produced by one arm/seed run.
#[derive(Clone, Debug)]
pub struct ArmRun {
    pub row: AblationRow,
    pub splits: Splits,
    pub initial: ModelParams,
    pub best: ModelParams,
}

/// Trains one arm on one seed: the seed fixes the split, the
/// initialization, the batch order and the dropout stream.
pub fn train_arm(corpus: &Corpus, hp: &HyperParams, ratios: (f64, f64, f64), arm: Arm, seed: u64) -> Result<ArmRun> {
    let splits = split(corpus, ratios, seed)?;
    let hp = HyperParams {
        seed,
        ablation: arm.ablation(),
        ..hp.clone()
    };
    let initial = hp.build_model(corpus.feature_dim, corpus.num_classes)?;
    let (best, history) = train(initial.clone(), &splits.train, &splits.dev, &hp)?;
    let row = AblationRow {
        arm,
        seed,
        metrics: evaluate(&best, &splits.test)?,
        best_epoch: history.best_epoch,
        counters: history.counters,
    };
    Ok(ArmRun {
        row,
        splits,
        initial,
        best,
    })
}

/// [`train_arm`] reduced to its table row.
pub fn run_arm(corpus: &Corpus, hp: &HyperParams, ratios: (f64, f64, f64), arm: Arm, seed: u64) -> Result<AblationRow> {
    Ok(train_arm(corpus, hp, ratios, arm, seed)?.row)
}

/// Trains every `(arm, seed)` pair and summarizes test macro-accuracy per
/// arm. Runs are independent and execute on the rayon pool when the
/// `parallel` feature is enabled.
pub fn run_ablation(corpus: &Corpus, hp: &HyperParams, ratios: (f64, f64, f64), arms: &[Arm], seeds: &[u64]) -> Result<AblationTable> {
    #[cfg(feature = "parallel")]
    {
        run_ablation_with(corpus, hp, ratios, arms, seeds, true)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_ablation_with(corpus, hp, ratios, arms, seeds, false)
    }
}

/// [`run_ablation`] with an explicit choice of execution path. Without
/// the `parallel` feature the flag is ignored.
pub fn run_ablation_with(
    corpus: &Corpus,
    hp: &HyperParams,
    ratios: (f64, f64, f64),
    arms: &[Arm],
    seeds: &[u64],
    parallel: bool,
) -> Result<AblationTable> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidParam("ablation needs at least one arm and one seed".into()));
    }
    let jobs: Vec<(Arm, u64)> = arms
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let run = |&(arm, seed): &(Arm, u64)| run_arm(corpus, hp, ratios, arm, seed);
    let rows: Vec<AblationRow> = if parallel {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            jobs.par_iter().map(run).collect::<Result<_>>()?
        }
        #[cfg(not(feature = "parallel"))]
        {
            jobs.iter().map(run).collect::<Result<_>>()?
        }
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    Ok(AblationTable::from_rows(rows))
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_split_accuracy() {
        let m = Metrics::from_predictions(&[0, 0, 1, 1], &[0, 1, 0, 1], &[0, 1, 0, 1]);
        assert!(m.per_domain_accuracy.values().all(|&a| a == 1.0));
        assert_eq!(m.average_accuracy, 1.0);

        let m = Metrics::from_predictions(&[0, 0, 1, 1], &[0, 1, 0, 1], &[0, 1, 1, 0]);
        assert_eq!(m.average_accuracy, 0.5);
        assert_eq!(m.n_per_domain[&1], 2);
    }

    #[test]
    fn macro_average_ignores_domain_sizes() {
        let m = Metrics::from_predictions(&[0, 1, 1, 1], &[0, 0, 0, 0], &[0, 1, 1, 1]);
        assert_eq!(m.average_accuracy, 0.5);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn cosine_gap_degenerate_and_orthogonal() {
        let same = Tensor::from_rows(&vec![vec![0.3, 0.4]; 6]).unwrap();
        let g = cosine_gap(&same, &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!(g.gap.abs() < 1e-12);

        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let mut r = vec![0.0; 3];
                r[i / 2] = 1.0 + i as f64;
                r
            })
            .collect();
        let g = cosine_gap(&Tensor::from_rows(&rows).unwrap(), &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!((g.within - 1.0).abs() < 1e-12);
        assert!(g.between.abs() < 1e-12);
        assert!((g.gap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_gap_matches_pairwise_enumeration() {
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 1.3).sin()).collect())
            .collect();
        let groups = [0, 1, 0, 2, 1, 0, 2];
        let t = Tensor::from_rows(&rows).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let (mut w, mut wn, mut b, mut bn) = (0.0, 0, 0.0, 0);
        for i in 0..7 {
            for j in 0..7 {
                if i == j {
                    continue;
                }
                if groups[i] == groups[j] {
                    w += cos(&rows[i], &rows[j]);
                    wn += 1;
                } else {
                    b += cos(&rows[i], &rows[j]);
                    bn += 1;
                }
            }
        }
        let g = cosine_gap(&t, &groups).unwrap();
        assert!((g.within - w / wn as f64).abs() < 1e-12);
        assert!((g.between - b / bn as f64).abs() < 1e-12);
    }

    #[test]
    fn arm_names_round_trip() {
        for arm in Arm::ALL {
            assert_eq!(arm.name().parse::<Arm>().unwrap(), arm);
        }
        assert!("nope".parse::<Arm>().is_err());
        assert_eq!(Arm::Baseline.ablation(), Ablation { dscl: false, cscl: false, al: false });
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - std::f64::consts::SQRT_2).abs() < 1e-12);
    }
}
