//! Sparse bag-of-features corpora: parsing and writing the line format,
//! frequency-based feature selection, stratified splits, synthetic
//! multi-domain data and the cell-balanced batch sampler.
//!
//! File grammar:
//!
//! ```text
//! dim=<int> domains=<int> classes=<int>
//! <domain><TAB><label><TAB><idx>:<val> <idx>:<val> ...
//! ```
//!
//! Lines starting with `#` are comments. The comments `#domain_names=a,b`
//! and `#class_names=neg,pos` name the domains and classes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mixes a base seed with a stream id (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub domain: usize,
    pub label: usize,
    /// `(index, value)` pairs with strictly increasing indices.
    pub features: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    pub feature_dim: usize,
    pub num_domains: usize,
    pub num_classes: usize,
    pub domain_names: Vec<String>,
    pub class_names: Vec<String>,
}

/// Dense inputs with their domain ids and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub domains: Vec<usize>,
    pub labels: Vec<usize>,
}

fn default_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

impl Corpus {
    pub fn empty(feature_dim: usize, num_domains: usize, num_classes: usize) -> Self {
        Corpus {
            instances: Vec::new(),
            feature_dim,
            num_domains,
            num_classes,
            domain_names: default_names("domain", num_domains),
            class_names: default_names("class", num_classes),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Same metadata, different instances.
    pub fn with_instances(&self, instances: Vec<Instance>) -> Self {
        Corpus {
            instances,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Corpus {
            instances: Vec::new(),
            feature_dim: self.feature_dim,
            num_domains: self.num_domains,
            num_classes: self.num_classes,
            domain_names: self.domain_names.clone(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, inst) in self.instances.iter().enumerate() {
            check_instance(inst, self).map_err(|reason| Error::Parse { line: n + 1, reason })?;
        }
        Ok(())
    }

    /// Instance indices grouped by `(domain, label)`.
    pub fn cells(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut cells: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for (i, inst) in self.instances.iter().enumerate() {
            cells.entry((inst.domain, inst.label)).or_default().push(i);
        }
        cells
    }

    /// Densifies the selected instances into a `len × feature_dim` matrix.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.feature_dim;
        let mut data = vec![0.0; indices.len() * d];
        let mut domains = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            let inst = &self.instances[i];
            for &(j, v) in &inst.features {
                data[row * d + j] = v;
            }
            domains.push(inst.domain);
            labels.push(inst.label);
        }
        Batch {
            x: Tensor::new(vec![indices.len(), d], data).expect("consistent batch shape"),
            domains,
            labels,
        }
    }
}

fn check_instance(inst: &Instance, c: &Corpus) -> std::result::Result<(), String> {
    if inst.domain >= c.num_domains {
        return Err(format!("domain {} >= declared {}", inst.domain, c.num_domains));
    }
    if inst.label >= c.num_classes {
        return Err(format!("label {} >= declared {}", inst.label, c.num_classes));
    }
    for (k, &(idx, v)) in inst.features.iter().enumerate() {
        if idx >= c.feature_dim {
            return Err(format!("feature index {idx} >= declared dim {}", c.feature_dim));
        }
        if k > 0 && inst.features[k - 1].0 >= idx {
            return Err(format!(
                "feature indices not strictly increasing ({} then {idx})",
                inst.features[k - 1].0
            ));
        }
        if !v.is_finite() {
            return Err(format!("non-finite value at index {idx}"));
        }
    }
    Ok(())
}

fn parse_header(line: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = line.split(' ').collect();
    let keys = ["dim", "domains", "classes"];
    if parts.len() != 3 {
        return Err(format!("header must be `dim=<int> domains=<int> classes=<int>`, got `{line}`"));
    }
    let mut vals = [0usize; 3];
    for ((part, key), slot) in parts.iter().zip(keys).zip(vals.iter_mut()) {
        let value = part
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| format!("expected `{key}=<int>`, got `{part}`"))?;
        *slot = value
            .parse()
            .map_err(|_| format!("`{value}` is not a non-negative integer"))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

fn parse_instance(line: &str) -> std::result::Result<Instance, String> {
    let mut fields = line.split('\t');
    let domain = fields.next().unwrap_or("");
    let label = fields.next().ok_or("missing label field")?;
    let feats = fields.next().unwrap_or("");
    if fields.next().is_some() {
        return Err("too many tab-separated fields".into());
    }
    let domain = domain
        .parse()
        .map_err(|_| format!("bad domain id `{domain}`"))?;
    let label = label.parse().map_err(|_| format!("bad label `{label}`"))?;
    let features = feats
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(|tok| {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| format!("feature `{tok}` is not `idx:val`"))?;
            let i = i.parse().map_err(|_| format!("bad feature index `{i}`"))?;
            let v = v.parse().map_err(|_| format!("bad feature value `{v}`"))?;
            Ok((i, v))
        })
        .collect::<std::result::Result<_, String>>()?;
    Ok(Instance {
        domain,
        label,
        features,
    })
}

fn parse_names(list: &str) -> Vec<String> {
    list.split(',').map(|s| s.trim().to_string()).collect()
}

/// Parses a corpus from any reader.
pub fn read_sparse<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut corpus: Option<Corpus> = None;
    let mut domain_names = None;
    let mut class_names = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let line = line.trim_end_matches(['\r', '\n']);
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.strip_prefix("domain_names=") {
                domain_names = Some(parse_names(v));
            } else if let Some(v) = comment.strip_prefix("class_names=") {
                class_names = Some(parse_names(v));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason| Error::Parse { line: lineno, reason };
        match corpus.as_mut() {
            None => {
                let (dim, domains, classes) = parse_header(line).map_err(parse_err)?;
                corpus = Some(Corpus::empty(dim, domains, classes));
            }
            Some(c) => {
                let inst = parse_instance(line).map_err(parse_err)?;
                check_instance(&inst, c).map_err(parse_err)?;
                c.instances.push(inst);
            }
        }
    }
    let mut corpus = corpus.ok_or(Error::Parse {
        line: 1,
        reason: "missing `dim=... domains=... classes=...` header".into(),
    })?;
    if let Some(names) = domain_names.filter(|n| n.len() == corpus.num_domains) {
        corpus.domain_names = names;
    }
    if let Some(names) = class_names.filter(|n| n.len() == corpus.num_classes) {
        corpus.class_names = names;
    }
    Ok(corpus)
}

pub fn load_sparse(path: impl AsRef<Path>) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    read_sparse(BufReader::new(file))
}

pub fn write_sparse<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    writeln!(
        w,
        "dim={} domains={} classes={}",
        corpus.feature_dim, corpus.num_domains, corpus.num_classes
    )?;
    writeln!(w, "#domain_names={}", corpus.domain_names.join(","))?;
    writeln!(w, "#class_names={}", corpus.class_names.join(","))?;
    let mut line = String::new();
    for inst in &corpus.instances {
        line.clear();
        write!(line, "{}\t{}\t", inst.domain, inst.label).unwrap();
        for (k, (i, v)) in inst.features.iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            write!(line, "{i}:{v}").unwrap();
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_sparse(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_sparse(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Original indices of the `k` most frequent features, most frequent
/// first. Frequency is the summed feature value over the corpus; ties go
/// to the lower original index.
pub fn topk_map(corpus: &Corpus, k: usize) -> Vec<usize> {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for inst in &corpus.instances {
        for &(i, v) in &inst.features {
            *counts.entry(i).or_default() += v;
        }
    }
    let mut ranked: Vec<(usize, f64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Keeps only the features listed in `map`, renumbering `map[j]` to `j`.
pub fn apply_feature_map(corpus: &Corpus, map: &[usize]) -> Corpus {
    let lookup: BTreeMap<usize, usize> = map.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let instances = corpus
        .instances
        .iter()
        .map(|inst| {
            let mut features: Vec<(usize, f64)> = inst
                .features
                .iter()
                .filter_map(|&(i, v)| lookup.get(&i).map(|&j| (j, v)))
                .collect();
            features.sort_by_key(|&(i, _)| i);
            Instance {
                features,
                ..inst.clone()
            }
        })
        .collect();
    Corpus {
        feature_dim: map.len(),
        ..corpus.with_instances(instances)
    }
}

/// Keeps the `k` most frequent features, renumbered by frequency rank.
pub fn topk_features(corpus: &Corpus, k: usize) -> Result<Corpus> {
    if k == 0 {
        return Err(Error::InvalidParam("k must be >= 1".into()));
    }
    Ok(apply_feature_map(corpus, &topk_map(corpus, k)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

/// Stratified per `(domain, class)` cell. Dev and test take
/// `floor(n·ratio)` (at least one) instances of each cell; the remainder
/// goes to train. Each split keeps the original instance order.
pub fn split(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (tr, dv, te) = ratios;
    if tr <= 0.0 || dv <= 0.0 || te <= 0.0 || (tr + dv + te - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0u8; corpus.len()];
    for ((d, c), mut idx) in corpus.cells() {
        let n = idx.len();
        if n < 3 {
            return Err(Error::Sampler(format!(
                "cell (domain {d}, class {c}) has {n} instances; need at least 3 to split"
            )));
        }
        idx.shuffle(&mut rng);
        let take = |r: f64| ((n as f64 * r + 1e-9).floor() as usize).max(1);
        let n_dev = take(dv);
        let n_test = take(te).min(n - n_dev - 1);
        for &i in &idx[..n_dev] {
            assign[i] = 1;
        }
        for &i in &idx[n_dev..n_dev + n_test] {
            assign[i] = 2;
        }
    }
    let pick = |which: u8| {
        corpus.with_instances(
            corpus
                .instances
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == which)
                .map(|(inst, _)| inst.clone())
                .collect(),
        )
    };
    Ok(Splits {
        train: pick(0),
        dev: pick(1),
        test: pick(2),
    })
}

/// Parameters of the synthetic multi-domain generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_domains: usize,
    pub num_classes: usize,
    pub per_cell_count: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub domain_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_domains: 4,
            num_classes: 2,
            per_cell_count: 500,
            feature_dim: 64,
            class_separation: 3.0,
            domain_shift: 2.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 || self.num_classes == 0 || self.per_cell_count == 0 {
            return Err(Error::InvalidParam("synthetic counts must be >= 1".into()));
        }
        if self.feature_dim < self.num_classes {
            return Err(Error::InvalidParam(format!(
                "feature_dim {} < num_classes {}",
                self.feature_dim, self.num_classes
            )));
        }
        let mags = [self.class_separation, self.domain_shift, self.noise_std];
        if mags.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidParam("synthetic magnitudes must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Row-major orthogonal matrix from Gram-Schmidt on Gaussian rows.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v = gaussian(rng, d);
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
    }
    q.concat()
}

/// Class prototypes at pairwise distance `class_separation`, centred on
/// the origin. Each domain maps them through `(1−t)·I + t·Q` with a random
/// orthogonal `Q` and `t = min(domain_shift, 1)`, then adds a random offset
/// of norm `domain_shift`. Instances are prototype plus isotropic noise.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let k = cfg.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = cfg.class_separation / std::f64::consts::SQRT_2;
    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            (0..d)
                .map(|j| {
                    let onehot = if j == c { 1.0 } else { 0.0 };
                    let centre = if j < k { 1.0 / k as f64 } else { 0.0 };
                    scale * (onehot - centre)
                })
                .collect()
        })
        .collect();
    let t = cfg.domain_shift.min(1.0);
    let mut instances = Vec::with_capacity(cfg.num_domains * k * cfg.per_cell_count);
    for domain in 0..cfg.num_domains {
        let q = random_orthogonal(&mut rng, d);
        let mut dir = gaussian(&mut rng, d);
        let norm = dir.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        dir.iter_mut().for_each(|a| *a *= cfg.domain_shift / norm);
        for (label, proto) in prototypes.iter().enumerate() {
            let centre: Vec<f64> = (0..d)
                .map(|i| {
                    let rotated: f64 = (0..d).map(|j| q[i * d + j] * proto[j]).sum();
                    (1.0 - t) * proto[i] + t * rotated + dir[i]
                })
                .collect();
            for _ in 0..cfg.per_cell_count {
                let features = centre
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (i, c + cfg.noise_std * z)
                    })
                    .collect();
                instances.push(Instance {
                    domain,
                    label,
                    features,
                });
            }
        }
    }
    Ok(Corpus::empty(d, cfg.num_domains, k).with_instances(instances))
}

/// Cell-balanced batches of instance indices for one epoch.
///
/// Each batch takes `batch_size / m` chunks of `m` instances, every chunk
/// from a distinct `(domain, class)` cell, so every row has at least
/// `m − 1` in-batch rows sharing its domain and its class. Cells with the
/// most remaining chunks are drawn first. Leftovers smaller than `m` are
/// skipped, so each instance appears at most once.
pub fn stratified_batches(corpus: &Corpus, batch_size: usize, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if m < 2 {
        return Err(Error::Sampler(format!("positives per cell must be >= 2, got {m}")));
    }
    if batch_size == 0 || !batch_size.is_multiple_of(m) {
        return Err(Error::Sampler(format!(
            "batch size {batch_size} is not a positive multiple of {m}"
        )));
    }
    let per_batch = batch_size / m;
    let cells = corpus.cells();
    if cells.len() < per_batch {
        return Err(Error::Sampler(format!(
            "{} (domain, class) cells cannot fill a batch of {per_batch} distinct cells",
            cells.len()
        )));
    }
    if let Some(((d, c), idx)) = cells.iter().find(|(_, v)| v.len() < m) {
        return Err(Error::Sampler(format!(
            "cell (domain {d}, class {c}) has {} instances, fewer than {m} positives per cell",
            idx.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<Vec<Vec<usize>>> = cells
        .into_values()
        .map(|mut idx| {
            idx.shuffle(&mut rng);
            let mut chunks: Vec<Vec<usize>> = idx.chunks_exact(m).map(<[usize]>::to_vec).collect();
            chunks.reverse();
            chunks
        })
        .collect();
    let mut batches = Vec::new();
    let mut order: Vec<usize> = (0..queues.len()).collect();
    loop {
        order.shuffle(&mut rng);
        order.sort_by_key(|&c| std::cmp::Reverse(queues[c].len()));
        let chosen: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&c| !queues[c].is_empty())
            .take(per_batch)
            .collect();
        if chosen.is_empty() {
            break;
        }
        let mut batch = Vec::with_capacity(batch_size);
        for c in chosen {
            batch.extend(queues[c].pop().expect("nonempty queue"));
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Corpus> {
        read_sparse(s.as_bytes())
    }

    #[test]
    fn parses_single_line() {
        let c = parse("dim=5 domains=2 classes=2\n0\t1\t0:1.0 3:2.5\n").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.instances[0].domain, 0);
        assert_eq!(c.instances[0].label, 1);
        assert_eq!(c.instances[0].features, vec![(0, 1.0), (3, 2.5)]);
    }

    #[test]
    fn empty_body_is_valid() {
        let c = parse("# corpus\ndim=5 domains=2 classes=2\n").unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse("dim=5 domains=2 classes=2\n0\t1\t0:1\n0\t0\t3:1 0:2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse("dim=5 domains=2 classes=2\n0\t1\t5:1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse("dim=5 domains=2 classes=2\n2\t1\t1:1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse("dim=5 domains=2 classes=2\n0\t1\t1-1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse("dims=5 domains=2 classes=2\n").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn names_round_trip() {
        let mut c = parse("dim=3 domains=2 classes=2\n0\t1\t0:1\n").unwrap();
        c.domain_names = vec!["books".into(), "dvd".into()];
        let mut buf = Vec::new();
        write_sparse(&c, &mut buf).unwrap();
        assert_eq!(read_sparse(buf.as_slice()).unwrap(), c);
    }

    fn counted(counts: &[(usize, f64)]) -> Corpus {
        let mut c = Corpus::empty(4, 1, 1);
        c.instances.push(Instance {
            domain: 0,
            label: 0,
            features: counts.to_vec(),
        });
        c
    }

    #[test]
    fn topk_keeps_most_frequent() {
        let c = counted(&[(0, 5.0), (1, 9.0)]);
        let t = topk_features(&c, 1).unwrap();
        assert_eq!(t.feature_dim, 1);
        assert_eq!(t.instances[0].features, vec![(0, 9.0)]);

        let t = topk_features(&c, 10).unwrap();
        assert_eq!(t.feature_dim, 2);
        assert_eq!(t.instances[0].features, vec![(0, 9.0), (1, 5.0)]);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let c = counted(&[(1, 2.0), (3, 2.0)]);
        assert_eq!(topk_map(&c, 1), vec![1]);
    }

    fn grid(domains: usize, classes: usize, per_cell: usize) -> Corpus {
        let mut c = Corpus::empty(2, domains, classes);
        for d in 0..domains {
            for l in 0..classes {
                for k in 0..per_cell {
                    c.instances.push(Instance {
                        domain: d,
                        label: l,
                        features: vec![(0, k as f64)],
                    });
                }
            }
        }
        c
    }

    #[test]
    fn split_counts_per_domain() {
        let c = grid(4, 2, 1000);
        let s = split(&c, (0.7, 0.1, 0.2), 1).unwrap();
        for d in 0..4 {
            let count = |c: &Corpus| c.instances.iter().filter(|i| i.domain == d).count();
            assert_eq!((count(&s.train), count(&s.dev), count(&s.test)), (1400, 200, 400));
        }
        assert_eq!(s, split(&c, (0.7, 0.1, 0.2), 1).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(split(&grid(1, 1, 2), (0.7, 0.1, 0.2), 0).is_err());
        assert!(split(&grid(1, 1, 9), (0.7, 0.1, 0.1), 0).is_err());
        let s = split(&grid(1, 1, 3), (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn sampler_covers_each_cell_once_per_batch() {
        let c = grid(4, 2, 40);
        let batches = stratified_batches(&c, 32, 4, 3).unwrap();
        assert_eq!(batches.len(), 10);
        for b in &batches {
            assert_eq!(b.len(), 32);
            let mut cells: Vec<_> = b
                .iter()
                .map(|&i| (c.instances[i].domain, c.instances[i].label))
                .collect();
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), 8);
        }
    }

    #[test]
    fn sampler_pair_cell_and_errors() {
        let c = grid(2, 2, 2);
        let batches = stratified_batches(&c, 4, 2, 0).unwrap();
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 8);
        assert!(stratified_batches(&c, 6, 3, 0).is_err());
        assert!(stratified_batches(&c, 5, 2, 0).is_err());
        assert!(stratified_batches(&c, 10, 2, 0).is_err());
        assert!(stratified_batches(&c, 4, 1, 0).is_err());
    }

    #[test]
    fn synth_shapes_and_degenerate_cases() {
        let cfg = SynthConfig {
            per_cell_count: 5,
            feature_dim: 6,
            domain_shift: 0.0,
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        let c = synth_generate(&cfg).unwrap();
        assert_eq!(c.len(), 4 * 2 * 5);
        let first = &c.instances[0].features;
        for inst in &c.instances {
            if inst.label == 0 {
                assert_eq!(&inst.features, first);
            }
        }
        assert_eq!(c, synth_generate(&cfg).unwrap());
        let bad = SynthConfig {
            feature_dim: 1,
            ..cfg
        };
        assert!(synth_generate(&bad).is_err());
    }

    #[test]
    fn synth_prototype_separation() {
        let cfg = SynthConfig {
            per_cell_count: 1,
            feature_dim: 8,
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        let c = synth_generate(&cfg).unwrap();
        // Same domain, different class: rotation and offset preserve the
        // distance between prototypes.
        let a: Vec<f64> = c.instances[0].features.iter().map(|f| f.1).collect();
        let b: Vec<f64> = c.instances[1].features.iter().map(|f| f.1).collect();
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((dist - 3.0).abs() < 1e-9, "{dist}");
    }
}
