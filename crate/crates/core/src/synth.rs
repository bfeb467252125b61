//! Typed stochastic-block graphs shaped like a small citation network,
//! plus N-shot split sampling.
//!
//! Papers (target) carry a class and Gaussian features whose class mean
//! has norm `signal`. Authors carry a latent class and link to papers with
//! probability `p_in` within class and `p_out` across. Each paper links to
//! exactly one subject: subject `c < C` belongs to class `c`, the rest are
//! distractors shared by every class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hetgraph::{HetGraph, HetGraphBuilder, Metapath, MetapathStep};
use crate::numerics::gaussian;

/// Shot counts accepted by [`split`].
pub const SHOTS: [usize; 5] = [1, 5, 20, 40, 60];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub name: String,
    pub papers: usize,
    pub authors: usize,
    pub subjects: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Feature dimensions of paper, author and subject nodes.
    pub dims: [usize; 3],
    /// Norm of each class mean of the paper features.
    pub signal: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 400 papers, 700 authors, 6 subjects, 3 classes.
    pub fn acm_mini(seed: u64) -> Self {
        SyntheticSpec {
            name: "acm-mini".into(),
            papers: 400,
            authors: 700,
            subjects: 6,
            classes: 3,
            p_in: 0.05,
            p_out: 0.002,
            dims: [64, 32, 16],
            signal: 1.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.papers == 0 || self.authors == 0 {
            return bad("paper and author counts must be positive".into());
        }
        if self.subjects < self.classes {
            return bad(format!(
                "{} subjects cannot cover {} classes",
                self.subjects, self.classes
            ));
        }
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return bad(format!(
                "need 0 ≤ p_out ≤ p_in ≤ 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            ));
        }
        if !(self.signal >= 0.0 && self.signal.is_finite()) {
            return bad(format!(
                "signal strength must be a finite non-negative number, got {}",
                self.signal
            ));
        }
        if self.dims.contains(&0) {
            return bad("feature dimensions must be positive".into());
        }
        if self.name.is_empty() || self.name.chars().any(char::is_whitespace) {
            return bad(format!("dataset name {:?} must be a single word", self.name));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let [dp, da, ds] = self.dims;
        [
            ("name", self.name.clone()),
            ("papers", self.papers.to_string()),
            ("authors", self.authors.to_string()),
            ("subjects", self.subjects.to_string()),
            ("classes", self.classes.to_string()),
            ("p_in", self.p_in.to_string()),
            ("p_out", self.p_out.to_string()),
            ("dim_paper", dp.to_string()),
            ("dim_author", da.to_string()),
            ("dim_subject", ds.to_string()),
            ("signal", self.signal.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Overrides fields from `key=value` pairs; unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("cannot parse {key} from {value:?}")))
        }
        match key {
            "name" => self.name = value.to_string(),
            "papers" => self.papers = parse(key, value)?,
            "authors" => self.authors = parse(key, value)?,
            "subjects" => self.subjects = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "p_in" => self.p_in = parse(key, value)?,
            "p_out" => self.p_out = parse(key, value)?,
            "dim_paper" => self.dims[0] = parse(key, value)?,
            "dim_author" => self.dims[1] = parse(key, value)?,
            "dim_subject" => self.dims[2] = parse(key, value)?,
            "signal" => self.signal = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown synthetic spec key {key}"))),
        }
        Ok(())
    }
}

/// Draws a graph from `spec`; the same spec always yields the same graph.
pub fn generate(spec: &SyntheticSpec) -> Result<HetGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.classes;
    let [dp, da, ds] = spec.dims;

    let paper_class: Vec<usize> = (0..spec.papers).map(|_| rng.random_range(0..c)).collect();
    let author_class: Vec<usize> = (0..spec.authors).map(|_| rng.random_range(0..c)).collect();

    let mut means = gaussian(&mut rng, c, dp, 1.0);
    for r in 0..c {
        let row = means.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        row.iter_mut().for_each(|v| *v *= spec.signal / norm);
    }
    let mut paper_x = gaussian(&mut rng, spec.papers, dp, 1.0);
    for (i, &y) in paper_class.iter().enumerate() {
        for (x, m) in paper_x.row_mut(i).iter_mut().zip(means.row(y)) {
            *x += m;
        }
    }
    let author_x = gaussian(&mut rng, spec.authors, da, 1.0);
    let subject_x = gaussian(&mut rng, spec.subjects, ds, 1.0);

    let mut b = HetGraphBuilder::new();
    let paper = b.node_type("paper", paper_x)?;
    let author = b.node_type("author", author_x)?;
    let subject = b.node_type("subject", subject_x)?;
    let pa = b.edge_type("pa", paper, author)?;
    let ps = b.edge_type("ps", paper, subject)?;
    b.target(paper).num_classes(c);

    for (i, &yi) in paper_class.iter().enumerate() {
        for (j, &yj) in author_class.iter().enumerate() {
            let p = if yi == yj { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                b.edge(pa, i, j);
            }
        }
    }

    // distractor subjects attract like a same-class subject
    for (i, &y) in paper_class.iter().enumerate() {
        let weights: Vec<f64> = (0..spec.subjects)
            .map(|s| if s == y || s >= c { spec.p_in } else { spec.p_out })
            .collect();
        b.edge(ps, i, pick_weighted(&mut rng, &weights));
        b.label(i, y);
    }

    let step = |e, reverse| MetapathStep { edge_type: e, reverse };
    b.metapath(Metapath::new("PAP", vec![step(pa, false), step(pa, true)]));
    b.metapath(Metapath::new("PSP", vec![step(ps, false), step(ps, true)]));
    for (k, v) in spec.to_pairs() {
        b.meta(&k, &v);
    }
    b.build()
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub shots: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(shots: usize, seed: u64) -> Self {
        SplitSpec {
            shots,
            val_size: 100,
            test_size: 200,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SHOTS.contains(&self.shots) {
            return Err(Error::config(format!(
                "shots must be one of {SHOTS:?}, got {}",
                self.shots
            )));
        }
        if self.val_size == 0 || self.test_size == 0 {
            return Err(Error::config("validation and test sizes must be positive"));
        }
        Ok(())
    }
}

/// Disjoint labeled, validation and test target nodes, each sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// SHA-256 over the three partitions.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.labeled, &self.val, &self.test] {
            h.update((part.len() as u64).to_le_bytes());
            for &v in part {
                h.update((v as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Samples exactly `shots` labeled nodes per class, then validation and
/// test nodes from the remaining labeled targets.
pub fn split(graph: &HetGraph, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..graph.num_classes()).map(|c| (c, Vec::new())).collect();
    for (i, y) in graph.labels().iter().enumerate() {
        if let Some(y) = y {
            by_class.entry(*y).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labeled = Vec::new();
    let mut rest = Vec::new();
    for (c, nodes) in &by_class {
        if nodes.len() < spec.shots {
            return Err(Error::Split(format!(
                "class {c} has {} labeled nodes, fewer than {} shots",
                nodes.len(),
                spec.shots
            )));
        }
        let mut chosen = vec![false; nodes.len()];
        for k in rand::seq::index::sample(&mut rng, nodes.len(), spec.shots) {
            chosen[k] = true;
        }
        for (k, &v) in nodes.iter().enumerate() {
            if chosen[k] {
                labeled.push(v);
            } else {
                rest.push(v);
            }
        }
    }
    if rest.len() < spec.val_size + spec.test_size {
        return Err(Error::Split(format!(
            "{} nodes remain after labeling, need {} for validation and test",
            rest.len(),
            spec.val_size + spec.test_size
        )));
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let mut val = rest[..spec.val_size].to_vec();
    let mut test = rest[spec.val_size..spec.val_size + spec.test_size].to_vec();
    labeled.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { labeled, val, test })
}

/// Fraction of metapath-adjacent target pairs whose labels agree.
pub fn intra_class_fraction(graph: &HetGraph, rows: &[Vec<usize>]) -> f64 {
    let labels = graph.labels();
    let (mut same, mut total) = (0usize, 0usize);
    for (i, row) in rows.iter().enumerate() {
        for &j in row {
            total += 1;
            if labels[i].is_some() && labels[i] == labels[j] {
                same += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        same as f64 / total as f64
    }
}
