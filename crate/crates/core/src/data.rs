//! Datasets: synthetic correlated-attribute generation, file ingestion and
//! seeded splitting.
//!
//! Synthetic features are organised in contiguous groups of equal width, one
//! per branch-feature group. Every attribute owns a slot: its rank among the
//! attributes sharing its home group. Attribute `j` placed in group `g` adds
//! `signal_strength` at offset `slot(j)` inside group `g`, so a signal written
//! into a foreign group lands on the coordinate of the foreign attribute
//! holding the same slot there.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{AapError, Result};
use crate::matrix::Matrix;
use crate::priors::{AttributeSchema, LabelMatrix};

pub const FEATURE_MAGIC: &[u8; 4] = b"AAPT";
pub const FEATURE_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: LabelMatrix,
    pub split: Split,
}

impl Dataset {
    /// Pairs features with labels. Rows must agree and no label row may be
    /// all-zero.
    pub fn new(features: Matrix, labels: LabelMatrix, split: Split) -> Result<Self> {
        if features.rows() != labels.n() {
            return Err(AapError::Dimension {
                what: "feature rows",
                expected: labels.n(),
                got: features.rows(),
            });
        }
        if let Some(i) = labels.rows().position(|r| r.iter().all(|&v| v == 0)) {
            return Err(AapError::Domain(format!("row {i} has no positive attribute")));
        }
        Ok(Dataset {
            features,
            labels,
            split,
        })
    }

    /// Like [`Dataset::new`] but drops all-zero label rows instead of
    /// failing. Returns the number of dropped rows.
    pub fn new_filtered(features: Matrix, labels: LabelMatrix, split: Split) -> Result<(Self, usize)> {
        if features.rows() != labels.n() {
            return Err(AapError::Dimension {
                what: "feature rows",
                expected: labels.n(),
                got: features.rows(),
            });
        }
        let (labels, kept, dropped) = labels.drop_empty_rows()?;
        let features = select_rows(&features, &kept);
        Ok((Dataset::new(features, labels, split)?, dropped))
    }

    pub fn len(&self) -> usize {
        self.labels.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    pub fn k(&self) -> usize {
        self.labels.k()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn y(&self, i: usize) -> &[u8] {
        self.labels.row(i)
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Result<Self> {
        Dataset::new(select_rows(&self.features, idx), self.labels.select(idx)?, split)
    }

    /// Writes `<dir>/<split>_features.aapt` and `<dir>/<split>_labels.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = self.split.name();
        write_features(&dir.join(format!("{name}_features.aapt")), &self.features)?;
        self.labels.write_csv(&dir.join(format!("{name}_labels.csv")))
    }

    /// Reads a split written by [`Dataset::save`].
    pub fn load(dir: &Path, split: Split, schema: Option<&AttributeSchema>) -> Result<(Self, usize)> {
        let name = split.name();
        let features = load_features(&dir.join(format!("{name}_features.aapt")))?;
        let labels = load_labels_csv(&dir.join(format!("{name}_labels.csv")), schema)?;
        Dataset::new_filtered(features, labels, split)
    }
}

fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(idx.len(), m.cols(), data)
}

pub fn load_labels_csv(path: &Path, schema: Option<&AttributeSchema>) -> Result<LabelMatrix> {
    LabelMatrix::read_csv(path, schema)
}

/// Writes a matrix in the `AAPT` binary layout: magic, version byte, `u32`
/// rank, `u32` dims, then little-endian `f32` values row-major.
pub fn write_features(path: &Path, features: &Matrix) -> Result<()> {
    let file = File::create(path).map_err(|e| AapError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| AapError::io(path, e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_all(&[FEATURE_VERSION]).map_err(io)?;
    w.write_all(&2u32.to_le_bytes()).map_err(io)?;
    for dim in [features.rows(), features.cols()] {
        let dim = u32::try_from(dim).map_err(|_| AapError::Domain(format!("dimension {dim} exceeds u32")))?;
        w.write_all(&dim.to_le_bytes()).map_err(io)?;
    }
    for &v in features.as_slice() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_features(path: &Path) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| AapError::io(path, e))?;
    let mut buf = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut buf)
        .map_err(|e| AapError::io(path, e))?;
    let shown = path.display().to_string();
    let bad = |field: &str, msg: String| AapError::parse(&shown, 0, field, msg);
    if buf.len() < 9 || &buf[..4] != FEATURE_MAGIC {
        return Err(bad("magic", "missing AAPT header".into()));
    }
    if buf[4] != FEATURE_VERSION {
        return Err(bad("version", format!("unsupported version {}", buf[4])));
    }
    let read_u32 = |at: usize| -> Option<u32> {
        buf.get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    };
    let rank = read_u32(5).ok_or_else(|| bad("rank", "truncated".into()))? as usize;
    if rank != 2 {
        return Err(bad("rank", format!("expected rank 2, found {rank}")));
    }
    let rows = read_u32(9).ok_or_else(|| bad("dims", "truncated".into()))? as usize;
    let cols = read_u32(13).ok_or_else(|| bad("dims", "truncated".into()))? as usize;
    let body = &buf[17..];
    if body.len() != rows * cols * 4 {
        return Err(bad(
            "data",
            format!(
                "expected {} bytes for {rows}x{cols}, found {}",
                rows * cols * 4,
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Seeded shuffle into consecutive partitions sized by `ratios`.
///
/// Partition sizes are rounded; the last one takes the remainder.
pub fn split(dataset: &Dataset, ratios: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let idx = split_indices(dataset.len(), ratios, seed)?;
    let tags = [Split::Train, Split::Val, Split::Test];
    idx.iter()
        .enumerate()
        .map(|(p, part)| dataset.subset(part, *tags.get(p).unwrap_or(&Split::All)))
        .collect()
}

pub fn split_indices(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(AapError::Domain(format!("invalid split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(AapError::Domain(format!(
            "split ratios sum to {total}, expected 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(ratios.len());
    let mut start = 0usize;
    for (p, r) in ratios.iter().enumerate() {
        let end = if p + 1 == ratios.len() {
            n
        } else {
            (start + (r * n as f64).round() as usize).min(n)
        };
        parts.push(order[start..end].to_vec());
        start = end;
    }
    Ok(parts)
}

/// A labelled prototype of the attribute mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub attributes: Vec<u8>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub attribute_names: Vec<String>,
    /// Number of branches the generated data is meant for.
    pub m: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub prototypes: Vec<Prototype>,
    pub flip_prob: f64,
    /// Home feature group of every attribute.
    pub group_of: Vec<usize>,
    pub entangle_prob: f64,
    pub d_in: usize,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn k(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_of.iter().max().map_or(0, |g| g + 1)
    }

    pub fn group_width(&self) -> usize {
        self.d_in / self.n_groups().max(1)
    }

    pub fn schema(&self) -> Result<AttributeSchema> {
        AttributeSchema::new(self.attribute_names.iter().cloned())
    }

    /// Rank of attribute `j` among the attributes of its home group.
    pub fn slot(&self, j: usize) -> usize {
        let home = self.group_of[j];
        self.group_of[..j].iter().filter(|&&g| g == home).count()
    }

    /// Feature coordinate receiving attribute `j` when placed in group `g`.
    pub fn feature_index(&self, j: usize, g: usize) -> usize {
        g * self.group_width() + self.slot(j)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        self.schema()?;
        let gen_err = |msg: String| Err(AapError::Generation(msg));
        if self.prototypes.is_empty() {
            return gen_err("no prototypes".into());
        }
        for (i, p) in self.prototypes.iter().enumerate() {
            if p.attributes.len() != k {
                return gen_err(format!(
                    "prototype {i} has {} attributes, expected {k}",
                    p.attributes.len()
                ));
            }
            if p.attributes.iter().any(|&v| v > 1) {
                return gen_err(format!("prototype {i} is not binary"));
            }
            if !(p.weight >= 0.0) {
                return gen_err(format!("prototype {i} has negative weight"));
            }
        }
        let total: f64 = self.prototypes.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return gen_err(format!("prototype weights sum to {total}, expected 1"));
        }
        for (name, v) in [
            ("flip_prob", self.flip_prob),
            ("entangle_prob", self.entangle_prob),
        ] {
            if !(0.0..1.0).contains(&v) && !(name == "entangle_prob" && v == 1.0) {
                return gen_err(format!("{name} must lie in [0,1), got {v}"));
            }
        }
        if self.group_of.len() != k {
            return gen_err(format!(
                "group_of has {} entries, expected {k}",
                self.group_of.len()
            ));
        }
        let groups = self.n_groups();
        if self.entangle_prob > 0.0 && groups < 2 {
            return gen_err("entanglement needs at least 2 feature groups".into());
        }
        if self.group_width() == 0 || !self.d_in.is_multiple_of(groups) {
            return gen_err(format!(
                "d_in {} is not a positive multiple of {groups} groups",
                self.d_in
            ));
        }
        if let Some(j) = (0..k).find(|&j| self.slot(j) >= self.group_width()) {
            return gen_err(format!(
                "group {} holds more attributes than its width {}",
                self.group_of[j],
                self.group_width()
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.signal_strength.is_finite() {
            return gen_err("noise_sigma must be >= 0 and signal finite".into());
        }
        if self.n_train == 0 {
            return gen_err("n_train must be positive".into());
        }
        if self.prob_all_zero() >= 1.0 - 1e-12 {
            return gen_err("prototypes and flip_prob can only produce all-zero label rows".into());
        }
        Ok(())
    }

    /// Probability that attribute `j` is on under prototype `proto`.
    fn on_prob(&self, proto: &Prototype, j: usize) -> f64 {
        if proto.attributes[j] == 1 {
            1.0 - self.flip_prob
        } else {
            self.flip_prob
        }
    }

    fn prob_all_zero(&self) -> f64 {
        self.prototypes
            .iter()
            .map(|p| p.weight * (0..self.k()).map(|j| 1.0 - self.on_prob(p, j)).product::<f64>())
            .sum()
    }

    /// Closed-form marginals and pairwise joint of the label distribution
    /// before all-zero rows are resampled.
    pub fn implied_statistics(&self) -> (Vec<f64>, Matrix) {
        let k = self.k();
        let joint = Matrix::from_fn(k, k, |i, j| {
            self.prototypes
                .iter()
                .map(|p| {
                    if i == j {
                        p.weight * self.on_prob(p, i)
                    } else {
                        p.weight * self.on_prob(p, i) * self.on_prob(p, j)
                    }
                })
                .sum()
        });
        let p = (0..k).map(|i| joint[(i, i)]).collect();
        (p, joint)
    }

    /// Default entangled task used by the experiments.
    ///
    /// Eight attributes in two correlated clusters plus background attributes,
    /// spread over three feature groups.
    pub fn default_entangled(seed: u64) -> Self {
        let names = [
            "female",
            "long_hair",
            "skirt",
            "handbag",
            "male",
            "short_hair",
            "trousers",
            "backpack",
        ];
        let proto = |bits: [u8; 8], weight: f64| Prototype {
            attributes: bits.to_vec(),
            weight,
        };
        SyntheticSpec {
            attribute_names: names.iter().map(|s| s.to_string()).collect(),
            m: 3,
            n_train: 5000,
            n_val: 500,
            n_test: 1000,
            prototypes: vec![
                proto([1, 1, 1, 1, 0, 0, 0, 0], 0.20),
                proto([1, 1, 0, 1, 0, 0, 1, 0], 0.15),
                proto([1, 1, 1, 0, 0, 0, 0, 1], 0.10),
                proto([0, 0, 0, 0, 1, 1, 1, 1], 0.20),
                proto([0, 0, 0, 0, 1, 1, 1, 0], 0.20),
                proto([0, 1, 0, 0, 1, 0, 1, 1], 0.15),
            ],
            flip_prob: 0.03,
            group_of: vec![0, 1, 2, 0, 0, 1, 2, 2],
            entangle_prob: 0.3,
            d_in: 12,
            signal_strength: 1.0,
            noise_sigma: 0.5,
            seed,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AapError::io(path, e))?;
        let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| {
            AapError::parse(
                path.display(),
                e.line(),
                format!("column {}", e.column()),
                e.to_string(),
            )
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| AapError::io(path, e))
    }
}

/// Where each positive attribute's signal was written, per instance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GenerationTrace {
    /// `(attribute, group)` placements for every generated instance, in
    /// generation order (train, then val, then test).
    pub placements: Vec<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SyntheticSplits {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| AapError::io(dir, e))?;
        self.train.save(dir)?;
        self.val.save(dir)?;
        self.test.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (train, _) = Dataset::load(dir, Split::Train, None)?;
        let schema = train.labels.schema().clone();
        let (val, _) = Dataset::load(dir, Split::Val, Some(&schema))?;
        let (test, _) = Dataset::load(dir, Split::Test, Some(&schema))?;
        Ok(SyntheticSplits { train, val, test })
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSplits> {
    generate_synthetic_traced(spec).map(|(s, _)| s)
}

pub fn generate_synthetic_traced(spec: &SyntheticSpec) -> Result<(SyntheticSplits, GenerationTrace)> {
    spec.validate()?;
    let schema = spec.schema()?;
    let k = spec.k();
    let groups = spec.n_groups();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights = WeightedIndex::new(spec.prototypes.iter().map(|p| p.weight))
        .map_err(|e| AapError::Generation(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| AapError::Generation(e.to_string()))?;
    let mut trace = GenerationTrace::default();

    let mut make = |n: usize, split: Split, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut rows = Vec::with_capacity(n);
        let mut features = Matrix::zeros(n, spec.d_in);
        for i in 0..n {
            let y = draw_labels(spec, &weights, rng)?;
            let x = features.row_mut(i);
            let mut placed = Vec::new();
            for j in (0..k).filter(|&j| y[j] == 1) {
                let home = spec.group_of[j];
                let g = if spec.entangle_prob > 0.0 && rng.gen_bool(spec.entangle_prob) {
                    let other = rng.gen_range(0..groups - 1);
                    if other >= home {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    home
                };
                x[spec.feature_index(j, g)] += spec.signal_strength;
                placed.push((j, g));
            }
            for v in x.iter_mut() {
                *v = f64::from((*v + noise.sample(rng)) as f32);
            }
            trace.placements.push(placed);
            rows.push(y);
        }
        Dataset::new(features, LabelMatrix::new(schema.clone(), &rows)?, split)
    };

    let train = make(spec.n_train, Split::Train, &mut rng)?;
    let val = make(spec.n_val.max(1), Split::Val, &mut rng)?;
    let test = make(spec.n_test.max(1), Split::Test, &mut rng)?;
    Ok((SyntheticSplits { train, val, test }, trace))
}

const MAX_RESAMPLES: usize = 10_000;

fn draw_labels(spec: &SyntheticSpec, weights: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    for _ in 0..MAX_RESAMPLES {
        let proto = &spec.prototypes[weights.sample(rng)];
        let y: Vec<u8> = proto
            .attributes
            .iter()
            .map(|&b| {
                if spec.flip_prob > 0.0 && rng.gen_bool(spec.flip_prob) {
                    1 - b
                } else {
                    b
                }
            })
            .collect();
        if y.contains(&1) {
            return Ok(y);
        }
    }
    Err(AapError::Generation(format!(
        "no non-empty label row after {MAX_RESAMPLES} draws"
    )))
}
