//! Synthetic label-skew tasks and client partitioners.

use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("dimension {dim} cannot hold a simplex of {classes} classes (need ≥ {})", classes - 1)]
    DimensionTooSmall { dim: usize, classes: usize },
    #[error("label {label} is outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("feature rows ({rows}) and labels ({labels}) differ in length")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("not enough samples: {0}")]
    SampleExhaustion(String),
    #[error("invalid partition parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed dataset csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for DatagenError {
    fn from(e: csv::Error) -> Self {
        DatagenError::Csv(e.to_string())
    }
}

/// Samples as rows, with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `samples × dim`.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self, DatagenError> {
        if features.nrows() != labels.len() {
            return Err(DatagenError::LengthMismatch { rows: features.nrows(), labels: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DatagenError::LabelOutOfRange { label, classes });
        }
        Ok(Self { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let features = Matrix::from_fn(indices.len(), self.dim(), |r, c| self.features[(indices[r], c)]);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset { features, labels, classes: self.classes }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Empirical label histogram; uniform weight on an empty dataset is not
    /// defined, so that returns all zeros.
    pub fn label_distribution(&self) -> LabelDistribution {
        let n = self.len().max(1) as f64;
        LabelDistribution(self.class_counts().into_iter().map(|k| k as f64 / n).collect())
    }

    /// Reads the `f0,...,f{dim-1},label` format. The class count is the
    /// largest label plus one unless given.
    pub fn read_csv<R: Read>(reader: R, classes: Option<usize>) -> Result<Self, DatagenError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        let dim = header.len().checked_sub(1).ok_or_else(|| DatagenError::Csv("empty header".into()))?;
        for (i, name) in header.iter().enumerate() {
            let expected = if i == dim { "label".to_string() } else { format!("f{i}") };
            if name.trim() != expected {
                return Err(DatagenError::Csv(format!("header column {i} is `{name}`, expected `{expected}`")));
            }
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            for field in record.iter().take(dim) {
                values.push(field.trim().parse::<f64>().map_err(|e| {
                    DatagenError::Csv(format!("row {}: bad feature `{field}`: {e}", line + 1))
                })?);
            }
            let label = &record[dim];
            labels.push(label.trim().parse::<usize>().map_err(|e| {
                DatagenError::Csv(format!("row {}: bad label `{label}`: {e}", line + 1))
            })?);
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
        let features = Matrix::from_row_slice(labels.len(), dim, &values);
        Self::new(features, labels, classes)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatagenError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        wtr.write_record(&header)?;
        for (r, label) in self.labels.iter().enumerate() {
            let mut row: Vec<String> = (0..self.dim()).map(|c| self.features[(r, c)].to_string()).collect();
            row.push(label.to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Per-client class proportions.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution(pub Vec<f64>);

impl LabelDistribution {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Shannon entropy in bits.
    pub fn entropy_bits(&self) -> f64 {
        self.0.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum()
    }
}

impl AsRef<[f64]> for LabelDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Class-conditional Gaussians `N(μ_z, I)` whose means are the vertices of
/// a regular simplex with edge `separation·√2`, embedded in the first
/// `c − 1` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    /// `dim × c`, one mean per column.
    pub means: Matrix,
    pub separation: f64,
}

impl GaussianMixture {
    pub fn new(classes: usize, dim: usize, separation: f64) -> Result<Self, DatagenError> {
        if classes < 2 {
            return Err(DatagenError::TooFewClasses(classes));
        }
        if dim + 1 < classes {
            return Err(DatagenError::DimensionTooSmall { dim, classes });
        }
        // Helmert rows span the complement of the all-ones vector, so
        // mapping e_z − 1/c through them preserves pairwise distances.
        let helmert = |k: usize, z: usize| -> f64 {
            let k1 = (k + 1) as f64;
            let norm = (k1 * (k1 + 1.0)).sqrt();
            match z.cmp(&(k + 1)) {
                std::cmp::Ordering::Less => 1.0 / norm,
                std::cmp::Ordering::Equal => -k1 / norm,
                std::cmp::Ordering::Greater => 0.0,
            }
        };
        let means = Matrix::from_fn(dim, classes, |r, z| if r + 1 < classes { separation * helmert(r, z) } else { 0.0 });
        Ok(Self { means, separation })
    }

    pub fn classes(&self) -> usize {
        self.means.ncols()
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    /// `count` samples of class `z`.
    pub fn sample_class<R: Rng + ?Sized>(&self, z: usize, count: usize, rng: &mut R) -> LabeledDataset {
        let d = self.dim();
        let mut features = Matrix::zeros(count, d);
        for r in 0..count {
            for c in 0..d {
                let noise: f64 = StandardNormal.sample(rng);
                features[(r, c)] = self.means[(c, z)] + noise;
            }
        }
        LabeledDataset { features, labels: vec![z; count], classes: self.classes() }
    }

    /// `per_class` samples of every class, in class blocks.
    pub fn sample<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> LabeledDataset {
        let c = self.classes();
        let d = self.dim();
        let mut features = Matrix::zeros(per_class * c, d);
        let mut labels = Vec::with_capacity(per_class * c);
        for z in 0..c {
            let block = self.sample_class(z, per_class, rng);
            features.rows_mut(z * per_class, per_class).copy_from(&block.features);
            labels.extend(block.labels);
        }
        LabeledDataset { features, labels, classes: c }
    }
}

/// Draws a balanced Gaussian-mixture dataset.
pub fn make_gaussian_mixture_task<R: Rng + ?Sized>(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    rng: &mut R,
) -> Result<LabeledDataset, DatagenError> {
    Ok(GaussianMixture::new(classes, dim, separation)?.sample(per_class, rng))
}

/// How client datasets are carved out of the pooled training set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionScheme {
    /// Single-class shards, `shards` per client.
    Pathological { shards: usize },
    /// Two major classes per client with `alpha` times the samples of each
    /// minor class. `f64::INFINITY` gives the two-shard pathological split.
    Step { alpha: f64 },
    /// Per-client proportions drawn from `Dirichlet(alpha·1)`.
    Dirichlet { alpha: f64 },
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionScheme::Pathological { shards } => write!(f, "pathological({shards})"),
            PartitionScheme::Step { alpha } => write!(f, "step({alpha})"),
            PartitionScheme::Dirichlet { alpha } => write!(f, "dirichlet({alpha})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub honest_count: usize,
    pub seed: u64,
}

/// One client's share of the pooled data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    /// Ascending row indices into the pooled dataset.
    pub indices: Vec<usize>,
    pub data: LabeledDataset,
    /// Equals the empirical label histogram of `data`.
    pub distribution: LabelDistribution,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidParameter(m));
        if self.honest_count == 0 {
            return bad("honest_count must be positive".into());
        }
        match self.scheme {
            PartitionScheme::Pathological { shards: 0 } => bad("shards per client must be ≥ 1".into()),
            PartitionScheme::Step { alpha } if !(alpha >= 1.0) => bad(format!("step alpha must be ≥ 1, got {alpha}")),
            PartitionScheme::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                bad(format!("dirichlet alpha must be positive, got {alpha}"))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, data: &LabeledDataset) -> Result<Vec<ClientData>, DatagenError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.scheme {
            PartitionScheme::Pathological { shards } => partition_pathological(data, self.honest_count, shards, &mut rng),
            PartitionScheme::Step { alpha } => partition_step(data, self.honest_count, alpha, &mut rng),
            PartitionScheme::Dirichlet { alpha } => partition_dirichlet(data, self.honest_count, alpha, &mut rng),
        }
    }
}

/// Splits `total` into integer parts proportional to `weights` by largest
/// remainder, ties to the lower index. All-zero weights split evenly.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let k = weights.len();
    if k == 0 {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| total as f64 * w / sum).collect()
    } else {
        vec![total as f64 / k as f64; k]
    };
    let mut parts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        parts[i] += 1;
    }
    parts
}

fn finish(data: &LabeledDataset, mut assignment: Vec<Vec<usize>>) -> Vec<ClientData> {
    assignment
        .iter_mut()
        .map(|indices| {
            indices.sort_unstable();
            let subset = data.subset(indices);
            let distribution = subset.label_distribution();
            ClientData { indices: std::mem::take(indices), data: subset, distribution }
        })
        .collect()
}

/// Splits each class's shuffled samples among clients in proportion to the
/// `weights[client][class]` matrix. Every sample is assigned exactly once.
fn assign_by_weights<R: Rng + ?Sized>(data: &LabeledDataset, weights: &[Vec<f64>], rng: &mut R) -> Vec<Vec<usize>> {
    let mut assignment = vec![Vec::new(); weights.len()];
    for (z, mut pool) in data.class_indices().into_iter().enumerate() {
        pool.shuffle(rng);
        let column: Vec<f64> = weights.iter().map(|w| w[z]).collect();
        let mut start = 0;
        for (client, take) in apportion(pool.len(), &column).into_iter().enumerate() {
            assignment[client].extend_from_slice(&pool[start..start + take]);
            start += take;
        }
    }
    assignment
}

/// Pathological split: each class is cut into near-equal single-class
/// shards (at least one per non-empty class, the rest in proportion to
/// class size), and every client receives `shards` of them, preferring
/// classes it does not hold yet and, among those, the class with the most
/// shards left.
pub fn partition_pathological<R: Rng + ?Sized>(
    data: &LabeledDataset,
    honest_count: usize,
    shards: usize,
    rng: &mut R,
) -> Result<Vec<ClientData>, DatagenError> {
    if honest_count == 0 || shards == 0 {
        return Err(DatagenError::InvalidParameter("honest_count and shards must be positive".into()));
    }
    let total = honest_count * shards;
    let counts = data.class_counts();
    let present: Vec<usize> = (0..data.classes).filter(|&z| counts[z] > 0).collect();
    if total < present.len() {
        return Err(DatagenError::SampleExhaustion(format!(
            "{total} shards cannot keep {} classes single-class",
            present.len()
        )));
    }
    if total > data.len() {
        return Err(DatagenError::SampleExhaustion(format!("{total} shards from {} samples", data.len())));
    }
    let weights: Vec<f64> = present.iter().map(|&z| counts[z] as f64).collect();
    let mut per_class: Vec<usize> = apportion(total - present.len(), &weights).iter().map(|k| k + 1).collect();
    // A class too small for its shard quota hands the surplus to the class
    // with the most samples per shard.
    while let Some(i) = (0..present.len()).find(|&i| per_class[i] > counts[present[i]]) {
        per_class[i] -= 1;
        let j = (0..present.len())
            .filter(|&j| per_class[j] < counts[present[j]])
            .max_by(|&a, &b| {
                let ra = counts[present[a]] as f64 / per_class[a] as f64;
                let rb = counts[present[b]] as f64 / per_class[b] as f64;
                ra.total_cmp(&rb).then(b.cmp(&a))
            })
            .expect("total shards ≤ samples");
        per_class[j] += 1;
    }
    let mut class_shards: Vec<Vec<Vec<usize>>> = Vec::with_capacity(present.len());
    let indices = data.class_indices();
    for (i, &z) in present.iter().enumerate() {
        let mut pool = indices[z].clone();
        pool.shuffle(rng);
        let mut start = 0;
        let mut list = Vec::with_capacity(per_class[i]);
        for size in apportion(pool.len(), &vec![1.0; per_class[i]]) {
            list.push(pool[start..start + size].to_vec());
            start += size;
        }
        list.shuffle(rng);
        class_shards.push(list);
    }
    let mut assignment = vec![Vec::new(); honest_count];
    for client in assignment.iter_mut() {
        let mut held = vec![false; present.len()];
        for _ in 0..shards {
            let remaining = |i: usize| class_shards[i].len();
            let fresh: Vec<usize> = (0..present.len()).filter(|&i| !held[i] && remaining(i) > 0).collect();
            let pool: Vec<usize> =
                if fresh.is_empty() { (0..present.len()).filter(|&i| remaining(i) > 0).collect() } else { fresh };
            let most = pool.iter().map(|&i| remaining(i)).max().expect("shards left");
            let tied: Vec<usize> = pool.into_iter().filter(|&i| remaining(i) == most).collect();
            let pick = tied[rng.random_range(0..tied.len())];
            held[pick] = true;
            client.extend(class_shards[pick].pop().expect("non-empty"));
        }
    }
    Ok(finish(data, assignment))
}

/// Step split: every client has two major classes holding `alpha` times
/// as many samples as each minor class. Major pairs walk a random class
/// permutation so each class is major for the same number of clients
/// whenever `2·clients` is a multiple of `c`.
pub fn partition_step<R: Rng + ?Sized>(
    data: &LabeledDataset,
    honest_count: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<ClientData>, DatagenError> {
    if !(alpha >= 1.0) {
        return Err(DatagenError::InvalidParameter(format!("step alpha must be ≥ 1, got {alpha}")));
    }
    if alpha.is_infinite() {
        return partition_pathological(data, honest_count, 2, rng);
    }
    check_size(data, honest_count)?;
    let c = data.classes;
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(rng);
    let weights: Vec<Vec<f64>> = (0..honest_count)
        .map(|i| {
            let mut w = vec![1.0; c];
            w[order[(2 * i) % c]] = alpha;
            w[order[(2 * i + 1) % c]] = alpha;
            w
        })
        .collect();
    let assignment = assign_by_weights(data, &weights, rng);
    if assignment.iter().any(Vec::is_empty) {
        return Err(DatagenError::SampleExhaustion("a client received no samples".into()));
    }
    Ok(finish(data, assignment))
}

/// Dirichlet split: each client draws class proportions from
/// `Dirichlet(alpha·1)` and every class is shared among clients in
/// proportion to them. Draws that leave a client empty are repeated.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    data: &LabeledDataset,
    honest_count: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<ClientData>, DatagenError> {
    const ATTEMPTS: usize = 100;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DatagenError::InvalidParameter(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    check_size(data, honest_count)?;
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| DatagenError::InvalidParameter(e.to_string()))?;
    for _ in 0..ATTEMPTS {
        // Flooring keeps proportions defined when every draw underflows.
        let weights: Vec<Vec<f64>> = (0..honest_count)
            .map(|_| {
                let draws: Vec<f64> = (0..data.classes).map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE)).collect();
                let total: f64 = draws.iter().sum();
                draws.into_iter().map(|g| g / total).collect()
            })
            .collect();
        let assignment = assign_by_weights(data, &weights, rng);
        if assignment.iter().all(|a| !a.is_empty()) {
            return Ok(finish(data, assignment));
        }
    }
    Err(DatagenError::SampleExhaustion(format!(
        "{ATTEMPTS} dirichlet draws all left a client without samples"
    )))
}

fn check_size(data: &LabeledDataset, honest_count: usize) -> Result<(), DatagenError> {
    if honest_count == 0 {
        return Err(DatagenError::InvalidParameter("honest_count must be positive".into()));
    }
    if data.len() < honest_count {
        return Err(DatagenError::SampleExhaustion(format!("{} samples for {honest_count} clients", data.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(per_class: usize, seed: u64) -> LabeledDataset {
        make_gaussian_mixture_task(10, 20, per_class, 3.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn assert_complete(data: &LabeledDataset, clients: &[ClientData]) {
        let mut all: Vec<usize> = clients.iter().flat_map(|c| c.indices.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
        for c in clients {
            assert_eq!(c.distribution, c.data.label_distribution());
            for (k, &i) in c.indices.iter().enumerate() {
                assert_eq!(c.data.labels[k], data.labels[i]);
                assert_eq!(c.data.features.row(k), data.features.row(i));
            }
        }
    }

    #[test]
    fn simplex_means() {
        let g = GaussianMixture::new(10, 20, 3.0).unwrap();
        for a in 0..10 {
            for b in 0..10 {
                let d = (g.means.column(a) - g.means.column(b)).norm();
                let want = if a == b { 0.0 } else { 3.0 * 2f64.sqrt() };
                assert!((d - want).abs() < 1e-12);
            }
        }
        assert!(GaussianMixture::new(10, 8, 1.0).is_err());
        assert!(GaussianMixture::new(1, 8, 1.0).is_err());
    }

    #[test]
    fn empirical_means_and_balance() {
        let per_class = 2000;
        let data = task(per_class, 1);
        let g = GaussianMixture::new(10, 20, 3.0).unwrap();
        assert_eq!(data.class_counts(), vec![per_class; 10]);
        for (z, idx) in data.class_indices().iter().enumerate() {
            for c in 0..20 {
                let m: f64 = idx.iter().map(|&i| data.features[(i, c)]).sum::<f64>() / per_class as f64;
                assert!((m - g.means[(c, z)]).abs() < 3.0 / (per_class as f64).sqrt());
            }
        }
    }

    #[test]
    fn zero_separation_is_one_distribution() {
        let g = GaussianMixture::new(4, 5, 0.0).unwrap();
        assert!(g.means.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.0, 0.0]), vec![4, 3]);
        assert_eq!(apportion(5, &[3.0, 1.0, 0.0]), vec![4, 1, 0]);
    }

    #[test]
    fn pathological_two_shards() {
        let data = task(200, 2);
        let clients = partition_pathological(&data, 100, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_complete(&data, &clients);
        for c in &clients {
            assert!(c.distribution.0.iter().filter(|&&p| p > 0.0).count() <= 2);
            assert_eq!(c.data.len(), 20);
        }
    }

    #[test]
    fn pathological_all_classes_is_uniform() {
        let data = task(40, 3);
        let clients = partition_pathological(&data, 4, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_complete(&data, &clients);
        for c in &clients {
            assert!(c.distribution.0.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        }
    }

    #[test]
    fn pathological_uneven_classes() {
        let mut data = task(30, 4);
        let keep: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] != 3 || i % 10 == 0).collect();
        data = data.subset(&keep);
        let clients = partition_pathological(&data, 13, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_complete(&data, &clients);
        assert!(partition_pathological(&data, 2, 2, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn step_ratios() {
        let data = task(200, 5);
        let one = partition_step(&data, 20, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_complete(&data, &one);
        for c in &one {
            assert!(c.distribution.0.iter().all(|&p| (p - 0.1).abs() <= 0.011));
        }
        let four = partition_step(&data, 20, 4.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_complete(&data, &four);
        for c in &four {
            let mut counts = c.data.class_counts();
            counts.sort_unstable();
            assert_eq!(&counts[8..], &[25, 25]);
            assert!(counts[..8].iter().all(|&k| k == 6 || k == 7));
        }
        let inf = partition_step(&data, 20, f64::INFINITY, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let path = partition_pathological(&data, 20, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(inf, path);
        assert!(partition_step(&data, 20, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn dirichlet_extremes() {
        let data = task(200, 6);
        let flat = partition_dirichlet(&data, 20, 1e6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_complete(&data, &flat);
        for c in &flat {
            assert!(c.distribution.0.iter().all(|&p| (p - 0.1).abs() < 0.05));
        }
        let sharp = partition_dirichlet(&data, 100, 0.01, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_complete(&data, &sharp);
        let mean_entropy = sharp.iter().map(|c| c.distribution.entropy_bits()).sum::<f64>() / 100.0;
        assert!(mean_entropy < 1.0, "entropy {mean_entropy}");
        assert!(sharp.iter().all(|c| !c.data.is_empty()));
    }

    #[test]
    fn spec_is_seed_deterministic() {
        let data = task(50, 7);
        let spec = PartitionSpec { scheme: PartitionScheme::Dirichlet { alpha: 0.5 }, honest_count: 10, seed: 3 };
        assert_eq!(spec.apply(&data).unwrap(), spec.apply(&data).unwrap());
        let bad = PartitionSpec { scheme: PartitionScheme::Pathological { shards: 0 }, ..spec };
        assert!(bad.apply(&data).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let data = task(3, 8);
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f0,f1,"));
        assert!(text.lines().next().unwrap().ends_with("f19,label"));
        let back = LabeledDataset::read_csv(buf.as_slice(), Some(10)).unwrap();
        assert_eq!(back, data);
        assert!(LabeledDataset::read_csv("a,b\n1,2\n".as_bytes(), None).is_err());
        assert!(LabeledDataset::read_csv("f0,label\n1.0,x\n".as_bytes(), None).is_err());
    }
}
