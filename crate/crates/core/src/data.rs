//! Datasets, non-IID partitioning and quasi-validation sets.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::seed;

/// Row-major labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if input_dim == 0 || features.len() != labels.len() * input_dim {
            return Err(Error::InvalidArgument(format!(
                "{} feature values do not form {} rows of width {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        if let Some((index, &value)) = features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Dataset {
            features,
            labels,
            input_dim,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.input_dim, self.class_count)
    }

    pub fn batch(&self) -> Batch<'_> {
        let rows = (0..self.len()).map(|i| self.row(i)).collect();
        Batch::new(rows, self.labels.clone()).expect("dataset is non-empty and rectangular")
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Writes `label,f0,...,f{d-1}` followed by one line per row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = String::from("label");
        for j in 0..self.input_dim {
            header.push_str(&format!(",f{j}"));
        }
        let io = |e| Error::io(path, e);
        writeln!(w, "{header}").map_err(io)?;
        for i in 0..self.len() {
            let mut line = self.labels[i].to_string();
            for v in self.row(i) {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a file written by [`Dataset::write_csv`]. Without `class_count`
    /// the class count is one past the largest label.
    pub fn read_csv(path: &Path, class_count: Option<usize>) -> Result<Dataset> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = match lines.next() {
            Some(h) => h.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::CsvFormat { line: 1, reason: "missing header".into() }),
        };
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.first() != Some(&"label") || cols.len() < 2 {
            return Err(Error::CsvFormat { line: 1, reason: "header must start with `label`".into() });
        }
        for (j, c) in cols[1..].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(Error::CsvFormat { line: 1, reason: format!("unexpected column `{c}`") });
            }
        }
        let dim = cols.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::CsvFormat {
                    line: lineno,
                    reason: format!("expected {} fields, found {}", dim + 1, fields.len()),
                });
            }
            let label = fields[0].parse::<usize>().map_err(|e| Error::CsvFormat {
                line: lineno,
                reason: format!("bad label: {e}"),
            })?;
            labels.push(label);
            for f in &fields[1..] {
                features.push(f.parse::<f64>().map_err(|e| Error::CsvFormat {
                    line: lineno,
                    reason: format!("bad feature `{f}`: {e}"),
                })?);
            }
        }
        let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(features, labels, dim, classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub class_count: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
}

/// Isotropic Gaussian blobs, one centre per class drawn uniformly on the
/// unit sphere. Rows are grouped by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.class_count == 0 || spec.input_dim == 0 || spec.samples_per_class == 0 {
        return Err(Error::InvalidArgument("synthetic task sizes must be positive".into()));
    }
    if !(spec.cluster_spread > 0.0 && spec.cluster_spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "cluster_spread must be positive, got {}",
            spec.cluster_spread
        )));
    }
    let mut rng = seed::rng(spec.seed);
    let mut centres = Vec::with_capacity(spec.class_count);
    for _ in 0..spec.class_count {
        let mut c: Vec<f64> = (0..spec.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = crate::param::norm(&c);
        for v in &mut c {
            *v /= n;
        }
        centres.push(c);
    }
    let rows = spec.class_count * spec.samples_per_class;
    let mut features = Vec::with_capacity(rows * spec.input_dim);
    let mut labels = Vec::with_capacity(rows);
    for (class, centre) in centres.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &m in centre {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(m + spec.cluster_spread * z);
            }
            labels.push(class);
        }
    }
    Dataset::new(features, labels, spec.input_dim, spec.class_count)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Loads an IDX image file and its label file. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let fmt = |path: &Path, reason: String| Error::IdxFormat {
        path: path.to_path_buf(),
        reason,
    };

    if images.len() < 16 {
        return Err(fmt(images_path, format!("header needs 16 bytes, file has {}", images.len())));
    }
    let magic = be_u32(&images, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(fmt(images_path, format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = be_u32(&images, 4) as usize;
    let rows = be_u32(&images, 8) as usize;
    let cols = be_u32(&images, 12) as usize;
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if images.len() != expected {
        return Err(fmt(
            images_path,
            format!("expected {expected} bytes for {count} images of {rows}x{cols}, found {}", images.len()),
        ));
    }

    if labels.len() < 8 {
        return Err(fmt(labels_path, format!("header needs 8 bytes, file has {}", labels.len())));
    }
    let magic = be_u32(&labels, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(fmt(labels_path, format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let label_count = be_u32(&labels, 4) as usize;
    if labels.len() != 8 + label_count {
        return Err(fmt(
            labels_path,
            format!("expected {} bytes for {label_count} labels, found {}", 8 + label_count, labels.len()),
        ));
    }
    if label_count != count {
        return Err(Error::IdxConsistency(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if count == 0 || dim == 0 {
        return Err(Error::EmptyDataset);
    }

    let features = images[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(features, labels, dim, classes)
}

/// Disjoint per-worker index lists into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn into_shards(self) -> Vec<Vec<usize>> {
        self.shards
    }
}

/// Splits every class across workers with Dirichlet(`concentration`)
/// proportions. An infinite concentration gives an exact IID split into
/// near-equal shards. Empty shards are topped up from the largest shard.
pub fn partition_noniid(dataset: &Dataset, worker_count: usize, concentration: f64, seed: u64) -> Result<Partition> {
    if worker_count == 0 {
        return Err(Error::InvalidArgument("worker_count must be at least 1".into()));
    }
    if worker_count > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "{worker_count} workers but only {} samples",
            dataset.len()
        )));
    }
    if concentration.is_nan() || concentration <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut shards = vec![Vec::new(); worker_count];

    if concentration.is_infinite() {
        let mut all: Vec<usize> = (0..dataset.len()).collect();
        all.shuffle(&mut rng);
        let base = all.len() / worker_count;
        let extra = all.len() % worker_count;
        let mut at = 0;
        for (w, shard) in shards.iter_mut().enumerate() {
            let take = base + usize::from(w < extra);
            shard.extend_from_slice(&all[at..at + take]);
            at += take;
        }
    } else {
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| Error::InvalidArgument(format!("concentration: {e}")))?;
        for class in 0..dataset.class_count() {
            let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.label(i) == class).collect();
            if members.is_empty() {
                continue;
            }
            members.shuffle(&mut rng);
            let mut weights: Vec<f64> = (0..worker_count).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 && total.is_finite() {
                for w in &mut weights {
                    *w /= total;
                }
            } else {
                // every draw underflowed: hand the class to one worker
                let pick = rand::Rng::random_range(&mut rng, 0..worker_count);
                weights = (0..worker_count).map(|w| if w == pick { 1.0 } else { 0.0 }).collect();
            }
            let n = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (w, p) in weights.iter().enumerate() {
                cum += p;
                let end = if w + 1 == worker_count {
                    n
                } else {
                    ((cum * n as f64).round() as usize).clamp(start, n)
                };
                shards[w].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
    }

    while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        let donor = (0..worker_count).max_by_key(|&w| (shards[w].len(), std::cmp::Reverse(w))).unwrap();
        let moved = shards[donor].pop().expect("donor shard has more than one sample");
        shards[empty].push(moved);
    }
    Ok(Partition { shards })
}

/// Draws `size` indices with per-class counts proportional to the label
/// histogram (largest-remainder rounding).
pub fn stratified_sample(labels: &[usize], class_count: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    if size > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "sample size {size} exceeds {} rows",
            labels.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let n = labels.len() as f64;
    let exact: Vec<f64> = by_class.iter().map(|m| size as f64 * m.len() as f64 / n).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut short = size - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..class_count).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - quota[a] as f64;
        let rb = exact[b] - quota[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(class_count * 2) {
        if short == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            short -= 1;
        }
    }
    let mut picked = Vec::with_capacity(size);
    for (members, &q) in by_class.iter_mut().zip(&quota) {
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..q]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// A held-out, noise-perturbed sample kept by the chief.
#[derive(Debug, Clone)]
pub struct QuasiValidation {
    pub data: Dataset,
    /// Source rows that were held out.
    pub source_indices: Vec<usize>,
    /// Source rows still available for training, ascending.
    pub remaining: Vec<usize>,
}

/// Holds out `size` rows of `source` (stratified by class) and adds
/// N(0, `noise_scale`²) noise to their features.
pub fn make_quasi_validation(source: &Dataset, size: usize, seed: u64, noise_scale: f64) -> Result<QuasiValidation> {
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_scale must be non-negative, got {noise_scale}")));
    }
    let source_indices = stratified_sample(source.labels(), source.class_count(), size, seed)?;
    let mut data = source.subset(&source_indices)?;
    if noise_scale > 0.0 {
        let mut rng = seed::rng(seed::derive(seed, seed::Stream::QuasiValidation, &[1]));
        for v in &mut data.features {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise_scale * z;
        }
    }
    let mut held = vec![false; source.len()];
    for &i in &source_indices {
        held[i] = true;
    }
    let remaining = (0..source.len()).filter(|&i| !held[i]).collect();
    Ok(QuasiValidation {
        data,
        source_indices,
        remaining,
    })
}
