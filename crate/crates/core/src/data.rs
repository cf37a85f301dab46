//! Labelled feature vectors: CSV ingestion, a synthetic blob generator,
//! normalization and seeded splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

fn default_clusters() -> usize {
    1
}

/// Gaussian class blobs. Each class owns `clusters` centres drawn from a
/// standard normal in a `latent_dim`-dimensional space (default: `dim`);
/// samples add `noise`-scaled normal jitter to a centre. A smaller latent
/// space is embedded into `dim` features by a random linear map, which
/// interleaves the clusters and makes the task harder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default)]
    pub latent_dim: Option<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::data(None, "dimension and class count must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::data(None, format!("{} features for {} rows of width {dim}", features.len(), labels.len())));
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::data(Some(i + 1), format!("label {} outside 0..{classes}", labels[i])));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(Some(i / dim + 1), "non-finite feature"));
        }
        Ok(Dataset {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        if spec.classes < 2 || spec.dim == 0 || spec.samples < spec.classes || spec.clusters == 0 {
            return Err(Error::config("synthetic spec needs >= 2 classes, dim > 0, samples >= classes, clusters > 0"));
        }
        if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
            return Err(Error::config("synthetic noise must be non-negative"));
        }
        let latent = spec.latent_dim.unwrap_or(spec.dim);
        if latent == 0 || latent > spec.dim {
            return Err(Error::config(format!("latent_dim {latent} outside 1..={}", spec.dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let centres: Vec<Vec<f64>> = (0..spec.classes * spec.clusters).map(|_| normal(latent)).collect();
        // random linear embedding of the latent space; identity when full rank
        let embed = (latent < spec.dim).then(|| normal(spec.dim * latent));
        let mut features = Vec::with_capacity(spec.samples * spec.dim);
        let mut labels = Vec::with_capacity(spec.samples);
        for i in 0..spec.samples {
            let class = i % spec.classes;
            let cluster = (i / spec.classes) % spec.clusters;
            let c = &centres[class * spec.clusters + cluster];
            let jitter = normal(latent);
            let z: Vec<f64> = c.iter().zip(&jitter).map(|(c, n)| c + spec.noise * n).collect();
            match &embed {
                Some(a) => features.extend(a.chunks(latent).map(|row| row.iter().zip(&z).map(|(a, z)| a * z).sum::<f64>())),
                None => features.extend(z),
            }
            labels.push(class);
        }
        let mut ds = Dataset::new(spec.dim, spec.classes, features, labels)?;
        ds.normalize();
        Ok(ds)
    }

    /// Rows `label,v1,...,vn`; a first row without any numeric field is
    /// taken as a header. The class count is the largest label plus one.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut dim = None;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::data(Some(row), e.to_string()))?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            if row == 1 && rec.iter().all(|f| f.parse::<f64>().is_err()) {
                continue;
            }
            let mut fields = rec.iter();
            let label_text = fields.next().unwrap_or_default();
            let label: usize = label_text
                .parse()
                .map_err(|_| Error::data(Some(row), format!("label '{label_text}' is not a non-negative integer")))?;
            let start = features.len();
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::data(Some(row), format!("value '{f}' is not numeric")))?;
                if !v.is_finite() {
                    return Err(Error::data(Some(row), format!("value '{f}' is not finite")));
                }
                features.push(v);
            }
            let n = features.len() - start;
            match dim {
                None if n == 0 => return Err(Error::data(Some(row), "row has no feature values")),
                None => dim = Some(n),
                Some(d) if d != n => {
                    return Err(Error::data(Some(row), format!("row has {n} values, expected {d}")));
                }
                _ => {}
            }
            labels.push(label);
        }
        let dim = dim.ok_or_else(|| Error::data(None, "no data rows"))?;
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut ds = Dataset::new(dim, classes, features, labels)?;
        ds.normalize();
        Ok(ds)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(std::io::BufReader::new(f))
    }

    /// Zero mean, unit variance per feature (constant features are only centred).
    pub fn normalize(&mut self) {
        let n = self.len() as f64;
        for j in 0..self.dim {
            let col = || self.features.iter().skip(j).step_by(self.dim);
            let mean = col().sum::<f64>() / n;
            let var = col().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
            for v in self.features.iter_mut().skip(j).step_by(self.dim) {
                *v = (*v - mean) / sd;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded shuffle, first `fraction` of rows to the first part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config(format!("split fraction {fraction} outside (0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len().saturating_sub(1).max(1));
        Ok((self.subset(&idx[..k]), self.subset(&idx[k..])))
    }

    /// Feature matrix and labels of the given rows.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let x = Tensor::matrix(idx.len(), self.dim, data)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}
