//! Synthetic dataset generation and CSV (de)serialization.
//!
//! File format: one `#`-prefixed JSON metadata line, then one row per sample
//! `x_0,...,x_{d-1}[,label]`. Floats are written in shortest round-trip form,
//! so save/load is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Generation metadata embedded in the file header and checked on load.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub kind: String,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    /// Number of classes; 1 means unlabeled.
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blob_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blob_centers: Option<Vec<Vec<f64>>>,
}

/// Immutable sample matrix with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<f64>, // n * d, row-major
    labels: Option<Vec<usize>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn dim(&self) -> usize {
        self.meta.d
    }

    pub fn num_classes(&self) -> usize {
        self.meta.k
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.meta.d..(i + 1) * self.meta.d]
    }

    /// Label of sample `i`; 0 for unlabeled datasets.
    pub fn label(&self, i: usize) -> usize {
        self.labels.as_ref().map_or(0, |l| l[i])
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Empirical class proportions, length `k`.
    pub fn class_proportions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.meta.k];
        for i in 0..self.n() {
            counts[self.label(i)] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / self.n() as f64)
            .collect()
    }

    /// Flat copy of the sample matrix (used to initialize particles).
    pub fn samples_flat(&self) -> Vec<f64> {
        self.samples.clone()
    }

    pub fn from_parts(samples: Vec<f64>, labels: Option<Vec<usize>>, meta: DatasetMeta) -> Result<Self> {
        if samples.len() != meta.n * meta.d {
            return Err(Error::config("sample buffer does not match n * d"));
        }
        if meta.k > 1 {
            let labels = labels
                .as_ref()
                .ok_or_else(|| Error::config("labels required when k > 1"))?;
            if labels.len() != meta.n {
                return Err(Error::config("label count does not match n"));
            }
            if let Some(bad) = labels.iter().find(|y| **y >= meta.k) {
                return Err(Error::config(format!("label {bad} out of range")));
            }
        }
        Ok(Dataset {
            samples,
            labels,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header = serde_json::to_string(&self.meta)
            .map_err(|e| Error::config(format!("metadata serialization failed: {e}")))?;
        writeln!(out, "# {header}").unwrap();
        for i in 0..self.n() {
            let row = self.sample(i);
            let mut first = true;
            for x in row {
                if !first {
                    out.push(',');
                }
                write!(out, "{x}").unwrap();
                first = false;
            }
            if let Some(labels) = &self.labels {
                write!(out, ",{}", labels[i]).unwrap();
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty dataset file"))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| Error::parse(1, "expected '#' metadata header"))?
            .trim();
        let meta: DatasetMeta = serde_json::from_str(header)
            .map_err(|e| Error::parse(1, format!("bad metadata JSON: {e}")))?;
        let mut samples = Vec::with_capacity(meta.n * meta.d);
        let mut labels = if meta.k > 1 {
            Some(Vec::with_capacity(meta.n))
        } else {
            None
        };
        let mut rows = 0usize;
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let expected = meta.d + usize::from(meta.k > 1);
            if fields.len() != expected {
                return Err(Error::parse(
                    lineno,
                    format!("expected {expected} fields, found {}", fields.len()),
                ));
            }
            for (j, f) in fields[..meta.d].iter().enumerate() {
                let x: f64 = f.trim().parse().map_err(|_| {
                    Error::parse(lineno, format!("field {j} is not a number: '{f}'"))
                })?;
                if !x.is_finite() {
                    return Err(Error::parse(
                        lineno,
                        format!("field {j} is not finite: '{f}'"),
                    ));
                }
                samples.push(x);
            }
            if let Some(labels) = labels.as_mut() {
                let f = fields[meta.d].trim();
                let y: usize = f
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad label '{f}'")))?;
                if y >= meta.k {
                    return Err(Error::parse(
                        lineno,
                        format!("label {y} out of range for k = {}", meta.k),
                    ));
                }
                labels.push(y);
            }
            rows += 1;
        }
        if rows != meta.n {
            return Err(Error::parse(
                rows + 1,
                format!("header declares n = {}, file has {rows} rows", meta.n),
            ));
        }
        Dataset::from_parts(samples, labels, meta)
    }
}

/// n i.i.d. samples from Unif([-1, 1]^2). The regression response is implied
/// by the loss model and never stored.
pub fn gen_regression_2d(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed).split(0x0DA7A);
    let mut samples = Vec::with_capacity(n * 2);
    for _ in 0..n {
        samples.push(rng.uniform_in(-1.0, 1.0));
        samples.push(rng.uniform_in(-1.0, 1.0));
    }
    Dataset {
        samples,
        labels: None,
        meta: DatasetMeta {
            kind: "regression2d".into(),
            seed,
            n,
            d: 2,
            k: 1,
            sigma_y: Some(0.5),
            blob_scale: None,
            blob_centers: None,
        },
    }
}

/// Labeled isotropic Gaussian blobs with uniform class proportions.
pub fn gen_blobs(
    n_per_class: usize,
    centers: &[Vec<f64>],
    scale: f64,
    seed: u64,
) -> Result<Dataset> {
    let k = centers.len();
    if k < 2 {
        return Err(Error::config("blobs need at least 2 classes"));
    }
    let d = centers[0].len();
    if centers.iter().any(|c| c.len() != d) {
        return Err(Error::config("blob centers must share one dimension"));
    }
    for a in 0..k {
        for b in a + 1..k {
            if centers[a] == centers[b] {
                return Err(Error::config(format!("blob centers {a} and {b} coincide")));
            }
        }
    }
    let mut rng = Rng::new(seed).split(0xB10B);
    let n = n_per_class * k;
    let mut samples = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for y in 0..k {
        for _ in 0..n_per_class {
            for c in &centers[y] {
                samples.push(c + scale * rng.normal());
            }
            labels.push(y);
        }
    }
    Ok(Dataset {
        samples,
        labels: Some(labels),
        meta: DatasetMeta {
            kind: "blobs".into(),
            seed,
            n,
            d,
            k,
            sigma_y: None,
            blob_scale: Some(scale),
            blob_centers: Some(centers.to_vec()),
        },
    })
}

/// K centers evenly spaced on a circle of the given radius (first two
/// coordinates; remaining coordinates zero).
pub fn ring_centers(k: usize, radius: f64, d: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|y| {
            let ang = std::f64::consts::TAU * y as f64 / k as f64;
            let mut c = vec![0.0; d];
            c[0] = radius * ang.cos();
            if d > 1 {
                c[1] = radius * ang.sin();
            }
            c
        })
        .collect()
}
