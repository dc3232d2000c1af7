//! Row-major sample matrices and their CSV persistence.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `n x d` matrix of samples stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    dim: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self { dim, data: vec![0.0; n * dim] }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(0));
        }
        if data.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).ok_or(Error::EmptySample)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(dim, data)
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.data.chunks_exact_mut(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Values of coordinate `j` across all rows.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Unbiased per-coordinate variances.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let n = self.len();
        let mut v = vec![0.0; self.dim];
        for r in self.rows() {
            for ((a, b), mu) in v.iter_mut().zip(r).zip(&m) {
                *a += (b - mu) * (b - mu);
            }
        }
        let denom = (n.max(2) - 1) as f64;
        v.iter_mut().for_each(|a| *a /= denom);
        v
    }

    /// Unbiased full covariance matrix, row-major `d x d`.
    pub fn covariance(&self) -> Vec<f64> {
        let m = self.mean();
        let d = self.dim;
        let mut c = vec![0.0; d * d];
        for r in self.rows() {
            for i in 0..d {
                let di = r[i] - m[i];
                for j in 0..d {
                    c[i * d + j] += di * (r[j] - m[j]);
                }
            }
        }
        let denom = (self.len().max(2) - 1) as f64;
        c.iter_mut().for_each(|a| *a /= denom);
        c
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Generated or reference samples together with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub samples: Batch,
    /// Forward time the samples are meant to represent.
    pub time: f64,
    pub model_hash: String,
    pub seed: u64,
    pub scheme: String,
}

impl SampleBatch {
    pub fn new(samples: Batch, time: f64, model_hash: impl Into<String>, seed: u64, scheme: impl Into<String>) -> Self {
        Self { samples, time, model_hash: model_hash.into(), seed, scheme: scheme.into() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }

    /// Writes a metadata comment line followed by a CSV with columns `x0..x{d-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# seed={} time={} model_hash={} scheme={}",
            self.seed, self.time, self.model_hash, self.scheme
        )?;
        let mut wr = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        wr.write_record(&header)?;
        for r in self.samples.rows() {
            wr.write_record(r.iter().map(|v| format!("{v:e}")))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`SampleBatch::write_csv`]. The metadata
    /// line is optional; missing fields default to empty values.
    pub fn read_csv<R: BufRead>(mut r: R) -> Result<Self> {
        let mut first = String::new();
        r.read_line(&mut first)?;
        let (meta, rest): (Option<String>, String) = if first.starts_with('#') {
            (Some(first), String::new())
        } else {
            (None, first)
        };
        let mut seed = 0;
        let mut time = 0.0;
        let mut model_hash = String::new();
        let mut scheme = String::new();
        if let Some(meta) = meta {
            for tok in meta.trim_start_matches('#').split_whitespace() {
                let Some((k, v)) = tok.split_once('=') else { continue };
                match k {
                    "seed" => seed = v.parse().map_err(|_| Error::Io(format!("bad seed {v}")))?,
                    "time" => time = v.parse().map_err(|_| Error::Io(format!("bad time {v}")))?,
                    "model_hash" => model_hash = v.to_string(),
                    "scheme" => scheme = v.to_string(),
                    _ => {}
                }
            }
        }
        let chained = std::io::Cursor::new(rest).chain(r);
        let mut rd = csv::Reader::from_reader(chained);
        let dim = rd.headers()?.len();
        let mut data = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: rec.len() });
            }
            for f in rec.iter() {
                data.push(f.trim().parse::<f64>().map_err(|_| Error::Io(format!("bad number `{f}`")))?);
            }
        }
        if data.is_empty() {
            return Err(Error::EmptySample);
        }
        Ok(Self { samples: Batch::from_flat(dim, data)?, time, model_hash, seed, scheme })
    }
}
