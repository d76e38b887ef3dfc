use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingTag {
    Natural,
    Synthesized,
}

impl fmt::Display for EmbeddingTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingTag::Natural => "natural",
            EmbeddingTag::Synthesized => "synthesized",
        })
    }
}

impl FromStr for EmbeddingTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(EmbeddingTag::Natural),
            "synthesized" => Ok(EmbeddingTag::Synthesized),
            other => Err(Error::format(format!("unknown embedding tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub utt_id: String,
    pub speaker_id: String,
    pub tag: EmbeddingTag,
    pub values: Vec<f64>,
}

/// Writes a TSV with header `utt_id speaker_id tag e0 .. e{d-1}`.
pub fn export_embeddings(rows: &[EmbeddingRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, |r| r.values.len());
    if let Some(bad) = rows.iter().find(|r| r.values.len() != dim) {
        return Err(Error::invalid(format!(
            "embedding {} has dimension {}, expected {dim}",
            bad.utt_id,
            bad.values.len()
        )));
    }
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    let mut header = String::from("utt_id\tspeaker_id\ttag");
    for i in 0..dim {
        header.push_str(&format!("\te{i}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for r in rows {
        let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}\t{}\t{}\t{}", r.utt_id, r.speaker_id, r.tag, vals.join("\t")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 3 {
            return Err(Error::format(format!("{}:{}: too few fields", path.display(), n + 1)));
        }
        let values = f[3..]
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            utt_id: f[0].to_string(),
            speaker_id: f[1].to_string(),
            tag: f[2].parse()?,
            values,
        });
    }
    Ok(rows)
}

/// Principal axes of a point cloud, largest variance first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `[k, d]`, orthonormal rows.
    pub components: Tensor,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn fit(points: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::invalid("PCA of an empty set"));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::invalid("PCA points differ in dimension"));
        }
        if k > d {
            return Err(Error::config(format!("cannot keep {k} components of {d}-dim data")));
        }
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut comps = Vec::with_capacity(k * d);
        let mut explained = Vec::with_capacity(k);
        for &c in order.iter().take(k) {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            // fix the sign so the largest-magnitude entry is positive
            let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            comps.extend(v);
            explained.push(eig.eigenvalues[c].max(0.0));
        }
        Ok(Self {
            mean,
            components: Tensor::new(vec![k, d], comps),
            explained_variance: explained,
        })
    }

    pub fn project(&self, p: &[f64]) -> Vec<f64> {
        (0..self.components.rows())
            .map(|k| {
                self.components
                    .row_slice(k)
                    .iter()
                    .zip(p.iter().zip(&self.mean))
                    .map(|(c, (x, m))| c * (x - m))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, &c) in coords.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.components.row_slice(k)) {
                *o += c * w;
            }
        }
        out
    }
}

/// `[N, 2]` coordinates on the two leading principal axes.
pub fn project_2d(points: &[Vec<f64>]) -> Result<Tensor> {
    let pca = Pca::fit(points, 2)?;
    let rows: Vec<Vec<f64>> = points.iter().map(|p| pca.project(p)).collect();
    Ok(Tensor::from_rows(&rows))
}
