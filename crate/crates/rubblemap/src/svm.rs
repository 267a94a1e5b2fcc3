//! One-vs-all linear SVM over Fisher vectors, trained by deterministic
//! full-batch subgradient descent.
//!
//! Each class objective is 0.5 ||w||^2 + C * mean_i hinge(1 - y_i s_i) with
//! the hinge averaged (not summed) over samples, so C=1 means the same thing
//! on any dataset size and duplicating the dataset leaves the solution
//! unchanged. The bias is not regularized. The returned model is the best
//! iterate seen, so its objective never exceeds the zero-initialized one.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{checked_len, Reader, Writer};

const MAGIC: [u8; 4] = *b"NZRS";
const VERSION: u16 = 1;

/// Per-class weight vectors plus bias; row c is [w_c (dim) | b_c].
#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    /// Regularization used at training time. Not persisted in the model
    /// file; reading restores the default 1.0.
    pub c: f64,
}

impl SvmModel {
    fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * (self.dim + 1)..(c + 1) * (self.dim + 1)]
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: format!("{}-dimensional input", self.dim),
                got: format!("{}", x.len()),
            });
        }
        Ok((0..self.classes)
            .map(|c| {
                let r = self.row(c);
                r[self.dim] + x.iter().zip(r).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }
}

/// One-vs-all objective for a single class row: 0.5 ||w||^2 + C mean hinge.
pub fn ova_objective(w: &[f64], dim: usize, xs: &[f64], ys: &[f64], c: f64) -> f64 {
    let n = ys.len();
    let reg: f64 = 0.5 * w[..dim].iter().map(|v| v * v).sum::<f64>();
    let mut hinge = 0.0;
    for i in 0..n {
        let x = &xs[i * dim..(i + 1) * dim];
        let score = w[dim] + x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        hinge += (1.0 - ys[i] * score).max(0.0);
    }
    reg + c * hinge / n as f64
}

fn train_binary(xs: &[f64], ys: &[f64], dim: usize, c: f64, epochs: usize) -> Vec<f64> {
    let n = ys.len();
    let lambda = 1.0 / c;
    let mut w = vec![0.0f64; dim + 1];
    let mut best = w.clone();
    let mut best_obj = ova_objective(&w, dim, xs, ys, c);
    let mut grad = vec![0.0f64; dim + 1];

    for t in 1..=epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let x = &xs[i * dim..(i + 1) * dim];
            let score = w[dim] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            if ys[i] * score < 1.0 {
                for t in 0..dim {
                    grad[t] -= ys[i] * x[t];
                }
                grad[dim] -= ys[i];
            }
        }
        let inv_n = 1.0 / n as f64;
        let step = 1.0 / (lambda * t as f64);
        for t in 0..dim {
            w[t] -= step * (lambda * w[t] + grad[t] * inv_n);
        }
        w[dim] -= step * grad[dim] * inv_n;

        let obj = ova_objective(&w, dim, xs, ys, c);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&w);
        }
    }
    best
}

/// Trains one binary classifier per class present in the data. The seed is
/// accepted for interface stability; training is fully deterministic.
pub fn train_ova_svm(
    features: &[f64],
    dim: usize,
    labels: &[u8],
    n_classes: usize,
    c: f64,
    epochs: usize,
    _seed: u64,
) -> Result<SvmModel> {
    let n = labels.len();
    if n == 0 || features.len() != n * dim {
        return Err(Error::DimensionMismatch {
            expected: format!("{} feature values", n * dim),
            got: format!("{}", features.len()),
        });
    }
    if !(c > 0.0) {
        return Err(Error::Config(format!("regularization C={c} must be positive")));
    }
    let mut present = vec![false; n_classes];
    for &y in labels {
        if y as usize >= n_classes {
            return Err(Error::Data(format!("label {y} out of range")));
        }
        present[y as usize] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Data(
            "one-vs-all training needs at least two classes present".into(),
        ));
    }

    let mut weights = Vec::with_capacity(n_classes * (dim + 1));
    for cls in 0..n_classes {
        if present[cls] {
            let ys: Vec<f64> = labels
                .iter()
                .map(|&y| if y as usize == cls { 1.0 } else { -1.0 })
                .collect();
            weights.extend(train_binary(features, &ys, dim, c, epochs));
        } else {
            // Class absent from training data: score it at minus infinity's
            // practical stand-in so it is never predicted.
            let mut row = vec![0.0f64; dim + 1];
            row[dim] = f64::MIN / 4.0;
            weights.extend(row);
        }
    }
    Ok(SvmModel {
        classes: n_classes,
        dim,
        weights,
        c,
    })
}

/// Argmax of the per-class scores; ties go to the lowest class index.
pub fn svm_predict(model: &SvmModel, x: &[f64]) -> Result<(u8, Vec<f64>)> {
    let scores = model.scores(x)?;
    let mut best = 0usize;
    for c in 1..model.classes {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    Ok((best as u8, scores))
}

// ---------------------------------------------------------------------------
// Model file format

pub fn svm_bytes(m: &SvmModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_magic(MAGIC);
    w.put_u16(VERSION);
    w.put_u32(m.classes as u32);
    w.put_u32(m.dim as u32);
    for &v in &m.weights {
        w.put_f64(v);
    }
    w.into_bytes()
}

pub fn svm_from_bytes(bytes: &[u8]) -> Result<SvmModel> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let classes = r.read_u32()? as usize;
    let dim = r.read_u32()? as usize;
    let total = checked_len(classes, dim + 1)?;
    let weights = r.read_f64_vec(total)?;
    r.finish()?;
    Ok(SvmModel {
        classes,
        dim,
        weights,
        c: 1.0,
    })
}

pub fn write_svm(path: &Path, m: &SvmModel) -> Result<()> {
    fs::write(path, svm_bytes(m)).map_err(|e| Error::file(path, e))
}

pub fn read_svm(path: &Path) -> Result<SvmModel> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    svm_from_bytes(&bytes)
}
