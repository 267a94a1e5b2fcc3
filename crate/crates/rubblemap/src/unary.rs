//! Per-pixel class-probability model: a linear softmax over the filter-bank
//! pixel descriptors, trained with class-weighted cross-entropy. Supplies
//! the unary potentials for the dense CRF. Externally computed probability
//! fields can be imported through the NZRP format instead.

use std::fs;
use std::path::Path;

use crate::descriptors::{pixel_descriptors, DescriptorSet};
use crate::error::{Error, Result};
use crate::format::{checked_len, Reader, Writer};
use crate::gmm::softmax_in_place;
use crate::imaging::Image;

pub const NUM_CLASSES: usize = 4;

const MAGIC_PROBS: [u8; 4] = *b"NZRP";
const MAGIC_MODEL: [u8; 4] = *b"NZRU";
const VERSION: u16 = 1;

/// Linear per-class scores over a pixel descriptor plus bias;
/// row c is [w_c (dim) | b_c].
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryModel {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
}

impl UnaryModel {
    pub fn zeros(classes: usize, dim: usize) -> UnaryModel {
        UnaryModel {
            classes,
            dim,
            weights: vec![0.0; classes * (dim + 1)],
        }
    }

    fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * (self.dim + 1)..(c + 1) * (self.dim + 1)]
    }

    /// Raw per-class scores for one descriptor.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let r = self.row(c);
                r[self.dim] + x.iter().zip(r).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.scores(x);
        softmax_in_place(&mut s);
        s
    }
}

/// Per-class loss weights, strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> ClassWeights {
        ClassWeights(vec![1.0; classes])
    }
}

/// Median-frequency balancing: weight_c = median(freqs) / freq_c.
pub fn class_weights(freqs: &[f64]) -> Result<ClassWeights> {
    if freqs.iter().any(|&f| f <= 0.0 || !f.is_finite()) {
        return Err(Error::Data(
            "class frequencies must be positive to derive weights".into(),
        ));
    }
    let mut sorted = freqs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(ClassWeights(freqs.iter().map(|f| median / f).collect()))
}

/// Weighted softmax cross-entropy, averaged over samples:
/// (1/N) sum_i cw[y_i] * (-log p_i[y_i]). With all weights exactly 1.0 this
/// is bit-identical to the unweighted loss.
pub fn weighted_ce_loss(
    model: &UnaryModel,
    xs: &[f64],
    ys: &[u8],
    cw: &ClassWeights,
) -> f64 {
    let n = ys.len();
    let mut total = 0.0;
    for i in 0..n {
        let x = &xs[i * model.dim..(i + 1) * model.dim];
        let s = model.scores(x);
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let logp = s[ys[i] as usize] - lse;
        total += cw.0[ys[i] as usize] * (-logp);
    }
    total / n as f64
}

fn loss_and_gradient(
    model: &UnaryModel,
    xs: &[f64],
    ys: &[u8],
    cw: &ClassWeights,
) -> (f64, Vec<f64>) {
    let (classes, dim) = (model.classes, model.dim);
    let n = ys.len();
    let mut grad = vec![0.0f64; classes * (dim + 1)];
    let mut total = 0.0;
    for i in 0..n {
        let x = &xs[i * dim..(i + 1) * dim];
        let mut p = model.scores(x);
        let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + p.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let y = ys[i] as usize;
        total += cw.0[y] * (lse - p[y]);
        for v in p.iter_mut() {
            *v = (*v - lse).exp();
        }
        let wi = cw.0[y];
        for c in 0..classes {
            let coeff = wi * (p[c] - if c == y { 1.0 } else { 0.0 });
            if coeff != 0.0 {
                let row = &mut grad[c * (dim + 1)..(c + 1) * (dim + 1)];
                for t in 0..dim {
                    row[t] += coeff * x[t];
                }
                row[dim] += coeff;
            }
        }
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (total * inv, grad)
}

/// Full-batch gradient descent with backtracking step control, from a zero
/// initialization. The loss never increases between accepted steps. The
/// seed is accepted for interface stability; the optimizer itself is
/// deterministic.
pub fn train_unary(
    xs: &[f64],
    ys: &[u8],
    dim: usize,
    classes: usize,
    cw: &ClassWeights,
    lr: f64,
    epochs: usize,
    _seed: u64,
) -> Result<UnaryModel> {
    let n = ys.len();
    if n == 0 || xs.len() != n * dim {
        return Err(Error::DimensionMismatch {
            expected: format!("{} features for {} samples", n * dim, n),
            got: format!("{}", xs.len()),
        });
    }
    if cw.0.len() != classes {
        return Err(Error::DimensionMismatch {
            expected: format!("{classes} class weights"),
            got: format!("{}", cw.0.len()),
        });
    }
    let mut present = vec![false; classes];
    for &y in ys {
        if y as usize >= classes {
            return Err(Error::Data(format!("label {y} out of range")));
        }
        present[y as usize] = true;
    }
    if let Some(missing) = present.iter().position(|&p| !p) {
        return Err(Error::Data(format!(
            "training data contains no samples of class {missing}"
        )));
    }

    let mut model = UnaryModel::zeros(classes, dim);
    let (mut loss, mut grad) = loss_and_gradient(&model, xs, ys, cw);
    let mut step = lr;
    for _ in 0..epochs {
        let grad_norm2: f64 = grad.iter().map(|g| g * g).sum();
        if grad_norm2 < 1e-24 {
            break;
        }
        let mut accepted = false;
        while step > 1e-14 {
            let mut cand = model.clone();
            for (w, g) in cand.weights.iter_mut().zip(&grad) {
                *w -= step * g;
            }
            let (cand_loss, cand_grad) = loss_and_gradient(&cand, xs, ys, cw);
            if cand_loss <= loss {
                model = cand;
                loss = cand_loss;
                grad = cand_grad;
                accepted = true;
                // Gentle growth so a too-small step recovers.
                step *= 1.2;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Probability fields

/// Per-pixel class probabilities, pixel-major in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityField {
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl ProbabilityField {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Evaluates the model at every pixel (stride 1, edge replication).
/// Each pixel's probabilities are non-negative and sum to one.
pub fn unary_probabilities(
    model: &UnaryModel,
    img: &Image,
    patch_size: usize,
) -> Result<ProbabilityField> {
    let ds: DescriptorSet = pixel_descriptors(img, patch_size)?;
    if ds.dim != model.dim {
        return Err(Error::DimensionMismatch {
            expected: format!("descriptor dim {}", model.dim),
            got: format!("{}", ds.dim),
        });
    }
    let mut probs = Vec::with_capacity(ds.len() * model.classes);
    for i in 0..ds.len() {
        let x = ds.vector_f64(i);
        probs.extend(model.probabilities(&x));
    }
    Ok(ProbabilityField {
        width: img.width,
        height: img.height,
        classes: model.classes,
        probs,
    })
}

/// NZRP probability-field format: magic, W, H, C, then C planes of HxW
/// float32, little-endian.
pub fn probability_field_bytes(f: &ProbabilityField) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_magic(MAGIC_PROBS);
    w.put_u32(f.width);
    w.put_u32(f.height);
    w.put_u32(f.classes as u32);
    let n = f.pixel_count();
    for c in 0..f.classes {
        for i in 0..n {
            w.put_f32(f.probs[i * f.classes + c] as f32);
        }
    }
    w.into_bytes()
}

pub fn probability_field_from_bytes(bytes: &[u8]) -> Result<ProbabilityField> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC_PROBS)?;
    let width = r.read_u32()?;
    let height = r.read_u32()?;
    let classes = r.read_u32()? as usize;
    let n = checked_len(width as usize, height as usize)?;
    let total = checked_len(n, classes)?;
    let planes = r.read_f32_vec(total)?;
    r.finish()?;
    let mut probs = vec![0.0f64; total];
    for c in 0..classes {
        for i in 0..n {
            probs[i * classes + c] = planes[c * n + i] as f64;
        }
    }
    Ok(ProbabilityField {
        width,
        height,
        classes,
        probs,
    })
}

pub fn write_probability_field(path: &Path, f: &ProbabilityField) -> Result<()> {
    fs::write(path, probability_field_bytes(f)).map_err(|e| Error::file(path, e))
}

pub fn read_probability_field(path: &Path) -> Result<ProbabilityField> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    probability_field_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Model file format (same layout family as the mixture model file)

pub fn unary_model_bytes(m: &UnaryModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_magic(MAGIC_MODEL);
    w.put_u16(VERSION);
    w.put_u32(m.classes as u32);
    w.put_u32(m.dim as u32);
    for &v in &m.weights {
        w.put_f64(v);
    }
    w.into_bytes()
}

pub fn unary_model_from_bytes(bytes: &[u8]) -> Result<UnaryModel> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC_MODEL)?;
    r.expect_version(VERSION)?;
    let classes = r.read_u32()? as usize;
    let dim = r.read_u32()? as usize;
    let total = checked_len(classes, dim + 1)?;
    let weights = r.read_f64_vec(total)?;
    r.finish()?;
    Ok(UnaryModel {
        classes,
        dim,
        weights,
    })
}

pub fn write_unary_model(path: &Path, m: &UnaryModel) -> Result<()> {
    fs::write(path, unary_model_bytes(m)).map_err(|e| Error::file(path, e))
}

pub fn read_unary_model(path: &Path) -> Result<UnaryModel> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    unary_model_from_bytes(&bytes)
}
