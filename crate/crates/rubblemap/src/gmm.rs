//! Diagonal-covariance Gaussian mixtures: density and responsibility
//! evaluation, EM fitting, and the binary model format.
//!
//! Mixture weights are kept re-parameterized as logits `alpha` with
//! `w = softmax(alpha)`, so weight constraints never need enforcing and the
//! encoding stage can differentiate through them. Standard deviations are
//! floored at [`SIGMA_FLOOR`] to keep components non-singular.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::format::{checked_len, Reader, Writer};
use crate::kmeans;

pub const SIGMA_FLOOR: f64 = 1e-4;
const LN_2PI: f64 = 1.8378770664093453;

const MAGIC: [u8; 4] = *b"NZRG";
const VERSION: u16 = 1;

/// K-component diagonal-covariance Gaussian mixture over D dimensions.
/// `sigma` holds standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub k: usize,
    pub d: usize,
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GmmModel {
    pub fn new(k: usize, d: usize, alpha: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>) -> Result<GmmModel> {
        if alpha.len() != k || mu.len() != k * d || sigma.len() != k * d {
            return Err(Error::DimensionMismatch {
                expected: format!("alpha {k}, mu/sigma {}", k * d),
                got: format!("{}/{}/{}", alpha.len(), mu.len(), sigma.len()),
            });
        }
        if sigma.iter().any(|&s| !(s >= SIGMA_FLOOR)) {
            return Err(Error::Numeric(format!(
                "sigma entries must be >= {SIGMA_FLOOR}"
            )));
        }
        if alpha.iter().chain(&mu).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite mixture parameter".into()));
        }
        Ok(GmmModel { k, d, alpha, mu, sigma })
    }

    pub fn weights(&self) -> Vec<f64> {
        mixture_weights(&self.alpha)
    }

    pub fn mu_row(&self, j: usize) -> &[f64] {
        &self.mu[j * self.d..(j + 1) * self.d]
    }

    pub fn sigma_row(&self, j: usize) -> &[f64] {
        &self.sigma[j * self.d..(j + 1) * self.d]
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: format!("{}-dimensional point", self.d),
                got: format!("{}", x.len()),
            });
        }
        Ok(())
    }

    /// ln(w_j) + ln N(x; mu_j, diag sigma_j^2) for every component.
    pub(crate) fn log_joint(&self, x: &[f64], out: &mut Vec<f64>) {
        let log_w: Vec<f64> = {
            let m = self.alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + self.alpha.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
            self.alpha.iter().map(|a| a - lse).collect()
        };
        out.clear();
        for j in 0..self.k {
            let mu = self.mu_row(j);
            let sg = self.sigma_row(j);
            let mut quad = 0.0;
            let mut log_det = 0.0;
            for t in 0..self.d {
                let z = (x[t] - mu[t]) / sg[t];
                quad += z * z;
                log_det += sg[t].ln();
            }
            out.push(log_w[j] - 0.5 * (quad + self.d as f64 * LN_2PI) - log_det);
        }
    }

    /// ln P(x) via log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut joint = Vec::with_capacity(self.k);
        self.log_joint(x, &mut joint);
        Ok(log_sum_exp(&joint))
    }

    /// Posterior component probabilities for x; non-negative, summing to 1.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut joint = Vec::with_capacity(self.k);
        self.log_joint(x, &mut joint);
        softmax_in_place(&mut joint);
        Ok(joint)
    }
}

/// Softmax of the weight logits, computed with max subtraction.
pub fn mixture_weights(alpha: &[f64]) -> Vec<f64> {
    let mut w = alpha.to_vec();
    softmax_in_place(&mut w);
    w
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

// ---------------------------------------------------------------------------
// EM fitting

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl FitOptions {
    pub fn new(k: usize, seed: u64) -> FitOptions {
        FitOptions {
            k,
            seed,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

/// EM fit result with the mean log-likelihood trace (one entry per
/// iteration, non-decreasing up to floating slack).
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihood: Vec<f64>,
    pub reseeded_components: usize,
}

/// Fits a diagonal GMM to `n` rows of width `d` with EM, k-means++ seeded.
pub fn fit_gmm(data: &[f64], n: usize, d: usize, opts: FitOptions) -> Result<GmmFit> {
    let k = opts.k;
    if k == 0 {
        return Err(Error::Config("component count must be >= 1".into()));
    }
    if data.len() != n * d {
        return Err(Error::DimensionMismatch {
            expected: format!("{} values", n * d),
            got: format!("{}", data.len()),
        });
    }
    if n < k {
        return Err(Error::Data(format!(
            "{n} points cannot support {k} mixture components"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite descriptor value".into()));
    }

    let row = |i: usize| &data[i * d..(i + 1) * d];

    // Global per-dimension std, used for initialization and re-seeding.
    let mut global_mean = vec![0.0f64; d];
    for i in 0..n {
        for t in 0..d {
            global_mean[t] += data[i * d + t];
        }
    }
    for m in global_mean.iter_mut() {
        *m /= n as f64;
    }
    let mut global_std = vec![0.0f64; d];
    for i in 0..n {
        for t in 0..d {
            let dv = data[i * d + t] - global_mean[t];
            global_std[t] += dv * dv;
        }
    }
    for s in global_std.iter_mut() {
        *s = (*s / n as f64).sqrt().max(SIGMA_FLOOR);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let seeds = kmeans::kmeans_pp_indices(data, n, d, k, &mut rng);
    let mut mu = Vec::with_capacity(k * d);
    for &i in &seeds {
        mu.extend_from_slice(row(i));
    }
    let mut sigma: Vec<f64> = global_std
        .iter()
        .cycle()
        .take(k * d)
        .cloned()
        .collect();
    let mut weights = vec![1.0 / k as f64; k];

    let mut model = GmmModel::new(
        k,
        d,
        weights.iter().map(|w| w.ln()).collect(),
        mu.clone(),
        sigma.clone(),
    )?;

    let mut trace: Vec<f64> = Vec::new();
    let mut resp = vec![0.0f64; n * k];
    let mut reseeded = 0usize;

    for _iter in 0..opts.max_iters {
        // E-step; fixed evaluation order keeps the reduction bit-stable.
        let mut ll_sum = 0.0;
        let mut joint = Vec::with_capacity(k);
        for i in 0..n {
            model.log_joint(row(i), &mut joint);
            let lse = log_sum_exp(&joint);
            ll_sum += lse;
            for j in 0..k {
                resp[i * k + j] = (joint[j] - lse).exp();
            }
        }
        let mean_ll = ll_sum / n as f64;
        let converged = trace
            .last()
            .map(|&prev| (mean_ll - prev).abs() <= opts.tol * prev.abs().max(1.0))
            .unwrap_or(false);
        trace.push(mean_ll);
        if converged {
            break;
        }

        // M-step.
        let mut nk = vec![0.0f64; k];
        for i in 0..n {
            for j in 0..k {
                nk[j] += resp[i * k + j];
            }
        }
        mu.iter_mut().for_each(|m| *m = 0.0);
        for i in 0..n {
            for j in 0..k {
                let r = resp[i * k + j];
                if r > 0.0 {
                    for t in 0..d {
                        mu[j * d + t] += r * data[i * d + t];
                    }
                }
            }
        }
        for j in 0..k {
            if nk[j] > 0.0 {
                for t in 0..d {
                    mu[j * d + t] /= nk[j];
                }
            }
        }
        sigma.iter_mut().for_each(|s| *s = 0.0);
        for i in 0..n {
            for j in 0..k {
                let r = resp[i * k + j];
                if r > 0.0 {
                    for t in 0..d {
                        let dv = data[i * d + t] - mu[j * d + t];
                        sigma[j * d + t] += r * dv * dv;
                    }
                }
            }
        }
        for j in 0..k {
            for t in 0..d {
                sigma[j * d + t] = if nk[j] > 0.0 {
                    (sigma[j * d + t] / nk[j]).sqrt().max(SIGMA_FLOOR)
                } else {
                    global_std[t]
                };
            }
        }
        for j in 0..k {
            weights[j] = nk[j] / n as f64;
        }

        // Re-seed any starved component from the farthest point.
        let min_weight = 1e-8;
        for j in 0..k {
            if weights[j] < min_weight {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (0..k)
                            .map(|c| kmeans::sq_dist(row(a), &mu[c * d..(c + 1) * d]))
                            .fold(f64::INFINITY, f64::min);
                        let db = (0..k)
                            .map(|c| kmeans::sq_dist(row(b), &mu[c * d..(c + 1) * d]))
                            .fold(f64::INFINITY, f64::min);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                mu[j * d..(j + 1) * d].copy_from_slice(row(far));
                sigma[j * d..(j + 1) * d].copy_from_slice(&global_std);
                weights[j] = 1.0 / n as f64;
                reseeded += 1;
                log::warn!("re-seeded empty mixture component {j} from farthest point");
            }
        }
        let wsum: f64 = weights.iter().sum();
        let alpha: Vec<f64> = weights.iter().map(|w| (w / wsum).ln()).collect();
        model = GmmModel::new(k, d, alpha, mu.clone(), sigma.clone())?;
    }

    Ok(GmmFit {
        model,
        log_likelihood: trace,
        reseeded_components: reseeded,
    })
}

// ---------------------------------------------------------------------------
// Model file format

pub fn gmm_bytes(m: &GmmModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_magic(MAGIC);
    w.put_u16(VERSION);
    w.put_u32(m.k as u32);
    w.put_u32(m.d as u32);
    for &a in &m.alpha {
        w.put_f64(a);
    }
    for &v in &m.mu {
        w.put_f64(v);
    }
    for &v in &m.sigma {
        w.put_f64(v);
    }
    w.into_bytes()
}

pub fn gmm_from_bytes(bytes: &[u8]) -> Result<GmmModel> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let k = r.read_u32()? as usize;
    let d = r.read_u32()? as usize;
    let kd = checked_len(k, d)?;
    let alpha = r.read_f64_vec(k)?;
    let mu = r.read_f64_vec(kd)?;
    let sigma = r.read_f64_vec(kd)?;
    r.finish()?;
    GmmModel::new(k, d, alpha, mu, sigma)
}

pub fn write_gmm(path: &Path, m: &GmmModel) -> Result<()> {
    fs::write(path, gmm_bytes(m)).map_err(|e| Error::file(path, e))
}

pub fn read_gmm(path: &Path) -> Result<GmmModel> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    gmm_from_bytes(&bytes)
}
