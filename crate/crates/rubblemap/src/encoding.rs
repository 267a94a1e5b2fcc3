//! Fisher-vector encoding of descriptor sets against a Gaussian mixture,
//! and the bag-of-visual-words baseline it generalizes.
//!
//! Per descriptor, the encoding is the gradient of the mixture's
//! log-density with respect to the weight logits, means and standard
//! deviations. Gradients are averaged over the descriptors (so duplicating
//! a descriptor set leaves the encoding unchanged), scaled by closed-form
//! diagonal Fisher factors, then passed through a signed square root and a
//! global L2 normalization.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};
use crate::format::{checked_len, Reader, Writer};
use crate::gmm::GmmModel;
use crate::kmeans;

const MAGIC: [u8; 4] = *b"NZRF";
const VERSION: u16 = 1;

/// Guard against division by ~0 in the signed-sqrt and L2 steps.
const NORM_EPS: f64 = 1e-12;

/// Pooled, normalized gradient encoding of a descriptor set.
/// Layout: [weight-logit block (K) | mean blocks (KxD) | stddev blocks (KxD)].
#[derive(Clone, Debug, PartialEq)]
pub struct FisherVector {
    pub k: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

impl FisherVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Expected encoding length for a K-component, D-dimensional mixture.
pub fn fisher_vector_len(k: usize, d: usize) -> usize {
    k + 2 * k * d
}

/// Per-descriptor gradients of log P(x) with respect to the mixture
/// parameters, before any normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct FvGradients {
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FvGradients {
    fn zeros(k: usize, d: usize) -> FvGradients {
        FvGradients {
            alpha: vec![0.0; k],
            mu: vec![0.0; k * d],
            sigma: vec![0.0; k * d],
        }
    }

    fn add_scaled(&mut self, other: &FvGradients, s: f64) {
        for (a, b) in self.alpha.iter_mut().zip(&other.alpha) {
            *a += s * b;
        }
        for (a, b) in self.mu.iter_mut().zip(&other.mu) {
            *a += s * b;
        }
        for (a, b) in self.sigma.iter_mut().zip(&other.sigma) {
            *a += s * b;
        }
    }
}

/// Gradient of log P(x) w.r.t. the weight logits, means and stddevs:
/// d/d_alpha_j = gamma_j - w_j,
/// d/d_mu_jt   = gamma_j (x_t - mu_jt) / sigma_jt^2,
/// d/d_sig_jt  = gamma_j ((x_t - mu_jt)^2 / sigma_jt^3 - 1 / sigma_jt).
pub fn fv_gradients(m: &GmmModel, x: &[f64]) -> Result<FvGradients> {
    let gamma = m.responsibilities(x)?;
    let w = m.weights();
    let mut g = FvGradients::zeros(m.k, m.d);
    for j in 0..m.k {
        g.alpha[j] = gamma[j] - w[j];
        let mu = m.mu_row(j);
        let sg = m.sigma_row(j);
        for t in 0..m.d {
            let diff = x[t] - mu[t];
            let s2 = sg[t] * sg[t];
            g.mu[j * m.d + t] = gamma[j] * diff / s2;
            g.sigma[j * m.d + t] = gamma[j] * (diff * diff / (s2 * sg[t]) - 1.0 / sg[t]);
        }
    }
    Ok(g)
}

/// Mean of the per-descriptor gradients over the given points. This equals
/// the gradient of the mean log-density, which is what the finite-difference
/// oracle checks.
pub fn pooled_gradients<'a>(
    m: &GmmModel,
    points: impl Iterator<Item = &'a [f64]> + 'a,
) -> Result<FvGradients> {
    let mut pooled = FvGradients::zeros(m.k, m.d);
    let mut count = 0usize;
    for x in points {
        let g = fv_gradients(m, x)?;
        pooled.add_scaled(&g, 1.0);
        count += 1;
    }
    if count == 0 {
        return Err(Error::UnencodableSegment);
    }
    let inv = 1.0 / count as f64;
    pooled.alpha.iter_mut().for_each(|v| *v *= inv);
    pooled.mu.iter_mut().for_each(|v| *v *= inv);
    pooled.sigma.iter_mut().for_each(|v| *v *= inv);
    Ok(pooled)
}

/// Closed-form diagonal Fisher scaling factors. The pooled raw gradients are
/// multiplied elementwise by these before the signed square root:
/// weight-logit block by 1/sqrt(w_j), mean block by sigma_jt/sqrt(w_j),
/// stddev block by sigma_jt/sqrt(2 w_j).
pub fn fisher_scale_factors(m: &GmmModel) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let w = m.weights();
    let mut alpha = Vec::with_capacity(m.k);
    let mut mu = Vec::with_capacity(m.k * m.d);
    let mut sigma = Vec::with_capacity(m.k * m.d);
    for j in 0..m.k {
        let sw = w[j].max(NORM_EPS).sqrt();
        alpha.push(1.0 / sw);
        let sg = m.sigma_row(j);
        for t in 0..m.d {
            mu.push(sg[t] / sw);
            sigma.push(sg[t] / (std::f64::consts::SQRT_2 * sw));
        }
    }
    (alpha, mu, sigma)
}

fn signed_sqrt(v: f64) -> f64 {
    v.signum() * v.abs().sqrt()
}

/// Encodes the descriptors whose center pixel passes `mask` (all of them
/// when `mask` is `None`) into a unit-norm Fisher vector.
pub fn fisher_encode(
    m: &GmmModel,
    ds: &DescriptorSet,
    mask: Option<&dyn Fn(u32, u32) -> bool>,
) -> Result<FisherVector> {
    if ds.dim != m.d {
        return Err(Error::DimensionMismatch {
            expected: format!("descriptors of dim {}", m.d),
            got: format!("{}", ds.dim),
        });
    }
    let mut pooled = FvGradients::zeros(m.k, m.d);
    let mut count = 0usize;
    for i in 0..ds.len() {
        if let Some(f) = mask {
            if !f(ds.xs[i], ds.ys[i]) {
                continue;
            }
        }
        let x = ds.vector_f64(i);
        let g = fv_gradients(m, &x)?;
        pooled.add_scaled(&g, 1.0);
        count += 1;
    }
    if count == 0 {
        return Err(Error::UnencodableSegment);
    }
    let inv = 1.0 / count as f64;

    let (sa, smu, ssg) = fisher_scale_factors(m);
    let mut values = Vec::with_capacity(fisher_vector_len(m.k, m.d));
    values.extend(
        pooled
            .alpha
            .iter()
            .zip(&sa)
            .map(|(g, s)| signed_sqrt(g * inv * s)),
    );
    values.extend(
        pooled
            .mu
            .iter()
            .zip(&smu)
            .map(|(g, s)| signed_sqrt(g * inv * s)),
    );
    values.extend(
        pooled
            .sigma
            .iter()
            .zip(&ssg)
            .map(|(g, s)| signed_sqrt(g * inv * s)),
    );

    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > NORM_EPS {
        for v in values.iter_mut() {
            *v /= norm;
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite Fisher vector".into()));
    }
    Ok(FisherVector {
        k: m.k,
        d: m.d,
        values,
    })
}

// ---------------------------------------------------------------------------
// Bag of visual words

/// k-means codebook of K centers over D-dimensional descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub d: usize,
    pub centers: Vec<f64>,
}

impl Codebook {
    pub fn center(&self, j: usize) -> &[f64] {
        &self.centers[j * self.d..(j + 1) * self.d]
    }
}

/// Lloyd's k-means with k-means++ seeding over the descriptor vectors.
pub fn fit_codebook(ds: &DescriptorSet, k: usize, seed: u64) -> Result<Codebook> {
    let n = ds.len();
    if n < k {
        return Err(Error::Data(format!(
            "{n} descriptors cannot support {k} codewords"
        )));
    }
    if k == 0 {
        return Err(Error::Config("codebook size must be >= 1".into()));
    }
    let d = ds.dim;
    let data: Vec<f64> = ds.data.iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = kmeans::kmeans_pp_indices(&data, n, d, k, &mut rng);
    let mut centers = Vec::with_capacity(k * d);
    for i in idx {
        centers.extend_from_slice(&data[i * d..(i + 1) * d]);
    }
    let (_, _sse) = kmeans::lloyd(&data, n, d, &mut centers, 100);
    if centers.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite codebook center".into()));
    }
    for a in 0..k {
        for b in a + 1..k {
            if kmeans::sq_dist(&centers[a * d..(a + 1) * d], &centers[b * d..(b + 1) * d]) == 0.0 {
                return Err(Error::Data(format!(
                    "codewords {a} and {b} coincide; too few distinct descriptors"
                )));
            }
        }
    }
    Ok(Codebook { k, d, centers })
}

/// Histogram of nearest-codeword assignments; ties go to the lowest center
/// index, and the counts sum to the descriptor count.
pub fn bov_encode(cb: &Codebook, ds: &DescriptorSet) -> Vec<u32> {
    let mut counts = vec![0u32; cb.k];
    for i in 0..ds.len() {
        let x = ds.vector_f64(i);
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for j in 0..cb.k {
            let d2 = kmeans::sq_dist(&x, cb.center(j));
            if d2 < best_d2 {
                best_d2 = d2;
                best = j;
            }
        }
        counts[best] += 1;
    }
    counts
}

// ---------------------------------------------------------------------------
// Fisher vector file format

pub fn fisher_vector_bytes(fv: &FisherVector) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_magic(MAGIC);
    w.put_u16(VERSION);
    w.put_u32(fv.k as u32);
    w.put_u32(fv.d as u32);
    for &v in &fv.values {
        w.put_f32(v as f32);
    }
    w.into_bytes()
}

pub fn fisher_vector_from_bytes(bytes: &[u8]) -> Result<FisherVector> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let k = r.read_u32()? as usize;
    let d = r.read_u32()? as usize;
    let len = checked_len(k, 2 * d)
        .and_then(|kd2| {
            kd2.checked_add(k).ok_or_else(|| {
                crate::error::FormatError::SizeOverflow("K + 2KD overflows".into()).into()
            })
        })?;
    let values = r.read_f32_vec(len)?.iter().map(|&v| v as f64).collect();
    r.finish()?;
    Ok(FisherVector { k, d, values })
}

pub fn write_fisher_vector(path: &Path, fv: &FisherVector) -> Result<()> {
    fs::write(path, fisher_vector_bytes(fv)).map_err(|e| Error::file(path, e))
}

pub fn read_fisher_vector(path: &Path) -> Result<FisherVector> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    fisher_vector_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> GmmModel {
        GmmModel::new(
            2,
            2,
            vec![0.2, -0.3],
            vec![0.0, 0.5, 1.0, -0.5],
            vec![0.8, 1.1, 0.6, 0.9],
        )
        .unwrap()
    }

    fn random_model(rng: &mut impl Rng, k: usize, d: usize) -> GmmModel {
        let alpha: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..k * d).map(|_| rng.gen_range(0.4..1.5)).collect();
        GmmModel::new(k, d, alpha, mu, sigma).unwrap()
    }

    fn set_from_rows(rows: &[Vec<f64>]) -> DescriptorSet {
        let mut ds = DescriptorSet::empty(rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            ds.push(i as u32, 0, r);
        }
        ds
    }

    /// Central finite differences of the mean log-density w.r.t. every
    /// mixture parameter; the independent oracle for the analytic gradients.
    fn numeric_pooled_gradients(m: &GmmModel, rows: &[Vec<f64>], h: f64) -> FvGradients {
        let mean_ll = |model: &GmmModel| -> f64 {
            rows.iter()
                .map(|r| model.log_density(r).unwrap())
                .sum::<f64>()
                / rows.len() as f64
        };
        let mut g = FvGradients::zeros(m.k, m.d);
        for j in 0..m.k {
            let mut hi = m.clone();
            let mut lo = m.clone();
            hi.alpha[j] += h;
            lo.alpha[j] -= h;
            g.alpha[j] = (mean_ll(&hi) - mean_ll(&lo)) / (2.0 * h);
        }
        for i in 0..m.k * m.d {
            let mut hi = m.clone();
            let mut lo = m.clone();
            hi.mu[i] += h;
            lo.mu[i] -= h;
            g.mu[i] = (mean_ll(&hi) - mean_ll(&lo)) / (2.0 * h);
            let mut hi = m.clone();
            let mut lo = m.clone();
            hi.sigma[i] += h;
            lo.sigma[i] -= h;
            g.sigma[i] = (mean_ll(&hi) - mean_ll(&lo)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
            .fold(0.0, f64::max)
    }

    #[test]
    fn alpha_block_sums_to_zero() {
        let m = toy_model();
        for x in [[0.3, 0.4], [5.0, -5.0], [0.0, 0.0]] {
            let g = fv_gradients(&m, &x).unwrap();
            assert!(g.alpha.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn mu_gradient_zero_at_component_mean() {
        let m = toy_model();
        let g = fv_gradients(&m, &[0.0, 0.5]).unwrap();
        assert_eq!(&g.mu[0..2], &[0.0, 0.0]);
    }

    #[test]
    fn sigma_gradient_zero_at_one_stddev() {
        let m = GmmModel::new(1, 1, vec![0.0], vec![0.0], vec![0.7]).unwrap();
        let g = fv_gradients(&m, &[0.7]).unwrap();
        assert!(g.sigma[0].abs() < 1e-15);
    }

    #[test]
    fn pooled_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..10 {
            let k = rng.gen_range(1..4);
            let d = rng.gen_range(1..4);
            let m = random_model(&mut rng, k, d);
            let rows: Vec<Vec<f64>> = (0..rng.gen_range(1..6))
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let analytic =
                pooled_gradients(&m, rows.iter().map(|r| r.as_slice())).unwrap();
            let numeric = numeric_pooled_gradients(&m, &rows, 1e-5);
            assert!(
                max_rel_err(&analytic.alpha, &numeric.alpha) < 1e-5,
                "alpha mismatch in trial {trial}"
            );
            assert!(
                max_rel_err(&analytic.mu, &numeric.mu) < 1e-5,
                "mu mismatch in trial {trial}"
            );
            assert!(
                max_rel_err(&analytic.sigma, &numeric.sigma) < 1e-5,
                "sigma mismatch in trial {trial}"
            );
        }
    }

    #[test]
    fn encoding_length_matches_formula() {
        assert_eq!(fisher_vector_len(64, 512), 65_600);
        let m = toy_model();
        let ds = set_from_rows(&[vec![0.1, 0.2], vec![-0.4, 0.9]]);
        let fv = fisher_encode(&m, &ds, None).unwrap();
        assert_eq!(fv.len(), fisher_vector_len(2, 2));
    }

    #[test]
    fn encoding_is_unit_norm_and_duplication_invariant() {
        let m = toy_model();
        let rows = vec![vec![0.1, 0.2], vec![-0.4, 0.9], vec![1.3, -0.2]];
        let ds = set_from_rows(&rows);
        let fv = fisher_encode(&m, &ds, None).unwrap();
        let norm: f64 = fv.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(norm, 1.0, max_relative = 1e-9);

        let mut doubled = rows.clone();
        doubled.extend(rows.clone());
        let fv2 = fisher_encode(&m, &set_from_rows(&doubled), None).unwrap();
        for (a, b) in fv.values.iter().zip(&fv2.values) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn encoding_is_order_invariant() {
        let m = toy_model();
        let rows = vec![vec![0.1, 0.2], vec![-0.4, 0.9], vec![1.3, -0.2]];
        let mut rev = rows.clone();
        rev.reverse();
        let a = fisher_encode(&m, &set_from_rows(&rows), None).unwrap();
        let b = fisher_encode(&m, &set_from_rows(&rev), None).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn masked_out_everything_is_unencodable() {
        let m = toy_model();
        let ds = set_from_rows(&[vec![0.1, 0.2]]);
        let none = |_x: u32, _y: u32| false;
        let err = fisher_encode(&m, &ds, Some(&none)).unwrap_err();
        assert!(matches!(err, Error::UnencodableSegment));
    }

    #[test]
    fn fig3_blue_image_histogram() {
        // Two visual words; six descriptors near each -> histogram (6,6).
        let cb = Codebook {
            k: 2,
            d: 2,
            centers: vec![0.0, 0.0, 10.0, 10.0],
        };
        let mut rows = Vec::new();
        for i in 0..6 {
            let off = i as f64 * 0.1;
            rows.push(vec![off, -off]);
            rows.push(vec![10.0 + off, 10.0 - off]);
        }
        let hist = bov_encode(&cb, &set_from_rows(&rows));
        assert_eq!(hist, vec![6, 6]);
    }

    #[test]
    fn bov_all_at_one_center() {
        let cb = Codebook {
            k: 3,
            d: 1,
            centers: vec![0.0, 5.0, 9.0],
        };
        let rows = vec![vec![0.1]; 7];
        assert_eq!(bov_encode(&cb, &set_from_rows(&rows)), vec![7, 0, 0]);
    }

    #[test]
    fn bov_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Codebook {
            k: 4,
            d: 3,
            centers: (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let hist = bov_encode(&cb, &set_from_rows(&rows));
        // Independent exhaustive assignment.
        let mut expect = vec![0u32; 4];
        for r in &rows {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for j in 0..4 {
                let d2: f64 = r
                    .iter()
                    .zip(cb.center(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < bd {
                    bd = d2;
                    best = j;
                }
            }
            expect[best] += 1;
        }
        assert_eq!(hist, expect);
        assert_eq!(hist.iter().sum::<u32>(), 5);
    }

    #[test]
    fn codebook_exact_points_and_determinism() {
        let rows = vec![vec![0.0, 0.0], vec![4.0, 0.0], vec![0.0, 4.0]];
        let ds = set_from_rows(&rows);
        let cb = fit_codebook(&ds, 3, 1).unwrap();
        for r in &rows {
            let matched = (0..3).any(|j| kmeans::sq_dist(r, cb.center(j)) < 1e-18);
            assert!(matched);
        }
        assert_eq!(cb, fit_codebook(&ds, 3, 1).unwrap());
        assert!(fit_codebook(&ds, 4, 1).is_err());
    }

    #[test]
    fn codebook_recovers_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut rows = Vec::new();
        for _ in 0..100 {
            rows.push(vec![rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)]);
            rows.push(vec![
                3.0 + rng.gen_range(-0.05..0.05),
                3.0 + rng.gen_range(-0.05..0.05),
            ]);
        }
        let cb = fit_codebook(&set_from_rows(&rows), 2, 5).unwrap();
        let mut centers = vec![cb.center(0).to_vec(), cb.center(1).to_vec()];
        centers.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!(kmeans::sq_dist(&centers[0], &[0.0, 0.0]) < 0.01);
        assert!(kmeans::sq_dist(&centers[1], &[3.0, 3.0]) < 0.01);
    }

    #[test]
    fn fisher_vector_file_round_trip() {
        // Length k + 2kd = 6; values chosen exactly representable in f32.
        let fv = FisherVector {
            k: 2,
            d: 1,
            values: vec![0.5, -0.25, 0.125, 1.0, -2.0, 0.0625],
        };
        let back = fisher_vector_from_bytes(&fisher_vector_bytes(&fv)).unwrap();
        assert_eq!(back, fv);
    }
}
