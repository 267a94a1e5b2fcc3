//! Fully-connected CRF over the pixel grid with Potts compatibility and
//! Gaussian pairwise kernels, plus exact mean-field inference and an
//! exhaustive MAP oracle for tiny instances.
//!
//! The energy of a labeling x is
//!   E(x) = sum_i g_i(x_i) + sum_{i<j} [x_i != x_j] * sum_m w_m k_m(f_i, f_j)
//! with g the negative log unary probabilities and k_m Gaussian kernels over
//! per-pixel features (position, optionally intensity). Messages are
//! computed exactly over all O(N^2) pairs; grids are desk-scale by design.

use crate::error::{Error, Result};
use crate::gmm::softmax_in_place;
use crate::imaging::{Image, LabelMap};
use crate::unary::ProbabilityField;

/// Probabilities are floored at this value before taking the negative log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Largest pixel count for which exact dense inference is attempted.
pub const MAX_PIXELS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// Features: pixel position (x, y).
    Spatial,
    /// Features: position plus gray intensity.
    Bilateral,
}

/// One Gaussian pairwise kernel with its per-feature bandwidths.
#[derive(Clone, Debug)]
pub struct CrfKernel {
    pub weight: f64,
    pub kind: KernelKind,
    pub thetas: Vec<f64>,
}

impl CrfKernel {
    pub fn spatial(weight: f64, theta_pos: f64) -> CrfKernel {
        CrfKernel {
            weight,
            kind: KernelKind::Spatial,
            thetas: vec![theta_pos, theta_pos],
        }
    }

    pub fn bilateral(weight: f64, theta_pos: f64, theta_int: f64) -> CrfKernel {
        CrfKernel {
            weight,
            kind: KernelKind::Bilateral,
            thetas: vec![theta_pos, theta_pos, theta_int],
        }
    }

    fn feature_dim(&self) -> usize {
        match self.kind {
            KernelKind::Spatial => 2,
            KernelKind::Bilateral => 3,
        }
    }
}

/// exp(-1/2 sum_d (f_i,d - f_j,d)^2 / theta_d^2).
pub fn pairwise_kernel(fi: &[f64], fj: &[f64], kernel: &CrfKernel) -> f64 {
    debug_assert_eq!(fi.len(), fj.len());
    let mut s = 0.0;
    for d in 0..fi.len() {
        let diff = fi[d] - fj[d];
        s += diff * diff / (kernel.thetas[d] * kernel.thetas[d]);
    }
    (-0.5 * s).exp()
}

/// Dense CRF instance: unary potentials plus kernels with their per-pixel
/// feature vectors.
pub struct DenseCrf {
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    /// g_i(c) = -log P_i(c), pixel-major.
    pub unary: Vec<f64>,
    pub kernels: Vec<CrfKernel>,
    /// Per kernel: flat N x feature_dim matrix.
    features: Vec<Vec<f64>>,
}

impl DenseCrf {
    /// Builds the CRF from a probability field. Bilateral kernels need the
    /// image for the intensity feature.
    pub fn from_probabilities(
        field: &ProbabilityField,
        image: Option<&Image>,
        kernels: Vec<CrfKernel>,
    ) -> Result<DenseCrf> {
        if kernels.is_empty() {
            return Err(Error::Config("at least one pairwise kernel required".into()));
        }
        for k in &kernels {
            if !(k.weight > 0.0) {
                return Err(Error::Config("kernel weights must be positive".into()));
            }
            if k.thetas.len() != k.feature_dim() || k.thetas.iter().any(|&t| !(t > 0.0)) {
                return Err(Error::Config("kernel bandwidths must be positive".into()));
            }
        }
        let n = field.pixel_count();
        if n > MAX_PIXELS {
            return Err(Error::Data(format!(
                "{n} pixels exceeds the exact dense-CRF limit of {MAX_PIXELS}"
            )));
        }
        let gray = match image {
            Some(img) => {
                if img.width != field.width || img.height != field.height {
                    return Err(Error::DimensionMismatch {
                        expected: format!("{}x{} image", field.width, field.height),
                        got: format!("{}x{}", img.width, img.height),
                    });
                }
                Some(img.to_gray())
            }
            None => None,
        };

        let mut unary = Vec::with_capacity(n * field.classes);
        for i in 0..n {
            for c in 0..field.classes {
                unary.push(-(field.pixel(i)[c].max(PROB_FLOOR)).ln());
            }
        }

        let mut features = Vec::with_capacity(kernels.len());
        for k in &kernels {
            let mut f = Vec::with_capacity(n * k.feature_dim());
            for y in 0..field.height {
                for x in 0..field.width {
                    f.push(x as f64);
                    f.push(y as f64);
                    if k.kind == KernelKind::Bilateral {
                        let g = gray.as_ref().ok_or_else(|| {
                            Error::Config("bilateral kernel requires an image".into())
                        })?;
                        f.push(g[(y * field.width + x) as usize]);
                    }
                }
            }
            features.push(f);
        }

        Ok(DenseCrf {
            width: field.width,
            height: field.height,
            classes: field.classes,
            unary,
            kernels,
            features,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn feature(&self, kernel: usize, i: usize) -> &[f64] {
        let dim = self.kernels[kernel].feature_dim();
        &self.features[kernel][i * dim..(i + 1) * dim]
    }

    fn check_labeling(&self, lm: &LabelMap) -> Result<()> {
        if lm.width != self.width || lm.height != self.height {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{} labeling", self.width, self.height),
                got: format!("{}x{}", lm.width, lm.height),
            });
        }
        if lm.labels.iter().any(|&l| l as usize >= self.classes) {
            return Err(Error::Data("label out of range for this CRF".into()));
        }
        Ok(())
    }

    /// Sum over unordered pairs of the weighted kernel values for pixels
    /// carrying different labels (the Potts pairwise term).
    fn pairwise_sum(&self, kernel: usize, i: usize, j: usize) -> f64 {
        let k = &self.kernels[kernel];
        k.weight * pairwise_kernel(self.feature(kernel, i), self.feature(kernel, j), k)
    }
}

/// Exact O(N^2) energy of a labeling; each unordered pair counted once.
pub fn energy(crf: &DenseCrf, labeling: &LabelMap) -> Result<f64> {
    crf.check_labeling(labeling)?;
    let n = crf.pixel_count();
    let mut e = 0.0;
    for i in 0..n {
        e += crf.unary[i * crf.classes + labeling.labels[i] as usize];
    }
    for i in 0..n {
        for j in i + 1..n {
            if labeling.labels[i] != labeling.labels[j] {
                for m in 0..crf.kernels.len() {
                    e += crf.pairwise_sum(m, i, j);
                }
            }
        }
    }
    Ok(e)
}

/// Unary-only and pairwise-only components of the energy, for decomposition
/// checks.
pub fn energy_parts(crf: &DenseCrf, labeling: &LabelMap) -> Result<(f64, f64)> {
    crf.check_labeling(labeling)?;
    let n = crf.pixel_count();
    let mut unary = 0.0;
    for i in 0..n {
        unary += crf.unary[i * crf.classes + labeling.labels[i] as usize];
    }
    let mut pairwise = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if labeling.labels[i] != labeling.labels[j] {
                for m in 0..crf.kernels.len() {
                    pairwise += crf.pairwise_sum(m, i, j);
                }
            }
        }
    }
    Ok((unary, pairwise))
}

/// Exhaustive global MAP for instances with C^N <= 2^20 labelings.
/// Ties resolve to the lexicographically smallest labeling.
pub fn brute_force_map(crf: &DenseCrf) -> Result<(LabelMap, f64)> {
    let n = crf.pixel_count();
    let c = crf.classes;
    let mut total: u64 = 1;
    for _ in 0..n {
        total = total.saturating_mul(c as u64);
        if total > 1 << 20 {
            return Err(Error::Data(format!(
                "instance too large to enumerate: {c}^{n} labelings"
            )));
        }
    }

    // Cache pairwise costs once; the scan is then pure arithmetic.
    let mut pair_cost = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut s = 0.0;
            for m in 0..crf.kernels.len() {
                s += crf.pairwise_sum(m, i, j);
            }
            pair_cost[i * n + j] = s;
        }
    }

    let mut labels = vec![0u8; n];
    let mut best_labels = labels.clone();
    let mut best_e = f64::INFINITY;
    loop {
        let mut e = 0.0;
        for i in 0..n {
            e += crf.unary[i * c + labels[i] as usize];
        }
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] != labels[j] {
                    e += pair_cost[i * n + j];
                }
            }
        }
        if e < best_e {
            best_e = e;
            best_labels.copy_from_slice(&labels);
        }
        // Lexicographic odometer, most significant digit first.
        let mut pos = n;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            labels[pos] += 1;
            if (labels[pos] as usize) < c {
                break;
            }
            labels[pos] = 0;
        }
        if pos == 0 && labels[0] == 0 {
            break;
        }
    }
    let map = LabelMap {
        width: crf.width,
        height: crf.height,
        labels: best_labels,
    };
    Ok((map, best_e))
}

/// Factorized per-pixel marginals produced by mean-field inference.
#[derive(Clone, Debug)]
pub struct MarginalField {
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    pub q: Vec<f64>,
    /// Sweeps actually run before convergence or the iteration cap.
    pub sweeps: usize,
}

impl MarginalField {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.q[i * self.classes..(i + 1) * self.classes]
    }
}

/// Parallel-update mean field with exact O(N^2) message computation.
/// Q is initialized from the unary softmax; each sweep recomputes every
/// pixel's distribution from the previous sweep's marginals and stops when
/// the largest per-pixel L1 change drops below `tol`.
pub fn mean_field(crf: &DenseCrf, max_iters: usize, tol: f64) -> MarginalField {
    let n = crf.pixel_count();
    let c = crf.classes;

    let mut q = vec![0.0f64; n * c];
    for i in 0..n {
        for cls in 0..c {
            q[i * c + cls] = -crf.unary[i * c + cls];
        }
        softmax_in_place(&mut q[i * c..(i + 1) * c]);
    }

    // Kernel matrices (diagonal = 1) and their off-diagonal row sums.
    let n_kernels = crf.kernels.len();
    let mut kmat: Vec<Vec<f32>> = Vec::with_capacity(n_kernels);
    let mut rowsum: Vec<Vec<f64>> = Vec::with_capacity(n_kernels);
    for m in 0..n_kernels {
        let mut mat = vec![0.0f32; n * n];
        for i in 0..n {
            mat[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = pairwise_kernel(crf.feature(m, i), crf.feature(m, j), &crf.kernels[m]) as f32;
                mat[i * n + j] = v;
                mat[j * n + i] = v;
            }
        }
        let rs: Vec<f64> = (0..n)
            .map(|i| {
                mat[i * n..(i + 1) * n]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    - 1.0
            })
            .collect();
        kmat.push(mat);
        rowsum.push(rs);
    }

    let mut new_q = vec![0.0f64; n * c];
    let mut sweeps = 0;
    for _ in 0..max_iters {
        sweeps += 1;
        for i in 0..n {
            let out = &mut new_q[i * c..(i + 1) * c];
            for cls in 0..c {
                let mut message = 0.0;
                for m in 0..n_kernels {
                    // sum_{j != i} k(i,j) (1 - Q_j(cls))
                    let mut s = 0.0f64;
                    let row = &kmat[m][i * n..(i + 1) * n];
                    for j in 0..n {
                        s += row[j] as f64 * q[j * c + cls];
                    }
                    s -= q[i * c + cls]; // remove the diagonal term
                    message += crf.kernels[m].weight * (rowsum[m][i] - s);
                }
                out[cls] = -crf.unary[i * c + cls] - message;
            }
            softmax_in_place(out);
        }
        let mut max_delta = 0.0f64;
        for i in 0..n {
            let mut l1 = 0.0;
            for cls in 0..c {
                l1 += (new_q[i * c + cls] - q[i * c + cls]).abs();
            }
            max_delta = max_delta.max(l1);
        }
        std::mem::swap(&mut q, &mut new_q);
        if max_delta < tol {
            break;
        }
    }

    MarginalField {
        width: crf.width,
        height: crf.height,
        classes: c,
        q,
        sweeps,
    }
}

/// Per-pixel argmax of the marginals; ties go to the lowest class index.
pub fn map_labeling(field: &MarginalField) -> LabelMap {
    let n = field.width as usize * field.height as usize;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let p = field.pixel(i);
        let mut best = 0usize;
        for c in 1..field.classes {
            if p[c] > p[best] {
                best = c;
            }
        }
        labels.push(best as u8);
    }
    LabelMap {
        width: field.width,
        height: field.height,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Field + constant-kernel CRF used by the 1x2 worked example:
    /// unaries [[0,1],[1,0]] and one constant kernel of weight 0.6
    /// (realized by an enormous spatial bandwidth).
    fn one_by_two() -> DenseCrf {
        let field = ProbabilityField {
            width: 2,
            height: 1,
            classes: 2,
            probs: vec![1.0, (-1.0f64).exp(), (-1.0f64).exp(), 1.0],
        };
        DenseCrf::from_probabilities(&field, None, vec![CrfKernel::spatial(0.6, 1e18)]).unwrap()
    }

    fn labeling(crf: &DenseCrf, labels: Vec<u8>) -> LabelMap {
        LabelMap {
            width: crf.width,
            height: crf.height,
            labels,
        }
    }

    #[test]
    fn kernel_value_at_zero_distance_is_one() {
        let k = CrfKernel::spatial(1.0, 3.0);
        assert_eq!(pairwise_kernel(&[2.0, 5.0], &[2.0, 5.0], &k), 1.0);
    }

    #[test]
    fn kernel_is_symmetric() {
        let k = CrfKernel::bilateral(1.0, 2.0, 0.5);
        let a = [0.0, 1.0, 0.3];
        let b = [3.0, -1.0, 0.9];
        assert_eq!(pairwise_kernel(&a, &b, &k), pairwise_kernel(&b, &a, &k));
    }

    #[test]
    fn kernel_one_theta_distance() {
        let k = CrfKernel {
            weight: 1.0,
            kind: KernelKind::Spatial,
            thetas: vec![2.5, 1.0],
        };
        // |delta| = theta in the first dimension only.
        let v = pairwise_kernel(&[0.0, 0.0], &[2.5, 0.0], &k);
        assert_relative_eq!(v, (-0.5f64).exp(), max_relative = 1e-12);
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn worked_example_energies() {
        let crf = one_by_two();
        assert_relative_eq!(energy(&crf, &labeling(&crf, vec![0, 1])).unwrap(), 0.6, epsilon = 1e-9);
        assert_relative_eq!(energy(&crf, &labeling(&crf, vec![0, 0])).unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(energy(&crf, &labeling(&crf, vec![1, 1])).unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(energy(&crf, &labeling(&crf, vec![1, 0])).unwrap(), 2.6, epsilon = 1e-9);
    }

    #[test]
    fn zero_weight_kernels_reduce_to_unary_sum() {
        // Tiny weight stands in for zero (weights must be positive).
        let field = ProbabilityField {
            width: 2,
            height: 2,
            classes: 3,
            probs: vec![
                0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4, 0.25, 0.5, 0.25,
            ],
        };
        let crf =
            DenseCrf::from_probabilities(&field, None, vec![CrfKernel::spatial(1e-300, 2.0)])
                .unwrap();
        let lm = labeling(&crf, vec![0, 1, 2, 1]);
        let (unary, pairwise) = energy_parts(&crf, &lm).unwrap();
        assert!(pairwise < 1e-290);
        let expect: f64 =
            -(0.7f64.ln()) - 0.8f64.ln() - 0.4f64.ln() - 0.5f64.ln();
        assert_relative_eq!(unary, expect, max_relative = 1e-12);
        assert_relative_eq!(energy(&crf, &lm).unwrap(), unary + pairwise, epsilon = 1e-12);
    }

    #[test]
    fn uniform_labeling_has_zero_pairwise() {
        let field = ProbabilityField {
            width: 3,
            height: 2,
            classes: 2,
            probs: vec![0.5; 12],
        };
        let crf = DenseCrf::from_probabilities(
            &field,
            None,
            vec![CrfKernel::spatial(0.9, 1.5)],
        )
        .unwrap();
        let lm = labeling(&crf, vec![1; 6]);
        let (_, pairwise) = energy_parts(&crf, &lm).unwrap();
        assert_eq!(pairwise, 0.0);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let crf = one_by_two();
        assert!(energy(&crf, &labeling(&crf, vec![0, 2])).is_err());
    }

    #[test]
    fn unary_only_map_is_pixelwise_argmin() {
        let field = ProbabilityField {
            width: 2,
            height: 1,
            classes: 3,
            probs: vec![0.1, 0.6, 0.3, 0.5, 0.2, 0.3],
        };
        let crf = DenseCrf::from_probabilities(
            &field,
            None,
            vec![CrfKernel::spatial(1e-300, 1.0)],
        )
        .unwrap();
        let (map, _) = brute_force_map(&crf).unwrap();
        assert_eq!(map.labels, vec![1, 0]);
    }

    #[test]
    fn worked_example_map() {
        let crf = one_by_two();
        let (map, e) = brute_force_map(&crf).unwrap();
        assert_eq!(map.labels, vec![0, 1]);
        assert_relative_eq!(e, 0.6, epsilon = 1e-9);
    }

    #[test]
    fn strong_pairwise_forces_uniform_labeling() {
        // 2x2 grid, conflicting unaries, huge pairwise weight: the MAP must
        // be a uniform labeling (verified by enumeration).
        let field = ProbabilityField {
            width: 2,
            height: 2,
            classes: 2,
            probs: vec![0.9, 0.1, 0.1, 0.9, 0.8, 0.2, 0.3, 0.7],
        };
        let crf = DenseCrf::from_probabilities(&field, None, vec![CrfKernel::spatial(50.0, 1e18)])
            .unwrap();
        let (map, _) = brute_force_map(&crf).unwrap();
        assert!(map.labels.iter().all(|&l| l == map.labels[0]));
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let field = ProbabilityField {
            width: 8,
            height: 8,
            classes: 4,
            probs: vec![0.25; 8 * 8 * 4],
        };
        let crf =
            DenseCrf::from_probabilities(&field, None, vec![CrfKernel::spatial(1.0, 2.0)]).unwrap();
        assert!(brute_force_map(&crf).is_err());
    }

    #[test]
    fn mean_field_without_coupling_matches_unary_softmax() {
        let field = ProbabilityField {
            width: 2,
            height: 2,
            classes: 3,
            probs: vec![
                0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4, 0.25, 0.5, 0.25,
            ],
        };
        let crf =
            DenseCrf::from_probabilities(&field, None, vec![CrfKernel::spatial(1e-300, 2.0)])
                .unwrap();
        let mf = mean_field(&crf, 20, 1e-9);
        for i in 0..4 {
            for c in 0..3 {
                assert_relative_eq!(mf.pixel(i)[c], field.pixel(i)[c], max_relative = 1e-9);
            }
        }
        assert!(mf.sweeps <= 2, "should converge immediately, took {}", mf.sweeps);
    }

    #[test]
    fn mean_field_matches_map_on_worked_example() {
        let crf = one_by_two();
        let mf = mean_field(&crf, 50, 1e-9);
        let labels = map_labeling(&mf);
        assert_eq!(labels.labels, vec![0, 1]);
    }

    #[test]
    fn marginals_stay_normalized_every_sweep() {
        let field = ProbabilityField {
            width: 3,
            height: 2,
            classes: 4,
            probs: (0..24)
                .map(|i| 0.25 + 0.01 * ((i % 7) as f64 - 3.0))
                .collect(),
        };
        let crf = DenseCrf::from_probabilities(&field, None, vec![CrfKernel::spatial(0.8, 2.0)])
            .unwrap();
        for iters in 1..6 {
            let mf = mean_field(&crf, iters, 0.0);
            assert!(mf.sweeps <= iters);
            for i in 0..6 {
                let s: f64 = mf.pixel(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "iters {iters} pixel {i}: {s}");
            }
        }
    }

    #[test]
    fn map_labeling_rules() {
        // One-hot rows map to their hot index; uniform rows map to class 0.
        let mf = MarginalField {
            width: 3,
            height: 1,
            classes: 3,
            q: vec![0.0, 1.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.2, 0.2, 0.6],
            sweeps: 0,
        };
        assert_eq!(map_labeling(&mf).labels, vec![1, 0, 2]);
    }

    #[test]
    fn map_labeling_matches_scalar_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let classes = 4;
        let n = 12;
        let mut q = Vec::new();
        for _ in 0..n {
            let mut row: Vec<f64> = (0..classes).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            q.extend(row);
        }
        let mf = MarginalField {
            width: n as u32,
            height: 1,
            classes,
            q: q.clone(),
            sweeps: 0,
        };
        let labels = map_labeling(&mf);
        for i in 0..n {
            let mut best = 0;
            for c in 1..classes {
                if q[i * classes + c] > q[i * classes + best] {
                    best = c;
                }
            }
            assert_eq!(labels.labels[i], best as u8);
        }
    }

    #[test]
    fn energy_invariant_under_consistent_relabeling() {
        let field = ProbabilityField {
            width: 2,
            height: 2,
            classes: 3,
            probs: vec![
                0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4, 0.25, 0.5, 0.25,
            ],
        };
        let kernels = vec![CrfKernel::spatial(0.7, 1.3)];
        let crf = DenseCrf::from_probabilities(&field, None, kernels.clone()).unwrap();
        // Permute classes (0 1 2) -> (2 0 1) in both unaries and labeling.
        let perm = [2usize, 0, 1];
        let mut permuted = field.clone();
        for i in 0..4 {
            for c in 0..3 {
                permuted.probs[i * 3 + perm[c]] = field.pixel(i)[c];
            }
        }
        let crf_p = DenseCrf::from_probabilities(&permuted, None, kernels).unwrap();
        let lm = labeling(&crf, vec![0, 1, 2, 0]);
        let lm_p = labeling(&crf_p, lm.labels.iter().map(|&l| perm[l as usize] as u8).collect());
        assert_relative_eq!(
            energy(&crf, &lm).unwrap(),
            energy(&crf_p, &lm_p).unwrap(),
            max_relative = 1e-12
        );
    }
}
