//! RBF kernel machinery shared by the repulsive samplers.
//!
//! The kernel is `k(a, b) = exp(-||a - b||² / h)`. The Ld×Ld diffusion matrix of
//! the repulsive samplers is `K ⊗ I_d`, so everything here works on the L×L
//! kernel matrix and applies it once per coordinate.

use ndarray::{Array2, ArrayView2};

use crate::error::{invalid, Error, Result};
use crate::streams::ParticleStreams;

/// Jitter values tried, in order, when the kernel matrix fails to factor.
pub const JITTER_LADDER: [f64; 7] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Relative pivot magnitude below which a pivot is treated as an exact zero
/// (rank-deficient but positive semidefinite).
const ZERO_PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// `h = med² / ln(L + 1)` over pairwise squared distances, recomputed on
    /// every call.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    pub jitter: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            jitter: 0.0,
        }
    }
}

impl KernelConfig {
    pub fn fixed(h: f64) -> Result<Self> {
        let cfg = Self {
            bandwidth: Bandwidth::Fixed(h),
            jitter: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h.is_finite() && h > 0.0) {
                return Err(invalid(format!("kernel bandwidth must be positive, got {h}")));
            }
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(invalid(format!("kernel jitter must be non-negative, got {}", self.jitter)));
        }
        Ok(())
    }
}

/// Kernel weights and correction rows for one particle configuration.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    /// `K[i, j] = k(z_i, z_j)`.
    pub entries: Array2<f64>,
    /// Row i is `Σ_l ∇_{z_l} k(z_l, z_i) = Σ_l (2/h)(z_i - z_l) k(z_l, z_i)`.
    pub grad_terms: Array2<f64>,
    pub bandwidth: f64,
    /// Set when the median heuristic degenerated and `h = 1` was used instead.
    pub bandwidth_fallback: bool,
}

impl KernelMatrix {
    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    /// Non-interacting stand-in: `K = I`, no correction term.
    pub fn identity(particles: usize, dim: usize) -> Self {
        Self {
            entries: Array2::eye(particles),
            grad_terms: Array2::zeros((particles, dim)),
            bandwidth: f64::INFINITY,
            bandwidth_fallback: false,
        }
    }

}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row_sq_dist(z: ArrayView2<f64>, i: usize, j: usize) -> f64 {
    z.row(i)
        .iter()
        .zip(z.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

pub fn rbf(a: &[f64], b: &[f64], h: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid(format!("bandwidth must be positive, got {h}")));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(invalid("non-finite kernel argument"));
    }
    Ok((-sq_dist(a, b) / h).exp())
}

/// `∇_a k(a, b) = -(2/h)(a - b) k(a, b)`.
pub fn rbf_grad_first(a: &[f64], b: &[f64], h: f64) -> Vec<f64> {
    let k = (-sq_dist(a, b) / h).exp();
    a.iter().zip(b).map(|(x, y)| -2.0 / h * (x - y) * k).collect()
}

/// Median-heuristic bandwidth. Returns `(h, fallback)`; `fallback` is true when
/// there are no pairs or every pair coincides, in which case `h = 1`.
pub fn median_bandwidth(positions: ArrayView2<f64>) -> (f64, bool) {
    let n = positions.nrows();
    let mut d2 = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d2.push(row_sq_dist(positions, i, j));
        }
    }
    if d2.is_empty() {
        return (1.0, true);
    }
    d2.sort_by(f64::total_cmp);
    let m = d2.len();
    let med = if m % 2 == 1 {
        d2[m / 2]
    } else {
        0.5 * (d2[m / 2 - 1] + d2[m / 2])
    };
    let h = med / ((n + 1) as f64).ln();
    if h > 0.0 && h.is_finite() {
        (h, false)
    } else {
        (1.0, true)
    }
}

pub fn resolve_bandwidth(positions: ArrayView2<f64>, cfg: &KernelConfig) -> (f64, bool) {
    match cfg.bandwidth {
        Bandwidth::Fixed(h) => (h, false),
        Bandwidth::Median => median_bandwidth(positions),
    }
}

pub fn kernel_matrix(positions: ArrayView2<f64>, cfg: &KernelConfig) -> Result<KernelMatrix> {
    cfg.validate()?;
    let (n, d) = positions.dim();
    if n == 0 {
        return Err(invalid("kernel matrix needs at least one particle"));
    }
    if positions.iter().any(|x| !x.is_finite()) {
        return Err(invalid("non-finite particle coordinate"));
    }
    let (h, fallback) = resolve_bandwidth(positions, cfg);
    if fallback && cfg.bandwidth == Bandwidth::Median && n > 1 {
        log::warn!("median bandwidth degenerate (coincident particles); using h = 1");
    }

    let mut entries = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let k = (-row_sq_dist(positions, i, j) / h).exp();
            entries[[i, j]] = k;
            entries[[j, i]] = k;
        }
    }

    let pos = positions.as_standard_layout();
    let flat = pos.as_slice().expect("standard layout");
    let mut grad_terms = Array2::<f64>::zeros((n, d));
    let out = grad_terms.as_slice_mut().expect("fresh array is contiguous");
    let scale = 2.0 / h;
    for i in 0..n {
        let zi = &flat[i * d..(i + 1) * d];
        let acc = &mut out[i * d..(i + 1) * d];
        for l in 0..n {
            if l == i {
                continue;
            }
            let w = scale * entries[[l, i]];
            let zl = &flat[l * d..(l + 1) * d];
            for ((a, x), y) in acc.iter_mut().zip(zi).zip(zl) {
                *a += w * (x - y);
            }
        }
    }

    Ok(KernelMatrix {
        entries,
        grad_terms,
        bandwidth: h,
        bandwidth_fallback: fallback,
    })
}

/// Lower-triangular factor `C` with `C Cᵀ = K + jitter·I`.
#[derive(Debug, Clone)]
pub struct KernelFactor {
    pub lower: Array2<f64>,
    pub jitter: f64,
}

/// Cholesky factorization tolerant of exactly singular PSD matrices: a pivot
/// within `ZERO_PIVOT_TOL` of zero zeroes its column instead of failing.
fn semidefinite_cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let scale = a.diag().iter().fold(0.0_f64, |m, &x| m.max(x.abs())).max(1.0);
    let tol = ZERO_PIVOT_TOL * scale;
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut pivot = a[[j, j]];
        for k in 0..j {
            pivot -= l[[j, k]] * l[[j, k]];
        }
        if pivot > tol {
            let root = pivot.sqrt();
            l[[j, j]] = root;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / root;
            }
        } else if pivot < -tol || !pivot.is_finite() {
            return None;
        }
    }
    Some(l)
}

/// Factors `K + jitter·I`, starting from the configured jitter and escalating
/// through [`JITTER_LADDER`] on failure.
pub fn factor_kernel(k: &KernelMatrix, base_jitter: f64) -> Result<KernelFactor> {
    let mut attempted = Vec::new();
    let candidates = std::iter::once(base_jitter)
        .chain(JITTER_LADDER.iter().copied().filter(|&j| j > base_jitter));
    for jitter in candidates {
        attempted.push(jitter);
        let mut a = k.entries.clone();
        if jitter > 0.0 {
            a.diag_mut().mapv_inplace(|x| x + jitter);
        }
        if let Some(lower) = semidefinite_cholesky(&a) {
            return Ok(KernelFactor { lower, jitter });
        }
    }
    Err(Error::Factorization { attempted })
}

/// Maps independent standard normals `xi` (L×d) to noise with covariance
/// `(2·eps/L)·K ⊗ I_d`.
pub fn correlate_noise(factor: &KernelFactor, xi: &Array2<f64>, eps: f64) -> Array2<f64> {
    let (n, d) = xi.dim();
    let scale = (2.0 * eps / n as f64).sqrt();
    let xi = xi.as_standard_layout();
    let src = xi.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((n, d));
    let dst = out.as_slice_mut().expect("fresh array is contiguous");
    for i in 0..n {
        let acc = &mut dst[i * d..(i + 1) * d];
        for l in 0..=i {
            let c = factor.lower[[i, l]];
            for (a, x) in acc.iter_mut().zip(&src[l * d..(l + 1) * d]) {
                *a += c * x;
            }
        }
        for a in acc.iter_mut() {
            *a *= scale;
        }
    }
    out
}

/// Correlated Gaussian noise `N(0, (2·eps/L)·K ⊗ I_d)`, one draw per particle
/// stream.
pub fn sample_repulsive_noise(
    k: &KernelMatrix,
    jitter: f64,
    eps: f64,
    dim: usize,
    streams: &mut ParticleStreams,
) -> Result<Array2<f64>> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(invalid(format!("step size must be non-negative, got {eps}")));
    }
    if streams.len() != k.len() {
        return Err(invalid(format!(
            "{} streams for {} particles",
            streams.len(),
            k.len()
        )));
    }
    let factor = factor_kernel(k, jitter)?;
    let xi = streams.standard_normal(dim);
    Ok(correlate_noise(&factor, &xi, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn brute_grad_terms(z: &Array2<f64>, h: f64) -> Array2<f64> {
        // Central differences of Σ_l k(z_l, z_i) with respect to z_l.
        let (n, d) = z.dim();
        let step = 1e-6;
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for l in 0..n {
                if l == i {
                    continue;
                }
                for c in 0..d {
                    let mut zp = z.row(l).to_vec();
                    let mut zm = zp.clone();
                    zp[c] += step;
                    zm[c] -= step;
                    let zi = z.row(i).to_vec();
                    let fp = rbf(&zp, &zi, h).unwrap();
                    let fm = rbf(&zm, &zi, h).unwrap();
                    out[[i, c]] += (fp - fm) / (2.0 * step);
                }
            }
        }
        out
    }

    #[test]
    fn rbf_values() {
        assert_eq!(rbf(&[0.3, -1.0], &[0.3, -1.0], 0.7).unwrap(), 1.0);
        let v = rbf(&[0.0], &[1.0], 1.0).unwrap();
        assert!((v - 0.36787944117144233).abs() < 1e-15);
    }

    #[test]
    fn rbf_rejects_bad_input() {
        assert!(rbf(&[0.0], &[1.0], 0.0).is_err());
        assert!(rbf(&[0.0], &[1.0], -1.0).is_err());
        assert!(rbf(&[f64::NAN], &[1.0], 1.0).is_err());
        assert!(rbf(&[0.0, 1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn single_particle_matrix() {
        let z = array![[1.5, -2.0]];
        let km = kernel_matrix(z.view(), &KernelConfig::default()).unwrap();
        assert_eq!(km.entries, array![[1.0]]);
        assert!(km.grad_terms.iter().all(|&g| g == 0.0));
        assert!(km.bandwidth_fallback);
    }

    #[test]
    fn coincident_particles() {
        let z = array![[0.5, 0.5], [0.5, 0.5]];
        let km = kernel_matrix(z.view(), &KernelConfig::default()).unwrap();
        assert!(km.entries.iter().all(|&k| k == 1.0));
        assert!(km.grad_terms.iter().all(|&g| g == 0.0));
        assert!(km.bandwidth_fallback);
        assert_eq!(km.bandwidth, 1.0);
    }

    #[test]
    fn grad_terms_match_finite_differences() {
        let z = array![
            [0.1, -0.4, 0.9],
            [1.2, 0.3, -0.5],
            [-0.7, 0.8, 0.2],
            [0.4, -1.1, -0.3],
            [0.0, 0.5, 1.4]
        ];
        let km = kernel_matrix(z.view(), &KernelConfig::fixed(1.0).unwrap()).unwrap();
        let fd = brute_grad_terms(&z, 1.0);
        for (a, b) in km.grad_terms.iter().zip(fd.iter()) {
            let rel = (a - b).abs() / b.abs().max(1e-3);
            assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn median_bandwidth_known_value() {
        // squared distances: 1, 4, 1 -> median 1, h = 1 / ln 4
        let z = array![[0.0], [1.0], [2.0]];
        let (h, fb) = median_bandwidth(z.view());
        assert!(!fb);
        assert!((h - 1.0 / 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn identity_kernel_noise_covariance() {
        let k = KernelMatrix::identity(3, 2);
        let eps = 0.05;
        let mut streams = ParticleStreams::new(3, 3);
        let draws = 100_000;
        let mut acc = [0.0f64; 6];
        for _ in 0..draws {
            let n = sample_repulsive_noise(&k, 0.0, eps, 2, &mut streams).unwrap();
            for (a, x) in acc.iter_mut().zip(n.iter()) {
                *a += x * x;
            }
        }
        let target = 2.0 * eps / 3.0;
        for a in acc {
            let var = a / draws as f64;
            assert!((var - target).abs() / target < 0.05, "{var} vs {target}");
        }
    }

    #[test]
    fn zero_step_gives_zero_noise() {
        let z = array![[0.0, 1.0], [1.0, 0.0]];
        let km = kernel_matrix(z.view(), &KernelConfig::default()).unwrap();
        let mut streams = ParticleStreams::new(1, 2);
        let n = sample_repulsive_noise(&km, 0.0, 0.0, 2, &mut streams).unwrap();
        assert!(n.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn coincident_particles_share_noise() {
        let z = array![[0.2, 0.2], [0.2, 0.2], [0.2, 0.2]];
        let km = kernel_matrix(z.view(), &KernelConfig::default()).unwrap();
        let mut streams = ParticleStreams::new(9, 3);
        let n = sample_repulsive_noise(&km, 0.0, 0.1, 2, &mut streams).unwrap();
        assert_eq!(n.row(0), n.row(1));
        assert_eq!(n.row(0), n.row(2));
    }

    #[test]
    fn indefinite_matrix_exhausts_ladder() {
        let km = KernelMatrix {
            entries: array![[1.0, 2.0], [2.0, 1.0]],
            grad_terms: Array2::zeros((2, 1)),
            bandwidth: 1.0,
            bandwidth_fallback: false,
        };
        match factor_kernel(&km, 0.0) {
            Err(Error::Factorization { attempted }) => {
                assert_eq!(attempted.len(), 1 + JITTER_LADDER.len());
                assert_eq!(*attempted.last().unwrap(), 1e-4);
            }
            other => panic!("expected factorization failure, got {other:?}"),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(KernelConfig::fixed(0.0).is_err());
        let cfg = KernelConfig {
            bandwidth: Bandwidth::Median,
            jitter: -1.0,
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn rbf_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 3),
                         b in proptest::collection::vec(-5.0f64..5.0, 3),
                         h in 0.1f64..10.0) {
            prop_assert_eq!(rbf(&a, &b, h).unwrap(), rbf(&b, &a, h).unwrap());
        }

        #[test]
        fn rbf_gradient_antisymmetric(a in proptest::collection::vec(-3.0f64..3.0, 2),
                                      b in proptest::collection::vec(-3.0f64..3.0, 2),
                                      h in 0.1f64..5.0) {
            // ∇_a k(a, b) = -∇_b k(a, b) = -∇_b k(b, a)
            let ga = rbf_grad_first(&a, &b, h);
            let gb = rbf_grad_first(&b, &a, h);
            for (x, y) in ga.iter().zip(&gb) {
                prop_assert!((x + y).abs() <= 1e-15 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn kernel_matrix_symmetric_unit_diagonal(
            pts in proptest::collection::vec(-4.0f64..4.0, 2..=24)
        ) {
            let n = pts.len() / 2;
            prop_assume!(n >= 1);
            let z = Array2::from_shape_vec((n, 2), pts[..2 * n].to_vec()).unwrap();
            let km = kernel_matrix(z.view(), &KernelConfig::default()).unwrap();
            for i in 0..n {
                prop_assert_eq!(km.entries[[i, i]], 1.0);
                for j in 0..n {
                    prop_assert_eq!(km.entries[[i, j]], km.entries[[j, i]]);
                    prop_assert!(km.entries[[i, j]] > 0.0 || km.entries[[i, j]] == 0.0);
                    prop_assert!(km.entries[[i, j]] <= 1.0);
                }
            }
            // pairwise antisymmetry: the correction rows cancel in aggregate
            for c in 0..2 {
                let s: f64 = km.grad_terms.column(c).sum();
                prop_assert!(s.abs() < 1e-9);
            }
        }

        #[test]
        fn median_bandwidth_permutation_invariant(
            pts in proptest::collection::vec(-4.0f64..4.0, 10),
            rot in 0usize..5
        ) {
            let z = Array2::from_shape_vec((5, 2), pts.clone()).unwrap();
            let mut rows: Vec<_> = z.rows().into_iter().map(|r| r.to_vec()).collect();
            rows.rotate_left(rot);
            rows.swap(0, 4);
            let flat: Vec<f64> = rows.concat();
            let zp = Array2::from_shape_vec((5, 2), flat).unwrap();
            prop_assert_eq!(median_bandwidth(z.view()), median_bandwidth(zp.view()));
        }
    }
}
