//! Channelwise two-dimensional canonical correlation between feature grids.
//!
//! Every channel of an `m x n x C` grid is treated as one `m x n` sample.
//! With `A_i`, `B_i` the channel-centered samples of the two grids:
//!
//! ```text
//! Σ_di = (1/C) Σ_i A_i B_iᵀ                  (m x m)
//! Σ_d  = (1/C) Σ_i A_i A_iᵀ + r1·I           (and Σ_i likewise)
//! M    = Σ_d^{-1/2} Σ_di Σ_i^{-1/2},  M = U S Vᵀ
//! corr = ‖M‖_tr = Σ diag(S)
//! ```
//!
//! The gradient with respect to channel `i` of the depth-side grid is
//! `(1/C)(2∇_dd A_i + ∇_di B_i)` where `∇_di = Σ_d^{-1/2} U Vᵀ Σ_i^{-1/2}`
//! and `∇_dd = -½ Σ_d^{-1/2} U S Uᵀ Σ_d^{-1/2}`; the image-side gradient
//! swaps the roles of the two grids.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde_json::json;

use crate::diffcore::FeatureGrid;
use crate::error::{Error, Result};

/// Default covariance regularizer.
pub const DEFAULT_R1: f64 = 1e-3;

/// Eigenvalues at or below this are treated as non-positive.
pub const MIN_EIGENVALUE: f64 = 1e-12;

/// Iteration cap for the symmetric eigensolver.
const MAX_ITERATIONS: usize = 10_000;
/// Sweep cap for the Jacobi SVD (it typically converges in well under 10).
const MAX_SWEEPS: usize = 60;

/// Relative tolerance for zero / repeated singular values in strict mode.
pub const SPECTRUM_TOLERANCE: f64 = 1e-10;

/// How [`corr_gradients_with`] treats zero or repeated singular values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumPolicy {
    /// Fail with `DegenerateSpectrum`.
    Strict,
    /// Use `U Vᵀ` from the computed SVD, which is a valid subgradient of the
    /// trace norm. Used inside training where dead features are expected.
    Lenient,
}

#[derive(Debug, Clone)]
pub struct CovarianceSet {
    pub sigma_cross: DMatrix<f64>,
    pub sigma_d: DMatrix<f64>,
    pub sigma_i: DMatrix<f64>,
    pub r1: f64,
}

#[derive(Debug, Clone)]
pub struct CcaReport {
    pub corr: f64,
    pub m: DMatrix<f64>,
    pub u: DMatrix<f64>,
    /// Singular values, nonincreasing.
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
    pub grad_fd: Option<FeatureGrid>,
    pub grad_fi: Option<FeatureGrid>,
}

impl CcaReport {
    pub fn to_json(&self) -> serde_json::Value {
        let mat = |a: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..a.nrows())
                .map(|r| (0..a.ncols()).map(|c| a[(r, c)]).collect())
                .collect()
        };
        let grid_norm = |g: &Option<FeatureGrid>| g.as_ref().map(FeatureGrid::max_abs);
        json!({
            "corr": self.corr,
            "m": mat(&self.m),
            "singular_values": self.s.iter().copied().collect::<Vec<_>>(),
            "u": mat(&self.u),
            "v": mat(&self.v),
            "grad_fd_max_abs": grid_norm(&self.grad_fd),
            "grad_fi_max_abs": grid_norm(&self.grad_fi),
        })
    }
}

fn planes(f: &FeatureGrid) -> Vec<DMatrix<f64>> {
    (0..f.channels())
        .map(|c| DMatrix::from_row_slice(f.rows(), f.cols(), f.plane(c)))
        .collect()
}

/// Elementwise mean over channels, as an `m x n` matrix.
pub fn channel_mean(f: &FeatureGrid) -> DMatrix<f64> {
    let (m, n, c) = f.shape();
    let mut acc = DMatrix::zeros(m, n);
    for p in planes(f) {
        acc += p;
    }
    acc / c as f64
}

fn centered(f: &FeatureGrid) -> Vec<DMatrix<f64>> {
    let mean = channel_mean(f);
    planes(f).into_iter().map(|p| p - &mean).collect()
}

fn raw_cross(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> DMatrix<f64> {
    let m = a[0].nrows();
    let mut acc = DMatrix::zeros(m, m);
    for (ai, bi) in a.iter().zip(b) {
        acc.gemm(1.0, ai, &bi.transpose(), 1.0);
    }
    acc / a.len() as f64
}

fn check_pair(fd: &FeatureGrid, fi: &FeatureGrid) -> Result<()> {
    if !fd.same_shape(fi) {
        return Err(Error::ShapeMismatch(format!(
            "correlation inputs {:?} vs {:?}",
            fd.shape(),
            fi.shape()
        )));
    }
    if fd.channels() < 2 {
        return Err(Error::TooFewChannels(fd.channels()));
    }
    if !(fd.is_finite() && fi.is_finite()) {
        return Err(Error::NonFinite("correlation features".into()));
    }
    Ok(())
}

fn check_r1(r1: f64) -> Result<()> {
    if r1 > 0.0 && r1.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveRegularizer(r1))
    }
}

/// Channel-sample cross-covariance `(1/C) Σ (Fdⁱ − E[Fd])(Fiⁱ − E[Fi])ᵀ`.
pub fn cross_covariance(fd: &FeatureGrid, fi: &FeatureGrid) -> Result<DMatrix<f64>> {
    check_pair(fd, fi)?;
    Ok(raw_cross(&centered(fd), &centered(fi)))
}

/// Regularized auto-covariance `(1/C) Σ (Fⁱ − E[F])(Fⁱ − E[F])ᵀ + r1·I`.
pub fn auto_covariance(f: &FeatureGrid, r1: f64) -> Result<DMatrix<f64>> {
    check_r1(r1)?;
    let a = centered(f);
    Ok(regularized(&a, r1))
}

fn regularized(a: &[DMatrix<f64>], r1: f64) -> DMatrix<f64> {
    let mut s = raw_cross(a, a);
    // exact symmetry regardless of summation order
    s = (&s + s.transpose()) * 0.5;
    for i in 0..s.nrows() {
        s[(i, i)] += r1;
    }
    s
}

pub fn covariances(fd: &FeatureGrid, fi: &FeatureGrid, r1: f64) -> Result<CovarianceSet> {
    check_pair(fd, fi)?;
    check_r1(r1)?;
    let (a, b) = (centered(fd), centered(fi));
    Ok(CovarianceSet {
        sigma_cross: raw_cross(&a, &b),
        sigma_d: regularized(&a, r1),
        sigma_i: regularized(&b, r1),
        r1,
    })
}

/// `A^{-1/2}` of a symmetric positive-definite matrix via `A = QΛQᵀ`.
pub fn inv_sqrt_sym(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "inverse square root of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let eig = SymmetricEigen::try_new(a.clone(), f64::EPSILON, MAX_ITERATIONS)
        .ok_or_else(|| Error::NoConvergence("symmetric eigendecomposition".into()))?;
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > MIN_EIGENVALUE) {
        return Err(Error::NotPositiveDefinite(min));
    }
    let q = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |r, c| {
        q[(r, c)] / eig.eigenvalues[c].sqrt()
    });
    let r = scaled * q.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

struct Whitened {
    kd: DMatrix<f64>,
    ki: DMatrix<f64>,
    m: DMatrix<f64>,
    u: DMatrix<f64>,
    s: DVector<f64>,
    v: DMatrix<f64>,
}

/// SVD of a square matrix with singular values sorted in nonincreasing order.
///
/// One-sided (Hestenes) Jacobi: columns of `A V` are orthogonalized by plane
/// rotations until every pair is orthogonal to working precision. Unlike the
/// bidiagonal QR solver it keeps full accuracy when `M` is (near) singular,
/// which happens whenever a covariance is rank-deficient and `r1` dominates.
fn sorted_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let n = m.ncols();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (a.column(p), a.column(q));
                    (cp.norm_squared(), cq.norm_squared(), cp.dot(&cq))
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for r in 0..n {
                        let (x, y) = (mat[(r, p)], mat[(r, q)]);
                        mat[(r, p)] = c * x - s * y;
                        mat[(r, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence("singular value decomposition".into()));
    }

    let sigma: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));
    let s = DVector::from_iterator(n, order.iter().map(|&j| sigma[j]));
    let v = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);

    // Left vectors: normalized columns, with zero columns completed to an
    // orthonormal basis by Gram-Schmidt against the unit vectors.
    let floor = f64::EPSILON * s[0].max(f64::MIN_POSITIVE) * n as f64;
    let mut u = DMatrix::<f64>::zeros(n, n);
    let mut filled = 0;
    for (c, &j) in order.iter().enumerate() {
        if sigma[j] > floor {
            u.set_column(c, &(a.column(j) / sigma[j]));
            filled = c + 1;
        }
    }
    let mut e = 0;
    for c in filled..n {
        loop {
            let mut cand = DVector::<f64>::zeros(n);
            cand[e % n] = 1.0;
            e += 1;
            for k in 0..c {
                let proj = u.column(k).dot(&cand);
                cand -= u.column(k) * proj;
            }
            let norm = cand.norm();
            if norm > 1e-8 {
                u.set_column(c, &(cand / norm));
                break;
            }
        }
    }
    Ok((u, s, v))
}

fn whiten(cov: &CovarianceSet) -> Result<Whitened> {
    let kd = inv_sqrt_sym(&cov.sigma_d)?;
    let ki = inv_sqrt_sym(&cov.sigma_i)?;
    let m = &kd * &cov.sigma_cross * &ki;
    let (u, s, v) = sorted_svd(&m)?;
    Ok(Whitened { kd, ki, m, u, s, v })
}

/// Trace-norm correlation of two equally shaped grids (no gradients).
pub fn correlation(fd: &FeatureGrid, fi: &FeatureGrid, r1: f64) -> Result<CcaReport> {
    let cov = covariances(fd, fi, r1)?;
    let w = whiten(&cov)?;
    Ok(CcaReport {
        corr: w.s.sum(),
        m: w.m,
        u: w.u,
        s: w.s,
        v: w.v,
        grad_fd: None,
        grad_fi: None,
    })
}

/// Correlation plus analytic gradients, failing on degenerate spectra.
pub fn corr_gradients(fd: &FeatureGrid, fi: &FeatureGrid, r1: f64) -> Result<CcaReport> {
    corr_gradients_with(fd, fi, r1, SpectrumPolicy::Strict)
}

pub fn corr_gradients_with(
    fd: &FeatureGrid,
    fi: &FeatureGrid,
    r1: f64,
    policy: SpectrumPolicy,
) -> Result<CcaReport> {
    check_pair(fd, fi)?;
    check_r1(r1)?;
    let (a, b) = (centered(fd), centered(fi));
    let cov = CovarianceSet {
        sigma_cross: raw_cross(&a, &b),
        sigma_d: regularized(&a, r1),
        sigma_i: regularized(&b, r1),
        r1,
    };
    let w = whiten(&cov)?;
    if policy == SpectrumPolicy::Strict {
        check_spectrum(&w.s)?;
    }

    let s_diag = DMatrix::from_diagonal(&w.s);
    let grad_cross = &w.kd * &w.u * w.v.transpose() * &w.ki;
    let grad_dd = (&w.kd * &w.u * &s_diag * w.u.transpose() * &w.kd) * -0.5;
    let grad_ii = (&w.ki * &w.v * &s_diag * w.v.transpose() * &w.ki) * -0.5;
    let grad_cross_t = grad_cross.transpose();

    let c = fd.channels() as f64;
    let (rows, cols, channels) = fd.shape();
    let mut gd = FeatureGrid::zeros(rows, cols, channels);
    let mut gi = FeatureGrid::zeros(rows, cols, channels);
    for ch in 0..channels {
        let d = (&grad_dd * &a[ch] * 2.0 + &grad_cross * &b[ch]) / c;
        let i = (&grad_ii * &b[ch] * 2.0 + &grad_cross_t * &a[ch]) / c;
        write_plane(&mut gd, ch, &d);
        write_plane(&mut gi, ch, &i);
    }
    Ok(CcaReport {
        corr: w.s.sum(),
        m: w.m,
        u: w.u,
        s: w.s,
        v: w.v,
        grad_fd: Some(gd),
        grad_fi: Some(gi),
    })
}

fn write_plane(g: &mut FeatureGrid, ch: usize, mat: &DMatrix<f64>) {
    let cols = mat.ncols();
    for (i, v) in g.plane_mut(ch).iter_mut().enumerate() {
        *v = mat[(i / cols, i % cols)];
    }
}

fn check_spectrum(s: &DVector<f64>) -> Result<()> {
    let scale = s.max().max(1.0);
    let tol = SPECTRUM_TOLERANCE * scale;
    if let Some(&last) = s.as_slice().last() {
        if last <= tol {
            return Err(Error::DegenerateSpectrum(format!(
                "smallest singular value {last:e} is zero"
            )));
        }
    }
    for w in s.as_slice().windows(2) {
        if w[0] - w[1] <= tol {
            return Err(Error::DegenerateSpectrum(format!(
                "repeated singular value {:e}",
                w[0]
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_channel(a: f64, b: f64) -> FeatureGrid {
        FeatureGrid::new(1, 1, 2, vec![a, b]).unwrap()
    }

    #[test]
    fn channel_mean_cases() {
        assert_eq!(channel_mean(&two_channel(1.0, 3.0))[(0, 0)], 2.0);
        let a = FeatureGrid::from_fn(2, 3, 2, |r, c, k| {
            let v = (r * 3 + c) as f64 + 0.5;
            if k == 0 {
                v
            } else {
                -v
            }
        });
        assert!(channel_mean(&a).iter().all(|&v| v == 0.0));
        let same = FeatureGrid::from_fn(2, 2, 3, |r, c, _| (r + 2 * c) as f64);
        assert_eq!(
            channel_mean(&same),
            DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 3.0])
        );
    }

    #[test]
    fn covariance_special_cases() {
        let f = FeatureGrid::from_fn(3, 2, 4, |r, c, k| ((r + 1) * (k + 2)) as f64 - c as f64 * 0.3 * k as f64);
        let cross = cross_covariance(&f, &f).unwrap();
        let auto = auto_covariance(&f, 0.25).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = cross[(i, j)] + if i == j { 0.25 } else { 0.0 };
                assert!((auto[(i, j)] - expect).abs() < 1e-12);
            }
        }
        assert_eq!(auto, auto.transpose());
        let constant = FeatureGrid::from_fn(3, 2, 4, |r, c, _| (r * 7 + c) as f64);
        assert!(cross_covariance(&f, &constant).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(
            auto_covariance(&constant, 0.5).unwrap(),
            DMatrix::identity(3, 3) * 0.5
        );
    }

    #[test]
    fn covariance_errors() {
        let f = FeatureGrid::zeros(2, 2, 1);
        assert!(matches!(
            cross_covariance(&f, &f),
            Err(Error::TooFewChannels(1))
        ));
        let g = FeatureGrid::zeros(2, 3, 2);
        assert!(matches!(
            cross_covariance(&g, &FeatureGrid::zeros(3, 2, 2)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            auto_covariance(&g, 0.0),
            Err(Error::NonPositiveRegularizer(_))
        ));
    }

    #[test]
    fn inv_sqrt_closed_forms() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((inv_sqrt_sym(&id).unwrap() - &id).amax() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = inv_sqrt_sym(&d).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((r[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert!(r[(0, 1)].abs() < 1e-15);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            inv_sqrt_sym(&singular),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn strict_policy_rejects_zero_spectrum() {
        let fd = FeatureGrid::from_fn(2, 2, 3, |r, c, k| (r + c * k) as f64 + k as f64 * 0.7);
        let fi = FeatureGrid::zeros(2, 2, 3);
        assert!(matches!(
            corr_gradients(&fd, &fi, 1e-3),
            Err(Error::DegenerateSpectrum(_))
        ));
        let lenient = corr_gradients_with(&fd, &fi, 1e-3, SpectrumPolicy::Lenient).unwrap();
        assert_eq!(lenient.corr, 0.0);
        assert!(lenient.grad_fd.unwrap().is_finite());
    }
}
