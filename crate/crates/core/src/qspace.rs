//! SH coefficient fitting and the differentiable subsampling operator.
//!
//! A fully sampled signal `S_N` is fitted once, `C = pinv(B_N) S_N`, and then
//! resampled at any set of directions as `S_n = B_n C`. Only `B_n` depends on the
//! learnable angles, so [`ShFit`] caches the pseudo-inverse of the full protocol.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::shbasis::{self, basis_matrix, BasisMatrix, BasisSpec};
use crate::sphere::{Direction, Protocol};

/// Singular values below this fraction of the largest are dropped from the pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ShCoefficients {
    values: DVector<f64>,
    spec: BasisSpec,
}

impl ShCoefficients {
    pub fn new(values: DVector<f64>, spec: BasisSpec) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for a basis of {} terms",
                values.len(),
                spec.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite SH coefficient".into()));
        }
        Ok(Self { values, spec })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }
}

/// Per-direction signal of one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalVector {
    values: DVector<f64>,
    protocol: Arc<Protocol>,
}

impl SignalVector {
    pub fn new(values: DVector<f64>, protocol: Arc<Protocol>) -> Result<Self> {
        if values.len() != protocol.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a protocol of {} directions",
                values.len(),
                protocol.len()
            )));
        }
        Ok(Self { values, protocol })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn protocol(&self) -> &Arc<Protocol> {
        &self.protocol
    }
}

fn same_protocol(a: &Arc<Protocol>, b: &Arc<Protocol>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Moore-Penrose pseudo-inverse through the SVD, dropping singular values below
/// `PINV_RTOL * sigma_max`.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.pseudo_inverse(PINV_RTOL * smax)
        .expect("both SVD factors were requested")
}

/// Least-squares fitter for one full protocol.
///
/// With `ridge > 0` the fit solves `(B^T B + ridge I) C = B^T S` instead of using
/// the pseudo-inverse.
#[derive(Debug, Clone)]
pub struct ShFit {
    basis: BasisMatrix,
    solve: DMatrix<f64>,
}

impl ShFit {
    pub fn new(protocol: &Arc<Protocol>, spec: BasisSpec) -> Self {
        Self::with_ridge(protocol, spec, 0.0).expect("pseudo-inverse fit never fails")
    }

    pub fn with_ridge(protocol: &Arc<Protocol>, spec: BasisSpec, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
        }
        let basis = basis_matrix(protocol, spec);
        let solve = if ridge == 0.0 {
            pinv(basis.values())
        } else {
            let b = basis.values();
            let mut normal = b.transpose() * b;
            for i in 0..spec.len() {
                normal[(i, i)] += ridge;
            }
            let chol = normal
                .cholesky()
                .ok_or_else(|| Error::Singular("ridge normal equations".into()))?;
            chol.solve(&b.transpose())
        };
        Ok(Self { basis, solve })
    }

    pub fn basis(&self) -> &BasisMatrix {
        &self.basis
    }

    pub fn spec(&self) -> BasisSpec {
        self.basis.spec()
    }

    pub fn protocol(&self) -> &Arc<Protocol> {
        self.basis.protocol()
    }

    /// `R x N` map from signals to coefficients.
    pub fn operator(&self) -> &DMatrix<f64> {
        &self.solve
    }

    pub fn coefficients(&self, s: &SignalVector) -> Result<ShCoefficients> {
        if !same_protocol(s.protocol(), self.protocol()) {
            return Err(Error::ProtocolMismatch(format!(
                "signal on '{}' fitted with basis of '{}'",
                s.protocol().label(),
                self.protocol().label()
            )));
        }
        ShCoefficients::new(&self.solve * s.values(), self.spec())
    }

    /// Coefficients for a batch stored one voxel per column (`N x V` in, `R x V` out).
    pub fn coefficients_batch(&self, signals: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if signals.nrows() != self.protocol().len() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} rows, protocol has {} directions",
                signals.nrows(),
                self.protocol().len()
            )));
        }
        Ok(&self.solve * signals)
    }
}

/// Least-squares SH coefficients of `s` with the pseudo-inverse of `b`.
pub fn fit_sh(s: &SignalVector, b: &BasisMatrix) -> Result<ShCoefficients> {
    if !same_protocol(s.protocol(), b.protocol()) {
        return Err(Error::ProtocolMismatch(format!(
            "signal on '{}' fitted with basis of '{}'",
            s.protocol().label(),
            b.protocol().label()
        )));
    }
    ShCoefficients::new(pinv(b.values()) * s.values(), b.spec())
}

/// Evaluates the SH expansion at the directions of `q`.
pub fn resample(c: &ShCoefficients, q: &Arc<Protocol>) -> SignalVector {
    let b = basis_matrix(q, c.spec());
    SignalVector::new(b.values() * c.values(), Arc::clone(q)).expect("row count equals protocol size")
}

/// Per-direction partials `(dS_i/dtheta_i, dS_i/dphi_i)`; cross-direction terms are zero.
pub fn resample_grad(c: &ShCoefficients, q: &Protocol) -> (DVector<f64>, DVector<f64>) {
    let (dt, dp) = shbasis::basis_matrix_grad(q, c.spec());
    (&dt * c.values(), &dp * c.values())
}

/// Sparse samples of a batch at raw (possibly non-canonical) angles, from
/// precomputed coefficients (`R x V` in, `n x V` out).
pub fn sample_coefficients(spec: BasisSpec, angles: &[Direction], coeffs: &DMatrix<f64>) -> DMatrix<f64> {
    shbasis::evaluate(spec, angles) * coeffs
}

/// `B_n pinv(B_N)`: the `n x N` linear map applied to every voxel.
pub fn subsample_operator(fit: &ShFit, q: &Protocol) -> DMatrix<f64> {
    shbasis::evaluate(fit.spec(), q.directions()) * fit.operator()
}

/// Fits each column of `x` on the full protocol and resamples it at `q`.
pub fn subsample_batch(x: &DMatrix<f64>, fit: &ShFit, q: &Protocol) -> Result<DMatrix<f64>> {
    if x.ncols() == 0 {
        return Ok(DMatrix::zeros(q.len(), 0));
    }
    let coeffs = fit.coefficients_batch(x)?;
    Ok(sample_coefficients(fit.spec(), q.directions(), &coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::sphere::{electrostatic_protocol, random_protocol};
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;
    use std::sync::OnceLock;

    fn full90() -> Arc<Protocol> {
        static P: OnceLock<Arc<Protocol>> = OnceLock::new();
        P.get_or_init(|| Arc::new(electrostatic_protocol(90, 10_000, 1).unwrap()))
            .clone()
    }

    fn random_coeffs(spec: BasisSpec, seed: u64) -> ShCoefficients {
        let mut rng = seed::rng(seed);
        let v = DVector::from_fn(spec.len(), |_, _| rng.random_range(-1.0..1.0));
        ShCoefficients::new(v, spec).unwrap()
    }

    #[test]
    fn constant_signal_fits_to_l0() {
        let p = full90();
        let b = basis_matrix(&p, BasisSpec::default());
        let k = 0.37;
        let s = SignalVector::new(DVector::from_element(90, k), p.clone()).unwrap();
        let c = fit_sh(&s, &b).unwrap();
        assert!((c.values()[0] - 2.0 * PI.sqrt() * k).abs() < 1e-10);
        assert!(c.values().rows(1, 14).amax() < 1e-10);
    }

    #[test]
    fn zero_signal_fits_to_zero() {
        let p = full90();
        let fit = ShFit::new(&p, BasisSpec::default());
        let s = SignalVector::new(DVector::zeros(90), p.clone()).unwrap();
        assert_eq!(fit.coefficients(&s).unwrap().values().amax(), 0.0);
    }

    #[test]
    fn band_limited_roundtrip() {
        let p = full90();
        let spec = BasisSpec::default();
        let fit = ShFit::new(&p, spec);
        for trial in 0..50 {
            let c = random_coeffs(spec, trial);
            let s = resample(&c, &p);
            let back = fit.coefficients(&s).unwrap();
            assert!((back.values() - c.values()).amax() < 1e-10);
            let again = resample(&back, &p);
            assert!((again.values() - s.values()).amax() < 1e-10);
        }
    }

    #[test]
    fn protocol_mismatch_is_rejected() {
        let p = full90();
        let other = Arc::new(random_protocol(90, 3).unwrap());
        let b = basis_matrix(&p, BasisSpec::default());
        let s = SignalVector::new(DVector::zeros(90), other).unwrap();
        assert!(matches!(fit_sh(&s, &b), Err(Error::ProtocolMismatch(_))));
        assert!(SignalVector::new(DVector::zeros(3), p).is_err());
    }

    #[test]
    fn resample_l0_is_constant() {
        let spec = BasisSpec::default();
        let mut v = DVector::zeros(15);
        v[0] = 2.0;
        let c = ShCoefficients::new(v, spec).unwrap();
        let q = Arc::new(random_protocol(7, 1).unwrap());
        for s in resample(&c, &q).values().iter() {
            assert!((s - 2.0 * 0.282_094_791_8).abs() < 1e-9);
        }
        let (gt, gp) = resample_grad(&c, &q);
        assert_eq!(gt.amax(), 0.0);
        assert_eq!(gp.amax(), 0.0);
    }

    #[test]
    fn resample_antipodal() {
        let spec = BasisSpec::default();
        let c = random_coeffs(spec, 9);
        let dirs: Vec<Direction> = (0..20)
            .map(|k| Direction::new(0.1 + 0.13 * k as f64, 0.7 * k as f64))
            .collect();
        let flipped: Vec<Direction> = dirs
            .iter()
            .map(|d| Direction::new(PI - d.theta, d.phi + PI))
            .collect();
        let coeffs = DMatrix::from_column_slice(15, 1, c.values().as_slice());
        let a = sample_coefficients(spec, &dirs, &coeffs);
        let b = sample_coefficients(spec, &flipped, &coeffs);
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn resample_grad_matches_finite_differences() {
        let spec = BasisSpec::default();
        let mut rng = seed::rng(5);
        let h = 1e-6;
        for trial in 0..100 {
            let c = random_coeffs(spec, 100 + trial);
            let mut d;
            loop {
                d = Direction::new(rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
                if d.theta.sin() > 0.1 {
                    break;
                }
            }
            let q = Protocol::new(vec![d], "probe").unwrap();
            let (gt, gp) = resample_grad(&c, &q);
            let coeffs = DMatrix::from_column_slice(15, 1, c.values().as_slice());
            // The protocol may store the probe on the other hemisphere; differentiate there.
            let d = q.directions()[0];
            let at = |t: f64, p: f64| sample_coefficients(spec, &[Direction::new(t, p)], &coeffs)[(0, 0)];
            let fd_t = (at(d.theta + h, d.phi) - at(d.theta - h, d.phi)) / (2.0 * h);
            let fd_p = (at(d.theta, d.phi + h) - at(d.theta, d.phi - h)) / (2.0 * h);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
            assert!(rel(gt[0], fd_t) < 1e-5, "theta trial {trial}");
            assert!(rel(gp[0], fd_p) < 1e-5, "phi trial {trial}");
        }
    }

    #[test]
    fn m0_only_coefficients_have_no_phi_gradient() {
        let spec = BasisSpec::default();
        let mut v = DVector::zeros(15);
        for (c, (_, m)) in spec.terms().enumerate() {
            if m == 0 {
                v[c] = 0.3 + c as f64 * 0.1;
            }
        }
        let c = ShCoefficients::new(v, spec).unwrap();
        let q = random_protocol(5, 2).unwrap();
        let (_, gp) = resample_grad(&c, &q);
        assert_eq!(gp.amax(), 0.0);
    }

    #[test]
    fn subsample_identity_on_full_protocol() {
        let p = full90();
        let spec = BasisSpec::default();
        let fit = ShFit::new(&p, spec);
        let coeffs = DMatrix::from_fn(15, 12, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let x = fit.basis().values() * &coeffs;
        let y = subsample_batch(&x, &fit, &p).unwrap();
        assert!((y - &x).amax() < 1e-10);
        let op = subsample_operator(&fit, &p);
        assert_eq!(op.shape(), (90, 90));
        assert!((op * &x - x).amax() < 1e-10);
    }

    #[test]
    fn subsample_edge_cases() {
        let p = full90();
        let fit = ShFit::new(&p, BasisSpec::default());
        let q = random_protocol(4, 8).unwrap();
        assert_eq!(subsample_batch(&DMatrix::zeros(90, 0), &fit, &q).unwrap().shape(), (4, 0));
        assert_eq!(subsample_batch(&DMatrix::zeros(90, 3), &fit, &q).unwrap().amax(), 0.0);
        assert!(subsample_batch(&DMatrix::zeros(80, 3), &fit, &q).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn subsample_is_linear(seed in 0u64..500, alpha in -3.0..3.0f64) {
            let p = full90();
            let fit = ShFit::new(&p, BasisSpec::default());
            let q = random_protocol(6, seed).unwrap();
            let mut rng = seed::rng(seed);
            let x = DMatrix::from_fn(90, 4, |_, _| rng.random_range(0.0..1.0));
            let y = DMatrix::from_fn(90, 4, |_, _| rng.random_range(0.0..1.0));
            let sx = subsample_batch(&x, &fit, &q).unwrap();
            let sy = subsample_batch(&y, &fit, &q).unwrap();
            let sxy = subsample_batch(&(&x + &y), &fit, &q).unwrap();
            let sax = subsample_batch(&(&x * alpha), &fit, &q).unwrap();
            prop_assert!((sxy - (&sx + &sy)).amax() < 1e-12);
            prop_assert!((sax - &sx * alpha).amax() < 1e-12);
        }
    }

    #[test]
    fn ridge_fit_shrinks_toward_zero() {
        let p = full90();
        let spec = BasisSpec::default();
        let c = random_coeffs(spec, 4);
        let s = resample(&c, &p);
        let exact = ShFit::new(&p, spec).coefficients(&s).unwrap();
        let ridged = ShFit::with_ridge(&p, spec, 10.0).unwrap().coefficients(&s).unwrap();
        assert!(ridged.values().norm() < exact.values().norm());
        assert!(ShFit::with_ridge(&p, spec, -1.0).is_err());
    }
}
