//! Real symmetric spherical-harmonic basis of even order.
//!
//! Basis terms are indexed `j = 1..=R` with `j(l, m) = (l^2 + l + 2)/2 + m` for
//! even `l`, `-l <= m <= l`. For the term `(l, m)`:
//!
//! ```text
//! m < 0:  sqrt(2) * K(l,|m|) * P_l^|m|(cos theta) * cos(|m| phi)
//! m = 0:            K(l, 0)  * P_l^0(cos theta)
//! m > 0:  sqrt(2) * K(l, m)  * P_l^m(cos theta)  * sin(m phi)
//! K(l,m) = sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!)
//! ```
//!
//! with no Condon-Shortley phase anywhere. Inside the crate the Legendre factor
//! `(1 - x^2)^(m/2)` is evaluated as `sin(theta)^m` with the signed sine, so every
//! basis function is a smooth function of the unit vector for all real angles.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sphere::{Direction, Protocol};

pub const DEFAULT_ORDER: usize = 4;

/// Below this |sin(theta)| the theta-derivative is taken at a point nudged off the pole.
const POLE_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BasisSpec {
    order: usize,
}

impl BasisSpec {
    pub fn new(order: usize) -> Result<Self> {
        if !order.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "SH order must be even, got {order}"
            )));
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of basis terms `R = (L+1)(L+2)/2`.
    pub fn len(&self) -> usize {
        (self.order + 1) * (self.order + 2) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(l, m)` for each column, in index order.
    pub fn terms(&self) -> impl Iterator<Item = (usize, i64)> {
        (0..=self.order)
            .step_by(2)
            .flat_map(|l| (-(l as i64)..=l as i64).map(move |m| (l, m)))
    }
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            order: DEFAULT_ORDER,
        }
    }
}

/// One-based basis index of the term `(l, m)`.
pub fn lm_to_index(l: usize, m: i64) -> Result<usize> {
    if !l.is_multiple_of(2) || m.unsigned_abs() as usize > l {
        return Err(Error::InvalidArgument(format!("no basis term (l={l}, m={m})")));
    }
    Ok((((l * l + l + 2) / 2) as i64 + m) as usize)
}

/// Inverse of [`lm_to_index`].
pub fn index_to_lm(j: usize) -> Result<(usize, i64)> {
    if j == 0 {
        return Err(Error::InvalidArgument("basis indices start at 1".into()));
    }
    let mut l = 0;
    // First index of degree l+2 is ((l+2)^2 - (l+2) + 2)/2.
    while ((l + 2) * (l + 2) - (l + 2) + 2) / 2 <= j {
        l += 2;
    }
    let m = j as i64 - ((l * l + l + 2) / 2) as i64;
    Ok((l, m))
}

/// Associated Legendre function `P_l^m(x)` without the Condon-Shortley phase.
pub fn assoc_legendre(l: usize, m: usize, x: f64) -> Result<f64> {
    if m > l {
        return Err(Error::InvalidArgument(format!("m={m} exceeds l={l}")));
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!("x={x} outside [-1, 1]")));
    }
    let s = (1.0 - x * x).max(0.0).sqrt();
    Ok(legendre_column(l, m, x, s)[l - m])
}

/// `[P_m^m, P_{m+1}^m, ..., P_lmax^m]` at `x = cos(theta)`, `s = sin(theta)`, by
/// upward recurrence in degree.
fn legendre_column(lmax: usize, m: usize, x: f64, s: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(lmax - m + 1);
    // P_m^m = (2m-1)!! s^m
    let mut pmm = 1.0;
    for k in 0..m {
        pmm *= (2 * k + 1) as f64 * s;
    }
    out.push(pmm);
    if lmax == m {
        return out;
    }
    out.push(x * (2 * m + 1) as f64 * pmm);
    for l in (m + 2)..=lmax {
        let p1 = out[l - m - 1];
        let p2 = out[l - m - 2];
        out.push(((2 * l - 1) as f64 * x * p1 - (l + m - 1) as f64 * p2) / (l - m) as f64);
    }
    out
}

/// Table `p[m][l - m]` of `P_l^m` for `0 <= m <= l <= lmax`.
fn legendre_table(lmax: usize, x: f64, s: f64) -> Vec<Vec<f64>> {
    (0..=lmax).map(|m| legendre_column(lmax, m, x, s)).collect()
}

fn ln_factorial(k: usize) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// `K(l, m)` with `m >= 0`; log-space for `l >= 6`.
fn normalization(l: usize, m: usize) -> f64 {
    let base = (2 * l + 1) as f64 / (4.0 * PI);
    let ratio = if l >= 6 {
        (ln_factorial(l - m) - ln_factorial(l + m)).exp()
    } else {
        ((l - m + 1)..=(l + m)).fold(1.0, |acc, k| acc / k as f64)
    };
    (base * ratio).sqrt()
}

/// Normalization constants, one per basis column (including the sqrt(2) for m != 0).
fn column_scales(spec: BasisSpec) -> Vec<f64> {
    spec.terms()
        .map(|(l, m)| {
            let k = normalization(l, m.unsigned_abs() as usize);
            if m == 0 {
                k
            } else {
                SQRT_2 * k
            }
        })
        .collect()
}

/// Value of basis term `j` (one-based) at `(theta, phi)`.
pub fn real_sh(spec: BasisSpec, j: usize, theta: f64, phi: f64) -> Result<f64> {
    if j == 0 || j > spec.len() {
        return Err(Error::InvalidArgument(format!(
            "basis index {j} outside 1..={}",
            spec.len()
        )));
    }
    let (l, m) = index_to_lm(j)?;
    let am = m.unsigned_abs() as usize;
    let (s, x) = theta.sin_cos();
    let p = legendre_column(l, am, x, s)[l - am];
    let k = normalization(l, am);
    Ok(match m {
        0 => k * p,
        m if m < 0 => SQRT_2 * k * p * (am as f64 * phi).cos(),
        _ => SQRT_2 * k * p * (am as f64 * phi).sin(),
    })
}

/// Fills one row of basis values.
fn eval_row(spec: BasisSpec, scales: &[f64], theta: f64, phi: f64, row: &mut [f64]) {
    let (s, x) = theta.sin_cos();
    let table = legendre_table(spec.order, x, s);
    for (col, (l, m)) in spec.terms().enumerate() {
        let am = m.unsigned_abs() as usize;
        let p = table[am][l - am];
        row[col] = scales[col]
            * p
            * match m {
                0 => 1.0,
                m if m < 0 => (am as f64 * phi).cos(),
                _ => (am as f64 * phi).sin(),
            };
    }
}

/// Fills one row of d/dtheta and d/dphi values.
fn eval_row_grad(
    spec: BasisSpec,
    scales: &[f64],
    theta: f64,
    phi: f64,
    d_theta: &mut [f64],
    d_phi: &mut [f64],
) {
    let (s, x) = theta.sin_cos();
    let table = legendre_table(spec.order, x, s);
    let near_pole = s.abs() < POLE_CLAMP;
    let clamped = if near_pole {
        let (cs, cx) = (theta + POLE_CLAMP).sin_cos();
        Some((cs, cx, legendre_table(spec.order, cx, cs)))
    } else {
        None
    };

    for (col, (l, m)) in spec.terms().enumerate() {
        let am = m.unsigned_abs() as usize;
        let p = table[am][l - am];
        let (ang, dang) = match m {
            0 => (1.0, 0.0),
            m if m < 0 => {
                let (sn, cs) = (am as f64 * phi).sin_cos();
                (cs, -(am as f64) * sn)
            }
            _ => {
                let (sn, cs) = (am as f64 * phi).sin_cos();
                (sn, am as f64 * cs)
            }
        };
        d_phi[col] = scales[col] * p * dang;

        // dP_l^m/dtheta = (l cos P_l^m - (l+m) P_{l-1}^m) / sin
        let dp = |tab: &Vec<Vec<f64>>, x: f64, s: f64| {
            let plm = tab[am][l - am];
            let prev = if l > am { tab[am][l - 1 - am] } else { 0.0 };
            (l as f64 * x * plm - (l + am) as f64 * prev) / s
        };
        let dp_dtheta = match &clamped {
            None => dp(&table, x, s),
            Some(_) if m == 0 => 0.0,
            Some((cs, cx, tab)) => dp(tab, *cx, *cs),
        };
        d_theta[col] = scales[col] * dp_dtheta * ang;
    }
}

/// Basis values at raw (unvalidated) angles: one row per direction.
pub fn evaluate(spec: BasisSpec, angles: &[Direction]) -> DMatrix<f64> {
    let r = spec.len();
    let scales = column_scales(spec);
    let mut out = DMatrix::zeros(angles.len(), r);
    let mut row = vec![0.0; r];
    for (i, d) in angles.iter().enumerate() {
        eval_row(spec, &scales, d.theta, d.phi, &mut row);
        for (c, v) in row.iter().enumerate() {
            out[(i, c)] = *v;
        }
    }
    out
}

/// Angular derivatives of [`evaluate`]: `(d/dtheta, d/dphi)`, same shape.
pub fn evaluate_grad(spec: BasisSpec, angles: &[Direction]) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = spec.len();
    let scales = column_scales(spec);
    let mut dt = DMatrix::zeros(angles.len(), r);
    let mut dp = DMatrix::zeros(angles.len(), r);
    let (mut row_t, mut row_p) = (vec![0.0; r], vec![0.0; r]);
    for (i, d) in angles.iter().enumerate() {
        eval_row_grad(spec, &scales, d.theta, d.phi, &mut row_t, &mut row_p);
        for c in 0..r {
            dt[(i, c)] = row_t[c];
            dp[(i, c)] = row_p[c];
        }
    }
    (dt, dp)
}

/// `N x R` design matrix of a protocol.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    values: DMatrix<f64>,
    spec: BasisSpec,
    protocol: Arc<Protocol>,
}

impl BasisMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn protocol(&self) -> &Arc<Protocol> {
        &self.protocol
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }
}

pub fn basis_matrix(protocol: &Arc<Protocol>, spec: BasisSpec) -> BasisMatrix {
    BasisMatrix {
        values: evaluate(spec, protocol.directions()),
        spec,
        protocol: Arc::clone(protocol),
    }
}

/// `(dB/dtheta, dB/dphi)` for a protocol.
pub fn basis_matrix_grad(protocol: &Protocol, spec: BasisSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    evaluate_grad(spec, protocol.directions())
}
