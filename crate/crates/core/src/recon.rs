//! Reconstructors from sparse samples back to the full protocol, and the
//! L1 + total-variation training loss.
//!
//! Batches are `dim x V` matrices: one column per voxel.

use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;

use crate::error::{Error, Result};
use crate::qspace::SignalVector;
use crate::seed;
use crate::shbasis::{self, BasisSpec};
use crate::sphere::Protocol;

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_LAMBDA_TV: f64 = 2e-7;
/// Ridge weight used by the linear baseline when the sparse fit is underdetermined.
pub const DEFAULT_LINEAR_RIDGE: f64 = 1e-3;

/// Maps sparse samples (`n x V`) to full-protocol signals (`N x V`).
pub trait Reconstructor {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn reconstruct(&self, sparse: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

/// Fully connected network with rectifier hidden layers and a linear output.
///
/// All parameters live in one flat buffer. Layer `k` stores its `out x in`
/// weight matrix column-major, followed by its `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl MlpParams {
    /// All-zero parameters for layer widths `dims` (input first, output last).
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network needs >= 2 nonzero layer widths, got {dims:?}"
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![0.0; param_count(dims)],
        })
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = seed::rng(seed);
        for k in 0..p.layers() {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = p.offsets(k);
            for v in &mut p.data[w..w + fan_in * fan_out] {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    /// `n -> hidden -> hidden -> full`
    pub fn standard(n: usize, hidden: usize, full: usize, seed: u64) -> Result<Self> {
        Self::new(&[n, hidden, hidden, full], seed)
    }

    pub fn from_flat(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let p = Self::zeros(dims)?;
        if data.len() != p.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for architecture {dims:?} (needs {})",
                data.len(),
                p.data.len()
            )));
        }
        Ok(Self { data, ..p })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Offsets of layer `k`'s weights and biases in the flat buffer.
    fn offsets(&self, k: usize) -> (usize, usize) {
        let start = param_count(&self.dims[..=k]);
        (start, start + self.dims[k] * self.dims[k + 1])
    }

    pub fn weights(&self, k: usize) -> DMatrixView<'_, f64> {
        let (w, _) = self.offsets(k);
        let (i, o) = (self.dims[k], self.dims[k + 1]);
        DMatrixView::from_slice(&self.data[w..w + i * o], o, i)
    }

    pub fn bias(&self, k: usize) -> &[f64] {
        let (_, b) = self.offsets(k);
        &self.data[b..b + self.dims[k + 1]]
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.dims[0] {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} inputs, got {rows}",
                self.dims[0]
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every layer input for [`MlpParams::backward`].
    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        self.check_input(x.nrows())?;
        let mut inputs = Vec::with_capacity(self.layers());
        let mut a = x.clone();
        for k in 0..self.layers() {
            let mut z = self.weights(k) * &a;
            let bias = self.bias(k);
            let hidden = k + 1 < self.layers();
            for mut col in z.column_iter_mut() {
                for (v, b) in col.iter_mut().zip(bias) {
                    *v += b;
                    if hidden && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            inputs.push(a);
            a = z;
        }
        Ok(ForwardCache { inputs, output: a })
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Forward pass for a single voxel.
    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        let x = DMatrix::from_column_slice(s.len(), 1, s);
        Ok(self.forward_batch(&x)?.as_slice().to_vec())
    }

    /// Reverse-mode gradients of `sum(upstream .* output)` with respect to every
    /// parameter (summed over the batch) and to the network input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &DMatrix<f64>) -> Result<Gradients> {
        let out_dim = *self.dims.last().expect("at least two layers");
        if upstream.shape() != (out_dim, cache.output.ncols()) {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient is {:?}, output is {:?}",
                upstream.shape(),
                cache.output.shape()
            )));
        }
        let mut params = vec![0.0; self.data.len()];
        let mut delta = upstream.clone();
        for k in (0..self.layers()).rev() {
            let a = &cache.inputs[k];
            let (w_off, b_off) = self.offsets(k);
            let (i, o) = (self.dims[k], self.dims[k + 1]);
            let gw = &delta * a.transpose();
            params[w_off..w_off + i * o].copy_from_slice(gw.as_slice());
            let gb = &mut params[b_off..b_off + o];
            for col in delta.column_iter() {
                for (g, d) in gb.iter_mut().zip(col.iter()) {
                    *g += d;
                }
            }
            let mut prev = self.weights(k).transpose() * &delta;
            if k > 0 {
                // Rectifier derivative: the layer input is zero wherever its
                // pre-activation was non-positive.
                for (g, act) in prev.iter_mut().zip(a.iter()) {
                    if *act <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(Gradients {
            params,
            input: delta,
        })
    }
}

impl Reconstructor for MlpParams {
    fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two layers")
    }

    fn reconstruct(&self, sparse: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.forward_batch(sparse)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same layout as [`MlpParams::as_slice`].
    pub params: Vec<f64>,
    /// `n x V` gradient with respect to the network input.
    pub input: DMatrix<f64>,
}

/// Zero-parameter baseline: ridge-regularized SH fit on the sparse protocol,
/// evaluated on the full protocol.
///
/// The penalty on coefficient `(l, m)` is `ridge * (l (l + 1))^2`, so the mean
/// (`l = 0`) term is never shrunk.
#[derive(Debug, Clone)]
pub struct LinearRecon {
    operator: DMatrix<f64>,
}

impl LinearRecon {
    pub fn new(sparse: &Protocol, full: &Protocol, spec: BasisSpec, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
        }
        let bq = shbasis::evaluate(spec, sparse.directions());
        let r = spec.len();
        if ridge == 0.0 {
            let sv = bq.clone().singular_values();
            if sparse.len() < r || sv.min() <= 1e-12 * sv.max() {
                return Err(Error::Singular(format!(
                    "{} sparse directions cannot determine {r} SH terms without a ridge",
                    sparse.len()
                )));
            }
        }
        let mut normal = bq.transpose() * &bq;
        for (c, (l, _)) in spec.terms().enumerate() {
            let lb = (l * (l + 1)) as f64;
            normal[(c, c)] += ridge * lb * lb;
        }
        let chol = normal
            .cholesky()
            .ok_or_else(|| Error::Singular("sparse normal equations".into()))?;
        let coeffs = chol.solve(&bq.transpose());
        let operator = shbasis::evaluate(spec, full.directions()) * coeffs;
        Ok(Self { operator })
    }

    /// `N x n` matrix applied to each voxel.
    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }
}

impl Reconstructor for LinearRecon {
    fn input_dim(&self) -> usize {
        self.operator.ncols()
    }

    fn output_dim(&self) -> usize {
        self.operator.nrows()
    }

    fn reconstruct(&self, sparse: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if sparse.nrows() != self.operator.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "linear reconstructor expects {} inputs, got {}",
                self.operator.ncols(),
                sparse.nrows()
            )));
        }
        Ok(&self.operator * sparse)
    }
}

/// Reconstructs one voxel with [`LinearRecon`].
pub fn linear_recon(
    s: &SignalVector,
    full: &Arc<Protocol>,
    spec: BasisSpec,
    ridge: f64,
) -> Result<SignalVector> {
    let op = LinearRecon::new(s.protocol(), full, spec, ridge)?;
    SignalVector::new(op.operator() * s.values(), Arc::clone(full))
}

fn check_image(data: &DMatrix<f64>, width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || data.ncols() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} voxels for a {width}x{height} image",
            data.ncols()
        )));
    }
    Ok(())
}

/// Visits every forward difference pair `(from, to)` of voxel columns.
fn for_each_neighbor(width: usize, height: usize, mut f: impl FnMut(usize, usize)) {
    for y in 0..height {
        for x in 0..width {
            let v = y * width + x;
            if x + 1 < width {
                f(v, v + 1);
            }
            if y + 1 < height {
                f(v, v + width);
            }
        }
    }
}

/// Anisotropic total variation summed over channels (rows), with no wrap-around.
pub fn tv(data: &DMatrix<f64>, width: usize, height: usize) -> Result<f64> {
    check_image(data, width, height)?;
    let mut total = 0.0;
    for_each_neighbor(width, height, |a, b| {
        total += data
            .column(b)
            .iter()
            .zip(data.column(a).iter())
            .map(|(q, p)| (q - p).abs())
            .sum::<f64>();
    });
    Ok(total)
}

/// Subgradient of [`tv`] with `sign(0) = 0`.
pub fn tv_grad(data: &DMatrix<f64>, width: usize, height: usize) -> Result<DMatrix<f64>> {
    check_image(data, width, height)?;
    let mut grad = DMatrix::zeros(data.nrows(), data.ncols());
    for_each_neighbor(width, height, |a, b| {
        for c in 0..data.nrows() {
            let s = sign(data[(c, b)] - data[(c, a)]);
            grad[(c, b)] += s;
            grad[(c, a)] -= s;
        }
    });
    Ok(grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_tv: f64,
}

impl LossConfig {
    pub fn new(lambda_tv: f64) -> Result<Self> {
        if !(lambda_tv >= 0.0 && lambda_tv.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_tv must be >= 0, got {lambda_tv}"
            )));
        }
        Ok(Self { lambda_tv })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_tv: DEFAULT_LAMBDA_TV,
        }
    }
}

/// `mean |xhat - x| + lambda_tv * tv(xhat)` and its subgradient with respect to `xhat`.
pub fn loss(
    xhat: &DMatrix<f64>,
    x: &DMatrix<f64>,
    width: usize,
    height: usize,
    cfg: &LossConfig,
) -> Result<(f64, DMatrix<f64>)> {
    if xhat.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} vs target {:?}",
            xhat.shape(),
            x.shape()
        )));
    }
    check_image(x, width, height)?;
    let count = x.len() as f64;
    let mut l1 = 0.0;
    let mut grad = DMatrix::zeros(x.nrows(), x.ncols());
    for ((g, a), b) in grad.iter_mut().zip(xhat.iter()).zip(x.iter()) {
        let r = a - b;
        l1 += r.abs();
        *g = sign(r) / count;
    }
    let mut value = l1 / count;
    if cfg.lambda_tv > 0.0 {
        value += cfg.lambda_tv * tv(xhat, width, height)?;
        grad += tv_grad(xhat, width, height)? * cfg.lambda_tv;
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{electrostatic_protocol, random_protocol};
    use nalgebra::DVector;
    use proptest::prelude::{prop_assert, proptest};

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[3, 4, 4, 5]).unwrap();
        assert_eq!(p.forward(&[0.3, 0.2, 0.9]).unwrap(), vec![0.0; 5]);
        assert!(p.forward(&[1.0, 2.0]).is_err());
        assert!(MlpParams::zeros(&[3]).is_err());
        assert!(MlpParams::zeros(&[3, 0, 2]).is_err());
    }

    #[test]
    fn pass_through_network_reproduces_input() {
        let n = 4;
        let mut p = MlpParams::zeros(&[n, n, n]).unwrap();
        for k in 0..2 {
            let (w, _) = p.offsets(k);
            for i in 0..n {
                p.data[w + i * n + i] = 1.0;
            }
        }
        let s = [0.1, 0.7, 0.0, 0.35];
        assert_eq!(p.forward(&s).unwrap(), s.to_vec());
    }

    #[test]
    fn linear_single_layer_is_homogeneous() {
        let p = MlpParams::new(&[3, 6], 4).unwrap();
        let s = [0.2, 0.5, 0.8];
        let s2: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        let y = p.forward(&s).unwrap();
        let y2 = p.forward(&s2).unwrap();
        for (a, b) in y.iter().zip(y2) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn glorot_init_bounds() {
        let p = MlpParams::standard(3, 16, 10, 1).unwrap();
        assert_eq!(p.dims(), &[3, 16, 16, 10]);
        let limit = (6.0f64 / 19.0).sqrt();
        assert!(p.weights(0).iter().all(|w| w.abs() <= limit));
        assert!(p.bias(0).iter().all(|b| *b == 0.0));
        assert_eq!(p, MlpParams::standard(3, 16, 10, 1).unwrap());
    }

    /// Sum of `upstream .* f(x)`: the scalar whose gradient `backward` returns.
    fn probe(p: &MlpParams, x: &DMatrix<f64>, up: &DMatrix<f64>) -> f64 {
        p.forward_batch(x).unwrap().component_mul(up).sum()
    }

    /// Minimum |pre-activation| over hidden units; small values mean a rectifier kink.
    fn kink_margin(p: &MlpParams, x: &DMatrix<f64>) -> f64 {
        let mut a = x.clone();
        let mut margin = f64::INFINITY;
        for k in 0..p.layers() - 1 {
            let mut z = p.weights(k) * &a;
            for mut col in z.column_iter_mut() {
                for (v, b) in col.iter_mut().zip(p.bias(k)) {
                    *v += b;
                }
            }
            margin = margin.min(z.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
            a = z.map(|v| v.max(0.0));
        }
        margin
    }

    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-6;
        let mut trials = 0;
        let mut s = 0;
        while trials < 100 {
            s += 1;
            let mut rng = seed::rng(s);
            let mut p = MlpParams::new(&[3, 4, 4, 5], s).unwrap();
            for v in p.as_mut_slice() {
                *v += rng.random_range(-0.1..0.1);
            }
            let x = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
            let up = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
            if kink_margin(&p, &x) < 1e-3 {
                continue;
            }
            trials += 1;
            let g = p.backward(&p.forward_cached(&x).unwrap(), &up).unwrap();
            for i in 0..p.len() {
                let mut plus = p.clone();
                plus.data[i] += h;
                let mut minus = p.clone();
                minus.data[i] -= h;
                let fd = (probe(&plus, &x, &up) - probe(&minus, &x, &up)) / (2.0 * h);
                assert!(rel_err(g.params[i], fd) < 1e-5, "param {i}: {} vs {fd}", g.params[i]);
            }
            for i in 0..x.len() {
                let mut plus = x.clone();
                plus[i] += h;
                let mut minus = x.clone();
                minus[i] -= h;
                let fd = (probe(&p, &plus, &up) - probe(&p, &minus, &up)) / (2.0 * h);
                assert!(rel_err(g.input[i], fd) < 1e-5, "input {i}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = MlpParams::new(&[3, 4, 4, 5], 2).unwrap();
        let x = DMatrix::from_element(3, 6, 0.4);
        let g = p.backward(&p.forward_cached(&x).unwrap(), &DMatrix::zeros(5, 6)).unwrap();
        assert!(g.params.iter().all(|v| *v == 0.0));
        assert!(p.backward(&p.forward_cached(&x).unwrap(), &DMatrix::zeros(4, 6)).is_err());
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let p = MlpParams::new(&[3, 8, 8, 5], 3).unwrap();
        let mut rng = seed::rng(9);
        let x = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let up = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let whole = p.backward(&p.forward_cached(&x).unwrap(), &up).unwrap();
        let mut summed = vec![0.0; p.len()];
        for c in 0..5 {
            let xc = x.columns(c, 1).into_owned();
            let uc = up.columns(c, 1).into_owned();
            let g = p.backward(&p.forward_cached(&xc).unwrap(), &uc).unwrap();
            for (s, v) in summed.iter_mut().zip(g.params) {
                *s += v;
            }
        }
        for (a, b) in whole.params.iter().zip(summed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_recon_examples() {
        let full = Arc::new(electrostatic_protocol(90, 10_000, 1).unwrap());
        let spec = BasisSpec::default();
        // Band-limited input on the full protocol is reproduced.
        let coeffs = DVector::from_fn(15, |i, _| ((i * 5) % 7) as f64 / 7.0 - 0.3);
        let b = shbasis::evaluate(spec, full.directions());
        let s = SignalVector::new(&b * coeffs, full.clone()).unwrap();
        let out = linear_recon(&s, &full, spec, 1e-12).unwrap();
        assert!((out.values() - s.values()).amax() < 1e-8);

        // Constant and zero inputs, with an underdetermined sparse protocol.
        let q = Arc::new(random_protocol(6, 3).unwrap());
        let c = SignalVector::new(DVector::from_element(6, 0.42), q.clone()).unwrap();
        let out = linear_recon(&c, &full, spec, DEFAULT_LINEAR_RIDGE).unwrap();
        assert!(out.values().iter().all(|v| (v - 0.42).abs() < 1e-8));
        let z = SignalVector::new(DVector::zeros(6), q.clone()).unwrap();
        assert_eq!(linear_recon(&z, &full, spec, DEFAULT_LINEAR_RIDGE).unwrap().values().amax(), 0.0);
        assert!(matches!(linear_recon(&z, &full, spec, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv(&DMatrix::from_element(3, 12, 0.7), 4, 3).unwrap(), 0.0);
        let img = DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(tv(&img, 2, 2).unwrap(), 2.0);
        assert!(tv(&img, 3, 2).is_err());
    }

    proptest! {
        #[test]
        fn tv_properties(
            a in proptest::collection::vec(-2.0..2.0f64, 24),
            b in proptest::collection::vec(-2.0..2.0f64, 24),
            alpha in -5.0..5.0f64,
        ) {
            let x = DMatrix::from_vec(2, 12, a);
            let y = DMatrix::from_vec(2, 12, b);
            let tx = tv(&x, 4, 3).unwrap();
            let ty = tv(&y, 4, 3).unwrap();
            prop_assert!(tx >= 0.0);
            prop_assert!(tv(&(&x + &y), 4, 3).unwrap() <= tx + ty + 1e-12);
            let scaled = tv(&(&x * alpha), 4, 3).unwrap();
            prop_assert!((scaled - alpha.abs() * tx).abs() <= 1e-12 * tx.max(1.0));
        }
    }

    #[test]
    fn loss_examples() {
        let x = DMatrix::from_fn(3, 16, |i, j| ((i + 2 * j) % 5) as f64 * 0.1);
        let cfg = LossConfig::new(0.01).unwrap();
        let (l, _) = loss(&x, &x, 4, 4, &cfg).unwrap();
        assert!((l - 0.01 * tv(&x, 4, 4).unwrap()).abs() < 1e-15);

        let shifted = x.map(|v| v + 0.5);
        let (l, _) = loss(&shifted, &x, 4, 4, &LossConfig::new(0.0).unwrap()).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        assert!(loss(&shifted, &x, 8, 2, &cfg).is_ok());
        assert!(loss(&shifted.columns(0, 8).into_owned(), &x, 4, 4, &cfg).is_err());
        assert!(LossConfig::new(-1.0).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // Residuals and neighbor differences are kept at least 1e-3 away from zero.
        let (w, h, c) = (4, 3, 2);
        let x = DMatrix::from_fn(c, w * h, |i, j| 0.1 * i as f64 + 0.37 * j as f64);
        let xhat = DMatrix::from_fn(c, w * h, |i, j| {
            x[(i, j)] + if (i + j) % 2 == 0 { 0.05 } else { -0.07 } + 0.011 * j as f64
        });
        let cfg = LossConfig::new(0.3).unwrap();
        let (_, g) = loss(&xhat, &x, w, h, &cfg).unwrap();
        let step = 1e-6;
        for i in 0..xhat.len() {
            let mut plus = xhat.clone();
            plus[i] += step;
            let mut minus = xhat.clone();
            minus[i] -= step;
            let fd = (loss(&plus, &x, w, h, &cfg).unwrap().0 - loss(&minus, &x, w, h, &cfg).unwrap().0)
                / (2.0 * step);
            assert!(rel_err(g[i], fd) < 1e-4, "element {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let mut rng = seed::rng(3);
        for _ in 0..20 {
            let x = DMatrix::from_fn(2, 9, |_, _| rng.random_range(0.0..1.0));
            let y = DMatrix::from_fn(2, 9, |_, _| rng.random_range(0.0..1.0));
            assert!(loss(&x, &y, 3, 3, &LossConfig::default()).unwrap().0 >= 0.0);
        }
    }
}
