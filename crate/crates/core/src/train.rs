//! Joint optimization of sampling angles and reconstructor parameters.
//!
//! One step, for each phantom `x` in the batch:
//!
//! ```text
//! C     = pinv(B_N) x            (cached per phantom)
//! S_n   = B_n(theta, phi) C
//! x_hat = R_psi(S_n)
//! L     = mean|x_hat - x| + lambda * TV(x_hat)
//! ```
//!
//! The loss gradient flows back through the network into `S_n` and from there
//! into the angles through `dB_n/dtheta` and `dB_n/dphi`. Angles and network
//! weights are updated together by two Adam optimizers with separate learning
//! rates.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, MetricsRecord, SsimParams, PSNR_CAP_DB};
use crate::phantom::PhantomImage;
use crate::qspace::ShFit;
use crate::recon::{loss, LossConfig, MlpParams, Reconstructor};
use crate::seed;
use crate::shbasis::{self, BasisSpec};
use crate::sphere::{
    electrostatic_protocol, random_protocol, Direction, Protocol,
    DEFAULT_ELECTROSTATIC_ITERATIONS,
};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("non-finite gradient at index {i}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SamplingMode {
    Learned,
    RandomFrozen,
    UniformFrozen,
}

impl SamplingMode {
    pub const ALL: [SamplingMode; 3] = [
        SamplingMode::Learned,
        SamplingMode::RandomFrozen,
        SamplingMode::UniformFrozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Learned => "learned",
            SamplingMode::RandomFrozen => "random-frozen",
            SamplingMode::UniformFrozen => "uniform-frozen",
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sampling mode {s:?}")))
    }
}

/// How the two parameter groups are scheduled within training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateSchedule {
    /// Both groups step on every batch.
    Simultaneous,
    /// Phases that update one group at a time. Not implemented.
    Alternating,
}

impl fmt::Display for UpdateSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateSchedule::Simultaneous => "simultaneous",
            UpdateSchedule::Alternating => "alternating",
        })
    }
}

impl FromStr for UpdateSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simultaneous" => Ok(Self::Simultaneous),
            "alternating" => Ok(Self::Alternating),
            _ => Err(Error::InvalidArgument(format!("unknown update schedule {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n: usize,
    pub epochs: usize,
    pub lr_sampling: f64,
    pub lr_recon: f64,
    pub lambda_tv: f64,
    /// Phantoms per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub mode: SamplingMode,
    pub hidden: usize,
    pub hidden_layers: usize,
    /// SH order used for fitting and resampling.
    pub order: usize,
    pub electrostatic_iterations: usize,
    pub schedule: UpdateSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 3,
            epochs: 50,
            lr_sampling: 1e-3,
            lr_recon: 1e-4,
            lambda_tv: crate::recon::DEFAULT_LAMBDA_TV,
            batch_size: 4,
            seed: 0,
            mode: SamplingMode::Learned,
            hidden: crate::recon::DEFAULT_HIDDEN,
            hidden_layers: 2,
            order: shbasis::DEFAULT_ORDER,
            electrostatic_iterations: DEFAULT_ELECTROSTATIC_ITERATIONS,
            schedule: UpdateSchedule::Simultaneous,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        // Zero rates are allowed so that a run can be checked for being a no-op.
        if !(self.lr_sampling >= 0.0 && self.lr_sampling.is_finite())
            || !(self.lr_recon >= 0.0 && self.lr_recon.is_finite())
        {
            return bad("learning rates must be finite and >= 0".into());
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return bad("batch_size and hidden must be >= 1".into());
        }
        LossConfig::new(self.lambda_tv)?;
        BasisSpec::new(self.order)?;
        if self.schedule == UpdateSchedule::Alternating {
            return bad("alternating update schedule is not implemented".into());
        }
        Ok(())
    }

    pub fn spec(&self) -> BasisSpec {
        BasisSpec::new(self.order).expect("validated order")
    }

    /// Layer widths of the reconstructor for a full protocol of `full` directions.
    pub fn layer_dims(&self, full: usize) -> Vec<usize> {
        let mut dims = vec![self.n];
        dims.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        dims.push(full);
        dims
    }

    /// Starting protocol for this mode: electrostatic for learned and uniform,
    /// hemisphere-uniform random draws otherwise.
    pub fn initial_protocol(&self) -> Result<Protocol> {
        let init_seed = seed::derive(self.seed, "init-protocol");
        let p = match self.mode {
            SamplingMode::RandomFrozen => random_protocol(self.n, init_seed)?,
            _ if self.n == 1 => random_protocol(1, init_seed)?,
            _ => electrostatic_protocol(self.n, self.electrostatic_iterations, init_seed)?,
        };
        Ok(p.with_label(format!("{}-n{}", self.mode, self.n)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr_sampling: f64,
    pub lr_recon: f64,
}

pub const CURVE_CSV_HEADER: &str = "epoch,train_loss,val_loss,lr_sampling,lr_recon";

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for r in curve {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:e},{:e}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr_sampling, r.lr_recon
        ));
    }
    out
}

/// Learned operator: sampling protocol, reconstructor and the run that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub protocol: Protocol,
    pub full_protocol: Arc<Protocol>,
    pub mlp: MlpParams,
    pub config: TrainConfig,
    pub curve: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn n(&self) -> usize {
        self.protocol.len()
    }

    pub fn acceleration(&self) -> f64 {
        self.full_protocol.len() as f64 / self.protocol.len() as f64
    }
}

/// A phantom with its cached SH coefficients on the full protocol.
struct Prepared<'a> {
    image: &'a PhantomImage,
    coeffs: DMatrix<f64>,
}

fn prepare<'a>(images: &'a [PhantomImage], fit: &ShFit) -> Result<Vec<Prepared<'a>>> {
    images
        .iter()
        .map(|image| {
            if !image.protocol.approx_eq(fit.protocol(), 1e-12) {
                return Err(Error::ProtocolMismatch(format!(
                    "phantom on '{}' but training protocol is '{}'",
                    image.protocol.label(),
                    fit.protocol().label()
                )));
            }
            Ok(Prepared {
                image,
                coeffs: fit.coefficients_batch(&image.signals)?,
            })
        })
        .collect()
}

/// Loss and gradients of one batch. Gradients are averaged over the batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub params: Vec<f64>,
    /// Interleaved `[d/dtheta_0, d/dphi_0, d/dtheta_1, ...]`; empty unless requested.
    pub angles: Vec<f64>,
}

fn batch_objective(
    spec: BasisSpec,
    angles: &[Direction],
    mlp: &MlpParams,
    batch: &[&Prepared<'_>],
    cfg: &LossConfig,
    angle_grad: bool,
) -> Result<BatchGradients> {
    let basis = shbasis::evaluate(spec, angles);
    let basis_grad = angle_grad.then(|| shbasis::evaluate_grad(spec, angles));
    let mut params = vec![0.0; mlp.len()];
    let mut angle_g = vec![0.0; if angle_grad { 2 * angles.len() } else { 0 }];
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;

    for item in batch {
        let img = item.image;
        let sparse = &basis * &item.coeffs;
        let cache = mlp.forward_cached(&sparse)?;
        let (value, upstream) = loss(&cache.output, &img.signals, img.width, img.height, cfg)?;
        total += value;
        let g = mlp.backward(&cache, &upstream)?;
        for (acc, v) in params.iter_mut().zip(&g.params) {
            *acc += scale * v;
        }
        if let Some((dt, dp)) = &basis_grad {
            let ds_dt = dt * &item.coeffs;
            let ds_dp = dp * &item.coeffs;
            for i in 0..angles.len() {
                let (mut gt, mut gp) = (0.0, 0.0);
                for v in 0..g.input.ncols() {
                    gt += g.input[(i, v)] * ds_dt[(i, v)];
                    gp += g.input[(i, v)] * ds_dp[(i, v)];
                }
                angle_g[2 * i] += scale * gt;
                angle_g[2 * i + 1] += scale * gp;
            }
        }
    }
    Ok(BatchGradients {
        loss: total * scale,
        params,
        angles: angle_g,
    })
}

/// End-to-end batch loss `mean_x L(R(Q_angles(x)), x)` and its gradients.
pub fn joint_objective(
    spec: BasisSpec,
    angles: &[Direction],
    mlp: &MlpParams,
    images: &[PhantomImage],
    full: &Arc<Protocol>,
    cfg: &LossConfig,
) -> Result<BatchGradients> {
    let fit = ShFit::new(full, spec);
    let prepared = prepare(images, &fit)?;
    let batch: Vec<&Prepared> = prepared.iter().collect();
    batch_objective(spec, angles, mlp, &batch, cfg, true)
}

fn mean_loss(
    spec: BasisSpec,
    angles: &[Direction],
    mlp: &MlpParams,
    set: &[Prepared<'_>],
    cfg: &LossConfig,
) -> Result<f64> {
    let basis = shbasis::evaluate(spec, angles);
    let mut total = 0.0;
    for item in set {
        let out = mlp.forward_batch(&(&basis * &item.coeffs))?;
        total += loss(&out, &item.image.signals, item.image.width, item.image.height, cfg)?.0;
    }
    Ok(total / set.len() as f64)
}

fn canonical_protocol(angles: &[Direction], label: &str) -> Result<Protocol> {
    Protocol::new(angles.to_vec(), label.to_string())
}

/// What the epoch hook sees after every epoch.
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub model: &'a TrainedModel,
    /// Validation loss is the lowest seen so far.
    pub is_best: bool,
}

/// [`train_joint_with`] without an epoch hook.
pub fn train_joint(
    cfg: &TrainConfig,
    train: &[PhantomImage],
    val: &[PhantomImage],
    full: &Arc<Protocol>,
    init: Option<Protocol>,
) -> Result<TrainedModel> {
    train_joint_with(cfg, train, val, full, init, |_| Ok(()))
}

/// Trains the sampling angles and the reconstructor together.
///
/// `init` overrides the mode's default starting protocol. Validation loss falls
/// back to the training loss when `val` is empty. A non-finite loss or gradient
/// aborts with [`Error::Diverged`]; the hook has by then seen the last good epoch.
pub fn train_joint_with(
    cfg: &TrainConfig,
    train: &[PhantomImage],
    val: &[PhantomImage],
    full: &Arc<Protocol>,
    init: Option<Protocol>,
    mut on_epoch: impl FnMut(EpochEvent<'_>) -> Result<()>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.n > full.len() {
        return Err(Error::InvalidArgument(format!(
            "n = {} exceeds the full protocol size {}",
            cfg.n,
            full.len()
        )));
    }
    let spec = cfg.spec();
    let loss_cfg = LossConfig::new(cfg.lambda_tv)?;
    let fit = ShFit::new(full, spec);
    let train_set = prepare(train, &fit)?;
    let val_set = prepare(val, &fit)?;

    let init = match init {
        Some(p) if p.len() != cfg.n => {
            return Err(Error::InvalidArgument(format!(
                "initial protocol has {} directions, config says n = {}",
                p.len(),
                cfg.n
            )))
        }
        Some(p) => p,
        None => cfg.initial_protocol()?,
    };
    let label = init.label().to_string();
    let learn_angles = cfg.mode == SamplingMode::Learned;
    let mut angles: Vec<Direction> = init.directions().to_vec();
    let mut angle_flat: Vec<f64> = angles.iter().flat_map(|d| [d.theta, d.phi]).collect();
    let mut mlp = MlpParams::new(&cfg.layer_dims(full.len()), seed::derive(cfg.seed, "mlp-init"))?;
    let mut adam_recon = Adam::new(mlp.len());
    let mut adam_angles = Adam::new(angle_flat.len());
    let mut shuffle_rng = seed::rng(seed::derive(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            let g = batch_objective(spec, &angles, &mlp, &batch, &loss_cfg, learn_angles)?;
            if !g.loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            epoch_loss += g.loss * chunk.len() as f64;
            adam_recon.step(mlp.as_mut_slice(), &g.params, cfg.lr_recon)?;
            if learn_angles {
                adam_angles.step(&mut angle_flat, &g.angles, cfg.lr_sampling)?;
                for (d, pair) in angles.iter_mut().zip(angle_flat.chunks_exact(2)) {
                    *d = Direction::new(pair[0], pair[1]);
                }
            }
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            mean_loss(spec, &angles, &mlp, &val_set, &loss_cfg)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr_sampling: cfg.lr_sampling,
            lr_recon: cfg.lr_recon,
        });
        let protocol = if learn_angles {
            canonical_protocol(&angles, &label)?
        } else {
            init.clone()
        };
        let model = TrainedModel {
            protocol,
            full_protocol: Arc::clone(full),
            mlp: mlp.clone(),
            config: cfg.clone(),
            curve: curve.clone(),
        };
        let is_best = val_loss < best_val;
        if is_best {
            best_val = val_loss;
        }
        on_epoch(EpochEvent {
            record: curve.last().expect("just pushed"),
            model: &model,
            is_best,
        })?;
        if epoch == cfg.epochs {
            return Ok(model);
        }
    }
    unreachable!("epochs >= 1 is validated")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Overrides the method label (defaults to the model's sampling mode).
    pub method: Option<String>,
    /// Score the ground truth against itself instead of running the reconstructor.
    pub identity: bool,
    pub psnr_cap: f64,
    pub ssim: SsimParams,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            method: None,
            identity: false,
            psnr_cap: PSNR_CAP_DB,
            ssim: SsimParams::default(),
        }
    }
}

/// Per-phantom PSNR and SSIM of `recon` fed with samples at `protocol`.
pub fn evaluate_reconstructor(
    recon: &dyn Reconstructor,
    protocol: &Protocol,
    full: &Arc<Protocol>,
    spec: BasisSpec,
    images: &[PhantomImage],
    method: &str,
    opts: &EvalOptions,
) -> Result<Vec<MetricsRecord>> {
    let fit = ShFit::new(full, spec);
    let prepared = prepare(images, &fit)?;
    let basis = shbasis::evaluate(spec, protocol.directions());
    prepared
        .iter()
        .map(|item| {
            let img = item.image;
            let xhat = if opts.identity {
                img.signals.clone()
            } else {
                recon.reconstruct(&(&basis * &item.coeffs))?
            };
            let peak = img.signals.max();
            Ok(MetricsRecord {
                method: method.to_string(),
                n: protocol.len(),
                bvalue: img.bvalue,
                psnr: psnr(xhat.as_slice(), img.signals.as_slice(), Some(peak), opts.psnr_cap)?,
                ssim: ssim(&xhat, &img.signals, img.width, img.height, &opts.ssim, peak)?,
            })
        })
        .collect()
}

/// Subsamples every phantom with the learned protocol, reconstructs it and scores
/// it against the phantom itself.
pub fn evaluate(
    model: &TrainedModel,
    images: &[PhantomImage],
    opts: &EvalOptions,
) -> Result<Vec<MetricsRecord>> {
    let method = opts
        .method
        .clone()
        .unwrap_or_else(|| model.config.mode.name().to_string());
    evaluate_reconstructor(
        &model.mlp,
        &model.protocol,
        &model.full_protocol,
        model.config.spec(),
        images,
        &method,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::summarize;
    use crate::phantom::{make_phantom, PhantomConfig};
    use crate::sphere::electrostatic_protocol;
    use std::sync::OnceLock;

    fn full30() -> Arc<Protocol> {
        static P: OnceLock<Arc<Protocol>> = OnceLock::new();
        P.get_or_init(|| Arc::new(electrostatic_protocol(30, 3000, 1).unwrap()))
            .clone()
    }

    fn images(count: usize, size: usize, b: f64, band_limited: bool) -> Vec<PhantomImage> {
        let cfg = PhantomConfig {
            band_limit: band_limited.then(BasisSpec::default),
            ..Default::default()
        };
        (0..count)
            .map(|k| make_phantom(size, size, &full30(), b, 100 + k as u64, &cfg).unwrap())
            .collect()
    }

    fn small_config(mode: SamplingMode) -> TrainConfig {
        TrainConfig {
            n: 4,
            epochs: 3,
            hidden: 16,
            batch_size: 2,
            lr_sampling: 1e-2,
            lr_recon: 1e-3,
            electrostatic_iterations: 500,
            seed: 3,
            mode,
            ..Default::default()
        }
    }

    #[test]
    fn adam_first_step_is_lr() {
        // The bias-corrected first step is -lr * g / (|g| + eps).
        let lr = 1e-3;
        for g in [3.0, -0.02, 1e-3, -1e-7] {
            let mut adam = Adam::new(1);
            let mut p = [0.5];
            adam.step(&mut p, &[g], lr).unwrap();
            let moved = p[0] - 0.5;
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-6 * lr, "g={g} moved {moved}");
            if g.abs() >= 1e-2 {
                assert!((moved.abs() - lr).abs() < 1e-6 * lr);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_and_errors() {
        let mut adam = Adam::new(3);
        let mut p = [0.1, -2.0, 7.0];
        for _ in 0..100 {
            adam.step(&mut p, &[0.0; 3], 0.1).unwrap();
        }
        assert_eq!(p, [0.1, -2.0, 7.0]);
        let err = adam.step(&mut p, &[0.0, f64::NAN, 0.0], 0.1).unwrap_err();
        assert!(err.to_string().contains("diverged"));
        assert!(adam.step(&mut p, &[0.0; 2], 0.1).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = Adam::new(2);
            let mut p = [1.0, -1.0];
            let mut trace = vec![];
            for k in 0..50 {
                let g = [p[0] * 0.3 + k as f64 * 0.01, (p[1] - 0.2).sin()];
                adam.step(&mut p, &g, 0.05).unwrap();
                trace.push(p);
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in SamplingMode::ALL {
            assert_eq!(m.name().parse::<SamplingMode>().unwrap(), m);
        }
        assert!("bogus".parse::<SamplingMode>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { n: 0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { lr_recon: -1.0, ..Default::default() },
            TrainConfig { order: 3, ..Default::default() },
            TrainConfig { schedule: UpdateSchedule::Alternating, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert_eq!(TrainConfig::default().layer_dims(90), vec![3, 256, 256, 90]);
    }

    #[test]
    fn frozen_random_keeps_protocol() {
        let data = images(4, 8, 1000.0, false);
        let cfg = small_config(SamplingMode::RandomFrozen);
        let model = train_joint(&cfg, &data, &data[..1], &full30(), None).unwrap();
        assert_eq!(model.protocol, cfg.initial_protocol().unwrap());
        assert_eq!(model.curve.len(), 3);
    }

    #[test]
    fn learned_angles_move_and_stay_canonical() {
        let data = images(4, 8, 1000.0, false);
        let cfg = small_config(SamplingMode::Learned);
        let mut seen = 0;
        let model = train_joint_with(&cfg, &data, &[], &full30(), None, |ev| {
            seen += 1;
            for d in ev.model.protocol.directions() {
                assert!(d.theta.is_finite() && d.phi.is_finite());
                assert!((0.0..=std::f64::consts::FRAC_PI_2).contains(&d.theta));
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 3);
        assert!(!model.protocol.approx_eq(&cfg.initial_protocol().unwrap(), 1e-9));
        assert_eq!(model.curve[0].val_loss, model.curve[0].train_loss);
    }

    #[test]
    fn zero_learning_rates_leave_parameters_at_init() {
        let data = images(3, 8, 1000.0, false);
        let cfg = TrainConfig {
            lr_sampling: 0.0,
            lr_recon: 0.0,
            ..small_config(SamplingMode::Learned)
        };
        let model = train_joint(&cfg, &data, &[], &full30(), None).unwrap();
        let init = MlpParams::new(&cfg.layer_dims(30), seed::derive(cfg.seed, "mlp-init")).unwrap();
        assert_eq!(model.mlp, init);
        assert_eq!(model.protocol, cfg.initial_protocol().unwrap());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = images(4, 8, 1000.0, false);
        let cfg = small_config(SamplingMode::Learned);
        let a = train_joint(&cfg, &data, &data[..2], &full30(), None).unwrap();
        let b = train_joint(&cfg, &data, &data[..2], &full30(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let data = images(2, 8, 1000.0, false);
        let cfg = small_config(SamplingMode::Learned);
        assert!(train_joint(&cfg, &[], &[], &full30(), None).is_err());
        let big = TrainConfig { n: 31, ..cfg.clone() };
        assert!(train_joint(&big, &data, &[], &full30(), None).is_err());
        let wrong = random_protocol(5, 1).unwrap();
        assert!(train_joint(&cfg, &data, &[], &full30(), Some(wrong)).is_err());
        let other = Arc::new(electrostatic_protocol(30, 100, 9).unwrap());
        let foreign: Vec<_> = (0..2)
            .map(|k| make_phantom(8, 8, &other, 1000.0, k, &PhantomConfig::default()).unwrap())
            .collect();
        assert!(matches!(
            train_joint(&cfg, &foreign, &[], &full30(), None),
            Err(Error::ProtocolMismatch(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let data = images(2, 8, 1000.0, false);
        let cfg = TrainConfig { lr_recon: 1e300, ..small_config(SamplingMode::RandomFrozen) };
        let mut epochs_seen = 0;
        let err = train_joint_with(&cfg, &data, &[], &full30(), None, |_| {
            epochs_seen += 1;
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
        assert!(epochs_seen < cfg.epochs);
    }

    /// With the reconstructor frozen, the analytic angle gradient agrees with a
    /// central difference of the end-to-end loss.
    #[test]
    fn angle_gradient_matches_end_to_end_difference() {
        let spec = BasisSpec::default();
        let data = images(2, 8, 1000.0, true);
        let cfg = LossConfig::new(2e-7).unwrap();
        let mlp = MlpParams::new(&[3, 16, 16, 30], 5).unwrap();
        let angles = vec![
            Direction::new(0.7, 0.4),
            Direction::new(1.2, 2.1),
            Direction::new(0.9, 4.0),
        ];
        let g = joint_objective(spec, &angles, &mlp, &data, &full30(), &cfg).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let probe = |delta: f64| {
                let mut a = angles.clone();
                if k % 2 == 0 {
                    a[k / 2].theta += delta;
                } else {
                    a[k / 2].phi += delta;
                }
                joint_objective(spec, &a, &mlp, &data, &full30(), &cfg).unwrap().loss
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let rel = (g.angles[k] - fd).abs() / g.angles[k].abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-3, "angle {k}: {} vs {fd}", g.angles[k]);
        }
    }

    #[test]
    fn identity_evaluation_is_perfect() {
        let data = images(2, 8, 1000.0, false);
        let model = train_joint(&small_config(SamplingMode::UniformFrozen), &data, &[], &full30(), None).unwrap();
        let opts = EvalOptions { identity: true, ..Default::default() };
        let recs = evaluate(&model, &data, &opts).unwrap();
        for r in &recs {
            assert_eq!(r.ssim, 1.0);
            assert_eq!(r.psnr, PSNR_CAP_DB);
            assert_eq!(r.method, "uniform-frozen");
            assert_eq!(r.n, 4);
        }
    }

    #[test]
    fn mean_over_identical_phantoms_equals_single() {
        let one = images(1, 8, 1000.0, false);
        let same = vec![one[0].clone(), one[0].clone(), one[0].clone()];
        let model = train_joint(&small_config(SamplingMode::Learned), &one, &[], &full30(), None).unwrap();
        let single = evaluate(&model, &one, &EvalOptions::default()).unwrap();
        let many = summarize(&evaluate(&model, &same, &EvalOptions::default()).unwrap());
        assert_eq!(many.len(), 1);
        assert!((many[0].psnr_mean - single[0].psnr).abs() < 1e-12);
        assert!((many[0].ssim_mean - single[0].ssim).abs() < 1e-12);
    }

    #[test]
    fn evaluation_rejects_foreign_protocol() {
        let data = images(1, 8, 1000.0, false);
        let model = train_joint(&small_config(SamplingMode::Learned), &data, &[], &full30(), None).unwrap();
        let other = Arc::new(electrostatic_protocol(30, 100, 9).unwrap());
        let foreign = vec![make_phantom(8, 8, &other, 1000.0, 1, &PhantomConfig::default()).unwrap()];
        assert!(matches!(
            evaluate(&model, &foreign, &EvalOptions::default()),
            Err(Error::ProtocolMismatch(_))
        ));
    }
}
