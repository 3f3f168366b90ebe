//! Image quality metrics over multi-channel phantom images.
//!
//! Images are `C x V` matrices (one row per diffusion channel, voxels in
//! row-major order) with an explicit width and height.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 100.0;

/// `10 log10(peak^2 / MSE)` over all elements, capped at `cap` when the inputs match.
///
/// `peak` defaults to the maximum of the ground truth `x`.
pub fn psnr(xhat: &[f64], x: &[f64], peak: Option<f64>, cap: f64) -> Result<f64> {
    if xhat.len() != x.len() || x.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "psnr of {} vs {} elements",
            xhat.len(),
            x.len()
        )));
    }
    let peak = peak.unwrap_or_else(|| x.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidArgument(format!("psnr peak must be > 0, got {peak}")));
    }
    let mse = xhat
        .iter()
        .zip(x)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(cap))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b / (total * total));
        }
    }
    w
}

/// Gaussian-weighted SSIM: mean over valid window positions of each channel,
/// then averaged over channels.
pub fn ssim(
    xhat: &DMatrix<f64>,
    x: &DMatrix<f64>,
    width: usize,
    height: usize,
    params: &SsimParams,
    peak: f64,
) -> Result<f64> {
    if xhat.shape() != x.shape() || x.ncols() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "ssim of {:?} vs {:?} on a {width}x{height} grid",
            xhat.shape(),
            x.shape()
        )));
    }
    let win = params.window;
    if win == 0 || width < win || height < win {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} image is smaller than the {win}x{win} window"
        )));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidArgument(format!("ssim peak must be > 0, got {peak}")));
    }
    let weights = gaussian_window(win, params.sigma);
    let c1 = (params.k1 * peak).powi(2);
    let c2 = (params.k2 * peak).powi(2);
    let channels = x.nrows();
    let positions = (width - win + 1) * (height - win + 1);

    let mut total = 0.0;
    for c in 0..channels {
        let mut channel_sum = 0.0;
        for y0 in 0..=(height - win) {
            for x0 in 0..=(width - win) {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let w = weights[dy * win + dx];
                        let v = (y0 + dy) * width + x0 + dx;
                        let (a, b) = (xhat[(c, v)], x[(c, v)]);
                        ma += w * a;
                        mb += w * b;
                        aa += w * a * a;
                        bb += w * b * b;
                        ab += w * a * b;
                    }
                }
                let va = aa - ma * ma;
                let vb = bb - mb * mb;
                let cov = ab - ma * mb;
                channel_sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += channel_sum / positions as f64;
    }
    Ok(total / channels as f64)
}

/// One evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub method: String,
    pub n: usize,
    pub bvalue: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean and sample standard deviation of a set of records sharing method, n and b.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub method: String,
    pub n: usize,
    pub bvalue: f64,
    pub count: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups records by `(method, n, b)` and sorts the groups by that key.
pub fn summarize(records: &[MetricsRecord]) -> Vec<MetricsSummary> {
    let mut keys: Vec<(String, usize, f64)> = Vec::new();
    for r in records {
        let key = (r.method.clone(), r.n, r.bvalue);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    keys.into_iter()
        .map(|(method, n, bvalue)| {
            let group: Vec<&MetricsRecord> = records
                .iter()
                .filter(|r| r.method == method && r.n == n && r.bvalue == bvalue)
                .collect();
            let psnrs: Vec<f64> = group.iter().map(|r| r.psnr).collect();
            let ssims: Vec<f64> = group.iter().map(|r| r.ssim).collect();
            let (psnr_mean, psnr_std) = mean_std(&psnrs);
            let (ssim_mean, ssim_std) = mean_std(&ssims);
            MetricsSummary {
                method,
                n,
                bvalue,
                count: group.len(),
                psnr_mean,
                psnr_std,
                ssim_mean,
                ssim_std,
            }
        })
        .collect()
}

pub const SUMMARY_CSV_HEADER: &str = "method,n,b,psnr_mean,psnr_std,ssim_mean,ssim_std";

pub fn summary_csv_row(s: &MetricsSummary) -> String {
    format!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6}",
        s.method, s.n, s.bvalue, s.psnr_mean, s.psnr_std, s.ssim_mean, s.ssim_std
    )
}

/// Plain-text tables, one per b-value: a row per method, PSNR then SSIM columns per n.
pub fn render_table(summaries: &[MetricsSummary]) -> String {
    let mut bvalues: Vec<f64> = summaries.iter().map(|s| s.bvalue).collect();
    bvalues.sort_by(f64::total_cmp);
    bvalues.dedup();
    let mut out = String::new();
    for b in bvalues {
        let rows: Vec<&MetricsSummary> = summaries.iter().filter(|s| s.bvalue == b).collect();
        let mut ns: Vec<usize> = rows.iter().map(|s| s.n).collect();
        ns.sort_unstable();
        ns.dedup();
        let mut methods: Vec<&str> = Vec::new();
        for r in &rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let name_w = methods.iter().map(|m| m.len()).max().unwrap_or(0).max(7);
        writeln!(out, "b = {b}").unwrap();
        let mut head = format!("{:<name_w$}", "Methods");
        let mut sub = format!("{:<name_w$}", "");
        for metric in ["PSNR", "SSIM"] {
            for n in &ns {
                write!(head, " | {metric:>8}").unwrap();
                write!(sub, " | {:>8}", format!("n={n}")).unwrap();
            }
        }
        writeln!(out, "{head}").unwrap();
        writeln!(out, "{sub}").unwrap();
        writeln!(out, "{}", "-".repeat(head.len())).unwrap();
        for m in methods {
            let mut line = format!("{m:<name_w$}");
            for psnr_col in [true, false] {
                for n in &ns {
                    let cell = rows.iter().find(|s| s.method == m && s.n == *n);
                    let text = match (cell, psnr_col) {
                        (Some(s), true) => format!("{:.2}", s.psnr_mean),
                        (Some(s), false) => format!("{:.4}", s.ssim_mean),
                        (None, _) => "-".to_string(),
                    };
                    write!(line, " | {text:>8}").unwrap();
                }
            }
            writeln!(out, "{line}").unwrap();
        }
        writeln!(out).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{add_noise, make_phantom, PhantomConfig};
    use crate::sphere::electrostatic_protocol;
    use std::sync::Arc;

    #[test]
    fn psnr_examples() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        assert_eq!(psnr(&x, &x, None, PSNR_CAP_DB).unwrap(), 100.0);
        let off: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        let p = psnr(&off, &x, Some(1.0), PSNR_CAP_DB).unwrap();
        assert!((p - 20.0).abs() < 1e-12, "{p}");
        let a = 3.5;
        let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
        let os: Vec<f64> = off.iter().map(|v| v * a).collect();
        let ps = psnr(&os, &xs, Some(a), PSNR_CAP_DB).unwrap();
        assert!((ps - p).abs() < 1e-9);
        assert!(psnr(&x[..3], &x, None, PSNR_CAP_DB).is_err());
        assert!(psnr(&[0.0], &[0.0], None, PSNR_CAP_DB).is_err());
    }

    fn ramp(c: usize, w: usize, h: usize, k: f64) -> DMatrix<f64> {
        DMatrix::from_fn(c, w * h, |i, v| ((v % w) as f64 * 0.05 + (v / w) as f64 * 0.03 + i as f64 * k).sin().abs())
    }

    #[test]
    fn ssim_examples() {
        let p = SsimParams::default();
        let a = ramp(3, 12, 10, 0.2);
        let b = ramp(3, 12, 10, 0.7);
        assert_eq!(ssim(&a, &a, 12, 10, &p, 1.0).unwrap(), 1.0);
        let ab = ssim(&a, &b, 12, 10, &p, 1.0).unwrap();
        let ba = ssim(&b, &a, 12, 10, &p, 1.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..1.0).contains(&ab));
        assert!(ssim(&a, &b, 12, 10, &SsimParams { window: 11, ..p }, 1.0).is_err());
        assert!(ssim(&a, &b, 10, 12, &p, 1.0).is_ok());
        assert!(ssim(&a, &b.columns(0, 100).into_owned(), 12, 10, &p, 1.0).is_err());
    }

    #[test]
    fn independent_noise_has_low_ssim() {
        let full = Arc::new(electrostatic_protocol(30, 2000, 1).unwrap());
        let img = make_phantom(32, 32, &full, 1000.0, 1, &PhantomConfig::default()).unwrap();
        let a = add_noise(&img, 0.5, 1).unwrap();
        let b = add_noise(&img, 0.5, 2).unwrap();
        let peak = img.signals.max();
        let s = ssim(&a.signals, &b.signals, 32, 32, &SsimParams::default(), peak).unwrap();
        assert!(s < 0.5, "ssim {s}");
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let full = Arc::new(electrostatic_protocol(30, 2000, 1).unwrap());
        let img = make_phantom(32, 32, &full, 1000.0, 1, &PhantomConfig::default()).unwrap();
        for seed in 0..3 {
            let mut last = f64::INFINITY;
            for k in 1..=10 {
                let noisy = add_noise(&img, 0.01 * k as f64, seed).unwrap();
                let p = psnr(noisy.signals.as_slice(), img.signals.as_slice(), None, PSNR_CAP_DB).unwrap();
                assert!(p < last);
                last = p;
            }
        }
    }

    #[test]
    fn summary_groups_and_orders() {
        let rec = |m: &str, n, b, p, s| MetricsRecord {
            method: m.into(),
            n,
            bvalue: b,
            psnr: p,
            ssim: s,
        };
        let records = vec![
            rec("random", 3, 1000.0, 30.0, 0.5),
            rec("learned", 3, 1000.0, 32.0, 0.7),
            rec("learned", 3, 1000.0, 34.0, 0.9),
            rec("learned", 6, 2000.0, 35.0, 0.8),
        ];
        let s = summarize(&records);
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].method.as_str(), s[0].n, s[0].count), ("learned", 3, 2));
        assert!((s[0].psnr_mean - 33.0).abs() < 1e-12);
        assert!((s[0].psnr_std - 2f64.sqrt()).abs() < 1e-12);
        let table = render_table(&s);
        assert!(table.contains("b = 1000") && table.contains("b = 2000"));
        assert!(table.contains("n=3"));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
