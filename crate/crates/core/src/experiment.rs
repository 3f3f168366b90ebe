//! The comparison matrix: sampling methods × sample counts × seeds.
//!
//! Every cell trains one reconstructor on the training split at `train_b` and
//! scores it on the test split at each evaluation b-value. Cells are
//! independent; rows come back sorted by `(method, n, seed, b)` whatever order
//! the cells ran in.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::summarize;
use crate::phantom::{Dataset, Split};
use crate::train::{evaluate, train_joint, EvalOptions, SamplingMode, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchMatrix {
    pub methods: Vec<SamplingMode>,
    pub ns: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train_b: f64,
    pub eval_bs: Vec<f64>,
    /// Shared training settings; `n`, `mode` and `seed` are overwritten per cell.
    pub template: TrainConfig,
}

impl Default for BenchMatrix {
    fn default() -> Self {
        Self {
            methods: SamplingMode::ALL.to_vec(),
            ns: vec![3, 6, 9],
            seeds: vec![1, 2, 3],
            train_b: 1000.0,
            eval_bs: vec![1000.0],
            template: TrainConfig::default(),
        }
    }
}

/// One matrix cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchCell {
    pub method: SamplingMode,
    pub n: usize,
    pub seed: u64,
}

impl BenchMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.ns.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "bench matrix needs at least one method, one n and one seed".into(),
            ));
        }
        if self.eval_bs.is_empty() {
            return Err(Error::InvalidArgument("bench matrix needs an evaluation b-value".into()));
        }
        for cell in self.cells() {
            self.cell_config(&cell).validate()?;
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<BenchCell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &n in &self.ns {
                for &seed in &self.seeds {
                    out.push(BenchCell { method, n, seed });
                }
            }
        }
        out
    }

    pub fn cell_config(&self, cell: &BenchCell) -> TrainConfig {
        TrainConfig {
            n: cell.n,
            mode: cell.method,
            seed: cell.seed,
            ..self.template.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: SamplingMode,
    pub n: usize,
    pub seed: u64,
    pub bvalue: f64,
    /// Acceleration factor: full directions over sampled directions.
    pub af: f64,
    pub count: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

impl BenchRow {
    fn key(&self) -> (SamplingMode, usize, u64, u64) {
        (self.method, self.n, self.seed, self.bvalue.to_bits())
    }
}

pub fn sort_rows(rows: &mut [BenchRow]) {
    rows.sort_by_key(|r| r.key());
}

/// Trains and scores a single cell.
pub fn run_cell(matrix: &BenchMatrix, dataset: &Dataset, cell: &BenchCell) -> Result<Vec<BenchRow>> {
    let cfg = matrix.cell_config(cell);
    let train = dataset.images_at(Split::Train, matrix.train_b);
    let val = dataset.images_at(Split::Val, matrix.train_b);
    if train.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset has no training phantoms at b = {}",
            matrix.train_b
        )));
    }
    let model = train_joint(&cfg, &train, &val, &dataset.protocol, None)?;
    let mut rows = Vec::with_capacity(matrix.eval_bs.len());
    for &b in &matrix.eval_bs {
        let test = dataset.images_at(Split::Test, b);
        if test.is_empty() {
            return Err(Error::InvalidArgument(format!("dataset has no test phantoms at b = {b}")));
        }
        let records = evaluate(&model, &test, &EvalOptions::default())?;
        let s = summarize(&records).pop().expect("one group per b");
        rows.push(BenchRow {
            method: cell.method,
            n: cell.n,
            seed: cell.seed,
            bvalue: b,
            af: model.acceleration(),
            count: s.count,
            psnr_mean: s.psnr_mean,
            psnr_std: s.psnr_std,
            ssim_mean: s.ssim_mean,
            ssim_std: s.ssim_std,
        });
    }
    Ok(rows)
}

/// Runs every cell in order, reporting each one before it starts.
pub fn run_matrix(
    matrix: &BenchMatrix,
    dataset: &Dataset,
    mut progress: impl FnMut(&BenchCell),
) -> Result<Vec<BenchRow>> {
    matrix.validate()?;
    let mut rows = Vec::new();
    for cell in matrix.cells() {
        progress(&cell);
        rows.extend(run_cell(matrix, dataset, &cell)?);
    }
    sort_rows(&mut rows);
    Ok(rows)
}

pub const BENCH_CSV_HEADER: &str =
    "version,method,n,seed,b,af,count,psnr_mean,psnr_std,ssim_mean,ssim_std";

/// CSV with one row per cell and evaluation b, each stamped with `version`.
pub fn bench_csv(rows: &[BenchRow], version: &str) -> String {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in &sorted {
        out.push_str(&format!(
            "{version},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.method, r.n, r.seed, r.bvalue, r.af, r.count, r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std
        ));
    }
    out
}

/// Seed-averaged `(psnr, ssim)` per `(method, n)` at one b-value.
pub fn cell_means(rows: &[BenchRow], b: f64) -> BTreeMap<(SamplingMode, usize), (f64, f64)> {
    let mut acc: BTreeMap<(SamplingMode, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.bvalue == b) {
        let e = acc.entry((r.method, r.n)).or_insert((0.0, 0.0, 0));
        e.0 += r.psnr_mean;
        e.1 += r.ssim_mean;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(k, (p, s, c))| (k, (p / c as f64, s / c as f64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_dataset, DatasetSpec};
    use crate::sphere::electrostatic_protocol;
    use std::sync::Arc;

    fn row(method: SamplingMode, n: usize, seed: u64, b: f64, psnr: f64) -> BenchRow {
        BenchRow {
            method,
            n,
            seed,
            bvalue: b,
            af: 90.0 / n as f64,
            count: 1,
            psnr_mean: psnr,
            psnr_std: 0.0,
            ssim_mean: psnr / 100.0,
            ssim_std: 0.0,
        }
    }

    #[test]
    fn full_matrix_has_27_cells() {
        assert_eq!(BenchMatrix::default().cells().len(), 27);
    }

    #[test]
    fn empty_axes_are_rejected() {
        for m in [
            BenchMatrix { seeds: vec![], ..Default::default() },
            BenchMatrix { ns: vec![], ..Default::default() },
            BenchMatrix { methods: vec![], ..Default::default() },
            BenchMatrix { eval_bs: vec![], ..Default::default() },
        ] {
            assert!(m.validate().is_err());
        }
    }

    #[test]
    fn csv_is_sorted_and_order_insensitive() {
        let a = vec![
            row(SamplingMode::UniformFrozen, 3, 1, 1000.0, 30.0),
            row(SamplingMode::Learned, 6, 2, 2000.0, 31.0),
            row(SamplingMode::Learned, 6, 2, 1000.0, 32.0),
            row(SamplingMode::Learned, 3, 1, 1000.0, 29.0),
        ];
        let mut b = a.clone();
        b.reverse();
        let csv = bench_csv(&a, "0.1.0");
        assert_eq!(csv, bench_csv(&b, "0.1.0"));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], BENCH_CSV_HEADER);
        assert!(lines[1].starts_with("0.1.0,learned,3,1,1000,30,"));
        assert!(lines[2].starts_with("0.1.0,learned,6,2,1000,"));
        assert!(lines[4].starts_with("0.1.0,uniform-frozen,3,"));
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
    }

    #[test]
    fn cell_means_average_over_seeds() {
        let rows = vec![
            row(SamplingMode::Learned, 3, 1, 1000.0, 30.0),
            row(SamplingMode::Learned, 3, 2, 1000.0, 32.0),
            row(SamplingMode::Learned, 3, 2, 2000.0, 10.0),
        ];
        let m = cell_means(&rows, 1000.0);
        assert_eq!(m.len(), 1);
        assert!((m[&(SamplingMode::Learned, 3)].0 - 31.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_matrix_runs_end_to_end() {
        let full = Arc::new(electrostatic_protocol(20, 500, 1).unwrap());
        let spec = DatasetSpec {
            count: 6,
            width: 8,
            height: 8,
            bvalues: vec![1000.0, 2000.0],
            ..Default::default()
        };
        let data = make_dataset(&spec, &full).unwrap();
        let matrix = BenchMatrix {
            ns: vec![3],
            seeds: vec![1, 2],
            eval_bs: vec![1000.0, 2000.0],
            template: TrainConfig { epochs: 2, hidden: 8, electrostatic_iterations: 200, ..Default::default() },
            ..Default::default()
        };
        let mut seen = 0;
        let rows = run_matrix(&matrix, &data, |_| seen += 1).unwrap();
        assert_eq!(seen, 6);
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.psnr_mean.is_finite() && r.af == 20.0 / 3.0));
    }
}
