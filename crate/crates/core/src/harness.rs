//! Experiment orchestration: single runs, lambda sweeps, robustness
//! repeats, and CSV report emission.
//!
//! Every run is fully independent: its RNG streams derive from
//! `base seed + run index`, so a sweep executed serially and one executed
//! on a worker pool produce identical rows.

use crate::config::{LossMode, TrainingConfig};
use crate::data::Dataset;
use crate::model::{evaluate_on, train, Metrics, TrainError, TrainOutcome};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

/// Where runs read their images from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated per run from the run's seed.
    Synthetic,
    /// Loaded once from a CSV file; the run seed only drives the split.
    File(std::path::PathBuf),
}

/// One completed run of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub loss_mode: LossMode,
    pub bits: u8,
    pub accuracy: f64,
    pub entropy_bits: f64,
    pub rate_bits: f64,
    pub compression_ratio: f64,
    pub seed: u64,
    pub runtime_s: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "lambda,loss_mode,bits,accuracy,entropy_bits,huffman_rate_bits,compression_ratio,seed,runtime_s";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.lambda,
            self.loss_mode,
            self.bits,
            self.accuracy,
            self.entropy_bits,
            self.rate_bits,
            self.compression_ratio,
            self.seed,
            self.runtime_s
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Load (or synthesize) the dataset a run trains on.
pub fn load_run_dataset(source: &DataSource, cfg: &TrainingConfig) -> Result<Dataset, TrainError> {
    match source {
        DataSource::Synthetic => Ok(Dataset::synthetic(cfg.synthetic_n, cfg.seed)),
        DataSource::File(path) => {
            Ok(Dataset::from_csv_path(path, crate::data::NUM_CLASSES)?)
        }
    }
}

/// Train + evaluate one configuration; the row's metrics come from the
/// held-out validation split.
pub fn run_single(
    cfg: &TrainingConfig,
    source: &DataSource,
) -> Result<(SweepRow, TrainOutcome, Metrics), TrainError> {
    let started = Instant::now();
    let dataset = load_run_dataset(source, cfg)?;
    let outcome = train(&dataset, cfg)?;
    let (_, val_idx) = dataset.split_indices(cfg.seed);
    let metrics = evaluate_on(&outcome.model, &dataset, &val_idx, cfg.batch_size)?;
    let row = SweepRow {
        lambda: cfg.lambda,
        loss_mode: cfg.loss_mode,
        bits: cfg.bits,
        accuracy: metrics.accuracy,
        entropy_bits: metrics.mean_entropy,
        rate_bits: metrics.mean_rate,
        compression_ratio: metrics.compression_ratio,
        seed: cfg.seed,
        runtime_s: started.elapsed().as_secs_f64(),
    };
    Ok((row, outcome, metrics))
}

/// The lambda x loss-mode grid of a sweep, in row order.
pub fn sweep_grid(cfg: &TrainingConfig) -> Vec<TrainingConfig> {
    let mut grid = Vec::new();
    for mode in &cfg.loss_modes {
        for &lambda in &cfg.lambda_grid {
            let mut run = cfg.clone();
            run.lambda = lambda;
            run.loss_mode = *mode;
            run.seed = cfg.seed.wrapping_add(grid.len() as u64);
            grid.push(run);
        }
    }
    grid
}

/// Run the full grid on up to `jobs` worker threads. Row order and content
/// are independent of `jobs`.
pub fn sweep(
    cfg: &TrainingConfig,
    source: &DataSource,
    jobs: usize,
) -> Result<Vec<SweepRow>, TrainError> {
    let grid = sweep_grid(cfg);
    run_grid(&grid, source, jobs)
}

fn run_grid(
    grid: &[TrainingConfig],
    source: &DataSource,
    jobs: usize,
) -> Result<Vec<SweepRow>, TrainError> {
    let jobs = jobs.max(1).min(grid.len().max(1));
    let results: Mutex<Vec<Option<Result<SweepRow, TrainError>>>> =
        Mutex::new((0..grid.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= grid.len() {
                    break;
                }
                let result = run_single(&grid[i], source).map(|(row, _, _)| row);
                results.lock().unwrap()[i] = Some(result);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every grid slot filled"))
        .collect()
}

/// Mean/std statistics across seeds, plus any per-run failures.
#[derive(Debug)]
pub struct RobustnessReport {
    pub rows: Vec<SweepRow>,
    pub mean: AggregateRow,
    pub std: AggregateRow,
    /// Seeds whose runs failed, with the failure text; excluded from the
    /// statistics.
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub accuracy: f64,
    pub entropy_bits: f64,
    pub rate_bits: f64,
    pub compression_ratio: f64,
}

/// Repeat the same configuration over `k` consecutive seeds.
pub fn robustness(
    cfg: &TrainingConfig,
    source: &DataSource,
    k: usize,
    jobs: usize,
) -> Result<RobustnessReport, TrainError> {
    assert!(k >= 2, "robustness needs at least two runs");
    let grid: Vec<TrainingConfig> = (0..k)
        .map(|i| {
            let mut run = cfg.clone();
            run.seed = cfg.seed.wrapping_add(i as u64);
            run
        })
        .collect();

    let jobs = jobs.max(1).min(k);
    let results: Mutex<Vec<Option<Result<SweepRow, TrainError>>>> =
        Mutex::new((0..k).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= grid.len() {
                    break;
                }
                let result = run_single(&grid[i], source).map(|(row, _, _)| row);
                results.lock().unwrap()[i] = Some(result);
            });
        }
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, slot) in results.into_inner().unwrap().into_iter().enumerate() {
        match slot.expect("every slot filled") {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((grid[i].seed, e.to_string())),
        }
    }
    if rows.is_empty() {
        // All runs failed; surface the first failure.
        return Err(TrainError::Data(crate::data::DataError::Io(format!(
            "all robustness runs failed; first: {}",
            failures[0].1
        ))));
    }
    let mean = aggregate(&rows, |xs| mean(xs));
    let std = aggregate(&rows, |xs| std_dev(xs));
    Ok(RobustnessReport {
        rows,
        mean,
        std,
        failures,
    })
}

fn aggregate(rows: &[SweepRow], f: impl Fn(&[f64]) -> f64) -> AggregateRow {
    let col = |get: fn(&SweepRow) -> f64| -> f64 {
        let xs: Vec<f64> = rows.iter().map(get).collect();
        f(&xs)
    };
    AggregateRow {
        accuracy: col(|r| r.accuracy),
        entropy_bits: col(|r| r.entropy_bits),
        rate_bits: col(|r| r.rate_bits),
        compression_ratio: col(|r| r.compression_ratio),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Robustness CSV: per-seed rows in the sweep schema, then `mean` and
/// `std` rows carrying the aggregates in the metric columns.
pub fn robustness_csv(report: &RobustnessReport) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    let sample = &report.rows[0];
    for (name, agg) in [("mean", &report.mean), ("std", &report.std)] {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},\n",
            sample.lambda,
            sample.loss_mode,
            sample.bits,
            agg.accuracy,
            agg.entropy_bits,
            agg.rate_bits,
            agg.compression_ratio,
            name
        ));
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Average rank over the tie group, 1-based.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Training metrics log as CSV; pre-training rows leave the entropy cells
/// empty.
pub fn metrics_csv(log: &[crate::model::EpochMetrics]) -> String {
    let mut out = String::from(
        "phase,epoch,task_loss,reg_term,entropy_site0,entropy_site1,entropy_site2,val_accuracy\n",
    );
    for m in log {
        let entropies = if m.site_entropy.is_empty() {
            ",,".to_string()
        } else {
            m.site_entropy
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.phase, m.epoch, m.task_loss, m.reg_term, entropies, m.val_accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_perfectly_monotone() {
        let xs = [0.0, 0.01, 0.03, 0.1, 0.3];
        let down = [3.0, 2.5, 2.0, 1.0, 0.5];
        assert_eq!(spearman(&xs, &down), -1.0);
        let up = [0.5, 1.0, 2.0, 2.5, 3.0];
        assert_eq!(spearman(&xs, &up), 1.0);
    }

    #[test]
    fn spearman_handles_ties() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [5.0, 5.0, 2.0, 1.0];
        let rho = spearman(&xs, &ys);
        assert!(rho < -0.9, "rho = {rho}");
    }

    #[test]
    fn spearman_one_inversion() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [5.0, 4.0, 2.0, 3.0, 1.0];
        let rho = spearman(&xs, &ys);
        assert!((-1.0..=-0.8).contains(&rho), "rho = {rho}");
    }

    #[test]
    fn grid_covers_modes_and_lambdas_with_derived_seeds() {
        let cfg = TrainingConfig::default();
        let grid = sweep_grid(&cfg);
        assert_eq!(grid.len(), 10);
        for (i, run) in grid.iter().enumerate() {
            assert_eq!(run.seed, cfg.seed + i as u64);
        }
        assert_eq!(grid[0].lambda, 0.0);
        assert_eq!(grid[0].loss_mode, LossMode::SoftEntropy);
        assert_eq!(grid[9].lambda, 0.3);
        assert_eq!(grid[9].loss_mode, LossMode::Compressibility);
    }

    #[test]
    fn csv_schema_is_stable() {
        let row = SweepRow {
            lambda: 0.1,
            loss_mode: LossMode::SoftEntropy,
            bits: 4,
            accuracy: 0.9,
            entropy_bits: 1.5,
            rate_bits: 1.9,
            compression_ratio: 2.1,
            seed: 1,
            runtime_s: 3.25,
        };
        let csv = sweep_csv(&[row.clone()]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), SWEEP_CSV_HEADER);
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), SWEEP_CSV_HEADER.split(',').count());
        assert_eq!(fields[0], "0.1");
        assert_eq!(fields[1], "soft_entropy");
    }

    #[test]
    fn std_dev_of_identical_values_is_zero() {
        assert_eq!(std_dev(&[0.75, 0.75, 0.75]), 0.0);
    }

    #[test]
    fn sweep_serial_equals_parallel() {
        let cfg = TrainingConfig {
            lambda_grid: vec![0.0, 0.1],
            loss_modes: vec![LossMode::SoftEntropy],
            epochs: 1,
            pretrain_epochs: 1,
            synthetic_n: 60,
            batch_size: 16,
            ..TrainingConfig::default()
        };
        let serial = sweep(&cfg, &DataSource::Synthetic, 1).unwrap();
        let parallel = sweep(&cfg, &DataSource::Synthetic, 4).unwrap();
        assert_eq!(serial.len(), 2);
        for (a, b) in serial.iter().zip(&parallel) {
            // Identical except wall-clock runtime.
            assert_eq!(a.lambda, b.lambda);
            assert_eq!(a.accuracy, b.accuracy);
            assert_eq!(a.entropy_bits, b.entropy_bits);
            assert_eq!(a.rate_bits, b.rate_bits);
            assert_eq!(a.seed, b.seed);
        }
    }

    #[test]
    fn robustness_identical_seeds_zero_std() {
        // k=2 with the same seed twice: wrap the grid manually by using
        // seed derivation with zero offsets is not possible through the
        // public API, so check the aggregate math directly.
        let row = SweepRow {
            lambda: 0.0,
            loss_mode: LossMode::SoftEntropy,
            bits: 4,
            accuracy: 0.5,
            entropy_bits: 2.0,
            rate_bits: 2.2,
            compression_ratio: 1.8,
            seed: 1,
            runtime_s: 1.0,
        };
        let rows = vec![row.clone(), row];
        let std = aggregate(&rows, |xs| std_dev(xs));
        assert_eq!(std.accuracy, 0.0);
        assert_eq!(std.entropy_bits, 0.0);
    }
}
