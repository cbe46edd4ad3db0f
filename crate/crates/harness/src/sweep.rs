//! Test error as a function of the number of pooled rotations, at a fixed
//! presentation budget.

use std::fmt::Write as _;
use std::path::Path;

use tipool::RotationRange;

use crate::config::{BudgetUnit, Regime, TrainConfig, TransformConfig};
use crate::dataset::{self, Dataset};
use crate::error::{HarnessError, Result};
use crate::io::write_atomic;
use crate::train::Trainer;

pub const SWEEP_HEADER: &str = "phi_count,test_error_pct";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub phi_count: usize,
    pub test_error_pct: f64,
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.4}", r.phi_count, r.test_error_pct);
    }
    out
}

/// How the batch size varies across the counts of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchRule {
    /// Every count uses the base batch size, so larger sets take fewer,
    /// larger optimizer steps.
    Fixed,
    /// Samples per batch scale as 1/|Phi| so every count makes the same
    /// number of presentations per step, and hence the same number of
    /// steps within the budget.
    #[default]
    MatchedSteps,
}

/// `base` retargeted to TI pooling over `count` rotations with an explicit
/// presentation budget.
pub fn sweep_config(base: &TrainConfig, count: usize, budget: u64, rule: BatchRule) -> Result<TrainConfig> {
    let range = match base.transforms {
        TransformConfig::Rotations { range, .. } => range,
        TransformConfig::Explicit { .. } => RotationRange::Full,
    };
    let batch_size = match rule {
        BatchRule::Fixed => base.batch_size,
        BatchRule::MatchedSteps => {
            let per_step = base.batch_size * base.transforms.build()?.len();
            ((per_step as f64 / count as f64).round() as usize).max(1)
        }
    };
    Ok(TrainConfig {
        regime: Regime::Ti,
        transforms: TransformConfig::Rotations { rotations: count, range },
        batch_size,
        budget_unit: BudgetUnit::Presentations,
        presentations: Some(budget),
        eval_every: 0,
        ..base.clone()
    })
}

/// One training run per count, all sharing the budget `base` would spend.
/// Runs write their outputs under `out/phi_<count>` when `out` is set.
pub fn run_sweep(
    base: &TrainConfig,
    data: &Dataset,
    counts: &[usize],
    rule: BatchRule,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one count".into()));
    }
    let budget = base.budget(data.train.len())?;
    counts
        .iter()
        .map(|&count| {
            let cfg = sweep_config(base, count, budget, rule)?;
            let dir = out.map(|o| o.join(format!("phi_{count}")));
            let summary = Trainer::new(cfg)?.run(data, dir.as_deref())?;
            Ok(SweepRow { phi_count: count, test_error_pct: summary.final_test_err_pct })
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-count median over several seeds' sweeps (all over the same counts).
pub fn median_rows(runs: &[Vec<SweepRow>]) -> Vec<SweepRow> {
    let Some(first) = runs.first() else { return Vec::new() };
    first
        .iter()
        .enumerate()
        .map(|(i, r)| SweepRow {
            phi_count: r.phi_count,
            test_error_pct: median(&mut runs.iter().map(|run| run[i].test_error_pct).collect::<Vec<_>>()),
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // ties share the mean of their positions
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = rank;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of the ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn trend(rows: &[SweepRow]) -> f64 {
    let x: Vec<f64> = rows.iter().map(|r| r.phi_count as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.test_error_pct).collect();
    spearman(&x, &y)
}

/// Sweeps once per seed and writes `sweep.csv` (per-count median) plus
/// `sweep_seed<s>.csv` for each seed.
pub fn cmd_sweep_phi(
    base: &TrainConfig,
    data_dir: &Path,
    counts: &[usize],
    seeds: &[u64],
    rule: BatchRule,
) -> Result<Vec<SweepRow>> {
    let data = dataset::load(&base.data, data_dir)?;
    let out = base.out_dir.clone();
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let mut runs = Vec::new();
    for &seed in &seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let rows = run_sweep(&cfg, &data, counts, rule, Some(&out.join(format!("seed_{seed}"))))?;
        write_atomic(&out.join(format!("sweep_seed{seed}.csv")), to_csv(&rows).as_bytes())?;
        runs.push(rows);
    }
    let rows = median_rows(&runs);
    write_atomic(&out.join("sweep.csv"), to_csv(&rows).as_bytes())?;
    Ok(rows)
}
