//! Ablation and convergence experiment drivers shared by the CLI and the
//! acceptance gate.

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{train, CapsModel, EpochRecord};

#[derive(Debug, Clone, Copy)]
pub struct AblationRow {
    pub name: &'static str,
    pub rw: bool,
    pub crf: bool,
    pub corr: bool,
}

/// The three configurations compared by `ablate`, weakest first.
pub const ROWS: [AblationRow; 3] = [
    AblationRow { name: "baseline", rw: false, crf: false, corr: false },
    AblationRow { name: "rw_crf", rw: true, crf: true, corr: false },
    AblationRow { name: "rw_crf_corr", rw: true, crf: true, corr: true },
];

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: String,
    pub seed: u64,
    pub test_map: f64,
    pub curve: Vec<EpochRecord>,
}

/// Deterministic 5:2 head/tail split (500/200 on a 700-sample manifest).
pub fn split_dataset(ds: &Dataset) -> (Dataset, Dataset) {
    let train_n = ds.len() * 5 / 7;
    let head: Vec<usize> = (0..train_n).collect();
    let tail: Vec<usize> = (train_n..ds.len()).collect();
    (ds.subset(&head), ds.subset(&tail))
}

/// Train one flag configuration for one seed and evaluate on the test split.
pub fn run_config(
    base: &ModelConfig,
    row: &AblationRow,
    seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<RunResult> {
    let mut cfg = base.clone();
    cfg.rw = row.rw;
    cfg.crf = row.crf;
    cfg.corr = row.corr;
    cfg.seed = seed;
    let mut model = CapsModel::new(cfg)?;
    let curve = train(&mut model, train_set, None, None)?;
    let (report, _) = model.evaluate(test_set)?;
    Ok(RunResult { config: row.name.to_string(), seed, test_map: report.map, curve })
}

pub fn run_ablation(
    base: &ModelConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    seeds: &[u64],
) -> Result<Vec<RunResult>> {
    let mut out = Vec::with_capacity(ROWS.len() * seeds.len());
    for row in &ROWS {
        for &seed in seeds {
            out.push(run_config(base, row, seed, train_set, test_set)?);
        }
    }
    Ok(out)
}

/// One line per (config, seed): final test mAP.
pub fn comparison_csv(results: &[RunResult]) -> String {
    let mut out = String::from("config,seed,test_mAP\n");
    for r in results {
        out.push_str(&format!("{},{},{}\n", r.config, r.seed, r.test_map));
    }
    out
}

/// Per-epoch training curves for every run.
pub fn convergence_csv(results: &[RunResult]) -> String {
    let mut out = String::from("config,seed,epoch,split,mAP,loss,seconds\n");
    for r in results {
        for e in &r.curve {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                r.config, r.seed, e.epoch, e.split, e.map, e.loss, e.seconds
            ));
        }
    }
    out
}

/// Mean test mAP per ablation row, in `ROWS` order.
pub fn row_means(results: &[RunResult]) -> Vec<(String, f64)> {
    ROWS.iter()
        .map(|row| {
            let runs: Vec<&RunResult> = results.iter().filter(|r| r.config == row.name).collect();
            let mean = runs.iter().map(|r| r.test_map).sum::<f64>() / runs.len().max(1) as f64;
            (row.name.to_string(), mean)
        })
        .collect()
}

/// Epochs until a curve first reaches 90% of its plateau (max) mAP.
pub fn epochs_to_90_percent(curve: &[EpochRecord], split: &str) -> Option<usize> {
    let series: Vec<(usize, f64)> = curve
        .iter()
        .filter(|r| r.split == split)
        .map(|r| (r.epoch, r.map))
        .collect();
    let plateau = series.iter().map(|&(_, m)| m).fold(f64::NEG_INFINITY, f64::max);
    series.iter().find(|&&(_, m)| m >= 0.9 * plateau).map(|&(e, _)| e)
}
