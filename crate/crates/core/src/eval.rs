//! Accuracy sweeps and CSV reports.
//!
//! Report files start with a `#schema=ssadv-report/1` comment line followed
//! by the header
//! `model_id,norm,eps_train,mode,lambda1,lambda2,eps_test,corruption,severity,accuracy,n_samples,seed`.
//! Robust-accuracy rows leave `corruption` and `severity` empty; corruption
//! rows carry the attack budget (0 for clean) in `eps_test`. Accuracy is a
//! percentage with two decimals. Rows are keyed by every column except
//! `accuracy`; writing a row whose key already exists replaces the old one.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, verify_containment, AttackConfig, Norm};
use crate::data::{CorruptionSet, ImageDataset};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, predict_sup, Network};
use crate::rng::{derive_seed, Stream};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA: &str = "#schema=ssadv-report/1";
pub const DEFAULT_EVAL_STEPS: usize = 20;

/// l2 test grid.
pub const L2_EPS_GRID: [f64; 12] = [
    0.0, 0.01, 0.03, 0.05, 0.07, 0.1, 0.25, 0.5, 0.75, 1.0, 2.0, 3.0,
];

/// l∞ test grid `{0, 1, …, 10}/255`.
pub fn linf_eps_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 255.0).collect()
}

pub fn default_eps_grid(norm: Norm) -> Vec<f64> {
    match norm {
        Norm::L2 => L2_EPS_GRID.to_vec(),
        Norm::Linf => linf_eps_grid(),
    }
}

/// Step size for evaluation attacks: `2ε/K` for l2, `2/255` for l∞.
pub fn eval_alpha(norm: Norm, epsilon: f64, steps: usize) -> f64 {
    match norm {
        Norm::L2 => 2.0 * epsilon / steps.max(1) as f64,
        Norm::Linf => 2.0 / 255.0,
    }
}

fn batches(n: usize, batch_size: usize) -> impl Iterator<Item = Vec<usize>> {
    let b = batch_size.max(1);
    (0..n.div_ceil(b)).map(move |i| (i * b..((i + 1) * b).min(n)).collect())
}

fn percent(correct: usize, n: usize) -> f64 {
    100.0 * correct as f64 / n as f64
}

/// Top-1 accuracy (percent) with the model in its current mode.
pub fn eval_standard<N: Network + ?Sized>(
    model: &N,
    ds: &ImageDataset,
    batch_size: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0;
    for idx in batches(ds.len(), batch_size) {
        let (x, y) = ds.batch(&idx)?;
        let pred = argmax_rows(&predict_sup(model, &x)?);
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(percent(correct, ds.len()))
}

/// Batch size, attack seed and number of random restarts for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub seed: u64,
    /// A sample counts as robust only if it survives every restart.
    pub restarts: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            seed: 0,
            restarts: 1,
        }
    }
}

fn attacked_accuracy<N: Network + ?Sized>(
    model: &N,
    ds: &ImageDataset,
    cfg: &AttackConfig,
    opts: &EvalOptions,
    seed: u64,
) -> Result<f64> {
    if cfg.epsilon == 0.0 {
        return eval_standard(model, ds, opts.batch_size);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0;
    for idx in batches(ds.len(), opts.batch_size) {
        let (x, y) = ds.batch(&idx)?;
        let mut alive = vec![true; y.len()];
        for _ in 0..opts.restarts.max(1) {
            let adv = pgd_attack(model, &x, &y, None, cfg, &mut rng)?;
            verify_containment(&x, &adv.x_adv, cfg.norm, cfg.epsilon)?;
            let pred = argmax_rows(&predict_sup(model, &adv.x_adv)?);
            for (a, (p, t)) in alive.iter_mut().zip(pred.iter().zip(&y)) {
                *a &= p == t;
            }
        }
        correct += alive.iter().filter(|&&a| a).count();
    }
    Ok(percent(correct, ds.len()))
}

fn eval_attack_cfg(base: &AttackConfig, epsilon: f64) -> Result<AttackConfig> {
    if base.use_ss_loss {
        return Err(Error::config(
            "evaluation attacks use the supervised loss only; use_ss_loss must be false",
        ));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::config(format!(
            "test epsilon must be >= 0, got {epsilon}"
        )));
    }
    Ok(AttackConfig {
        epsilon,
        alpha: eval_alpha(base.norm, epsilon, base.steps),
        ..base.clone()
    })
}

/// Robust accuracy for each test budget; `ε = 0` is scored without an
/// attack so it equals the standard accuracy exactly.
pub fn eval_robust<N: Network + ?Sized>(
    model: &N,
    ds: &ImageDataset,
    eps_list: &[f64],
    base: &AttackConfig,
    opts: &EvalOptions,
) -> Result<Vec<(f64, f64)>> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cfgs = eps_list
        .iter()
        .map(|&e| eval_attack_cfg(base, e))
        .collect::<Result<Vec<_>>>()?;
    cfgs.iter()
        .enumerate()
        .map(|(i, cfg)| {
            let s = derive_seed(opts.seed, Stream::Eval, i as u64);
            Ok((cfg.epsilon, attacked_accuracy(model, ds, cfg, opts, s)?))
        })
        .collect()
}

/// Attack every test image once at budget `epsilon`; returns the
/// adversarial set (same labels) and the accuracy on it.
pub fn attack_dataset<N: Network + ?Sized>(
    model: &N,
    ds: &ImageDataset,
    base: &AttackConfig,
    epsilon: f64,
    opts: &EvalOptions,
) -> Result<(ImageDataset, f64)> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cfg = eval_attack_cfg(base, epsilon)?;
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, Stream::Eval, 2000));
    let mut parts = Vec::new();
    let mut correct = 0;
    for idx in batches(ds.len(), opts.batch_size) {
        let (x, y) = ds.batch(&idx)?;
        let x_adv = if cfg.epsilon == 0.0 {
            x.clone()
        } else {
            let adv = pgd_attack(model, &x, &y, None, &cfg, &mut rng)?;
            verify_containment(&x, &adv.x_adv, cfg.norm, cfg.epsilon)?;
            adv.x_adv
        };
        let pred = argmax_rows(&predict_sup(model, &x_adv)?);
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        parts.push(x_adv);
    }
    let images = Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())?;
    let name = format!("{}-{}-eps{epsilon:.5}", ds.name(), cfg.norm);
    let adv = ImageDataset::new(name, images, ds.labels().to_vec(), ds.classes())?;
    Ok((adv, percent(correct, ds.len())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionCell {
    pub corruption: String,
    pub severity: usize,
    pub accuracy: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionEval {
    pub cells: Vec<CorruptionCell>,
    /// Arithmetic mean of the cell accuracies.
    pub mean: f64,
}

/// Accuracy on each corruption set, optionally under a supervised-loss PGD
/// attack of budget `attack.epsilon` applied on top of the corrupted images.
pub fn eval_corruptions<N: Network + ?Sized>(
    model: &N,
    sets: &[CorruptionSet],
    attack: Option<&AttackConfig>,
    opts: &EvalOptions,
) -> Result<CorruptionEval> {
    if sets.is_empty() {
        return Err(Error::config("no corruption sets to evaluate"));
    }
    let mut cells = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let accuracy = match attack {
            Some(base) => {
                let cfg = eval_attack_cfg(base, base.epsilon)?;
                let s = derive_seed(opts.seed, Stream::Eval, 1000 + i as u64);
                attacked_accuracy(model, &set.dataset, &cfg, opts, s)?
            }
            None => eval_standard(model, &set.dataset, opts.batch_size)?,
        };
        cells.push(CorruptionCell {
            corruption: set.name.clone(),
            severity: set.severity,
            accuracy,
            n_samples: set.dataset.len(),
        });
    }
    let mean = cells.iter().map(|c| c.accuracy).sum::<f64>() / cells.len() as f64;
    Ok(CorruptionEval { cells, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub norm: String,
    pub eps_train: f64,
    pub mode: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eps_test: f64,
    pub corruption: Option<String>,
    pub severity: Option<usize>,
    #[serde(serialize_with = "two_decimals")]
    pub accuracy: f64,
    pub n_samples: usize,
    pub seed: u64,
}

fn two_decimals<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.2}"))
}

/// Provenance shared by every row of one evaluated model.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub model_id: String,
    pub norm: Norm,
    pub eps_train: f64,
    pub mode: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
}

impl Provenance {
    pub fn robust_row(&self, eps_test: f64, accuracy: f64, n_samples: usize) -> ReportRow {
        ReportRow {
            model_id: self.model_id.clone(),
            norm: self.norm.name().into(),
            eps_train: self.eps_train,
            mode: self.mode.clone(),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            eps_test,
            corruption: None,
            severity: None,
            accuracy,
            n_samples,
            seed: self.seed,
        }
    }

    pub fn corruption_row(&self, eps_test: f64, cell: &CorruptionCell) -> ReportRow {
        ReportRow {
            corruption: Some(cell.corruption.clone()),
            severity: Some(cell.severity),
            ..self.robust_row(eps_test, cell.accuracy, cell.n_samples)
        }
    }
}

impl ReportRow {
    /// Every column except accuracy, rendered exactly.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.model_id,
            self.norm,
            self.eps_train,
            self.mode,
            self.lambda1,
            self.lambda2,
            self.eps_test,
            self.corruption.as_deref().unwrap_or(""),
            self.severity.map(|s| s.to_string()).unwrap_or_default(),
            self.n_samples,
            self.seed
        )
    }

    /// Everything but the model identity, λ1 and accuracy: rows sharing this
    /// are comparable points of a λ1 curve.
    fn condition(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.norm,
            self.eps_train,
            self.mode,
            self.lambda2,
            self.eps_test,
            self.corruption.as_deref().unwrap_or(""),
            self.severity.map(|s| s.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Add rows, replacing any existing row with the same key.
    pub fn merge(&mut self, rows: impl IntoIterator<Item = ReportRow>) {
        let mut pos: BTreeMap<String, usize> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.key(), i))
            .collect();
        for r in rows {
            match pos.get(&r.key()) {
                Some(&i) => self.rows[i] = r,
                None => {
                    pos.insert(r.key(), self.rows.len());
                    self.rows.push(r);
                }
            }
        }
    }
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

pub fn report_to_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut out = format!("{REPORT_SCHEMA}\n").into_bytes();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(&mut out);
    w.write_record([
        "model_id",
        "norm",
        "eps_train",
        "mode",
        "lambda1",
        "lambda2",
        "eps_test",
        "corruption",
        "severity",
        "accuracy",
        "n_samples",
        "seed",
    ])
    .map_err(|e| csv_error(Path::new("report"), e))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| csv_error(Path::new("report"), e))?;
    }
    drop(w);
    Ok(out)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(bytes.as_slice());
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(|e| csv_error(path, e))?;
    Ok(EvalReport { rows })
}

/// Write `report` to `path`, merging with rows already in the file.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut merged = if path.exists() {
        read_report(path)?
    } else {
        EvalReport::default()
    };
    merged.merge(report.rows.iter().cloned());
    write_atomically(path, &report_to_csv(&merged.rows)?)
}

/// Merge several report files into one.
pub fn merge_reports(inputs: &[&Path], output: &Path) -> Result<EvalReport> {
    let mut merged = EvalReport::default();
    for p in inputs {
        merged.merge(read_report(p)?.rows);
    }
    emit_report(&merged, output)?;
    Ok(merged)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffRow {
    pub row: ReportRow,
    /// Accuracy minus the baseline model's accuracy at the same condition;
    /// `None` when the baseline has no matching row.
    pub diff: Option<f64>,
}

/// Attach `accuracy − baseline accuracy` to each row, matching rows by
/// condition (norm, budgets, mode, λ2, corruption cell).
pub fn diff_vs_baseline(rows: &[ReportRow], baseline_model: &str) -> Vec<DiffRow> {
    let base: BTreeMap<String, f64> = rows
        .iter()
        .filter(|r| r.model_id == baseline_model)
        .map(|r| (r.condition(), r.accuracy))
        .collect();
    rows.iter()
        .map(|r| DiffRow {
            row: r.clone(),
            diff: base.get(&r.condition()).map(|b| r.accuracy - b),
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[DiffRow], path: &Path) -> Result<()> {
    let mut out = format!("{REPORT_SCHEMA}+diff\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record([
            "model_id",
            "norm",
            "eps_train",
            "mode",
            "lambda1",
            "lambda2",
            "eps_test",
            "corruption",
            "severity",
            "accuracy",
            "n_samples",
            "seed",
            "diff_vs_baseline",
        ])
        .map_err(|e| csv_error(path, e))?;
        for d in rows {
            let r = &d.row;
            w.write_record([
                r.model_id.clone(),
                r.norm.clone(),
                r.eps_train.to_string(),
                r.mode.clone(),
                r.lambda1.to_string(),
                r.lambda2.to_string(),
                r.eps_test.to_string(),
                r.corruption.clone().unwrap_or_default(),
                r.severity.map(|s| s.to_string()).unwrap_or_default(),
                format!("{:.2}", r.accuracy),
                r.n_samples.to_string(),
                r.seed.to_string(),
                d.diff.map(|v| format!("{v:.2}")).unwrap_or_default(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    write_atomically(path, &out)
}

/// Difference curves `Acc(λ1) − Acc(λ1 = 0)` per condition, for plotting
/// against λ1 or ε_test. Rows without a λ1 = 0 partner are dropped.
pub fn lambda_difference_curves(rows: &[ReportRow]) -> Vec<(ReportRow, f64)> {
    let zero: BTreeMap<String, f64> = rows
        .iter()
        .filter(|r| r.lambda1 == 0.0)
        .map(|r| (r.condition(), r.accuracy))
        .collect();
    rows.iter()
        .filter_map(|r| {
            zero.get(&r.condition())
                .map(|z| (r.clone(), r.accuracy - z))
        })
        .collect()
}

pub fn write_figure_csv(curves: &[(ReportRow, f64)], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record([
            "norm",
            "eps_train",
            "mode",
            "lambda2",
            "eps_test",
            "corruption",
            "severity",
            "lambda1",
            "accuracy",
            "diff_vs_lambda1_0",
        ])
        .map_err(|e| csv_error(path, e))?;
        for (r, d) in curves {
            w.write_record([
                r.norm.clone(),
                r.eps_train.to_string(),
                r.mode.clone(),
                r.lambda2.to_string(),
                r.eps_test.to_string(),
                r.corruption.clone().unwrap_or_default(),
                r.severity.map(|s| s.to_string()).unwrap_or_default(),
                r.lambda1.to_string(),
                format!("{:.2}", r.accuracy),
                format!("{d:.2}"),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    write_atomically(path, &out)
}
