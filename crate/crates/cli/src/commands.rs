use std::path::{Path, PathBuf};

use ssadv_core::config::{ExperimentConfig, Splits};
use ssadv_core::data::{generate_corruptions, load_cifar10c_set, Corruption, ImageDataset};
use ssadv_core::eval::{
    attack_dataset, diff_vs_baseline, emit_report, eval_corruptions, eval_robust,
    lambda_difference_curves, merge_reports, write_figure_csv, write_sweep_csv, EvalReport,
    Provenance, ReportRow,
};
use ssadv_core::model::{build_model, Head, Network, TwoHeadModel};
use ssadv_core::rng::{derive_seed, Stream};
use ssadv_core::tensor::{read_container, write_container};
use ssadv_core::train::{
    adv_train, annotate_checkpoint, checkpoint_train_config, ss_pretrain, RunOptions, TrainOutcome,
    HISTORY_FILE,
};

use crate::{Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ssadv_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CliError>;

pub const SNAPSHOT_FILE: &str = "config.toml";
pub const LAST_FILE: &str = "last.ckpt";
pub const REPORT_FILE: &str = "report.csv";

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out={:?}", o.display().to_string()));
    }
    Ok(ExperimentConfig::load(cli.config.as_deref(), &overrides)?)
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|source| CliError::Io {
        path: cfg.out.clone(),
        source,
    })?;
    cfg.write_snapshot(&cfg.out.join(SNAPSHOT_FILE))?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::Train { resume } => cmd_train(&cfg, resume, false),
        Command::Pretrain { resume } => cmd_train(&cfg, resume, true),
        Command::Attack { checkpoint, output } => cmd_attack(&cfg, &checkpoint, output),
        Command::Eval { checkpoint, report } => cmd_eval(&cfg, &checkpoint, report),
        Command::Sweep {
            checkpoints,
            baseline,
        } => cmd_sweep(&cfg, &checkpoints, baseline),
        Command::Corrupt { eval, attacked } => cmd_corrupt(&cfg, eval.as_deref(), attacked),
        Command::ReportMerge { output, inputs } => {
            let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let merged = merge_reports(&refs, &output)?;
            eprintln!("{} rows -> {}", merged.rows.len(), output.display());
            Ok(())
        }
    }
}

fn cmd_train(cfg: &ExperimentConfig, resume: bool, pretrain: bool) -> Result<()> {
    let Splits { train, val, .. } = cfg.load_data()?;
    prepare_out(cfg)?;
    let task = cfg.ss_task()?;
    let arch = cfg.arch_config(train.image_shape(), train.classes())?;
    let mut model = build_model(&arch, derive_seed(cfg.seed, Stream::Init, 0))?;
    if let Some(p) = &cfg.init_from {
        let skipped = model.load_trunk_from(&read_container(p)?)?;
        if !skipped.is_empty() {
            eprintln!("{}: re-initialized {}", p.display(), skipped.join(", "));
        }
    }
    let tcfg = cfg.train_config()?;
    let opts = RunOptions {
        out_dir: Some(cfg.out.clone()),
        resume,
        verbose: true,
    };
    let TrainOutcome {
        best_epoch, last, ..
    } = if pretrain {
        ss_pretrain(&tcfg, model, &task, &train, val.as_ref(), &opts)?
    } else {
        let t = tcfg.mode.tag.uses_ss().then_some(&task);
        adv_train(&tcfg, model, t, &train, val.as_ref(), &opts)?
    };
    let mut c = last.to_container();
    annotate_checkpoint(
        &mut c,
        &tcfg,
        Some(&task),
        if pretrain { "pretrain" } else { "train" },
    );
    write_container(&cfg.out.join(LAST_FILE), &c)?;
    eprintln!(
        "best epoch {best_epoch}; wrote {}",
        [
            ssadv_core::train::BEST_FILE,
            LAST_FILE,
            HISTORY_FILE,
            SNAPSHOT_FILE
        ]
        .join(", ")
    );
    Ok(())
}

struct Loaded {
    model: TwoHeadModel,
    prov: Provenance,
}

/// Load a checkpoint and check it against the evaluation data; provenance
/// comes from the checkpoint's recorded training config when present.
fn load_for_eval(
    cfg: &ExperimentConfig,
    path: &Path,
    model_id: String,
    data: &ImageDataset,
) -> Result<Loaded> {
    let c = read_container(path)?;
    let model = TwoHeadModel::from_container(&c)?;
    if model.input_shape() != data.image_shape() || model.classes(Head::Sup) != Some(data.classes())
    {
        return Err(CliError::Usage(format!(
            "{}: model expects {:?} inputs and {:?} classes, data has {:?} and {}",
            path.display(),
            model.input_shape(),
            model.classes(Head::Sup),
            data.image_shape(),
            data.classes()
        )));
    }
    let prov = match checkpoint_train_config(&c)? {
        Some(t) => Provenance {
            model_id,
            norm: t.mode.attack.norm,
            eps_train: t.mode.attack.epsilon,
            mode: t.mode.tag.name().into(),
            lambda1: t.mode.lambda1,
            lambda2: t.mode.attack.lambda2,
            seed: cfg.seed,
        },
        None => Provenance {
            model_id,
            norm: cfg.norm()?,
            eps_train: cfg.epsilon,
            mode: cfg.mode.clone(),
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            seed: cfg.seed,
        },
    };
    Ok(Loaded { model, prov })
}

fn robust_rows(
    cfg: &ExperimentConfig,
    loaded: &Loaded,
    test: &ImageDataset,
) -> Result<Vec<ReportRow>> {
    let results = eval_robust(
        &loaded.model,
        test,
        &cfg.eval_eps()?,
        &cfg.eval_attack()?,
        &cfg.eval_options(),
    )?;
    Ok(results
        .into_iter()
        .map(|(eps, acc)| {
            eprintln!("{}  eps {eps:.5}  acc {acc:.2}", loaded.prov.model_id);
            loaded.prov.robust_row(eps, acc, test.len())
        })
        .collect())
}

fn cmd_attack(cfg: &ExperimentConfig, checkpoint: &Path, output: Option<PathBuf>) -> Result<()> {
    let test = cfg.load_data()?.test;
    prepare_out(cfg)?;
    let id = cfg
        .model_id
        .clone()
        .unwrap_or_else(|| checkpoint.display().to_string());
    let loaded = load_for_eval(cfg, checkpoint, id, &test)?;
    let (adv, acc) = attack_dataset(
        &loaded.model,
        &test,
        &cfg.eval_attack()?,
        cfg.epsilon,
        &cfg.eval_options(),
    )?;
    let path = output.unwrap_or_else(|| cfg.out.join("adversarial.ckpt"));
    adv.save(&path)?;
    eprintln!(
        "{}  eps {:.5}  acc {acc:.2}; wrote {}",
        loaded.prov.model_id,
        cfg.epsilon,
        path.display()
    );
    emit_report(
        &EvalReport {
            rows: vec![loaded.prov.robust_row(cfg.epsilon, acc, test.len())],
        },
        &cfg.out.join(REPORT_FILE),
    )?;
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, report: Option<PathBuf>) -> Result<()> {
    let test = cfg.load_data()?.test;
    prepare_out(cfg)?;
    let id = cfg
        .model_id
        .clone()
        .unwrap_or_else(|| checkpoint.display().to_string());
    let loaded = load_for_eval(cfg, checkpoint, id, &test)?;
    let rows = robust_rows(cfg, &loaded, &test)?;
    let path = report.unwrap_or_else(|| cfg.out.join(REPORT_FILE));
    emit_report(&EvalReport { rows }, &path)?;
    Ok(())
}

fn cmd_sweep(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    baseline: Option<String>,
) -> Result<()> {
    let test = cfg.load_data()?.test;
    prepare_out(cfg)?;
    let mut rows = Vec::new();
    for ck in checkpoints {
        let loaded = load_for_eval(cfg, ck, ck.display().to_string(), &test)?;
        rows.extend(robust_rows(cfg, &loaded, &test)?);
    }
    let baseline = baseline.unwrap_or_else(|| checkpoints[0].display().to_string());
    if !rows.iter().any(|r| r.model_id == baseline) {
        return Err(CliError::Usage(format!(
            "baseline {baseline:?} is not among the swept checkpoints"
        )));
    }
    write_sweep_csv(
        &diff_vs_baseline(&rows, &baseline),
        &cfg.out.join("sweep.csv"),
    )?;
    write_figure_csv(
        &lambda_difference_curves(&rows),
        &cfg.out.join("figure_lambda_diff.csv"),
    )?;
    emit_report(&EvalReport { rows }, &cfg.out.join(REPORT_FILE))?;
    Ok(())
}

fn cmd_corrupt(cfg: &ExperimentConfig, eval: Option<&Path>, attacked: bool) -> Result<()> {
    let test = cfg.load_data()?.test;
    prepare_out(cfg)?;
    let mut sets = Vec::new();
    if let Some(c10c) = &cfg.cifar10c_dir {
        for name in &cfg.corruptions {
            for &sev in &cfg.severities {
                sets.push(load_cifar10c_set(c10c, name, sev)?);
            }
        }
        eprintln!("loaded {} CIFAR-10-C sets from {}", sets.len(), c10c.display());
    } else {
        let dir = cfg.out.join("corruptions");
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        for name in &cfg.corruptions {
            let kind = Corruption::parse(name)?;
            for &sev in &cfg.severities {
                let set = generate_corruptions(&test, kind, sev, cfg.seed)?;
                set.dataset.save(&dir.join(format!("{}-{sev}.ckpt", kind.name())))?;
                sets.push(set);
            }
        }
        eprintln!("wrote {} corruption sets to {}", sets.len(), dir.display());
    }
    let Some(ck) = eval else { return Ok(()) };
    let id = cfg
        .model_id
        .clone()
        .unwrap_or_else(|| ck.display().to_string());
    let loaded = load_for_eval(cfg, ck, id, &test)?;
    let mut rows = Vec::new();
    let attack = cfg.eval_attack()?;
    let runs: Vec<Option<&_>> = if attacked {
        vec![None, Some(&attack)]
    } else {
        vec![None]
    };
    for a in runs {
        let res = eval_corruptions(&loaded.model, &sets, a, &cfg.eval_options())?;
        let eps = a.map_or(0.0, |a| a.epsilon);
        eprintln!(
            "{}  eps {eps:.5}  mean corruption acc {:.2}",
            loaded.prov.model_id, res.mean
        );
        rows.extend(res.cells.iter().map(|c| loaded.prov.corruption_row(eps, c)));
    }
    emit_report(&EvalReport { rows }, &cfg.out.join(REPORT_FILE))?;
    Ok(())
}
