//! Adversarial training loops.
//!
//! Every epoch draws from its own rng streams (shuffle, augmentation, SS
//! transform, attack) keyed by `(seed, epoch)`, so modes that consume
//! different amounts of randomness in one stream stay aligned in the others,
//! and a resumed run continues exactly where it stopped.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, pgd_attack_head, AttackConfig, SsBatch};
use crate::data::{augment, ImageDataset};
use crate::error::{Error, Result};
use crate::eval::eval_standard;
use crate::model::{argmax_rows, predict_ss, Head, Mode, Network, StatsRecord, TwoHeadModel};
use crate::optim::SgdMomentum;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sstask::{check_head, SsTask};
use crate::tensor::{read_container, write_container, Container, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModeTag {
    T0,
    T1,
    T2,
    T3,
    #[serde(rename = "T_rotonly")]
    TRotOnly,
}

impl ModeTag {
    pub const ALL: [ModeTag; 5] = [ModeTag::T0, ModeTag::T1, ModeTag::T2, ModeTag::T3, ModeTag::TRotOnly];

    pub fn name(self) -> &'static str {
        match self {
            ModeTag::T0 => "T0",
            ModeTag::T1 => "T1",
            ModeTag::T2 => "T2",
            ModeTag::T3 => "T3",
            ModeTag::TRotOnly => "T_rotonly",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown mode {s:?}; expected T0, T1, T2, T3 or T_rotonly")))
    }

    /// Whether a self-supervised batch is formed.
    pub fn uses_ss(self) -> bool {
        self != ModeTag::T0
    }
}

impl fmt::Display for ModeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMode {
    pub tag: ModeTag,
    pub lambda1: f64,
    pub attack: AttackConfig,
}

impl TrainMode {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::config(format!("lambda1 must be finite and >= 0, got {}", self.lambda1)));
        }
        if self.tag == ModeTag::T0 && self.lambda1 > 0.0 {
            return Err(Error::config(format!(
                "mode T0 has no self-supervised loss but lambda1 = {}",
                self.lambda1
            )));
        }
        let wants_ss = self.tag == ModeTag::T3;
        if self.attack.use_ss_loss != wants_ss {
            return Err(Error::config(format!(
                "mode {} contradicts use_ss_loss = {}: only T3 adds the self-supervised loss to the attack",
                self.tag, self.attack.use_ss_loss
            )));
        }
        Ok(())
    }
}

/// `sup + λ1·ss` (T0: `sup` alone).
pub fn compose_loss(tag: ModeTag, lambda1: f64, sup: f32, ss: Option<f32>) -> Result<f32> {
    match (tag, ss) {
        (ModeTag::T0, None) if lambda1 == 0.0 => Ok(sup),
        (ModeTag::T0, None) => Err(Error::config(format!("mode T0 with lambda1 = {lambda1}"))),
        (ModeTag::T0, Some(_)) => Err(Error::config("mode T0 forms no self-supervised loss")),
        (_, None) => Err(Error::config(format!("mode {tag} needs a self-supervised loss"))),
        (_, Some(s)) => Ok(sup + (lambda1 as f32) * s),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub gamma: f64,
    pub milestones: Vec<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            gamma: 0.1,
            milestones: vec![40, 80],
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::config(format!("initial lr must be > 0, got {}", self.initial)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("lr gamma must be > 0, got {}", self.gamma)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "lr milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial * self.gamma.powi(k as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub augment: bool,
    /// Save a resumable state every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            mode,
            augment: true,
            checkpoint_every: 0,
            eval_batch_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> SgdMomentum {
        SgdMomentum::new(self.momentum as f32, self.weight_decay as f32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub sup_loss: Option<f64>,
    pub ss_loss: Option<f64>,
    pub val_ta: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        // 0.1 * 0.1 prints as 0.010000000000000002 otherwise
        let lr = |x: f64| {
            let t = format!("{x:.10}");
            t.trim_end_matches('0').trim_end_matches('.').to_string()
        };
        let mut s = String::from("epoch,lr,sup_loss,ss_loss,val_TA,seconds\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.epoch,
                lr(r.lr),
                opt(r.sup_loss),
                opt(r.ss_loss),
                r.val_ta.map(|x| format!("{x:.2}")).unwrap_or_default(),
                r.seconds
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn batch_indices(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch as u64));
    order
}

/// The tensors one parameter update consumes.
struct UpdateInputs {
    x_sup: Tensor,
    y_sup: Vec<usize>,
    ss: Option<(Tensor, Vec<usize>)>,
    /// Both heads read the same input, so one trunk pass serves both.
    shared: bool,
}

/// Form the SS batch and run the mode's attack. The model is put in eval
/// mode for the attack so normalization statistics stay frozen.
fn attack_inputs<N: Network + ?Sized, R: rand::Rng + ?Sized>(
    model: &mut N,
    mode: &TrainMode,
    task: Option<&SsTask>,
    x: Tensor,
    y: Vec<usize>,
    ss_rng: &mut R,
    attack_rng: &mut R,
) -> Result<UpdateInputs> {
    let ss = match (mode.tag.uses_ss(), task) {
        (false, _) => None,
        (true, Some(t)) => Some(t.apply(&x, ss_rng)?),
        (true, None) => return Err(Error::config(format!("mode {} needs a self-supervised task", mode.tag))),
    };
    let prev = model.mode();
    model.set_mode(Mode::Eval);
    let cfg = &mode.attack;
    let out = (|| -> Result<UpdateInputs> {
        Ok(match mode.tag {
            ModeTag::T0 => {
                let adv = pgd_attack(&*model, &x, &y, None, cfg, attack_rng)?;
                UpdateInputs { x_sup: adv.x_adv, y_sup: y, ss: None, shared: false }
            }
            ModeTag::T1 | ModeTag::T2 | ModeTag::T3 => {
                let (x_ss, y_ss) = ss.expect("formed above");
                let batch = SsBatch {
                    x: &x_ss,
                    labels: &y_ss,
                    perturb: mode.tag != ModeTag::T1,
                };
                let adv = pgd_attack(&*model, &x, &y, Some(batch), cfg, attack_rng)?;
                let ss_in = if mode.tag == ModeTag::T1 {
                    x_ss
                } else {
                    adv.x_ss_adv.expect("perturbed batch returned")
                };
                UpdateInputs { x_sup: adv.x_adv, y_sup: y, ss: Some((ss_in, y_ss)), shared: false }
            }
            ModeTag::TRotOnly => {
                let (x_ss, y_ss) = ss.expect("formed above");
                let adv = pgd_attack(&*model, &x_ss, &y, None, cfg, attack_rng)?;
                UpdateInputs { x_sup: adv.x_adv.clone(), y_sup: y, ss: Some((adv.x_adv, y_ss)), shared: true }
            }
        })
    })();
    model.set_mode(prev);
    out
}

/// One training-mode forward/backward and SGD step. Running statistics are
/// updated from the supervised-branch batch only.
fn update<N: Network + ?Sized>(
    model: &mut N,
    inputs: &UpdateInputs,
    mode: &TrainMode,
    opt: &mut SgdMomentum,
    lr: f32,
) -> Result<(f32, Option<f32>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true)?;
    let mut sup_stats = StatsRecord::default();
    let xs = g.constant(inputs.x_sup.clone())?;
    let feats = model.features(&mut g, &p, xs, Mode::Train, &mut sup_stats)?;
    let sup_logits = model.head(&mut g, &p, feats, Head::Sup)?;
    let sup = g.cross_entropy_mean(sup_logits, &inputs.y_sup)?;
    let (total, ss) = match &inputs.ss {
        None => (sup, None),
        Some((x_ss, y_ss)) => {
            let f = if inputs.shared {
                feats
            } else {
                let xv = g.constant(x_ss.clone())?;
                model.features(&mut g, &p, xv, Mode::Train, &mut StatsRecord::default())?
            };
            let logits = model.head(&mut g, &p, f, Head::Ss)?;
            let ss = g.cross_entropy_mean(logits, y_ss)?;
            let weighted = g.scale(ss, mode.lambda1 as f32)?;
            (g.add(sup, weighted)?, Some(ss))
        }
    };
    g.backward(total)?;
    let grads = p.grads(&g);
    opt.step(model.params_mut(), &grads, lr)?;
    model.commit_stats(&sup_stats);
    Ok((g.value(sup).item(), ss.map(|v| g.value(v).item())))
}

/// Mean per-batch losses of one epoch, weighted by batch size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLosses {
    pub sup: Option<f64>,
    pub ss: Option<f64>,
}

pub fn train_epoch<N: Network + ?Sized>(
    model: &mut N,
    data: &ImageDataset,
    cfg: &TrainConfig,
    task: Option<&SsTask>,
    opt: &mut SgdMomentum,
    epoch: usize,
) -> Result<EpochLosses> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let lr = cfg.schedule.lr_at(epoch) as f32;
    let e = epoch as u64;
    let mut aug_rng = stream_rng(cfg.seed, Stream::Augment, e);
    let mut ss_rng = stream_rng(cfg.seed, Stream::SsTransform, e);
    let mut attack_rng = stream_rng(cfg.seed, Stream::Attack, e);
    let (mut sup_sum, mut ss_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
    model.set_mode(Mode::Train);
    for idx in batch_indices(&shuffled(data.len(), cfg.seed, epoch), cfg.batch_size) {
        let (x, y) = data.batch(idx)?;
        let x = augment(&x, &mut aug_rng, cfg.augment)?;
        let inputs = attack_inputs(model, &cfg.mode, task, x, y, &mut ss_rng, &mut attack_rng)?;
        let (sup, ss) = update(model, &inputs, &cfg.mode, opt, lr)?;
        sup_sum += sup as f64 * idx.len() as f64;
        ss_sum += ss.unwrap_or(0.0) as f64 * idx.len() as f64;
        seen += idx.len();
    }
    Ok(EpochLosses {
        sup: Some(sup_sum / seen as f64),
        ss: cfg.mode.tag.uses_ss().then(|| ss_sum / seen as f64),
    })
}

/// Self-supervised adversarial pre-training epoch: the attacked batch is
/// `T(X)` with labels `y_SS` through the SS head, and the loss is `L_SS` only.
pub fn pretrain_epoch<N: Network + ?Sized>(
    model: &mut N,
    data: &ImageDataset,
    cfg: &TrainConfig,
    task: &SsTask,
    opt: &mut SgdMomentum,
    epoch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let lr = cfg.schedule.lr_at(epoch) as f32;
    let e = epoch as u64;
    let mut aug_rng = stream_rng(cfg.seed, Stream::Augment, e);
    let mut ss_rng = stream_rng(cfg.seed, Stream::SsTransform, e);
    let mut attack_rng = stream_rng(cfg.seed, Stream::Attack, e);
    let (mut sum, mut seen) = (0.0f64, 0usize);
    for idx in batch_indices(&shuffled(data.len(), cfg.seed, epoch), cfg.batch_size) {
        let (x, _) = data.batch(idx)?;
        let x = augment(&x, &mut aug_rng, cfg.augment)?;
        let (x_ss, y_ss) = task.apply(&x, &mut ss_rng)?;
        model.set_mode(Mode::Eval);
        let adv = pgd_attack_head(&*model, &x_ss, &y_ss, Head::Ss, &cfg.mode.attack, &mut attack_rng);
        model.set_mode(Mode::Train);
        let adv = adv?;

        let mut g = Graph::new();
        let p = model.bind(&mut g, true)?;
        let mut stats = StatsRecord::default();
        let xv = g.constant(adv.x_adv)?;
        let logits = model.logits(&mut g, &p, xv, Head::Ss, Mode::Train, &mut stats)?;
        let loss = g.cross_entropy_mean(logits, &y_ss)?;
        g.backward(loss)?;
        let grads = p.grads(&g);
        opt.step(model.params_mut(), &grads, lr)?;
        model.commit_stats(&stats);
        sum += g.value(loss).item() as f64 * idx.len() as f64;
        seen += idx.len();
    }
    Ok(sum / seen as f64)
}

/// Accuracy (percent) of the SS head on `T(X)` with a fixed transform draw.
pub fn eval_ss_accuracy<N: Network + ?Sized>(model: &N, ds: &ImageDataset, task: &SsTask, batch_size: usize, seed: u64) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = stream_rng(seed, Stream::Eval, u64::MAX);
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = ds.batch(chunk)?;
        let (x_ss, y_ss) = task.apply(&x, &mut rng)?;
        let pred = argmax_rows(&predict_ss(model, &x_ss)?);
        correct += pred.iter().zip(&y_ss).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Where and how often a run is checkpointed.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `state.ckpt`, `best.ckpt` and `history.csv`.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/state.ckpt` when it exists.
    pub resume: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub best: TwoHeadModel,
    pub best_epoch: usize,
    pub last: TwoHeadModel,
    pub history: TrainHistory,
}

pub const STATE_FILE: &str = "state.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RunKind {
    Supervised,
    Pretrain,
}

impl RunKind {
    fn name(self) -> &'static str {
        match self {
            RunKind::Supervised => "train",
            RunKind::Pretrain => "pretrain",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    kind: String,
    next_epoch: usize,
    best_epoch: Option<usize>,
    best_score: Option<f64>,
    history: TrainHistory,
    config: TrainConfig,
}

/// Attach the run's provenance to a model checkpoint.
pub fn annotate_checkpoint(c: &mut Container, cfg: &TrainConfig, task: Option<&SsTask>, kind: &str) {
    c.metadata.insert("kind".into(), kind.into());
    c.metadata.insert("train_config".into(), serde_json::to_value(cfg).expect("config serializes"));
    if let Some(t) = task {
        c.metadata.insert("ss_task".into(), serde_json::to_value(t).expect("task serializes"));
    }
}

/// Self-supervised task recorded in a checkpoint, if any.
pub fn checkpoint_task(c: &Container) -> Result<Option<SsTask>> {
    c.metadata
        .get("ss_task")
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| Error::format("checkpoint ss_task", e.to_string())))
        .transpose()
}

/// Training configuration recorded in a checkpoint, if any.
pub fn checkpoint_train_config(c: &Container) -> Result<Option<TrainConfig>> {
    c.metadata
        .get("train_config")
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| Error::format("checkpoint train_config", e.to_string())))
        .transpose()
}

struct RunState {
    model: TwoHeadModel,
    opt: SgdMomentum,
    next_epoch: usize,
    best: Option<(usize, f64, TwoHeadModel)>,
    history: TrainHistory,
}

fn save_state(path: &Path, st: &RunState, cfg: &TrainConfig, task: Option<&SsTask>, kind: RunKind) -> Result<()> {
    let mut c = st.model.to_container();
    annotate_checkpoint(&mut c, cfg, task, "state");
    let meta = ResumeMeta {
        kind: kind.name().into(),
        next_epoch: st.next_epoch,
        best_epoch: st.best.as_ref().map(|b| b.0),
        best_score: st.best.as_ref().map(|b| b.1),
        history: st.history.clone(),
        config: cfg.clone(),
    };
    c.metadata.insert("resume".into(), serde_json::to_value(&meta).expect("meta serializes"));
    for (p, v) in st.model.params().iter().zip(st.opt.velocity()) {
        c.push(format!("velocity/{}", p.name), Tensor::new([v.len()], v.clone())?);
    }
    if let Some((_, _, best)) = &st.best {
        for (name, t) in best.to_container().arrays {
            c.push(format!("best/{name}"), t);
        }
    }
    let tmp = path.with_extension("tmp");
    write_container(&tmp, &c)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_state(path: &Path, cfg: &TrainConfig, kind: RunKind) -> Result<RunState> {
    let c = read_container(path)?;
    let meta: ResumeMeta = c
        .metadata
        .get("resume")
        .cloned()
        .ok_or_else(|| Error::format(path.display().to_string(), "not a resumable training state"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format(path.display().to_string(), e.to_string())))?;
    if meta.kind != kind.name() {
        return Err(Error::config(format!(
            "{} holds a {} run, cannot resume it as {}",
            path.display(),
            meta.kind,
            kind.name()
        )));
    }
    if meta.config.mode != cfg.mode || meta.config.seed != cfg.seed || meta.config.batch_size != cfg.batch_size {
        return Err(Error::config(format!(
            "{} was written with a different mode, seed or batch size",
            path.display()
        )));
    }
    let model = TwoHeadModel::from_container(&c)?;
    let mut opt = cfg.optimizer();
    if meta.next_epoch > 0 {
        let v = model
            .params()
            .iter()
            .map(|p| {
                c.get(&format!("velocity/{}", p.name))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::format(path.display().to_string(), format!("missing velocity for {}", p.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        opt.set_velocity(v);
    }
    let best = match (meta.best_epoch, meta.best_score) {
        (Some(e), Some(s)) => {
            let mut bc = Container {
                metadata: c.metadata.clone(),
                arrays: Vec::new(),
            };
            for (name, t) in &c.arrays {
                if let Some(rest) = name.strip_prefix("best/") {
                    bc.push(rest, t.clone());
                }
            }
            Some((e, s, TwoHeadModel::from_container(&bc)?))
        }
        _ => None,
    };
    Ok(RunState {
        model,
        opt,
        next_epoch: meta.next_epoch,
        best,
        history: meta.history,
    })
}

fn run(
    kind: RunKind,
    cfg: &TrainConfig,
    model: TwoHeadModel,
    task: Option<&SsTask>,
    train: &ImageDataset,
    val: Option<&ImageDataset>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(t) = task {
        check_head(&model, t)?;
    }
    let state_path = opts.out_dir.as_ref().map(|d| d.join(STATE_FILE));
    if let Some(d) = &opts.out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut st = match &state_path {
        Some(p) if opts.resume && p.exists() => load_state(p, cfg, kind)?,
        _ => RunState {
            model,
            opt: cfg.optimizer(),
            next_epoch: 0,
            best: None,
            history: TrainHistory::default(),
        },
    };
    let val_seed = derive_seed(cfg.seed, Stream::Eval, 0);
    while st.next_epoch < cfg.epochs {
        let epoch = st.next_epoch;
        let start = Instant::now();
        let (sup_loss, ss_loss) = match kind {
            RunKind::Supervised => {
                let l = train_epoch(&mut st.model, train, cfg, task, &mut st.opt, epoch)?;
                (l.sup, l.ss)
            }
            RunKind::Pretrain => {
                let t = task.expect("pretraining has a task");
                (None, Some(pretrain_epoch(&mut st.model, train, cfg, t, &mut st.opt, epoch)?))
            }
        };
        st.model.set_mode(Mode::Eval);
        let val_ta = match (val, kind) {
            (Some(v), RunKind::Supervised) => Some(eval_standard(&st.model, v, cfg.eval_batch_size)?),
            (Some(v), RunKind::Pretrain) => {
                Some(eval_ss_accuracy(&st.model, v, task.expect("task"), cfg.eval_batch_size, val_seed)?)
            }
            (None, _) => None,
        };
        let record = EpochRecord {
            epoch,
            lr: cfg.schedule.lr_at(epoch),
            sup_loss,
            ss_loss,
            val_ta,
            seconds: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            eprintln!(
                "epoch {epoch:>3}  lr {:.4}  sup {}  ss {}  val {}  {:.1}s",
                record.lr,
                f(record.sup_loss),
                f(record.ss_loss),
                record.val_ta.map(|v| format!("{v:.2}%")).unwrap_or_else(|| "-".into()),
                record.seconds
            );
        }
        // without a validation set the latest epoch wins
        let score = val_ta.unwrap_or(f64::INFINITY);
        let improved = match &st.best {
            None => true,
            Some((_, s, _)) => val_ta.is_none() || score > *s,
        };
        if improved {
            st.best = Some((epoch, score, st.model.clone()));
        }
        st.history.records.push(record);
        st.next_epoch += 1;
        if let Some(d) = &opts.out_dir {
            st.history.write_csv(&d.join(HISTORY_FILE))?;
            if improved {
                let mut c = st.best.as_ref().expect("just set").2.to_container();
                annotate_checkpoint(&mut c, cfg, task, kind.name());
                c.metadata.insert("epoch".into(), epoch.into());
                write_container(&d.join(BEST_FILE), &c)?;
            }
            let due = cfg.checkpoint_every > 0 && st.next_epoch % cfg.checkpoint_every == 0;
            if due || st.next_epoch == cfg.epochs {
                save_state(state_path.as_ref().expect("out_dir set"), &st, cfg, task, kind)?;
            }
        }
        st.model.set_mode(Mode::Train);
    }
    let (best_epoch, _, mut best) = st
        .best
        .ok_or_else(|| Error::config("no epochs were run"))?;
    best.set_mode(Mode::Eval);
    st.model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: st.model,
        history: st.history,
    })
}

/// Train for `cfg.epochs` epochs, selecting the epoch with the highest clean
/// validation accuracy (ties go to the earliest).
pub fn adv_train(
    cfg: &TrainConfig,
    model: TwoHeadModel,
    task: Option<&SsTask>,
    train: &ImageDataset,
    val: Option<&ImageDataset>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    run(RunKind::Supervised, cfg, model, task, train, val, opts)
}

/// Adversarial self-supervised pre-training; model selection uses the SS
/// head's accuracy on transformed validation images.
pub fn ss_pretrain(
    cfg: &TrainConfig,
    model: TwoHeadModel,
    task: &SsTask,
    train: &ImageDataset,
    val: Option<&ImageDataset>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        mode: TrainMode {
            tag: ModeTag::T0,
            lambda1: 0.0,
            attack: AttackConfig {
                use_ss_loss: false,
                ..cfg.mode.attack.clone()
            },
        },
        ..cfg.clone()
    };
    run(RunKind::Pretrain, &cfg, model, Some(task), train, val, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Norm;
    use crate::data::striped_classes;
    use crate::model::{build_model, ArchConfig, Preset};

    fn mode(tag: ModeTag, lambda1: f64, eps: f64, steps: usize) -> TrainMode {
        let mut attack = AttackConfig::new(Norm::Linf, eps, 2.0 / 255.0, steps);
        attack.use_ss_loss = tag == ModeTag::T3;
        TrainMode { tag, lambda1, attack }
    }

    fn tiny() -> TwoHeadModel {
        build_model(&ArchConfig::new(Preset::TinyCnn, [3, 8, 8], 10, 4).with_width(0.25), 3).unwrap()
    }

    fn data(n: usize) -> ImageDataset {
        striped_classes(n, 10, [3, 8, 8], 5).unwrap()
    }

    #[test]
    fn compose_loss_examples() {
        assert_eq!(compose_loss(ModeTag::T1, 0.5, 1.0, Some(0.5)).unwrap(), 1.25);
        assert_eq!(compose_loss(ModeTag::T1, 0.0, 0.731, Some(2.5)).unwrap(), 0.731);
        assert_eq!(compose_loss(ModeTag::T0, 0.0, 0.731, None).unwrap(), 0.731);
        assert!(compose_loss(ModeTag::T0, 0.1, 1.0, None).is_err());
        assert!(compose_loss(ModeTag::T2, 0.1, 1.0, None).is_err());
        assert!(compose_loss(ModeTag::T0, 0.0, 1.0, Some(1.0)).is_err());
    }

    #[test]
    fn lr_schedule() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0) as f32, 0.1);
        assert_eq!(s.lr_at(39) as f32, 0.1);
        assert_eq!(s.lr_at(40) as f32, 0.01);
        assert_eq!(s.lr_at(80) as f32, 0.001);
        let bad = LrSchedule {
            milestones: vec![40, 40],
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mode_validation() {
        assert!(mode(ModeTag::T0, 0.5, 0.03, 1).validate().is_err());
        let mut m = mode(ModeTag::T1, 0.5, 0.03, 1);
        m.attack.use_ss_loss = true;
        let e = m.validate().unwrap_err().to_string();
        assert!(e.contains("T1") && e.contains("use_ss_loss"), "{e}");
        let mut m = mode(ModeTag::T3, 0.5, 0.03, 1);
        m.attack.use_ss_loss = false;
        assert!(m.validate().is_err());
        for t in ModeTag::ALL {
            let l = if t == ModeTag::T0 { 0.0 } else { 0.5 };
            mode(t, l, 0.03, 1).validate().unwrap();
            assert_eq!(ModeTag::parse(t.name()).unwrap(), t);
        }
    }

    #[test]
    fn t0_records_no_ss_loss() {
        let mut m = tiny();
        let cfg = TrainConfig::new(mode(ModeTag::T0, 0.0, 0.0, 0), 1, 16, 0);
        let l = train_epoch(&mut m, &data(32), &cfg, None, &mut cfg.optimizer(), 0).unwrap();
        assert!(l.sup.is_some() && l.ss.is_none());
        let cfg = TrainConfig::new(mode(ModeTag::T2, 0.5, 0.03, 1), 1, 16, 0);
        let l = train_epoch(&mut m, &data(32), &cfg, Some(&SsTask::rotation()), &mut cfg.optimizer(), 0).unwrap();
        assert!(l.ss.is_some());
    }

    #[test]
    fn zero_attack_matches_plain_training() {
        let ds = data(48);
        let cfg = TrainConfig::new(mode(ModeTag::T0, 0.0, 0.0, 0), 1, 16, 9);
        let mut a = tiny();
        let mut attack_off = cfg.clone();
        attack_off.mode.attack.random_start = false;
        train_epoch(&mut a, &ds, &attack_off, None, &mut cfg.optimizer(), 0).unwrap();

        // hand-rolled plain SGD on the same batches
        let mut b = tiny();
        let mut opt = cfg.optimizer();
        b.set_mode(Mode::Train);
        let mut aug = stream_rng(9, Stream::Augment, 0);
        for idx in shuffled(ds.len(), 9, 0).chunks(16) {
            let (x, y) = ds.batch(idx).unwrap();
            let x = augment(&x, &mut aug, true).unwrap();
            let mut g = Graph::new();
            let p = b.bind(&mut g, true).unwrap();
            let mut st = StatsRecord::default();
            let xv = g.constant(x).unwrap();
            let lg = b.logits(&mut g, &p, xv, Head::Sup, Mode::Train, &mut st).unwrap();
            let loss = g.cross_entropy_mean(lg, &y).unwrap();
            g.backward(loss).unwrap();
            let grads = p.grads(&g);
            opt.step(b.params_mut(), &grads, 0.1).unwrap();
            b.commit_stats(&st);
        }
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_eq!(a.running_stats_checksum(), b.running_stats_checksum());
    }

    #[test]
    fn t1_zero_lambda_tracks_t0() {
        let ds = data(48);
        let task = SsTask::rotation();
        let run = |tag: ModeTag| {
            let cfg = TrainConfig::new(mode(tag, 0.0, 2.0 / 255.0, 1), 2, 16, 4);
            let mut m = tiny();
            let mut opt = cfg.optimizer();
            for e in 0..2 {
                train_epoch(&mut m, &ds, &cfg, Some(&task), &mut opt, e).unwrap();
            }
            (m.params().checksum(), m.running_stats_checksum())
        };
        assert_eq!(run(ModeTag::T0), run(ModeTag::T1));
    }

    #[test]
    fn routing_of_ss_batch() {
        let ds = data(10);
        let task = SsTask::rotation();
        let (x, y) = ds.batch(&(0..8).collect::<Vec<_>>()).unwrap();
        for (tag, clean) in [(ModeTag::T1, true), (ModeTag::T2, false), (ModeTag::T3, false)] {
            let m = mode(tag, 0.5, 8.0 / 255.0, 2);
            let mut net = tiny();
            let mut r1 = stream_rng(0, Stream::SsTransform, 0);
            let mut r2 = stream_rng(0, Stream::Attack, 0);
            let inp = attack_inputs(&mut net, &m, Some(&task), x.clone(), y.clone(), &mut r1, &mut r2).unwrap();
            let (expect, _) = task.apply(&x, &mut stream_rng(0, Stream::SsTransform, 0)).unwrap();
            let (got, _) = inp.ss.unwrap();
            assert_eq!(got == expect, clean, "{tag}");
        }
    }

    #[test]
    fn validation_does_not_touch_parameters() {
        let m = tiny();
        let before = (m.params().checksum(), m.running_stats_checksum());
        eval_standard(&m, &data(20), 8).unwrap();
        assert_eq!(before, (m.params().checksum(), m.running_stats_checksum()));
    }

    #[test]
    fn adv_train_is_deterministic_and_resumable() {
        let ds = data(40);
        let (tr, va) = (ds.take(32).unwrap(), ds.subset(&(32..40).collect::<Vec<_>>()).unwrap());
        let mut cfg = TrainConfig::new(mode(ModeTag::T1, 0.5, 2.0 / 255.0, 1), 3, 16, 1);
        cfg.checkpoint_every = 1;
        let task = SsTask::rotation();
        let full = adv_train(&cfg, tiny(), Some(&task), &tr, Some(&va), &RunOptions::default()).unwrap();
        let again = adv_train(&cfg, tiny(), Some(&task), &tr, Some(&va), &RunOptions::default()).unwrap();
        assert_eq!(full.best_epoch, again.best_epoch);
        assert_eq!(full.history.records.len(), 3);

        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: true,
            verbose: false,
        };
        let short = TrainConfig { epochs: 2, ..cfg.clone() };
        adv_train(&short, tiny(), Some(&task), &tr, Some(&va), &opts).unwrap();
        let resumed = adv_train(&cfg, tiny(), Some(&task), &tr, Some(&va), &opts).unwrap();
        assert_eq!(resumed.last.params().checksum(), full.last.params().checksum());
        assert_eq!(resumed.best_epoch, full.best_epoch);
        assert_eq!(resumed.history.records.len(), 3);
        let csv = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
        assert!(csv.starts_with("epoch,lr,sup_loss,ss_loss,val_TA,seconds\n"));
        assert_eq!(csv.lines().count(), 4);
        let best = read_container(&dir.path().join(BEST_FILE)).unwrap();
        assert_eq!(checkpoint_task(&best).unwrap(), Some(task));
    }

    #[test]
    fn empty_training_set_rejected() {
        let cfg = TrainConfig::new(mode(ModeTag::T0, 0.0, 0.0, 0), 1, 16, 0);
        if let Ok(empty) = data(10).take(0) {
            assert!(adv_train(&cfg, tiny(), None, &empty, None, &RunOptions::default()).is_err());
        }
    }

    #[test]
    fn pretrained_trunk_transfers_bitwise() {
        let ds = data(32);
        let cfg = TrainConfig::new(mode(ModeTag::T0, 0.0, 0.1, 1), 1, 16, 2);
        let mut cfg = cfg;
        cfg.mode.attack.norm = Norm::L2;
        let out = ss_pretrain(&cfg, tiny(), &SsTask::rotation(), &ds, None, &RunOptions::default()).unwrap();
        assert!(out.history.records[0].sup_loss.is_none());
        let c = out.best.to_container();
        let mut fresh = build_model(&ArchConfig::new(Preset::TinyCnn, [3, 8, 8], 7, 4).with_width(0.25), 11).unwrap();
        let skipped = fresh.load_trunk_from(&c).unwrap();
        assert_eq!(skipped, vec!["sup_head".to_string()]);
        for p in fresh.params().iter().filter(|p| p.name.starts_with("trunk.")) {
            assert_eq!(&p.value, c.get(&p.name).unwrap());
        }
    }

    #[test]
    fn history_csv_prints_decayed_rates_cleanly() {
        let sched = LrSchedule::default();
        let h = TrainHistory {
            records: (0..2)
                .map(|i| EpochRecord { epoch: i * 80, lr: sched.lr_at(i * 80), sup_loss: Some(1.0), ss_loss: None, val_ta: Some(50.0), seconds: 1.0 })
                .collect(),
        };
        assert_eq!(h.to_csv(), "epoch,lr,sup_loss,ss_loss,val_TA,seconds\n0,0.1,1.000000,,50.00,1.000\n80,0.001,1.000000,,50.00,1.000\n");
    }
}
