//! Training phases and their orchestration.
//!
//! 1. `pretrain_high`: VAE on the unlabeled high-domain features.
//! 2. `finetune_high`: multi-task regression on labeled high-domain samples
//!    with gradual unfreezing; the encoder is frozen afterwards.
//! 3. `pretrain_low`: VAE on the unlabeled low-domain features, with the
//!    transmitted codes pulled toward the frozen high-domain codes.
//! 4. `finetune_low`: gradual-unfreezing regression on the labeled low-domain
//!    samples, starting from the high-domain regressor.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::cli::RunConfig;
use crate::data::{pair_domains, split, Corpus, DomainDataset, Standardizer};
use crate::error::{Error, Result};
use crate::eval::{matrix_report, EvalReport, TOPK_VALUES};
use crate::layers::Mode;
use crate::losses::{
    combined_pretrain_loss, contrastive_clr, mmd, si_mse, vae_loss, KernelSpec, LabelBatch,
    WganConfig, WganCritic,
};
use crate::models::{FreezeState, ModelSpec, ModelStack, TransmitterKind};
use crate::numerics::{checkpoint, Adamax, AdamaxConfig, Graph, Matrix, ParamId, ParamStore, Rng};

/// Cross-level regularization used during low-domain pre-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClrKind {
    Contrastive,
    Mmd,
    Wgan,
    None,
}

impl ClrKind {
    pub const ALL: [ClrKind; 4] = [ClrKind::Contrastive, ClrKind::Mmd, ClrKind::Wgan, ClrKind::None];

    pub fn as_str(self) -> &'static str {
        match self {
            ClrKind::Contrastive => "contrastive",
            ClrKind::Mmd => "mmd",
            ClrKind::Wgan => "wgan",
            ClrKind::None => "none",
        }
    }
}

impl fmt::Display for ClrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClrKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClrKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss kind `{s}` (expected contrastive, mmd, wgan or none)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainHigh,
    FinetuneHigh,
    PretrainLow,
    FinetuneLow,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::PretrainHigh,
        Phase::FinetuneHigh,
        Phase::PretrainLow,
        Phase::FinetuneLow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PretrainHigh => "pretrain_high",
            Phase::FinetuneHigh => "finetune_high",
            Phase::PretrainLow => "pretrain_low",
            Phase::FinetuneLow => "finetune_low",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything a single phase needs besides data and model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub phase: Phase,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub decay: f64,
    pub n_f: usize,
    pub n_uf: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub clr: ClrKind,
    pub temperature: f64,
    pub mmd_scales: Vec<f64>,
    pub wgan: WganConfig,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.phase)));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.clr == ClrKind::Contrastive && self.batch_size < 2 {
            return bad("batch_size must be at least 2 for the contrastive loss".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if matches!(self.phase, Phase::FinetuneHigh | Phase::FinetuneLow) && (self.n_f == 0 || self.n_uf == 0) {
            return bad("n_f and n_uf must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be non-negative".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if self.clr == ClrKind::Wgan && self.wgan.critic_steps == 0 {
            return bad("wgan.critic_steps must be positive".into());
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeat: Option<usize>,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub lr: f64,
    pub unfrozen_blocks: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: Phase,
    pub trace: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Validation loss of the starting parameters.
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// Epoch whose parameters were kept; `None` when no epoch improved.
    pub best_epoch: Option<usize>,
    pub critic_updates: u64,
    pub generator_updates: u64,
    /// Epochs at which a frozen block was released.
    pub unfreeze_epochs: Vec<usize>,
}

/// Per-epoch callback receiving the record and the parameters at the end of
/// the epoch.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord, &ParamStore) -> Result<()>;

/// Stops after `patience` consecutive evaluations that fail to beat the best
/// value by more than `min_delta`. The starting parameters count as the first
/// evaluation.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64, initial: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: initial,
            stale: 0,
        }
    }

    /// Records a validation value; returns whether it is a new best.
    pub fn observe(&mut self, value: f64) -> bool {
        if value < self.best - self.min_delta {
            self.best = value;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

fn batches(rng: &mut Rng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    perm.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn snapshot(store: &ParamStore) -> Vec<Matrix> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(store: &mut ParamStore, values: &[Matrix]) {
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        store.get_mut(id).value.assign(v);
    }
}

const EVAL_CHUNK: usize = 512;

/// Encoder means in eval mode.
pub fn encode_mean(model: &ModelStack, x: &Matrix) -> Result<Matrix> {
    map_chunks(x, model.spec.arch.z_dim, |chunk| {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let xv = g.input(chunk);
        let (_, mu, _) = model.encode(&mut g, xv, Mode::Eval, &mut rng)?;
        Ok(g.value(mu).clone())
    })
}

/// Transmitted encoder means in eval mode.
pub fn transmit_mean(model: &ModelStack, x: &Matrix) -> Result<Matrix> {
    map_chunks(x, model.spec.arch.z_dim, |chunk| {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let xv = g.input(chunk);
        let (_, mu, _) = model.encode(&mut g, xv, Mode::Eval, &mut rng)?;
        let t = model.transmit(&mut g, mu)?;
        Ok(g.value(t).clone())
    })
}

/// Regressor predictions in eval mode.
pub fn predict(model: &ModelStack, x: &Matrix) -> Result<Matrix> {
    map_chunks(x, model.spec.tasks, |chunk| {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let xv = g.input(chunk);
        let p = model.forward_supervised(&mut g, xv, Mode::Eval, &mut rng)?;
        Ok(g.value(p).clone())
    })
}

fn map_chunks(x: &Matrix, width: usize, mut f: impl FnMut(Matrix) -> Result<Matrix>) -> Result<Matrix> {
    let mut out = Matrix::zeros((x.nrows(), width));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let chunk = x.slice(ndarray::s![start..end, ..]).to_owned();
        out.slice_mut(ndarray::s![start..end, ..]).assign(&f(chunk)?);
        start = end;
    }
    Ok(out)
}

/// Mean row-wise cosine similarity of two equally shaped matrices.
pub fn mean_cosine(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.nrows().max(1) as f64;
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| {
            let d = x.dot(&y);
            let nx = x.dot(&x).sqrt();
            let ny = y.dot(&y).sqrt();
            if nx == 0.0 || ny == 0.0 {
                0.0
            } else {
                d / (nx * ny)
            }
        })
        .sum::<f64>()
        / n
}

/// High-domain targets for the cross-level term.
#[derive(Clone, Debug)]
pub struct Alignment {
    /// For each training row, the row of `targets` it is paired with.
    pub train_pairs: Vec<Option<usize>>,
    pub targets: Matrix,
    /// High-domain codes of the validation rows (all paired).
    pub val_targets: Matrix,
}

impl Alignment {
    /// Encodes the paired high-domain rows with the frozen high encoder.
    pub fn from_high(
        high_model: &ModelStack,
        high_train: &Matrix,
        train_pairs: Vec<Option<usize>>,
        high_val: &Matrix,
    ) -> Result<Self> {
        Ok(Self {
            train_pairs,
            targets: encode_mean(high_model, high_train)?,
            val_targets: encode_mean(high_model, high_val)?,
        })
    }
}

fn ensure_rows(x: &Matrix, what: &str) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Data(format!("{what} is empty")));
    }
    Ok(())
}

/// Stage 1: VAE on the unlabeled high-domain features, early-stopped on the
/// VAE loss of the labeled high-domain features.
pub fn pretrain_high(
    model: &mut ModelStack,
    x_unlabeled: &Matrix,
    x_val: &Matrix,
    plan: &TrainPlan,
    hook: Option<EpochHook>,
) -> Result<PhaseResult> {
    pretrain_vae(model, x_unlabeled, x_val, plan, hook)
}

/// Plain VAE training of encoder and decoder.
pub fn pretrain_vae(
    model: &mut ModelStack,
    x_train: &Matrix,
    x_val: &Matrix,
    plan: &TrainPlan,
    hook: Option<EpochHook>,
) -> Result<PhaseResult> {
    pretrain_loop(model, x_train, x_val, plan, None, hook)
}

/// Stage 3: `λ·clr(F(z_L), z_H) + (1−λ)·VAE` on the unlabeled low-domain
/// features, early-stopped on the paired validation rows.
pub fn pretrain_low(
    model: &mut ModelStack,
    x_unlabeled: &Matrix,
    x_val: &Matrix,
    alignment: &Alignment,
    plan: &TrainPlan,
    hook: Option<EpochHook>,
) -> Result<PhaseResult> {
    if plan.clr == ClrKind::None {
        return pretrain_loop(model, x_unlabeled, x_val, plan, None, hook);
    }
    if alignment.train_pairs.len() != x_unlabeled.nrows() {
        return Err(Error::Dimension("alignment does not cover the training rows".into()));
    }
    if plan.lambda > 0.0 && alignment.train_pairs.iter().all(Option::is_none) {
        return Err(Error::Config("no paired samples available for the cross-level loss".into()));
    }
    if alignment.val_targets.nrows() != x_val.nrows() {
        return Err(Error::Dimension("validation targets do not match validation rows".into()));
    }
    pretrain_loop(model, x_unlabeled, x_val, plan, Some(alignment), hook)
}

struct ClrState {
    critic: Option<(WganCritic, Adamax, Rng)>,
    critic_updates: u64,
    generator_updates: u64,
}

/// The cross-level term on a set of paired rows. `zh` are constants;
/// `t` is the transmitted low-domain code on the tape.
fn clr_term(
    g: &mut Graph,
    plan: &TrainPlan,
    zh: &Matrix,
    t: crate::numerics::Var,
    state: &mut ClrState,
    train: bool,
) -> Result<Option<crate::numerics::Var>> {
    let n = zh.nrows();
    match plan.clr {
        ClrKind::None => Ok(None),
        ClrKind::Contrastive => {
            if n < 2 {
                return Ok(None);
            }
            let h = g.input(zh.clone());
            contrastive_clr(g, h, t, plan.temperature).map(Some)
        }
        ClrKind::Mmd => {
            if n == 0 {
                return Ok(None);
            }
            let kernel = KernelSpec::median_heuristic(zh, g.value(t), &plan.mmd_scales)?;
            let h = g.input(zh.clone());
            mmd(g, h, t, &kernel).map(Some)
        }
        ClrKind::Wgan => {
            if n == 0 {
                return Ok(None);
            }
            let (critic, opt, rng) = state
                .critic
                .as_mut()
                .ok_or_else(|| Error::Precondition("critic not initialized".into()))?;
            if train {
                let zl = g.value(t).clone();
                for _ in 0..plan.wgan.critic_steps {
                    let mut cg = Graph::new();
                    let obj = critic.critic_objective(&mut cg, zh, &zl, rng)?;
                    cg.backward(obj)?;
                    critic.store.zero_grad();
                    cg.accumulate_into(&mut critic.store);
                    opt.step(&mut critic.store)?;
                    state.critic_updates += 1;
                }
                state.generator_updates += 1;
            }
            let cl = critic.forward(g, t, false)?;
            let m = g.mean(cl);
            Ok(Some(g.scale(m, -1.0)))
        }
    }
}

#[derive(Default)]
struct Terms {
    sums: BTreeMap<String, f64>,
    count: usize,
}

impl Terms {
    fn add(&mut self, name: &str, v: f64) {
        *self.sums.entry(name.to_string()).or_default() += v;
    }

    fn means(&self) -> BTreeMap<String, f64> {
        let n = self.count.max(1) as f64;
        self.sums.iter().map(|(k, v)| (k.clone(), v / n)).collect()
    }
}

fn pretrain_loop(
    model: &mut ModelStack,
    x_train: &Matrix,
    x_val: &Matrix,
    plan: &TrainPlan,
    alignment: Option<&Alignment>,
    mut hook: Option<EpochHook>,
) -> Result<PhaseResult> {
    plan.validate()?;
    ensure_rows(x_train, "training set")?;
    ensure_rows(x_val, "validation set")?;
    let label = plan.phase.as_str();
    let mut shuffle_rng = Rng::derive(plan.seed, &format!("{label}.shuffle"));
    let mut noise = Rng::derive(plan.seed, &format!("{label}.noise"));

    // encoder and decoder train; the transmitter only when it is aligned
    let store = &mut model.store;
    store.set_all_trainable(false);
    store.set_trainable(&model.encoder.params(), true);
    store.set_trainable(&model.decoder.params(), true);
    if alignment.is_some() {
        store.set_trainable(&model.transmitter.params(), true);
    }
    let mut opt = Adamax::new(&model.store, plan.lr, AdamaxConfig::default());

    let mut clr_state = ClrState {
        critic: (alignment.is_some() && plan.clr == ClrKind::Wgan).then(|| {
            let mut init = Rng::derive(plan.seed, &format!("{label}.critic"));
            let critic = WganCritic::new(&mut init, model.spec.arch.z_dim, plan.wgan);
            let copt = Adamax::new(&critic.store, plan.lr, AdamaxConfig::default());
            (critic, copt, Rng::derive(plan.seed, &format!("{label}.penalty")))
        }),
        critic_updates: 0,
        generator_updates: 0,
    };

    let initial = pretrain_validation(model, x_val, plan, alignment, &mut clr_state)?.0;
    let mut stopper = EarlyStopping::new(plan.patience, plan.min_delta, initial);
    let mut best = snapshot(&model.store);
    let mut best_epoch = None;
    let mut trace = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..plan.max_epochs {
        let mut terms = Terms::default();
        for rows in batches(&mut shuffle_rng, x_train.nrows(), plan.batch_size) {
            let mut g = Graph::new();
            let x = g.input(x_train.select(Axis(0), &rows));
            let (z, mu, logvar) = model.encode(&mut g, x, Mode::Train, &mut noise)?;
            let x_hat = model.decoder.forward(&mut g, &model.store, z, Mode::Train, &mut noise)?;
            let vae = vae_loss(&mut g, x, x_hat, mu, logvar)?;
            terms.add("vae", g.scalar(vae));
            let loss = match alignment {
                None => vae,
                Some(al) => {
                    let (local, target): (Vec<usize>, Vec<usize>) = rows
                        .iter()
                        .enumerate()
                        .filter_map(|(i, &r)| al.train_pairs[r].map(|t| (i, t)))
                        .unzip();
                    let zh = al.targets.select(Axis(0), &target);
                    let mu_p = g.select_rows(mu, &local)?;
                    let t = model.transmit(&mut g, mu_p)?;
                    match clr_term(&mut g, plan, &zh, t, &mut clr_state, true)? {
                        Some(clr) => {
                            terms.add("clr", g.scalar(clr));
                            combined_pretrain_loss(&mut g, plan.lambda, clr, vae)?
                        }
                        None => g.scale(vae, 1.0 - plan.lambda),
                    }
                }
            };
            terms.add("loss", g.scalar(loss));
            terms.count += 1;
            g.backward(loss)?;
            model.store.zero_grad();
            g.accumulate_into(&mut model.store);
            opt.step(&mut model.store)?;
        }
        let (val, val_terms) = pretrain_validation(model, x_val, plan, alignment, &mut clr_state)?;
        let mut all_terms = terms.means();
        let train_loss = all_terms.remove("loss").unwrap_or(f64::NAN);
        for (k, v) in val_terms {
            all_terms.insert(format!("val_{k}"), v);
        }
        let record = EpochRecord {
            phase: plan.phase,
            repeat: None,
            epoch,
            train_loss,
            val_loss: val,
            terms: all_terms,
            lr: plan.lr,
            unfrozen_blocks: 0,
        };
        if let Some(h) = hook.as_mut() {
            h(&record, &model.store)?;
        }
        trace.push(record);
        if stopper.observe(val) {
            best = snapshot(&model.store);
            best_epoch = Some(epoch);
        }
        if stopper.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    restore(&mut model.store, &best);
    model.store.set_all_trainable(true);
    Ok(PhaseResult {
        phase: plan.phase,
        trace,
        stop_reason,
        initial_val_loss: initial,
        best_val_loss: stopper.best(),
        best_epoch,
        critic_updates: clr_state.critic_updates,
        generator_updates: clr_state.generator_updates,
        unfreeze_epochs: Vec::new(),
    })
}

fn pretrain_validation(
    model: &ModelStack,
    x_val: &Matrix,
    plan: &TrainPlan,
    alignment: Option<&Alignment>,
    state: &mut ClrState,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut g = Graph::new();
    let mut rng = Rng::new(0);
    let x = g.input(x_val.clone());
    let (z, mu, logvar) = model.encode(&mut g, x, Mode::Eval, &mut rng)?;
    let x_hat = model.decoder.forward(&mut g, &model.store, z, Mode::Eval, &mut rng)?;
    let vae = vae_loss(&mut g, x, x_hat, mu, logvar)?;
    let mut terms = BTreeMap::new();
    terms.insert("vae".to_string(), g.scalar(vae));
    let total = match alignment {
        None => g.scalar(vae),
        Some(al) => {
            let t = model.transmit(&mut g, mu)?;
            terms.insert("cosine".to_string(), mean_cosine(g.value(t), &al.val_targets));
            match clr_term(&mut g, plan, &al.val_targets, t, state, false)? {
                Some(clr) => {
                    terms.insert("clr".to_string(), g.scalar(clr));
                    let l = combined_pretrain_loss(&mut g, plan.lambda, clr, vae)?;
                    g.scalar(l)
                }
                None => (1.0 - plan.lambda) * g.scalar(vae),
            }
        }
    };
    Ok((total, terms))
}

/// Features with labels, restricted to rows with at least one observed task.
#[derive(Clone, Debug)]
pub struct Supervised {
    pub x: Matrix,
    pub labels: LabelBatch,
}

impl Supervised {
    pub fn from_dataset(ds: &DomainDataset) -> Result<Self> {
        let ds = ds.with_observed_labels()?;
        if ds.is_empty() {
            return Err(Error::Data("no labeled samples with an observed task".into()));
        }
        let l = ds.labels.as_ref().expect("labels checked above");
        Ok(Self {
            x: ds.features.clone(),
            labels: LabelBatch::new(l.values.clone(), l.mask.clone())?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    fn rows(&self, rows: &[usize]) -> Result<(Matrix, LabelBatch)> {
        Ok((
            self.x.select(Axis(0), rows),
            LabelBatch::new(
                self.labels.y.select(Axis(0), rows),
                self.labels.mask.select(Axis(0), rows),
            )?,
        ))
    }
}

/// Masked si-MSE of the model's eval-mode predictions.
pub fn supervised_loss(model: &ModelStack, data: &Supervised) -> Result<f64> {
    let pred = predict(model, &data.x)?;
    let mut g = Graph::new();
    let p = g.input(pred);
    let l = si_mse(&mut g, p, &data.labels)?;
    Ok(g.scalar(l))
}

/// Gradual-unfreezing fine-tuning. The regressor trains from the first
/// epoch with the base learning rate; the blocks of `freeze` start frozen
/// and are released from the output side at epochs
/// `n_f, n_f + n_uf, n_f + 2·n_uf, …`. Each release multiplies the working
/// learning rate by `decay` and assigns it to the released block.
pub fn finetune(
    model: &mut ModelStack,
    train: &Supervised,
    val: &Supervised,
    plan: &TrainPlan,
    mut freeze: FreezeState,
    repeat: Option<usize>,
    mut hook: Option<EpochHook>,
) -> Result<PhaseResult> {
    plan.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("fine-tuning needs non-empty train and validation sets".into()));
    }
    if train.labels.tasks() != model.spec.tasks {
        return Err(Error::Data(format!(
            "labels have {} tasks, model has {}",
            train.labels.tasks(),
            model.spec.tasks
        )));
    }
    let label = match repeat {
        Some(r) => format!("{}.repeat{r}", plan.phase),
        None => plan.phase.to_string(),
    };
    let mut shuffle_rng = Rng::derive(plan.seed, &format!("{label}.shuffle"));
    let mut noise = Rng::derive(plan.seed, &format!("{label}.noise"));

    model.store.set_all_trainable(false);
    model.store.set_trainable(&model.regressor.params(), true);
    freeze.apply(&mut model.store);
    let mut opt = Adamax::new(&model.store, plan.lr, AdamaxConfig::default());
    let mut lr = plan.lr;
    let mut events = 0i32;

    let initial = supervised_loss(model, val)?;
    let mut stopper = EarlyStopping::new(plan.patience, plan.min_delta, initial);
    let mut best = snapshot(&model.store);
    let mut best_epoch = None;
    let mut trace = Vec::new();
    let mut unfreeze_epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..plan.max_epochs {
        if epoch >= plan.n_f && (epoch - plan.n_f) % plan.n_uf == 0 && !freeze.all_trainable() {
            events += 1;
            lr = plan.lr * plan.decay.powi(events);
            if let Some(i) = freeze.unfreeze_top() {
                for &id in &freeze.blocks[i].params {
                    opt.set_lr(id, lr);
                }
                freeze.apply(&mut model.store);
                unfreeze_epochs.push(epoch);
                log::debug!("{label}: epoch {epoch} released {} at lr {lr}", freeze.blocks[i].name);
            }
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for rows in batches(&mut shuffle_rng, train.len(), plan.batch_size) {
            let (xb, yb) = train.rows(&rows)?;
            let mut g = Graph::new();
            let x = g.input(xb);
            let pred = model.forward_supervised(&mut g, x, Mode::Train, &mut noise)?;
            let loss = si_mse(&mut g, pred, &yb)?;
            total += g.scalar(loss);
            count += 1;
            g.backward(loss)?;
            model.store.zero_grad();
            g.accumulate_into(&mut model.store);
            opt.step(&mut model.store)?;
        }
        let val_loss = supervised_loss(model, val)?;
        let record = EpochRecord {
            phase: plan.phase,
            repeat,
            epoch,
            train_loss: total / count.max(1) as f64,
            val_loss,
            terms: BTreeMap::new(),
            lr,
            unfrozen_blocks: freeze.unfrozen_count(),
        };
        if let Some(h) = hook.as_mut() {
            h(&record, &model.store)?;
        }
        trace.push(record);
        if stopper.observe(val_loss) {
            best = snapshot(&model.store);
            best_epoch = Some(epoch);
        }
        if stopper.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    restore(&mut model.store, &best);
    Ok(PhaseResult {
        phase: plan.phase,
        trace,
        stop_reason,
        initial_val_loss: initial,
        best_val_loss: stopper.best(),
        best_epoch,
        critic_updates: 0,
        generator_updates: 0,
        unfreeze_epochs,
    })
}

/// Stage 2. Afterwards every encoder parameter is frozen for good.
pub fn finetune_high(
    model: &mut ModelStack,
    train: &Supervised,
    val: &Supervised,
    plan: &TrainPlan,
    hook: Option<EpochHook>,
) -> Result<PhaseResult> {
    let freeze = model.freeze_state();
    let result = finetune(model, train, val, plan, freeze, None, hook)?;
    model.store.set_all_trainable(true);
    model.store.set_trainable(&model.encoder.params(), false);
    model.store.set_trainable(&model.decoder.params(), false);
    Ok(result)
}

/// Stage 4 for one repeat: encoder blocks and transmitter start frozen,
/// the regressor trains from the start.
pub fn finetune_low(
    model: &mut ModelStack,
    train: &Supervised,
    val: &Supervised,
    plan: &TrainPlan,
    repeat: Option<usize>,
    hook: Option<EpochHook>,
) -> Result<PhaseResult> {
    let freeze = model.freeze_state();
    let result = finetune(model, train, val, plan, freeze, repeat, hook)?;
    model.store.set_all_trainable(true);
    Ok(result)
}

/// Baseline: the same encoder and regressor trained end to end from random
/// initialization.
pub fn train_mlp(
    model: &mut ModelStack,
    train: &Supervised,
    val: &Supervised,
    plan: &TrainPlan,
    repeat: Option<usize>,
    hook: Option<EpochHook>,
) -> Result<PhaseResult> {
    let mut freeze = model.freeze_state();
    for b in &mut freeze.blocks {
        b.trainable = true;
    }
    let result = finetune(model, train, val, plan, freeze, repeat, hook)?;
    model.store.set_all_trainable(true);
    Ok(result)
}

/// Standardized matrices of every partition plus the pairings used by the
/// cross-level term.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub high_unlabeled: Matrix,
    pub low_unlabeled: Matrix,
    /// Row of `high_unlabeled` matching each row of `low_unlabeled`.
    pub unlabeled_pairs: Vec<Option<usize>>,
    pub high_labeled: DomainDataset,
    pub low_labeled: DomainDataset,
    /// Paired labeled rows, used to validate low-domain pre-training.
    pub paired_high: Matrix,
    pub paired_low: Matrix,
    pub test_low: DomainDataset,
    pub tasks: usize,
}

pub fn prepare(corpus: &Corpus, standardize: bool) -> Result<Prepared> {
    let c = corpus;
    if c.high_unlabeled.is_empty() || c.low_unlabeled.is_empty() {
        return Err(Error::Data("unlabeled partitions must not be empty".into()));
    }
    if c.high_labeled.width() != c.high_unlabeled.width()
        || c.low_labeled.width() != c.low_unlabeled.width()
        || c.test_low.width() != c.low_unlabeled.width()
    {
        return Err(Error::Data("feature widths differ between partitions of one domain".into()));
    }
    let tasks = c
        .low_labeled
        .labels
        .as_ref()
        .or(c.high_labeled.labels.as_ref())
        .map(|l| l.names.len())
        .ok_or_else(|| Error::Data("labeled partitions carry no labels".into()))?;
    let (sh, sl) = if standardize {
        (
            Standardizer::fit(&c.high_unlabeled.features),
            Standardizer::fit(&c.low_unlabeled.features),
        )
    } else {
        (
            Standardizer::identity(c.high_unlabeled.width()),
            Standardizer::identity(c.low_unlabeled.width()),
        )
    };
    let scale = |ds: &DomainDataset, s: &Standardizer| DomainDataset {
        features: s.apply(&ds.features),
        ..ds.clone()
    };
    let high_labeled = scale(&c.high_labeled, &sh);
    let low_labeled = scale(&c.low_labeled, &sl);
    let test_low = scale(&c.test_low, &sl);

    let index: HashMap<&str, usize> = c
        .high_unlabeled
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let unlabeled_pairs = c
        .low_unlabeled
        .sample_ids
        .iter()
        .map(|id| index.get(id.as_str()).copied())
        .collect();
    let paired = pair_domains(&high_labeled, &low_labeled)?;
    Ok(Prepared {
        high_unlabeled: sh.apply(&c.high_unlabeled.features),
        low_unlabeled: sl.apply(&c.low_unlabeled.features),
        unlabeled_pairs,
        paired_high: paired.high,
        paired_low: paired.low,
        high_labeled,
        low_labeled,
        test_low,
        tasks,
    })
}

/// One variant of the low-domain model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub clr: ClrKind,
    pub transmitter: bool,
}

impl Variant {
    pub fn name(&self) -> String {
        let base = match self.clr {
            ClrKind::None => "vae_mlp".to_string(),
            k => format!("cleit_{k}"),
        };
        if self.transmitter {
            base
        } else {
            format!("{base}_no_transmitter")
        }
    }
}

/// Metric means of one method, averaged over fine-tuning repeats, together
/// with each repeat's full report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub drugwise_pearson: f64,
    pub drugwise_rmse: f64,
    pub samplewise_pearson: f64,
    pub samplewise_rmse: f64,
    pub topk_precision: BTreeMap<usize, f64>,
    pub repeats: Vec<EvalReport>,
}

impl MethodReport {
    pub fn from_repeats(method: impl Into<String>, repeats: Vec<EvalReport>) -> Self {
        let mean = |f: &dyn Fn(&EvalReport) -> f64| {
            repeats.iter().map(f).sum::<f64>() / repeats.len().max(1) as f64
        };
        let topk = TOPK_VALUES
            .iter()
            .map(|&k| {
                (
                    k,
                    mean(&|r: &EvalReport| r.topk_precision[&k].mean.unwrap_or(f64::NAN)),
                )
            })
            .collect();
        Self {
            method: method.into(),
            drugwise_pearson: mean(&EvalReport::drugwise_pearson_mean),
            drugwise_rmse: mean(&EvalReport::drugwise_rmse_mean),
            samplewise_pearson: mean(&EvalReport::samplewise_pearson_mean),
            samplewise_rmse: mean(&EvalReport::samplewise_rmse_mean),
            topk_precision: topk,
            repeats,
        }
    }
}

pub fn evaluate_model(model: &ModelStack, test: &DomainDataset) -> Result<EvalReport> {
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("test partition has no labels".into()))?;
    let pred = predict(model, &test.features)?;
    matrix_report(&labels.values, &pred, &labels.mask)
}

/// Where a pipeline keeps its artifacts. `None` keeps everything in memory.
#[derive(Clone, Debug)]
pub struct RunDir(Option<PathBuf>);

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self(Some(path.into()))
    }

    pub fn memory() -> Self {
        Self(None)
    }

    pub fn path(&self) -> Option<&Path> {
        self.0.as_deref()
    }

    pub fn join(&self, part: &str) -> RunDir {
        RunDir(self.0.as_ref().map(|p| p.join(part)))
    }

    fn checkpoint(&self) -> Option<PathBuf> {
        self.0.as_ref().map(|p| p.join("checkpoint"))
    }

    pub fn has_checkpoint(&self) -> bool {
        self.checkpoint().is_some_and(|c| checkpoint::exists(&c))
    }

    fn metrics_writer(&self) -> Result<Option<fs::File>> {
        match &self.0 {
            None => Ok(None),
            Some(p) => {
                fs::create_dir_all(p)?;
                Ok(Some(fs::File::create(p.join("metrics.jsonl"))?))
            }
        }
    }

    fn save(&self, model: &ModelStack) -> Result<()> {
        if let Some(c) = self.checkpoint() {
            checkpoint::save(&model.store, &c, model.topology())?;
        }
        Ok(())
    }

    fn load(&self, model: &mut ModelStack) -> Result<()> {
        let c = self
            .checkpoint()
            .ok_or_else(|| Error::Precondition("no run directory".into()))?;
        checkpoint::load(&mut model.store, &c)?;
        Ok(())
    }
}

/// Runs `body` with a hook that appends every epoch record to the phase's
/// `metrics.jsonl`, then quantizes parameters and saves the checkpoint. If
/// the checkpoint already exists and `resume` is set, it is loaded instead.
fn run_phase(
    dir: &RunDir,
    phase: Phase,
    model: &mut ModelStack,
    resume: bool,
    body: impl FnOnce(&mut ModelStack, EpochHook) -> Result<PhaseResult>,
) -> Result<()> {
    if resume && dir.has_checkpoint() {
        log::info!("{phase}: resuming from checkpoint");
        return dir.load(model).map_err(|e| e.in_phase(phase.as_str()));
    }
    let mut writer = dir.metrics_writer().map_err(|e| e.in_phase(phase.as_str()))?;
    let mut hook = |r: &EpochRecord, _: &ParamStore| -> Result<()> {
        log::debug!("{phase} epoch {} train {:.6} val {:.6}", r.epoch, r.train_loss, r.val_loss);
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    };
    let result = body(model, &mut hook).map_err(|e| e.in_phase(phase.as_str()))?;
    log::info!(
        "{phase}: {} epochs, {:?}, best epoch {:?}, val {:.6} -> {:.6}",
        result.trace.len(),
        result.stop_reason,
        result.best_epoch,
        result.initial_val_loss,
        result.best_val_loss
    );
    model.store.quantize_f32();
    dir.save(model).map_err(|e| e.in_phase(phase.as_str()))
}

fn high_spec(cfg: &RunConfig, prep: &Prepared) -> ModelSpec {
    ModelSpec {
        input_dim: prep.high_unlabeled.ncols(),
        tasks: prep.tasks,
        transmitter: TransmitterKind::None,
        arch: cfg.arch.clone(),
    }
}

fn low_spec(cfg: &RunConfig, prep: &Prepared, transmitter: bool) -> ModelSpec {
    ModelSpec {
        input_dim: prep.low_unlabeled.ncols(),
        tasks: prep.tasks,
        transmitter: if transmitter {
            TransmitterKind::Mlp
        } else {
            TransmitterKind::Identity
        },
        arch: cfg.arch.clone(),
    }
}

/// Stages 1 and 2. With `resume`, completed stages are loaded from `dir`.
pub fn train_high(cfg: &RunConfig, prep: &Prepared, dir: &RunDir, resume: bool, upto: Phase) -> Result<ModelStack> {
    let mut model = ModelStack::build(&high_spec(cfg, prep), cfg.seed)?;
    let pdir = dir.join(Phase::PretrainHigh.as_str());
    run_phase(&pdir, Phase::PretrainHigh, &mut model, resume, |m, hook| {
        let plan = cfg.plan(Phase::PretrainHigh, cfg.loss, cfg.seed);
        pretrain_high(m, &prep.high_unlabeled, &prep.high_labeled.features, &plan, Some(hook))
    })?;
    if upto == Phase::PretrainHigh {
        return Ok(model);
    }
    let fdir = dir.join(Phase::FinetuneHigh.as_str());
    run_phase(&fdir, Phase::FinetuneHigh, &mut model, resume, |m, hook| {
        let plan = cfg.plan(Phase::FinetuneHigh, cfg.loss, cfg.seed);
        let (tr, va) = split(&prep.high_labeled, cfg.train_frac, cfg.seed)?;
        finetune_high(m, &Supervised::from_dataset(&tr)?, &Supervised::from_dataset(&va)?, &plan, Some(hook))
            
    })?;
    Ok(model)
}

/// Loads the high-domain model of a completed stage 2 from `dir`.
pub fn load_high(cfg: &RunConfig, prep: &Prepared, dir: &RunDir) -> Result<ModelStack> {
    let fdir = dir.join(Phase::FinetuneHigh.as_str());
    if !fdir.has_checkpoint() {
        return Err(Error::MissingPhase(Phase::FinetuneHigh.to_string()));
    }
    let mut model = ModelStack::build(&high_spec(cfg, prep), cfg.seed)?;
    fdir.load(&mut model)?;
    Ok(model)
}

/// Stage 3 for one variant.
pub fn train_low_pretrain(
    cfg: &RunConfig,
    prep: &Prepared,
    high: &ModelStack,
    variant: Variant,
    dir: &RunDir,
    resume: bool,
) -> Result<ModelStack> {
    let mut model = ModelStack::build(&low_spec(cfg, prep, variant.transmitter), cfg.seed)?;
    let pdir = dir.join(Phase::PretrainLow.as_str());
    run_phase(&pdir, Phase::PretrainLow, &mut model, resume, |m, hook| {
        let plan = cfg.plan(Phase::PretrainLow, variant.clr, cfg.seed);
        let (hi_rows, pairs) = compact_pairs(&prep.unlabeled_pairs);
        let alignment = Alignment::from_high(
            high,
            &prep.high_unlabeled.select(Axis(0), &hi_rows),
            pairs,
            &prep.paired_high,
        )?;
        pretrain_low(m, &prep.low_unlabeled, &prep.paired_low, &alignment, &plan, Some(hook))
    })?;
    Ok(model)
}

/// Renumbers the paired high rows densely so only they are encoded.
fn compact_pairs(pairs: &[Option<usize>]) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut rows = Vec::new();
    let dense = pairs
        .iter()
        .map(|p| {
            p.map(|r| {
                rows.push(r);
                rows.len() - 1
            })
        })
        .collect();
    (rows, dense)
}

/// Stage 4 plus evaluation, once per repeat with seeds `seed + r`.
pub fn train_low_finetune(
    cfg: &RunConfig,
    prep: &Prepared,
    high: &ModelStack,
    pretrained: &ModelStack,
    method: &str,
    dir: &RunDir,
    resume: bool,
) -> Result<MethodReport> {
    let mut reports = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let seed = cfg.seed + r as u64;
        let mut model = pretrained.clone();
        model.inherit_regressor(high)?;
        let rdir = dir.join(Phase::FinetuneLow.as_str()).join(&format!("repeat{r}"));
        run_phase(&rdir, Phase::FinetuneLow, &mut model, resume, |m, hook| {
            let plan = cfg.plan(Phase::FinetuneLow, cfg.loss, seed);
            let (tr, va) = split(&prep.low_labeled, cfg.train_frac, seed)?;
            finetune_low(
                m,
                &Supervised::from_dataset(&tr)?,
                &Supervised::from_dataset(&va)?,
                &plan,
                Some(r),
                Some(hook),
            )
            
        })?;
        reports.push(evaluate_model(&model, &prep.test_low).map_err(|e| e.in_phase("evaluate"))?);
    }
    Ok(MethodReport::from_repeats(method, reports))
}

/// Loads stage-4 checkpoints of every repeat and evaluates them.
pub fn evaluate_low(cfg: &RunConfig, prep: &Prepared, variant: Variant, dir: &RunDir) -> Result<MethodReport> {
    let mut reports = Vec::new();
    for r in 0..cfg.repeats {
        let rdir = dir.join(Phase::FinetuneLow.as_str()).join(&format!("repeat{r}"));
        if !rdir.has_checkpoint() {
            return Err(Error::MissingPhase(Phase::FinetuneLow.to_string()));
        }
        let mut model = ModelStack::build(&low_spec(cfg, prep, variant.transmitter), cfg.seed)?;
        rdir.load(&mut model)?;
        reports.push(evaluate_model(&model, &prep.test_low)?);
    }
    Ok(MethodReport::from_repeats(variant.name(), reports))
}

/// Plain MLP baseline on the low domain, once per repeat.
pub fn mlp_baseline(cfg: &RunConfig, prep: &Prepared, dir: &RunDir, resume: bool) -> Result<MethodReport> {
    let spec = ModelSpec {
        transmitter: TransmitterKind::None,
        ..low_spec(cfg, prep, false)
    };
    let mut reports = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let seed = cfg.seed + r as u64;
        let mut model = ModelStack::build(&spec, seed)?;
        let rdir = dir.join(&format!("repeat{r}"));
        run_phase(&rdir, Phase::FinetuneLow, &mut model, resume, |m, hook| {
            let plan = cfg.plan(Phase::FinetuneLow, ClrKind::None, seed);
            let (tr, va) = split(&prep.low_labeled, cfg.train_frac, seed)?;
            train_mlp(
                m,
                &Supervised::from_dataset(&tr)?,
                &Supervised::from_dataset(&va)?,
                &plan,
                Some(r),
                Some(hook),
            )
            
        })?;
        reports.push(evaluate_model(&model, &prep.test_low)?);
    }
    Ok(MethodReport::from_repeats("mlp", reports))
}

/// Stages 3 and 4 plus evaluation for one variant.
pub fn run_variant(
    cfg: &RunConfig,
    prep: &Prepared,
    high: &ModelStack,
    variant: Variant,
    dir: &RunDir,
    resume: bool,
) -> Result<MethodReport> {
    let pre = train_low_pretrain(cfg, prep, high, variant, dir, resume)?;
    train_low_finetune(cfg, prep, high, &pre, &variant.name(), dir, resume)
}

/// Full report of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub methods: Vec<MethodReport>,
}

/// All four stages and evaluation for the configured variant. Completed
/// stages found in `cfg.out_dir` are loaded instead of retrained.
pub fn run_all(cfg: &RunConfig, corpus: &Corpus) -> Result<RunReport> {
    let prep = prepare(corpus, cfg.standardize)?;
    let dir = RunDir::new(&cfg.out_dir);
    let high = train_high(cfg, &prep, &dir, true, Phase::FinetuneHigh)?;
    let variant = cfg.variant();
    let report = run_variant(cfg, &prep, &high, variant, &dir, true)?;
    let out = RunReport {
        seed: cfg.seed,
        methods: vec![report],
    };
    write_reports(&cfg.out_dir, &out)?;
    Ok(out)
}

/// Every combination of `losses` × `transmitters`, sharing stages 1 and 2.
pub fn ablate(cfg: &RunConfig, corpus: &Corpus, losses: &[ClrKind], transmitters: &[bool]) -> Result<RunReport> {
    let prep = prepare(corpus, cfg.standardize)?;
    let dir = RunDir::new(&cfg.out_dir);
    let high = train_high(cfg, &prep, &dir.join("high"), true, Phase::FinetuneHigh)?;
    let mut methods = Vec::new();
    for &clr in losses {
        for &transmitter in transmitters {
            let variant = Variant { clr, transmitter };
            let vdir = dir.join(&variant.name());
            methods.push(run_variant(cfg, &prep, &high, variant, &vdir, true)?);
        }
    }
    let out = RunReport { seed: cfg.seed, methods };
    write_reports(&cfg.out_dir, &out)?;
    Ok(out)
}

pub fn comparison_tsv(report: &RunReport) -> String {
    let mut s = String::from("method\tdrugwise_pearson\tdrugwise_rmse\tsamplewise_pearson\tsamplewise_rmse\n");
    for m in &report.methods {
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            m.method, m.drugwise_pearson, m.drugwise_rmse, m.samplewise_pearson, m.samplewise_rmse
        ));
    }
    s
}

pub fn topk_tsv(report: &RunReport) -> String {
    let mut s = String::from("method\tk\tprecision\n");
    for m in &report.methods {
        for (k, v) in &m.topk_precision {
            s.push_str(&format!("{}\t{k}\t{v:.6}\n", m.method));
        }
    }
    s
}

pub fn write_reports(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    fs::write(dir.join("comparison.tsv"), comparison_tsv(report))?;
    fs::write(dir.join("topk.tsv"), topk_tsv(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchConfig;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            z_dim: 8,
            encoder_widths: vec![16, 8],
            decoder_widths: vec![8, 16],
            transmitter_widths: vec![8, 8],
            regressor_shared: vec![8],
            regressor_head: vec![4, 1],
            dropout: 0.1,
        }
    }

    fn plan(phase: Phase) -> TrainPlan {
        TrainPlan {
            phase,
            batch_size: 16,
            lr: 5e-3,
            lambda: 0.8,
            decay: 0.8,
            n_f: 2,
            n_uf: 2,
            max_epochs: 10,
            patience: 10,
            min_delta: 1e-5,
            clr: ClrKind::Contrastive,
            temperature: 1.0,
            mmd_scales: crate::losses::DEFAULT_MMD_SCALES.to_vec(),
            wgan: WganConfig::default(),
            seed: 3,
        }
    }

    fn model(input: usize, t: TransmitterKind) -> ModelStack {
        ModelStack::build(
            &ModelSpec {
                input_dim: input,
                tasks: 3,
                transmitter: t,
                arch: small_arch(),
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn early_stopping_constant_loss_stops_after_patience() {
        let mut s = EarlyStopping::new(3, 1e-5, 1.0);
        let mut n = 0;
        while !s.should_stop() {
            s.observe(1.0);
            n += 1;
        }
        assert_eq!(n, 3);
    }

    #[test]
    fn early_stopping_never_fires_on_strict_improvement() {
        let mut s = EarlyStopping::new(2, 1e-5, 1.0);
        for i in 0..100 {
            assert!(s.observe(1.0 - 0.001 * (i + 1) as f64));
            assert!(!s.should_stop());
        }
    }

    #[test]
    fn clr_kind_parses() {
        for k in ClrKind::ALL {
            assert_eq!(k.as_str().parse::<ClrKind>().unwrap(), k);
        }
        assert!("cosine".parse::<ClrKind>().is_err());
    }

    #[test]
    fn plan_validation() {
        let mut p = plan(Phase::PretrainLow);
        p.lambda = 1.5;
        assert!(p.validate().is_err());
        let mut p = plan(Phase::FinetuneLow);
        p.n_uf = 0;
        assert!(p.validate().is_err());
        let mut p = plan(Phase::PretrainLow);
        p.batch_size = 1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn vae_pretraining_reduces_training_loss() {
        let mut rng = Rng::new(5);
        let t = rng.normal_matrix(200, 3);
        let a = rng.normal_matrix(3, 12);
        let x = t.dot(&a);
        let mut m = model(12, TransmitterKind::None);
        let mut p = plan(Phase::PretrainHigh);
        p.max_epochs = 15;
        let r = pretrain_high(&mut m, &x, &x, &p, None).unwrap();
        let first = r.trace.first().unwrap().train_loss;
        let last = r.trace.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn pretrain_low_keeps_high_encoder_intact_and_counts_wgan_updates() {
        let mut rng = Rng::new(6);
        let xh = rng.normal_matrix(40, 10);
        let xl = rng.normal_matrix(40, 12);
        let high = model(10, TransmitterKind::None);
        let before = high.store.clone();
        let pairs: Vec<Option<usize>> = (0..40).map(|i| (i % 4 != 0).then_some(i)).collect();
        let al = Alignment::from_high(&high, &xh, pairs, &xh.slice(ndarray::s![..8, ..]).to_owned()).unwrap();
        let mut low = model(12, TransmitterKind::Mlp);
        let mut p = plan(Phase::PretrainLow);
        p.clr = ClrKind::Wgan;
        p.max_epochs = 2;
        let val = xl.slice(ndarray::s![..8, ..]).to_owned();
        let r = pretrain_low(&mut low, &xl, &val, &al, &p, None).unwrap();
        let ids: Vec<_> = high.store.ids().collect();
        assert!(high.store.values_equal(&before, &ids));
        assert_eq!(r.generator_updates, 2 * 3);
        assert_eq!(r.critic_updates, 5 * r.generator_updates);
    }

    #[test]
    fn zero_pairs_with_positive_lambda_is_a_config_error() {
        let mut rng = Rng::new(7);
        let xl = rng.normal_matrix(10, 12);
        let high = model(10, TransmitterKind::None);
        let xh = rng.normal_matrix(4, 10);
        let al = Alignment::from_high(&high, &xh, vec![None; 10], &xh).unwrap();
        let mut low = model(12, TransmitterKind::Mlp);
        let p = plan(Phase::PretrainLow);
        let val = xl.slice(ndarray::s![..4, ..]).to_owned();
        assert!(matches!(
            pretrain_low(&mut low, &xl, &val, &al, &p, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn compact_pairs_renumbers() {
        let (rows, dense) = compact_pairs(&[Some(4), None, Some(1)]);
        assert_eq!(rows, vec![4, 1]);
        assert_eq!(dense, vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn variant_names() {
        let v = |clr, transmitter| Variant { clr, transmitter }.name();
        assert_eq!(v(ClrKind::Contrastive, true), "cleit_contrastive");
        assert_eq!(v(ClrKind::None, false), "vae_mlp_no_transmitter");
    }
}
