//! Training loop: Adam with decoupled weight decay, a seeded validation
//! split, per-epoch validation Dice, a CSV log and best/last checkpoints.

mod checkpoint;
mod data;
mod infer;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_VERSION};
pub use data::{make_batches, prepare_case, prepare_cases, split_dataset, Batch, BatchMode, PreparedCase};
pub use infer::{inference_grid, mean_dice, pathway_dice, predict_case, predict_grid, predict_volume};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{dice_loss_grad, downsample_target, one_hot, progressive_loss_grad, LossConfig};
use crate::metrics::{LobeDice, N_LOBES};
use crate::networks::{build, Mode, NetKind, Network, NetworkSpec, Parameters};
use crate::nn::ops::BatchStats;
use crate::nn::Tensor;
use crate::scalar::Scalar;
use crate::volume::{Manifest, LOBE_NAMES};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const TRAIN_STATE: &str = "train_state.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_batch_size() -> usize {
    1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// Adam at lr 0.01, weight decay 1e-7, one volume per batch.
    pub fn volumetric() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 0.01,
            weight_decay: 1e-7,
            batch_size: 1,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    /// Adam at lr 5e-5 over batches of ten slices.
    pub fn slices() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 0.0,
            batch_size: 10,
            ..Self::volumetric()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkSpec,
    #[serde(default)]
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Grid every case is resampled to, `[nx, ny, nz]`.
    pub target_shape: [usize; 3],
    pub checkpoint_dir: PathBuf,
}

fn default_epochs() -> usize {
    200
}
fn default_val_fraction() -> f64 {
    0.1
}

impl TrainConfig {
    /// Defaults for `kind` on `target_shape`: volumetric Adam settings and
    /// uniform dice for the 3D networks, slice settings and generalized
    /// dice for the 2D U-Net.
    pub fn for_kind(kind: NetKind, target_shape: [usize; 3], checkpoint_dir: impl Into<PathBuf>) -> Self {
        let (loss, optimizer) = if kind.is_2d() {
            (LossConfig::generalized(), OptimizerConfig::slices())
        } else {
            (LossConfig::default(), OptimizerConfig::volumetric())
        };
        Self {
            network: NetworkSpec::for_kind(kind, target_shape),
            loss,
            optimizer,
            epochs: default_epochs(),
            val_fraction: default_val_fraction(),
            seed: 0,
            target_shape,
            checkpoint_dir: checkpoint_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn batch_mode(&self) -> BatchMode {
        if self.network.kind.is_2d() {
            BatchMode::Slices2d
        } else {
            BatchMode::Volume3d
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be positive".into()));
        }
        let s = self.network.spatial();
        let matches = if self.network.kind.is_2d() {
            s[..2] == self.target_shape[..2]
        } else {
            s == self.target_shape
        };
        if !matches || self.target_shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "target_shape {:?} does not fit network input {:?}",
                self.target_shape, self.network.in_shape
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: LobeDice,
    /// Mean overall validation Dice of every pathway, coarsest first.
    pub val_pathway_overall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub rng_seed: u64,
    /// Words consumed from the training stream so far.
    pub rng_word_pos: u64,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub history: Vec<EpochRecord>,
}

/// Adam with decoupled weight decay: each parameter is first scaled by
/// `1 - lr * weight_decay`, then moved by the bias-corrected Adam step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: OptimizerConfig,
    step: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut Parameters<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step));
        let lr = T::lit(c.lr);
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let eps = T::lit(c.eps);
        for (name, g) in grads {
            let p = params
                .trainable
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if p.dims() != g.dims() {
                return Err(Error::ShapeMismatch(format!("gradient of {name} is {} but parameter is {}", g.dims(), p.dims())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.data().len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.data().len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss, parameter gradients and batch-norm statistics of one batch.
pub struct StepOutput<T> {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor<T>>,
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

/// Forward and backward pass on `batch`. Three-pathway networks use the
/// weighted progressive sum; single-head networks the plain dice loss.
pub fn loss_and_grads<T: Scalar>(net: &Network, params: &Parameters<T>, batch: &Batch<T>, loss: &LossConfig, mode: Mode) -> Result<StepOutput<T>> {
    let pass = net.forward_pass(params, &batch.input, mode)?;
    let spatial = batch.spatial();
    let heads = pass.head_values();
    let targets = heads
        .iter()
        .map(|h| {
            let out = h.dims().spatial;
            let down: Vec<Vec<u8>> = batch.labels.iter().map(|l| downsample_target(l, spatial, out)).collect();
            let refs: Vec<&[u8]> = down.iter().map(Vec::as_slice).collect();
            one_hot::<T>(&refs, out, h.dims().c)
        })
        .collect::<Result<Vec<_>>>()?;
    let (value, head_grads) = if heads.len() == 3 {
        if targets.iter().any(|t| t.dims() != targets[0].dims()) {
            return Err(Error::ShapeMismatch("progressive pathways must share one output grid".into()));
        }
        progressive_loss_grad(&heads, &targets[0], loss)?
    } else if heads.len() == 1 {
        let lg = dice_loss_grad(&heads[0], &targets[0], loss)?;
        (lg.value, vec![lg.grad])
    } else {
        return Err(Error::Unsupported(format!("networks with {} heads", heads.len())));
    };
    let seeds: Vec<_> = pass.heads.iter().copied().zip(head_grads).collect();
    let grads = pass.tape.backward(&seeds).into_params();
    Ok(StepOutput {
        loss: value,
        grads,
        bn_stats: pass.bn_stats,
    })
}

/// Mean validation Dice of the last pathway plus the overall Dice of every
/// pathway.
pub fn validate_cases<T: Scalar>(net: &Network, params: &Parameters<T>, cases: &[PreparedCase<T>]) -> Result<(LobeDice, Vec<f64>)> {
    let mut per_path: Vec<Vec<LobeDice>> = vec![Vec::new(); net.heads().len()];
    for c in cases {
        let preds = predict_grid(net, params, &c.input, c.shape)?;
        for (h, d) in pathway_dice(&preds, &c.labels)?.into_iter().enumerate() {
            per_path[h].push(d);
        }
    }
    let means = per_path.iter().map(|s| mean_dice(s)).collect::<Result<Vec<_>>>()?;
    let overall = means.iter().map(|d| d.overall).collect();
    Ok((*means.last().expect("at least one head"), overall))
}

pub fn log_header() -> String {
    let lobes: Vec<String> = LOBE_NAMES.iter().map(|l| format!("val_dice_{}", l.to_lowercase())).collect();
    format!("epoch,train_loss,{},val_dice_overall\n", lobes.join(","))
}

pub fn log_row(r: &EpochRecord) -> String {
    let mut s = format!("{},{:.6}", r.epoch, r.train_loss);
    for v in r.val_dice.lobes.iter().take(N_LOBES) {
        let _ = write!(s, ",{v:.6}");
    }
    let _ = writeln!(s, ",{:.6}", r.val_dice.overall);
    s
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `cfg.network` on the manifest. Deterministic for a fixed config,
/// seed and dataset. Writes `train_log.csv`, `best.ckpt`, `last.ckpt` and
/// `train_state.json` into `cfg.checkpoint_dir`.
pub fn train<T: Scalar>(cfg: &TrainConfig, manifest: &Manifest) -> Result<TrainState> {
    cfg.validate()?;
    if manifest.len() < 2 {
        return Err(Error::InvalidArgument(format!("training needs at least 2 cases, manifest has {}", manifest.len())));
    }
    let dir = &cfg.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (train_entries, val_entries) = split_dataset(manifest, cfg.val_fraction, cfg.seed)?;
    let train_cases = prepare_cases::<T>(manifest, &train_entries, cfg.target_shape)?;
    let val_cases = prepare_cases::<T>(manifest, &val_entries, cfg.target_shape)?;
    let mode = cfg.batch_mode();
    log::info!(
        "training {} on {} cases ({} validation), {} pipeline",
        cfg.network.kind,
        train_cases.len(),
        val_cases.len(),
        match mode {
            BatchMode::Volume3d => "3d volume",
            BatchMode::Slices2d => "2d slice",
        }
    );

    let (net, mut params, _) = build::<T>(&cfg.network, cfg.seed)?;
    let mut adam = Adam::new(cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let log_path = dir.join(TRAIN_LOG);
    std::fs::write(&log_path, log_header()).map_err(|e| Error::io(&log_path, e))?;

    let mut state = TrainState {
        epoch: 0,
        best_val_dice: f64::NEG_INFINITY,
        best_epoch: 0,
        best_checkpoint: dir.join(BEST_CHECKPOINT),
        last_checkpoint: dir.join(LAST_CHECKPOINT),
        rng_seed: cfg.seed,
        rng_word_pos: 0,
        train_cases: train_entries.iter().map(|c| c.case_id.clone()).collect(),
        val_cases: val_entries.iter().map(|c| c.case_id.clone()).collect(),
        history: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(&train_cases, mode, cfg.optimizer.batch_size, Some(rng.random()))?;
        if batches.is_empty() {
            return Err(Error::InvalidArgument("training split yields no batches".into()));
        }
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let out = loss_and_grads(&net, &params, batch, &cfg.loss, Mode::Train { dropout_seed: rng.random() })?;
            if !out.loss.is_finite() || out.grads.values().any(|g| !g.all_finite()) {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            total += out.loss;
            adam.step(&mut params, &out.grads)?;
            params.update_running_stats(&out.bn_stats);
            if !params.all_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
        }
        let (val_dice, val_pathway_overall) = validate_cases(&net, &params, &val_cases)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches.len() as f64,
            val_dice,
            val_pathway_overall,
        };
        append(&log_path, &log_row(&record))?;
        log::info!("epoch {epoch}: loss {:.5}, val dice {:.4}", record.train_loss, val_dice.overall);
        if val_dice.overall > state.best_val_dice {
            state.best_val_dice = val_dice.overall;
            state.best_epoch = epoch;
            save_checkpoint(&state.best_checkpoint, &cfg.network, &params)?;
        }
        save_checkpoint(&state.last_checkpoint, &cfg.network, &params)?;
        state.epoch = epoch;
        state.rng_word_pos = rng.get_word_pos() as u64;
        state.history.push(record);
        write_json(&dir.join(TRAIN_STATE), &state)?;
    }
    Ok(state)
}
