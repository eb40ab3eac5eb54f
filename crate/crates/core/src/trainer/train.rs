use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::io::write_json;
use crate::dataset::{pk_sample, DatasetIndex, TrainBatch};
use crate::error::{config_err, Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{ModelConfig, SeqMasksModel};
use crate::nn::Mode;
use crate::trainer::checkpoint::{read_checkpoint, restore, restore_groups, save_checkpoint, CheckpointManifest};
use crate::trainer::config::{config_hash, Regime, TrainConfig};

const APPEARANCE_GROUPS: [&str; 3] = ["backbone", "global_bottleneck", "fg_bottleneck"];
const GAIT_GROUPS: [&str; 3] = ["gait_main", "gait_mgp", "gait_heads"];

pub const LOG_FILE: &str = "train_log.csv";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.safetensors")
}

struct Group {
    opt: AdamW,
    base_lr: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: SeqMasksModel,
    /// Identity → classifier row, in ascending identity order.
    pub classes: BTreeMap<u32, usize>,
    groups: Vec<Group>,
    /// Completed optimizer steps.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Builds the model for `index`'s train split. In the finetune regime the component
    /// checkpoints are restored before any optimizer exists.
    pub fn new(config: &TrainConfig, index: &DatasetIndex) -> Result<Self> {
        config.validate()?;
        let ids: Vec<u32> = index.train_groups().keys().copied().collect();
        if ids.len() < config.batch.p {
            return Err(config_err!(
                "train split has {} identities, batch needs P={}",
                ids.len(),
                config.batch.p
            ));
        }
        let classes: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut model_cfg: ModelConfig = config.model.clone();
        model_cfg.num_classes = classes.len();
        let model = SeqMasksModel::new(&model_cfg, config.seed, candle_core::DType::F32)?;

        if config.regime == Regime::Finetune {
            let ft = config
                .finetune
                .as_ref()
                .ok_or_else(|| config_err!("finetune regime without component checkpoints"))?;
            let app = read_checkpoint(&ft.appearance)?;
            let n = restore_groups(&model, &app, &APPEARANCE_GROUPS, &["global", "foreground"])?;
            log::info!("restored {n} appearance tensors from {}", ft.appearance.display());
            let gait = read_checkpoint(&ft.gait)?;
            let n = restore_groups(&model, &gait, &GAIT_GROUPS, &["gait_main", "gait_mgp"])?;
            log::info!("restored {n} gait tensors from {}", ft.gait.display());
        }

        let mut trainer = Self {
            config: config.clone(),
            model,
            classes,
            groups: Vec::new(),
            step: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        trainer.build_optimizers()?;
        Ok(trainer)
    }

    fn build_optimizers(&mut self) -> Result<()> {
        let o = &self.config.optimizer;
        let params = |lr: f64| ParamsAdamW {
            lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        };
        let pretrained = self.model.appearance.as_ref().is_some_and(|a| a.backbone.pretrained());
        let backbone_lr = if pretrained { o.lr_backbone } else { o.lr };
        let backbone: Vec<Var> = self.vars(|g| g == "backbone");
        let rest: Vec<Var> = self.vars(|g| g != "backbone");
        let mut groups = vec![Group {
            opt: AdamW::new(rest, params(o.lr))?,
            base_lr: o.lr,
        }];
        if !backbone.is_empty() {
            groups.push(Group {
                opt: AdamW::new(backbone, params(backbone_lr))?,
                base_lr: backbone_lr,
            });
        }
        self.groups = groups;
        Ok(())
    }

    fn vars(&self, filter: impl Fn(&str) -> bool) -> Vec<Var> {
        self.model.store.trainable_vars(filter).into_iter().map(|(_, v)| v).collect()
    }

    /// Restores a full checkpoint and continues from its epoch and step.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let ckpt = read_checkpoint(path)?;
        if ckpt.manifest.config_hash != config_hash(&self.model.config) {
            log::warn!("{}: model configuration hash differs from the current configuration", path.display());
        }
        restore(&self.model, &ckpt)?;
        self.epoch = ckpt.manifest.epoch;
        self.step = ckpt.manifest.step;
        // moments restart from zero
        self.build_optimizers()?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, index: &DatasetIndex) -> usize {
        self.config.steps_per_epoch.unwrap_or_else(|| {
            let per_batch = self.config.batch.p * self.config.batch.kseq;
            (index.split_counts(crate::dataset::Split::Train).sequences / per_batch).max(1)
        })
    }

    /// Sampler RNG for an epoch; independent of how many epochs ran in this process.
    pub fn begin_epoch(&mut self, epoch: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        self.rng = rng;
        let scale = self.config.optimizer.lr_scale(epoch, self.config.epochs);
        for g in &mut self.groups {
            g.opt.set_learning_rate(g.base_lr * scale);
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.groups[0].opt.learning_rate()
    }

    pub fn sample(&mut self, index: &DatasetIndex) -> Result<TrainBatch> {
        pk_sample(index, &self.config.batch, &self.config.augment, &mut self.rng)
    }

    fn class_rows(&self, labels: &[u32]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|id| {
                self.classes
                    .get(id)
                    .copied()
                    .ok_or_else(|| config_err!("identity {id} is not in the training class map"))
            })
            .collect()
    }

    /// Train-mode forward pass and loss.
    pub fn loss(&self, batch: &TrainBatch) -> Result<(Tensor, LossBreakdown)> {
        let out = self.model.forward_batch(batch, Mode::Train)?;
        let rows = self.class_rows(&batch.labels)?;
        total_loss(&out, &batch.labels, &rows, self.model.config.branches, &self.config.loss)
    }

    pub fn gradients(&self, batch: &TrainBatch) -> Result<(LossBreakdown, GradStore)> {
        let (loss, b) = self.loss(batch)?;
        Ok((b, loss.backward()?))
    }

    /// One optimizer step on `batch`. A non-finite loss aborts before any update.
    pub fn step_on(&mut self, batch: &TrainBatch) -> Result<LossBreakdown> {
        let (loss, b) = self.loss(batch)?;
        if !b.l_total.is_finite() || !loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch: batch.keys.clone(),
            });
        }
        let grads = loss.backward()?;
        for g in &mut self.groups {
            g.opt.step(&grads)?;
        }
        self.step += 1;
        Ok(b)
    }

    pub fn train_step(&mut self, index: &DatasetIndex) -> Result<LossBreakdown> {
        let batch = self.sample(index)?;
        self.step_on(&batch)
    }

    pub fn save(&self, path: &Path, metrics: BTreeMap<String, f64>) -> Result<()> {
        let mut manifest = CheckpointManifest::for_model(&self.model, &self.config, self.epoch, self.step);
        manifest.metrics = metrics;
        save_checkpoint(path, &self.model, &manifest)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// Total loss per step run in this call.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.checkpoints.last().map(PathBuf::as_path)
    }
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: usize,
    epoch: usize,
    keys: &'a [String],
}

fn open_log(path: &Path, append: bool) -> Result<std::fs::File> {
    let exists = path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if !append || !exists {
        let mut header = vec!["step", "epoch"];
        header.extend(LossBreakdown::COLUMNS);
        header.extend(["lr", "wall_time"]);
        writeln!(f, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Full training run: per-step CSV log, stderr progress, one checkpoint per epoch in
/// `config.output`.
pub fn run(config: &TrainConfig, index: &DatasetIndex, resume: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, index)?;
    if let Some(path) = resume {
        trainer.resume(path)?;
    }
    let out = &config.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let mut log = open_log(&log_path, resume.is_some())?;
    let steps = trainer.steps_per_epoch(index);
    let started = Instant::now();
    let mut checkpoints = Vec::new();
    let mut losses = Vec::new();

    for epoch in trainer.epoch..config.epochs {
        trainer.begin_epoch(epoch);
        let mut sum = 0.0;
        for _ in 0..steps {
            let batch = trainer.sample(index)?;
            let b = match trainer.step_on(&batch) {
                Ok(b) => b,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    let dump = NonFiniteDump {
                        step: trainer.step,
                        epoch,
                        keys: &batch.keys,
                    };
                    write_json(&out.join("nonfinite_batch.json"), &dump)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let mut row = vec![trainer.step.to_string(), epoch.to_string()];
            row.extend(b.values().iter().map(|v| format!("{v:.9e}")));
            row.push(format!("{:.3e}", trainer.learning_rate()));
            row.push(format!("{:.3}", started.elapsed().as_secs_f64()));
            writeln!(log, "{}", row.join(",")).map_err(|e| Error::io(&log_path, e))?;
            if config.log_every > 0 && trainer.step % config.log_every == 0 {
                eprintln!(
                    "epoch {epoch} step {} loss {:.4} (fusion {:.4} app {:.4} gait {:.4}) lr {:.1e}",
                    trainer.step,
                    b.l_total,
                    b.l_fusion,
                    b.l_appearance,
                    b.l_gait,
                    trainer.learning_rate()
                );
            }
            sum += b.l_total;
            losses.push(b.l_total);
        }
        trainer.epoch = epoch + 1;
        let path = out.join("checkpoints").join(checkpoint_name(epoch + 1));
        let metrics = BTreeMap::from([("loss_mean".to_string(), sum / steps as f64)]);
        trainer.save(&path, metrics)?;
        checkpoints.push(path);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        steps: trainer.step,
        log: log_path,
        checkpoints,
        losses,
    })
}
