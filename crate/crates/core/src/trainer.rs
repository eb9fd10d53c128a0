//! Stage-1 training of either tracker and stage-2 fine-tuning of the fast
//! tracker against a frozen slow teacher.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use crate::backbone::GROUP_BACKBONE;
use crate::error::{Error, Result};
use crate::event_io::BBox;
use crate::fusion::GROUP_GCN;
use crate::head::GROUP_HEAD;
use crate::loss::{kd_loss, LossBundle, LossWeights};
use crate::model::{Sample, Tracker, TrackerKind};
use crate::nn::{AdamW, AdamWConfig, Checkpoint};
use crate::pipeline::{build_sample, sample_pairs, PairSpec, Prepared, SamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Slow,
    Fast,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Slow => "slow",
            Stage::Fast => "fast",
            Stage::Finetune => "finetune",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slow" => Ok(Stage::Slow),
            "fast" => Ok(Stage::Fast),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(Error::Argument(format!("unknown stage `{s}`, expected slow, fast or finetune"))),
        }
    }
}

impl Stage {
    /// Tracker whose parameters this stage updates.
    pub fn trained_kind(self) -> TrackerKind {
        match self {
            Stage::Slow => TrackerKind::Slow,
            Stage::Fast | Stage::Finetune => TrackerKind::Fast,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Learning rate of the backbone and head groups.
    pub lr_backbone: f64,
    pub lr_gcn: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub desk_scale: bool,
    pub sampler: SamplerConfig,
    /// Pairs in the fixed distillation probe batch.
    pub probe_size: usize,
}

impl TrainConfig {
    pub fn full(stage: Stage) -> Self {
        let (epochs, lr_backbone) = match stage {
            Stage::Slow | Stage::Fast => (50, 4e-4),
            Stage::Finetune => (20, 4e-5),
        };
        TrainConfig {
            stage,
            epochs,
            lr_backbone,
            lr_gcn: 5e-4,
            weight_decay: 1e-4,
            batch_size: 38,
            weights: LossWeights::default(),
            seed: 0,
            desk_scale: false,
            sampler: SamplerConfig::default(),
            probe_size: 8,
        }
    }

    /// A fifth of the epochs and batch 8. Fine-tuning keeps the stage-1
    /// backbone rate: four epochs at the tenfold lower rate barely move
    /// from-scratch features.
    pub fn desk(stage: Stage) -> Self {
        let full = Self::full(stage);
        TrainConfig {
            epochs: full.epochs / 5,
            batch_size: 8,
            desk_scale: true,
            lr_backbone: Self::full(Stage::Slow).lr_backbone,
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_gcn", self.lr_gcn),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if self.sampler.pairs_per_sequence == 0 {
            return Err(Error::Config("pairs_per_sequence must be at least 1".into()));
        }
        Ok(())
    }

    /// Loss weights in effect: stage 1 never distils.
    pub fn effective_weights(&self) -> LossWeights {
        match self.stage {
            Stage::Finetune => self.weights,
            _ => self.weights.without_kd(),
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        let mut cfg = AdamWConfig {
            lr: self.lr_backbone,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        };
        cfg.group_lr.insert(GROUP_BACKBONE.into(), self.lr_backbone);
        cfg.group_lr.insert(GROUP_HEAD.into(), self.lr_backbone);
        cfg.group_lr.insert(GROUP_GCN.into(), self.lr_gcn);
        cfg
    }
}

/// Mean loss components of one epoch plus optional measurements.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub loss: LossBundle,
    pub kd_probe: Option<f64>,
    pub mean_iou: Option<f64>,
}

pub const CURVE_HEADER: &str = "epoch,step,focal,l1,giou,kd,total,kd_probe,mean_iou";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let l = &self.loss;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.steps,
            l.focal,
            l.l1,
            l.giou,
            l.kd,
            l.total,
            opt(self.kd_probe),
            opt(self.mean_iou)
        )
    }
}

pub fn write_curve(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CURVE_HEADER}")?;
    for e in log {
        writeln!(f, "{}", e.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

/// Frozen slow tracker used as the distillation target.
pub struct Teacher {
    model: Tracker<f32>,
    digest: String,
}

impl Teacher {
    pub fn new(mut model: Tracker<f32>) -> Result<Self> {
        if model.kind != TrackerKind::Slow {
            return Err(Error::Config("the teacher must be a slow tracker".into()));
        }
        model.ps.freeze_all();
        let digest = model.ps.digest();
        Ok(Teacher { model, digest })
    }

    pub fn model(&self) -> &Tracker<f32> {
        &self.model
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn features(&self, sample: &Sample) -> Result<crate::tensor::Mat<f32>> {
        Ok(self.model.forward(sample)?.0.features)
    }

    fn assert_untouched(&self) -> Result<()> {
        if self.model.ps.digest() != self.digest {
            return Err(Error::Config("teacher parameters changed during fine-tuning".into()));
        }
        Ok(())
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Tracker<f32>,
    pub opt: AdamW<f32>,
    /// Epochs completed.
    pub epoch: usize,
    teacher: Option<Teacher>,
    probe: Vec<(Sample, BBox)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Tracker<f32>, teacher: Option<Tracker<f32>>) -> Result<Self> {
        cfg.validate()?;
        if model.kind != cfg.stage.trained_kind() {
            return Err(Error::Config(format!(
                "stage {} trains a {} tracker, got a {} one",
                cfg.stage,
                cfg.stage.trained_kind(),
                model.kind
            )));
        }
        let teacher = match (cfg.stage, teacher) {
            (Stage::Finetune, Some(t)) => {
                if t.cfg.embed_dim != model.cfg.embed_dim || t.cfg.n_s() != model.cfg.n_s() {
                    return Err(Error::Config(format!(
                        "teacher features are {}x{}, student features {}x{}",
                        t.cfg.n_s(),
                        t.cfg.embed_dim,
                        model.cfg.n_s(),
                        model.cfg.embed_dim
                    )));
                }
                Some(Teacher::new(t)?)
            }
            (Stage::Finetune, None) => {
                return Err(Error::Config("fine-tuning requires a slow checkpoint".into()));
            }
            (_, _) => None,
        };
        let opt = AdamW::new(cfg.optimizer(), &model.ps);
        Ok(Trainer {
            cfg,
            model,
            opt,
            epoch: 0,
            teacher,
            probe: Vec::new(),
        })
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    pub fn steps(&self) -> u64 {
        self.opt.step
    }

    /// Fixes the probe batch from `data`; pairs come from a stream no epoch
    /// uses.
    pub fn set_probe(&mut self, data: &[Prepared]) -> Result<()> {
        let pairs = sample_pairs(data, &self.cfg.sampler, self.cfg.seed ^ 0x9E37_79B9, usize::MAX >> 33)?;
        self.probe = pairs
            .iter()
            .take(self.cfg.probe_size)
            .map(|p| build_sample(data, &self.model.cfg, p))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Mean feature MSE between student and teacher over the probe batch.
    pub fn kd_probe(&self) -> Result<Option<f64>> {
        let Some(t) = &self.teacher else { return Ok(None) };
        if self.probe.is_empty() {
            return Ok(None);
        }
        let mut sum = 0.0;
        for (s, _) in &self.probe {
            let f = self.model.forward(s)?.0.features;
            sum += kd_loss(&f, &t.features(s)?)?.0;
        }
        Ok(Some(sum / self.probe.len() as f64))
    }

    fn batch_step(&mut self, data: &[Prepared], batch: &[PairSpec], tag: &str) -> Result<LossBundle> {
        let weights = self.cfg.effective_weights();
        let mut grads = self.model.ps.grads();
        let mut sum = LossBundle::default();
        for pair in batch {
            let (sample, target) = build_sample(data, &self.model.cfg, pair)?;
            let teacher = match &self.teacher {
                Some(t) => Some(t.features(&sample)?),
                None => None,
            };
            let (b, _) = self
                .model
                .loss_and_grad(&sample, &target, teacher.as_ref(), weights, &mut grads)
                .map_err(|e| diagnose(e, tag, pair, &data[pair.seq].record.name))?;
            sum.accumulate(&b);
        }
        grads.scale(1.0 / batch.len() as f32);
        self.opt.step(&mut self.model.ps, &grads).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} after {tag}")),
            other => other,
        })?;
        if let Some(t) = &self.teacher {
            t.assert_untouched()?;
        }
        Ok(sum)
    }

    /// Runs one epoch and returns its mean losses.
    pub fn run_epoch(&mut self, data: &[Prepared]) -> Result<EpochLog> {
        let epoch = self.epoch;
        let pairs = sample_pairs(data, &self.cfg.sampler, self.cfg.seed, epoch)?;
        let mut sum = LossBundle::default();
        for (b, batch) in pairs.chunks(self.cfg.batch_size).enumerate() {
            let tag = format!("epoch {epoch}, batch {b}");
            sum.accumulate(&self.batch_step(data, batch, &tag)?);
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            steps: self.opt.step,
            loss: sum.scaled(1.0 / pairs.len() as f64),
            kd_probe: self.kd_probe()?,
            mean_iou: None,
        })
    }

    /// Trains until `cfg.epochs` epochs are done or `after_epoch` returns
    /// `true`. The callback may fill in `mean_iou`.
    pub fn train(
        &mut self,
        data: &[Prepared],
        mut after_epoch: impl FnMut(&Trainer, &mut EpochLog) -> Result<bool>,
    ) -> Result<Vec<EpochLog>> {
        if self.teacher.is_some() && self.probe.is_empty() {
            self.set_probe(data)?;
        }
        let mut log = Vec::new();
        while self.epoch < self.cfg.epochs {
            let mut entry = self.run_epoch(data)?;
            let stop = after_epoch(self, &mut entry)?;
            log.push(entry);
            if stop {
                break;
            }
        }
        Ok(log)
    }

    /// Model parameters plus optimizer moments and progress counters.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.meta.insert("stage".into(), self.cfg.stage.to_string());
        ck.meta.insert("epoch".into(), self.epoch.to_string());
        ck.meta.insert("step".into(), self.opt.step.to_string());
        for (id, p) in self.model.ps.iter() {
            ck.add(&format!("optim.m.{}", p.name), "optim", &p.shape, &self.opt.m[id.index()]);
            ck.add(&format!("optim.v.{}", p.name), "optim", &p.shape, &self.opt.v[id.index()]);
        }
        ck
    }

    /// Restores parameters, optimizer state and counters from a checkpoint
    /// written by [`Trainer::to_checkpoint`].
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.meta.get("stage").map(String::as_str) != Some(&self.cfg.stage.to_string()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is not a {} training state",
                self.cfg.stage
            )));
        }
        self.model.load_params(ck)?;
        let num = |key: &str| -> Result<u64> {
            ck.meta
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing or invalid `{key}`")))
        };
        self.epoch = num("epoch")? as usize;
        self.opt.step = num("step")?;
        for (id, p) in self.model.ps.iter() {
            for (prefix, dst) in [("optim.m.", &mut self.opt.m), ("optim.v.", &mut self.opt.v)] {
                let name = format!("{prefix}{}", p.name);
                let t = ck
                    .tensor(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
                let vals = t.values::<f32>();
                if vals.len() != p.data.len() {
                    return Err(Error::Checkpoint(format!("`{name}` has the wrong length")));
                }
                dst[id.index()] = vals;
            }
        }
        Ok(())
    }
}

fn diagnose(e: Error, tag: &str, pair: &PairSpec, seq: &str) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!(
            "{what} at {tag}: sequence {seq}, template window {}, search window {}",
            pair.template, pair.search
        )),
        other => other,
    }
}

/// Stage-1 training of `model` from its current parameters.
pub fn train_stage1(
    cfg: &TrainConfig,
    model: Tracker<f32>,
    data: &[Prepared],
    after_epoch: impl FnMut(&Trainer, &mut EpochLog) -> Result<bool>,
) -> Result<(Tracker<f32>, Vec<EpochLog>)> {
    if cfg.stage == Stage::Finetune {
        return Err(Error::Config("stage-1 training needs stage slow or fast".into()));
    }
    let mut t = Trainer::new(cfg.clone(), model, None)?;
    let log = t.train(data, after_epoch)?;
    Ok((t.model, log))
}

/// Stage-2 fine-tuning of `fast` with `slow` frozen as teacher. Returns the
/// teacher untouched alongside the tuned student.
pub fn train_stage2(
    cfg: &TrainConfig,
    slow: Tracker<f32>,
    fast: Tracker<f32>,
    data: &[Prepared],
    after_epoch: impl FnMut(&Trainer, &mut EpochLog) -> Result<bool>,
) -> Result<(Tracker<f32>, Tracker<f32>, Vec<EpochLog>)> {
    let mut cfg = cfg.clone();
    cfg.stage = Stage::Finetune;
    let mut t = Trainer::new(cfg, fast, Some(slow))?;
    t.set_probe(data)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        steps: 0,
        loss: LossBundle::default(),
        kd_probe: t.kd_probe()?,
        mean_iou: None,
    }];
    log.extend(t.train(data, after_epoch)?);
    let teacher = t.teacher.take().expect("fine-tuning has a teacher");
    teacher.assert_untouched()?;
    let mut slow = teacher.model;
    slow.ps.unfreeze_all();
    Ok((slow, t.model, log))
}
