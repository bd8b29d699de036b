//! Training loop, checkpoint restore, and per-volume evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::infer::{sliding_window_infer, SegmentationOutput};
use crate::loss::{argmax_classes, dice_score, DiceReport, Labels};
use crate::model::SegModel;
use crate::optim::{lr_schedule, AdamW};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::volume::{augment, preprocess, VolumeRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's steps.
    pub loss: f64,
    /// Mean foreground Dice of the training predictions.
    pub mean_dice: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: SegModel,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub dice: DiceReport,
}

fn input_tensor(rec: &VolumeRecord) -> Result<Tensor<f32>> {
    let [d, h, w] = rec.dims();
    rec.voxels.reshape(&[1, 1, d, h, w])
}

fn batch_labels(rec: &VolumeRecord) -> Result<Labels> {
    let l = rec.labels.as_ref().ok_or_else(|| Error::Input("training volume has no labels".into()))?;
    let mut shape = vec![1];
    shape.extend_from_slice(&l.shape);
    Labels::new(&shape, l.data.clone())
}

fn step_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((epoch as u64) << 32) | index as u64);
    r
}

impl Trainer {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = SegModel::new(cfg.model.clone(), cfg.classes, &mut store, &mut rng)?;
        let opt = AdamW::new(cfg.weight_decay);
        Ok(Self { cfg, model, store, opt })
    }

    /// Model and weights described by a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::from_pairs(ck.header.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let mut t = Self::new(cfg)?;
        ck.restore(&mut t.store)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, self.cfg.to_pairs(), self.cfg.seed)
    }

    /// Forward, loss, backward and one optimizer update on a prepared crop.
    pub fn step(&mut self, rec: &VolumeRecord, lr: f64) -> Result<StepOutcome> {
        let labels = batch_labels(rec)?;
        let g = Graph::new();
        let x = g.constant(input_tensor(rec)?);
        let logits = self.model.forward(&g, &self.store, x)?;
        let loss = g.dice_ce(logits, &labels)?;
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss_value}")));
        }
        let pred = argmax_classes(&g.value(logits))?;
        self.store.zero_grad();
        let grads = g.backward(loss);
        g.accumulate_param_grads(&grads, &mut self.store);
        drop(g);
        self.opt.step(&mut self.store, lr)?;
        Ok(StepOutcome { loss: loss_value, dice: dice_score(&pred, &labels, self.cfg.classes)? })
    }

    /// Runs every epoch over `records` (raw, unpreprocessed) in order.
    pub fn fit(&mut self, records: &[VolumeRecord], mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>> {
        if records.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let prepared = records.iter().map(preprocess).collect::<Result<Vec<_>>>()?;
        let mut metrics = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let lr = lr_schedule(epoch, self.cfg.epochs, self.cfg.lr_start, self.cfg.lr_end);
            let (mut loss, mut dice) = (0.0, 0.0);
            for (i, rec) in prepared.iter().enumerate() {
                let mut rng = step_rng(self.cfg.seed, epoch, i);
                let crop = augment(rec, self.cfg.crop, &self.cfg.augment, &mut rng)?;
                let out = self.step(&crop, lr)?;
                loss += out.loss;
                dice += out.dice.mean;
            }
            let n = prepared.len() as f64;
            let m = EpochMetrics { epoch, lr, loss: loss / n, mean_dice: dice / n };
            on_epoch(&m);
            metrics.push(m);
        }
        Ok(metrics)
    }

    /// Blended sliding-window prediction for a raw volume.
    pub fn infer(&self, rec: &VolumeRecord) -> Result<SegmentationOutput<f32>> {
        let prepared = preprocess(rec)?;
        sliding_window_infer(&input_tensor(&prepared)?, &self.cfg.window, |w| self.model.predict(&self.store, w))
    }

    /// Sliding-window Dice of one raw labelled volume.
    pub fn evaluate(&self, rec: &VolumeRecord) -> Result<DiceReport> {
        if rec.labels.is_none() {
            return Err(Error::Input("evaluation volume has no labels".into()));
        }
        let prepared = preprocess(rec)?;
        let out = sliding_window_infer(&input_tensor(&prepared)?, &self.cfg.window, |w| self.model.predict(&self.store, w))?;
        dice_score(&out.labels, &batch_labels(&prepared)?, self.cfg.classes)
    }
}

/// Per-class mean over volumes, with the mean Dice last.
pub fn mean_report(rows: &[DiceReport]) -> DiceReport {
    let k = rows.first().map_or(0, |r| r.per_class.len());
    let n = rows.len().max(1) as f64;
    let per_class = (0..k).map(|c| rows.iter().map(|r| r.per_class[c]).sum::<f64>() / n).collect();
    DiceReport { per_class, mean: rows.iter().map(|r| r.mean).sum::<f64>() / n }
}
