use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    sample_negatives, triplet_loss_on_tape, Adam, AdamConfig, NegativeStrategy, TrainSchedule,
};
use crate::alignment::{hierarchical_similarity, score_all, score_on_tape, AlignmentConfig};
use crate::data::{Dataset, RunConfig, Split};
use crate::encoders::{Binder, HatModel, LevelledFeatures, ParamId};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalReport, ScoreMatrix};
use crate::tensor::{Mat, Tape, Var};

pub const LOG_HEADER: &str = "epoch\tlr\tloss\tr1";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alignment: AlignmentConfig,
    pub schedule: TrainSchedule,
    pub batch_size: usize,
    pub negatives: NegativeStrategy,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        Ok(Self {
            alignment: run.alignment()?,
            schedule: run.schedule.clone(),
            batch_size: run.batch_size,
            negatives: run.negatives,
            adam: run.adam.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean triplet loss per positive pair.
    pub loss: f64,
    pub batches: usize,
    pub encoders_frozen: bool,
}

impl EpochStats {
    /// One tab-separated log line; `r1` is the mean of both directions.
    pub fn log_line(&self, r1: f64) -> String {
        format!("{}\t{:e}\t{:.6}\t{:.4}", self.epoch, self.lr, self.loss, r1)
    }
}

/// Model, optimizer state and sampling stream of one training run.
pub struct Trainer {
    model: HatModel,
    config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: HatModel, config: TrainConfig) -> Result<Self> {
        config.alignment.validate()?;
        config.schedule.validate()?;
        if config.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        let adam = Adam::new(
            config.adam.clone(),
            model.params().iter().map(|(_, _, m)| m.shape()),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.schedule.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            config,
            adam,
            rng,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &HatModel {
        &self.model
    }

    pub fn into_model(self) -> HatModel {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Shuffles the positives into batches. A trailing batch that cannot
    /// supply a negative is merged into its predecessor.
    fn make_batches(&mut self, positives: &[(usize, usize)]) -> Result<Vec<Vec<(usize, usize)>>> {
        let mut order = positives.to_vec();
        order.shuffle(&mut self.rng);
        let distinct = |b: &[(usize, usize)]| b.iter().any(|p| p.0 != b[0].0);
        let mut batches: Vec<Vec<(usize, usize)>> = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            match batches.last_mut() {
                Some(prev) if !distinct(chunk) || !distinct(prev) => prev.extend_from_slice(chunk),
                _ => batches.push(chunk.to_vec()),
            }
        }
        if batches.first().is_some_and(|b| !distinct(b)) {
            return Err(Error::Sampling(
                "training data shows fewer than two distinct images".into(),
            ));
        }
        Ok(batches)
    }

    /// One pass over `positives` (global image and text ids into `data`).
    pub fn train_epoch(
        &mut self,
        data: &Dataset,
        positives: &[(usize, usize)],
    ) -> Result<EpochStats> {
        if positives.is_empty() {
            return Err(Error::Input("no training pairs".into()));
        }
        let epoch = self.epoch;
        let lr = self.config.schedule.lr_at(epoch);
        let frozen = self.config.schedule.encoders_frozen(epoch);
        let batches = self.make_batches(positives)?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let (loss, grads) = self.batch_gradients(data, batch, frozen, epoch, b)?;
            total += loss;
            let params = self.model.params_mut();
            for (i, grad) in grads.into_iter().enumerate() {
                if let Some(grad) = grad {
                    self.adam.step(i, params.get_mut(ParamId(i)), &grad, lr);
                }
            }
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch,
            lr,
            loss: total / positives.len() as f64,
            batches: batches.len(),
            encoders_frozen: frozen,
        })
    }

    fn batch_gradients(
        &mut self,
        data: &Dataset,
        batch: &[(usize, usize)],
        frozen: bool,
        epoch: usize,
        batch_index: usize,
    ) -> Result<(f64, Vec<Option<Mat>>)> {
        let model = &self.model;
        let mut tape = Tape::new();
        let mut binder = Binder::new(model.params(), model.trainable_mask(frozen));

        let mut image_vars: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
        for &(i, _) in batch {
            if !image_vars.contains_key(&i) {
                let vars = model.encode_image_on_tape(&mut tape, &mut binder, &data.images()[i])?;
                image_vars.insert(i, vars);
            }
        }
        let mut text_vars = Vec::with_capacity(batch.len());
        for &(_, t) in batch {
            text_vars.push(model.encode_text_on_tape(&mut tape, &mut binder, &data.texts()[t])?);
        }
        let values = |tape: &Tape, vars: &[Var]| {
            LevelledFeatures::new(vars.iter().map(|&v| tape.value(v).clone()).collect())
        };
        let image_feats: BTreeMap<usize, LevelledFeatures> = image_vars
            .iter()
            .map(|(&i, vars)| (i, values(&tape, vars)))
            .collect();
        let text_feats: Vec<LevelledFeatures> =
            text_vars.iter().map(|v| values(&tape, v)).collect();

        let align = &self.config.alignment;
        let n = batch.len();
        let mut scores = Mat::zeros(n, n);
        for (a, &(i, _)) in batch.iter().enumerate() {
            for (b, txt) in text_feats.iter().enumerate() {
                scores.set(a, b, hierarchical_similarity(&image_feats[&i], txt, align)?);
            }
        }
        let triplets = sample_negatives(batch, self.config.negatives, &scores, &mut self.rng)?;
        let local_text: BTreeMap<usize, usize> = batch
            .iter()
            .enumerate()
            .map(|(k, &(_, t))| (t, k))
            .collect();

        let margin = self.config.schedule.margin;
        let mut losses = Vec::with_capacity(n);
        for (k, &(i, t)) in batch.iter().enumerate() {
            let img = &image_vars[&i];
            let txt = &text_vars[local_text[&t]];
            let pos = score_on_tape(&mut tape, img, txt, align)?;
            let neg_t = score_on_tape(
                &mut tape,
                img,
                &text_vars[local_text[&triplets.neg_texts[k]]],
                align,
            )?;
            let neg_i = score_on_tape(&mut tape, &image_vars[&triplets.neg_images[k]], txt, align)?;
            losses.push(triplet_loss_on_tape(&mut tape, pos, neg_t, neg_i, margin)?);
        }
        let bad: Vec<usize> = (0..n)
            .filter(|&k| !tape.scalar(losses[k]).is_finite())
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_index,
                image_ids: bad.iter().map(|&k| batch[k].0).collect(),
                text_ids: bad.iter().map(|&k| batch[k].1).collect(),
            });
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scalar(total);
        let grads = tape.backward_scalar(total)?;
        Ok((loss, binder.param_grads(&grads)))
    }
}

pub fn encode_split(
    model: &HatModel,
    data: &Dataset,
    split: Split,
) -> Result<(Vec<LevelledFeatures>, Vec<LevelledFeatures>)> {
    let images = data
        .image_range(split)
        .map(|i| model.encode_image(&data.images()[i]))
        .collect::<Result<_>>()?;
    let texts = data
        .text_range(split)
        .map(|t| model.encode_text(&data.texts()[t]))
        .collect::<Result<_>>()?;
    Ok((images, texts))
}

/// Scores every image of a split against every caption of the split.
pub fn score_split(
    model: &HatModel,
    data: &Dataset,
    split: Split,
    align: &AlignmentConfig,
    with_levels: bool,
) -> Result<ScoreMatrix> {
    let (images, texts) = encode_split(model, data, split)?;
    score_all(&images, &texts, align, with_levels)
}

pub fn evaluate_split(
    model: &HatModel,
    data: &Dataset,
    split: Split,
    align: &AlignmentConfig,
) -> Result<RetrievalReport> {
    let scores = score_split(model, data, split, align, false)?;
    evaluate(&scores, &data.ground_truth(split)?)
}
