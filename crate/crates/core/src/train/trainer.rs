use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::TrainConfig;
use crate::data::{apply_roi_mask, augment, cap_longest_side, ground_truth_at_scale, AugmentationConfig, CrowdSample, DensityMap};
use crate::error::{Error, Result};
use crate::model::{Gradients, ModelConfig, MsfaNet, ParameterStore, OUTPUT_STRIDE};

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub objective: String,
    pub value: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Walks a shuffled list in which every image appears `crops_per_image`
/// times; reshuffles when exhausted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSampler {
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: u64,
}

impl EpochSampler {
    pub fn next(&mut self, num_images: usize, crops_per_image: usize, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..num_images).flat_map(|i| std::iter::repeat_n(i, crops_per_image)).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Result of one sample's forward/backward.
struct SampleStep {
    loss: f64,
    grads: Gradients,
}

pub struct Trainer {
    net: MsfaNet,
    config: TrainConfig,
    augmentation: AugmentationConfig,
    samples: Vec<CrowdSample>,
    params: ParameterStore,
    adam: Adam,
    rng: ChaCha8Rng,
    sampler: EpochSampler,
    iteration: u64,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    /// Fresh run. The model's module switches are taken from `config.ablation`.
    pub fn new(
        model: ModelConfig,
        config: TrainConfig,
        augmentation: AugmentationConfig,
        samples: Vec<CrowdSample>,
        pretrained: Option<&Path>,
    ) -> Result<Self> {
        let model = model.with_ablation(config.ablation);
        let net = MsfaNet::new(model)?;
        let params = net.init_parameters(config.seed, pretrained)?;
        let adam = Adam::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_da7a);
        Self::assemble(net, config, augmentation, samples, params, adam, rng, EpochSampler::default(), 0)
    }

    /// Continues from a checkpoint on the same samples.
    pub fn resume(checkpoint: Checkpoint, samples: Vec<CrowdSample>) -> Result<Self> {
        let net = MsfaNet::new(checkpoint.model)?;
        let rng = checkpoint.rng.restore();
        Self::assemble(
            net,
            checkpoint.train,
            checkpoint.augmentation,
            samples,
            checkpoint.params,
            checkpoint.adam,
            rng,
            checkpoint.sampler,
            checkpoint.iteration,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        net: MsfaNet,
        config: TrainConfig,
        augmentation: AugmentationConfig,
        samples: Vec<CrowdSample>,
        params: ParameterStore,
        adam: Adam,
        rng: ChaCha8Rng,
        sampler: EpochSampler,
        iteration: u64,
    ) -> Result<Self> {
        let mut problems = config.validate();
        problems.extend(augmentation.validate());
        if samples.is_empty() {
            problems.push("training needs at least one sample".to_owned());
        }
        if !problems.is_empty() {
            return Err(Error::contract(problems.join("; ")));
        }
        if sampler.order.iter().any(|&i| i >= samples.len()) {
            return Err(Error::contract("sampler state refers to more samples than were supplied"));
        }
        let samples = match augmentation.longest_side_cap {
            Some(cap) => samples.iter().map(|s| cap_longest_side(s, cap)).collect::<Result<_>>()?,
            None => samples,
        };
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::contract(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            net,
            config,
            augmentation,
            samples,
            params,
            adam,
            rng,
            sampler,
            iteration,
            pool,
        })
    }

    pub fn net(&self) -> &MsfaNet {
        &self.net
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.net.config().clone(),
            train: self.config.clone(),
            augmentation: self.augmentation.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: (&self.rng).into(),
            sampler: self.sampler.clone(),
            iteration: self.iteration,
        }
    }

    fn sample_step(&self, index: usize, seed: u64, batch: usize) -> Result<SampleStep> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = augment(&self.samples[index], &self.augmentation, &mut rng)?;
        let pass = self.net.forward(&self.params, &crop.image)?;
        let mut gt = ground_truth_at_scale(&crop.annotations, self.config.sigma, OUTPUT_STRIDE)?;
        let mut pred = pass.density.clone();
        let mask = match &crop.roi {
            Some(roi) => {
                gt = apply_roi_mask(&gt, roi)?;
                let m = apply_roi_mask(&DensityMap::from_vec(pred.height, pred.width, OUTPUT_STRIDE, vec![1.0; pred.values.len()])?, roi)?;
                for (p, k) in pred.values.iter_mut().zip(&m.values) {
                    *p *= k;
                }
                Some(m)
            }
            None => None,
        };
        let objective = self.config.objective();
        let preds = std::slice::from_ref(&pred);
        let gts = std::slice::from_ref(&gt);
        let loss = objective.value(preds, gts, &self.config.loss)?;
        let mut d = objective.gradient(preds, gts, &self.config.loss)?.remove(0);
        let k = batch as f64;
        for (i, v) in d.iter_mut().enumerate() {
            *v /= k;
            if let Some(m) = &mask {
                *v *= m.values[i];
            }
        }
        let grads = self.net.backward(&self.params, &pass, &d)?;
        Ok(SampleStep { loss, grads })
    }

    /// One Adam update on a freshly drawn batch.
    pub fn step(&mut self) -> Result<LossRecord> {
        let start = Instant::now();
        let batch: Vec<(usize, u64)> = (0..self.config.batch_size)
            .map(|_| {
                let i = self.sampler.next(self.samples.len(), self.config.crops_per_image, &mut self.rng);
                (i, self.rng.next_u64())
            })
            .collect();
        let k = batch.len();
        let results: Vec<Result<SampleStep>> = match &self.pool {
            Some(pool) => pool.install(|| batch.par_iter().map(|&(i, s)| self.sample_step(i, s, k)).collect()),
            None => batch.iter().map(|&(i, s)| self.sample_step(i, s, k)).collect(),
        };
        let iteration = self.iteration + 1;
        let lr = self.config.learning_rate_at(self.iteration);
        let mut grads = Gradients::zeros_like(&self.params);
        let mut loss = 0.0;
        for r in results {
            let r = r?;
            loss += r.loss;
            grads.add_assign(&r.grads);
        }
        loss /= k as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                learning_rate: lr,
                batch_ids: batch.iter().map(|&(i, _)| self.samples[i].id.clone()).collect(),
            });
        }
        self.adam.update(&mut self.params, &grads, lr);
        self.iteration = iteration;
        Ok(LossRecord {
            iteration,
            objective: self.config.objective().name().to_owned(),
            value: loss,
            lr,
            wall_ms: if self.config.log_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
        })
    }

    /// Runs `iterations` steps, appending NDJSON records to `log`. With a
    /// checkpoint directory, saves `ckpt-{iteration:08}.safetensors` every
    /// `checkpoint_every` iterations and always at the end (also when
    /// `iterations` is 0). Returns the records and the final checkpoint path.
    pub fn run(&mut self, iterations: u64, log: &mut dyn Write, checkpoint_dir: Option<&Path>) -> Result<(Vec<LossRecord>, Option<PathBuf>)> {
        let mut records = Vec::with_capacity(iterations as usize);
        let mut saved_at = None;
        for _ in 0..iterations {
            let record = self.step()?;
            let line = serde_json::to_string(&record).expect("loss record serializes");
            writeln!(log, "{line}")?;
            records.push(record);
            if let Some(dir) = checkpoint_dir {
                if self.config.checkpoint_every > 0 && self.iteration % self.config.checkpoint_every == 0 {
                    save_checkpoint(&self.checkpoint(), &checkpoint_path(dir, self.iteration))?;
                    saved_at = Some(self.iteration);
                }
            }
        }
        log.flush()?;
        let last = checkpoint_dir.map(|dir| checkpoint_path(dir, self.iteration));
        if let Some(path) = &last {
            if saved_at != Some(self.iteration) {
                save_checkpoint(&self.checkpoint(), path)?;
            }
        }
        Ok((records, last))
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt-{iteration:08}.safetensors"))
}
