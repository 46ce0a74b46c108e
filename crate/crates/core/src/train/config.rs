use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_SIGMA;
use crate::loss::{LossConfig, Objective};
use crate::model::Ablation;

/// Learning-rate schedule over `iterations` steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` down to 0 at `iterations`; steps past
    /// the end use 0.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Linear ramp from `learning_rate / warmup_iterations` up to the schedule
    /// over the first steps.
    pub warmup_iterations: u64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub loss: LossConfig,
    pub ablation: Ablation,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    /// Random crops drawn from each image per epoch.
    pub crops_per_image: usize,
    /// Gaussian spread for ground-truth density maps.
    pub sigma: f64,
    /// Threads used for per-sample forward/backward work.
    pub workers: usize,
    /// When false, `wall_ms` is logged as 0 so logs are byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            lr_schedule: LrSchedule::Constant,
            warmup_iterations: 0,
            batch_size: 8,
            iterations: 10_000,
            seed: 0,
            loss: LossConfig::default(),
            ablation: Ablation::ShSkPloss,
            checkpoint_every: 1000,
            crops_per_image: 4,
            sigma: DEFAULT_SIGMA,
            workers: 1,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("train.batch_size must be >= 1".to_owned());
        }
        if self.crops_per_image == 0 {
            problems.push("train.crops_per_image must be >= 1".to_owned());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            problems.push(format!("train.sigma must be > 0, got {}", self.sigma));
        }
        if self.workers == 0 {
            problems.push("train.workers must be >= 1".to_owned());
        }
        problems.extend(self.loss.validate());
        problems
    }

    /// Learning rate for the step that produces iteration `iteration + 1`.
    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        let lr = match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = (iteration as f64 / self.iterations.max(1) as f64).min(1.0);
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        };
        if iteration < self.warmup_iterations {
            lr * (iteration + 1) as f64 / self.warmup_iterations as f64
        } else {
            lr
        }
    }

    /// Euclidean loss for the first three ablation rows, `L_T` for the full model.
    pub fn objective(&self) -> Objective {
        match self.ablation {
            Ablation::ShSkPloss => Objective::Total,
            _ => Objective::Euclidean,
        }
    }
}
