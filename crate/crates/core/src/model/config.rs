use serde::{Deserialize, Serialize};

/// Weight initialization for parameters not loaded from a pretrained file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    /// Zero-mean Gaussian with a fixed standard deviation.
    Gaussian { std: f64 },
    /// Zero-mean Gaussian with std `sqrt(2 / fan_in)` for the backbone and
    /// regressor, `N(0, 0.01²)` for the fusion branches. For training from
    /// scratch when no pretrained backbone is available.
    HeNormal,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Gaussian { std: 0.01 }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub block_channels: Vec<usize>,
    pub convs_per_block: Vec<usize>,
    /// Backbone blocks (3..=5) that receive transformer-stem features.
    pub skip_targets: Vec<usize>,
    /// Stem embedding width and stem output width.
    pub stem_channels: (usize, usize),
    pub stem_window: usize,
    pub stem_heads: usize,
    pub stem_mlp_ratio: usize,
    /// Widths of the three 3×3 layers in the density regressor.
    pub regressor_channels: Vec<usize>,
    pub enable_shortagg: bool,
    pub enable_skipagg: bool,
    /// Scales every channel count; values below 1 build small test models.
    pub channel_multiplier: f64,
    pub init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            block_channels: vec![64, 128, 256, 512, 512],
            convs_per_block: vec![2, 2, 3, 3, 3],
            skip_targets: vec![3, 4, 5],
            stem_channels: (96, 128),
            stem_window: 7,
            stem_heads: 3,
            stem_mlp_ratio: 4,
            regressor_channels: vec![256, 128, 64],
            enable_shortagg: true,
            enable_skipagg: true,
            channel_multiplier: 1.0,
            init: InitScheme::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.block_channels.len() != 5 {
            problems.push(format!("model.block_channels needs 5 entries, got {}", self.block_channels.len()));
        }
        if self.convs_per_block.len() != 5 {
            problems.push(format!("model.convs_per_block needs 5 entries, got {}", self.convs_per_block.len()));
        }
        if self.convs_per_block.contains(&0) {
            problems.push("model.convs_per_block entries must be >= 1".into());
        }
        if self.skip_targets.iter().any(|t| !(3..=5).contains(t)) {
            problems.push(format!("model.skip_targets must be a subset of {{3, 4, 5}}, got {:?}", self.skip_targets));
        }
        let mut sorted = self.skip_targets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.skip_targets.len() {
            problems.push("model.skip_targets contains duplicates".into());
        }
        if self.stem_window == 0 {
            problems.push("model.stem_window must be >= 1".into());
        }
        if self.regressor_channels.len() != 3 {
            problems.push(format!("model.regressor_channels needs 3 entries, got {}", self.regressor_channels.len()));
        }
        if !(self.channel_multiplier > 0.0 && self.channel_multiplier.is_finite()) {
            problems.push("model.channel_multiplier must be > 0".into());
        }
        if self.stem_mlp_ratio == 0 {
            problems.push("model.stem_mlp_ratio must be >= 1".into());
        }
        let embed = self.scaled(self.stem_channels.0);
        if self.stem_heads == 0 || embed % self.stem_heads != 0 {
            problems.push(format!("model.stem_heads ({}) must divide the stem width ({embed})", self.stem_heads));
        }
        if let InitScheme::Gaussian { std } = self.init {
            if !(std > 0.0) {
                problems.push("model.init.std must be > 0".into());
            }
        }
        problems
    }

    /// Channel count after applying the multiplier (at least 1).
    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.channel_multiplier).round() as usize).max(1)
    }

    /// A small model for tests and desk-scale runs.
    pub fn tiny(channel_multiplier: f64) -> Self {
        Self {
            channel_multiplier,
            stem_window: 4,
            init: InitScheme::HeNormal,
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        let (sh, sk) = ablation.modules();
        self.enable_shortagg = sh;
        self.enable_skipagg = sk;
        self
    }
}

/// The four model/objective variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Backbone + regressor, Euclidean loss.
    Baseline,
    /// + ShortAgg.
    Sh,
    /// + ShortAgg + SkipAgg.
    ShSk,
    /// + ShortAgg + SkipAgg, trained with the combined pooling objective.
    ShSkPloss,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::Sh, Ablation::ShSk, Ablation::ShSkPloss];

    /// `(enable_shortagg, enable_skipagg)`.
    pub fn modules(self) -> (bool, bool) {
        match self {
            Ablation::Baseline => (false, false),
            Ablation::Sh => (true, false),
            Ablation::ShSk | Ablation::ShSkPloss => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Sh => "sh",
            Ablation::ShSk => "sh_sk",
            Ablation::ShSkPloss => "sh_sk_ploss",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation `{s}` (expected baseline|sh|sh_sk|sh_sk_ploss)"))
    }
}
