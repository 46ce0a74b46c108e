//! Checkpoint container: one safetensors file holding parameters
//! (`param/<name>`), Adam moments (`adam.m/<name>`, `adam.v/<name>`) and
//! JSON metadata for the configs, counters, RNG and sampler state.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use super::trainer::EpochSampler;
use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::model::params::write_safetensors;
use crate::model::{Gradients, ModelConfig, MsfaNet, ParameterStore};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "msfanet-checkpoint";

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl From<&ChaCha8Rng> for RngState {
    fn from(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }
}

impl RngState {
    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().expect("validated on load"));
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
    pub params: ParameterStore,
    pub adam: Adam,
    pub rng: RngState,
    pub sampler: EpochSampler,
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("metadata serializes")
}

/// Writes to a temporary sibling and renames, so `path` is never left half-written.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    ckpt.params.encode("param/", &mut tensors);
    ckpt.adam.m.encode("adam.m/", &mut tensors);
    ckpt.adam.v.encode("adam.v/", &mut tensors);
    let adam = AdamMeta {
        beta1: ckpt.adam.beta1,
        beta2: ckpt.adam.beta2,
        epsilon: ckpt.adam.epsilon,
        step: ckpt.adam.step,
    };
    let metadata = HashMap::from([
        ("format".to_owned(), FORMAT.to_owned()),
        ("version".to_owned(), CHECKPOINT_VERSION.to_string()),
        ("model".to_owned(), json(&ckpt.model)),
        ("train".to_owned(), json(&ckpt.train)),
        ("augmentation".to_owned(), json(&ckpt.augmentation)),
        ("init_tags".to_owned(), json(&ckpt.params.init_tags())),
        ("adam".to_owned(), json(&adam)),
        ("rng".to_owned(), json(&ckpt.rng)),
        ("sampler".to_owned(), json(&ckpt.sampler)),
        ("iteration".to_owned(), ckpt.iteration.to_string()),
    ]);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    write_safetensors(tmp, &tensors, metadata)?;
    fs::rename(tmp, path).map_err(|e| Error::export(path, e))
}

fn field<T: DeserializeOwned>(path: &Path, meta: &HashMap<String, String>, key: &str) -> Result<T> {
    let raw = meta.get(key).ok_or_else(|| Error::load(path, format!("metadata field `{key}` missing")))?;
    serde_json::from_str(raw).map_err(|e| Error::load(path, format!("metadata field `{key}`: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
    let file = SafeTensors::deserialize(&bytes).map_err(|e| Error::load(path, format!("not a valid checkpoint: {e}")))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::load(path, e))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::load(path, "not an msfanet checkpoint"));
    }
    let version: u32 = field(path, &meta, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::load(path, format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let model: ModelConfig = field(path, &meta, "model")?;
    let train: TrainConfig = field(path, &meta, "train")?;
    let augmentation: AugmentationConfig = field(path, &meta, "augmentation")?;
    let tags = field(path, &meta, "init_tags")?;
    let adam_meta: AdamMeta = field(path, &meta, "adam")?;
    let rng: RngState = field(path, &meta, "rng")?;
    if rng.word_pos.parse::<u128>().is_err() {
        return Err(Error::load(path, "metadata field `rng`: bad word position"));
    }
    let sampler = field(path, &meta, "sampler")?;
    let iteration = field(path, &meta, "iteration")?;

    let params = ParameterStore::decode(&file, "param/", &tags).map_err(|e| Error::load(path, e))?;
    let net = MsfaNet::new(model.clone()).map_err(|e| Error::load(path, e))?;
    params
        .check_against(&net.param_specs())
        .map_err(|e| Error::load(path, format!("parameters do not fit the stored model config: {e}")))?;
    let m = Gradients::decode(&file, "adam.m/").map_err(|e| Error::load(path, e))?;
    let v = Gradients::decode(&file, "adam.v/").map_err(|e| Error::load(path, e))?;
    if !m.matches(&params) || !v.matches(&params) {
        return Err(Error::load(path, "optimizer moments do not match the parameter shapes"));
    }
    Ok(Checkpoint {
        model,
        train,
        augmentation,
        params,
        adam: Adam {
            beta1: adam_meta.beta1,
            beta2: adam_meta.beta2,
            epsilon: adam_meta.epsilon,
            step: adam_meta.step,
            m,
            v,
        },
        rng,
        sampler,
        iteration,
    })
}
