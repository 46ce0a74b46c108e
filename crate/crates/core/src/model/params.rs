//! Named parameter storage, initialization and the safetensors-based
//! weight container used for pretrained backbones and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::InitScheme;
use crate::error::{Error, Result};

/// Fusion-branch weight std under [`InitScheme::HeNormal`].
pub const FUSION_STD: f64 = 0.01;

/// How a parameter got its initial value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitTag {
    Pretrained,
    Gaussian,
    HeNormal,
    Constant,
}

/// What a parameter is, which decides its initializer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize },
    /// Weight of a fusion branch (ShortAgg, SkipAgg, transformer stem) whose
    /// output is added onto the backbone stream.
    FusionWeight { fan_in: usize },
    /// `[channels, 1, k, k]` transposed-convolution weight. He-normal init
    /// gives it a bilinear kernel scaled by one draw per input channel, so all
    /// stride phases start out identical.
    Upsample { channels: usize, kernel: usize },
    Bias,
    NormScale,
    NormShift,
    PositionBias,
}

/// A parameter slot declared by the network graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// Part of the 13 VGG-16 convolutions that a pretrained file may supply.
    pub backbone: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub init: InitTag,
}

/// All learnable weights of a model, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
}

/// FNV-1a over the tensor name.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParameterStore {
    /// Each tensor draws from its own stream keyed by `(seed, name)`, so
    /// variants that share a tensor also share its initial values.
    pub fn initialize(specs: &[ParamSpec], scheme: InitScheme, seed: u64) -> Self {
        let mut entries = BTreeMap::new();
        for spec in specs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(name_stream(&spec.name));
            let n = spec.numel();
            let (values, init) = match spec.role {
                ParamRole::Bias | ParamRole::NormShift => (vec![0.0; n], InitTag::Constant),
                ParamRole::NormScale => (vec![1.0; n], InitTag::Constant),
                ParamRole::Weight { fan_in } => {
                    let (std, tag) = match scheme {
                        InitScheme::Gaussian { std } => (std, InitTag::Gaussian),
                        InitScheme::HeNormal => ((2.0 / fan_in.max(1) as f64).sqrt(), InitTag::HeNormal),
                    };
                    (sample_normal(&mut rng, n, std), tag)
                }
                ParamRole::FusionWeight { .. } => {
                    let (std, tag) = match scheme {
                        InitScheme::Gaussian { std } => (std, InitTag::Gaussian),
                        InitScheme::HeNormal => (FUSION_STD, InitTag::Gaussian),
                    };
                    (sample_normal(&mut rng, n, std), tag)
                }
                ParamRole::Upsample { channels, kernel } => match scheme {
                    InitScheme::Gaussian { std } => (sample_normal(&mut rng, n, std), InitTag::Gaussian),
                    InitScheme::HeNormal => {
                        let scale: Vec<f64> = sample_normal(&mut rng, channels, (2.0 / channels.max(1) as f64).sqrt()).into_iter().map(f64::abs).collect();
                        (bilinear_weight(&scale, kernel), InitTag::HeNormal)
                    }
                },
                ParamRole::PositionBias => {
                    let std = match scheme {
                        InitScheme::Gaussian { std } => std,
                        InitScheme::HeNormal => 0.02,
                    };
                    (sample_normal(&mut rng, n, std), InitTag::Gaussian)
                }
            };
            entries.insert(
                spec.name.clone(),
                Parameter {
                    shape: spec.shape.clone(),
                    values,
                    init,
                },
            );
        }
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries.get(name).ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.values)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Parameter) {
        self.entries.insert(name.into(), param);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }

    /// Checks the store holds exactly the declared parameters with matching shapes.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        let mut problems = Vec::new();
        for spec in specs {
            match self.entries.get(&spec.name) {
                None => problems.push(format!("missing `{}`", spec.name)),
                Some(p) if p.shape != spec.shape => {
                    problems.push(format!("`{}` has shape {:?}, expected {:?}", spec.name, p.shape, spec.shape))
                }
                Some(_) => {}
            }
        }
        for name in self.entries.keys() {
            if !specs.iter().any(|s| &s.name == name) {
                problems.push(format!("unexpected `{name}`"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::contract(format!("parameter store mismatch: {}", problems.join("; "))))
        }
    }

    /// Overwrites the backbone convolutions from a safetensors file. Every
    /// backbone tensor must be present with the declared shape; all
    /// mismatches are reported together.
    pub fn load_backbone(&mut self, specs: &[ParamSpec], path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
        let file = SafeTensors::deserialize(&bytes).map_err(|e| Error::load(path, e))?;
        let mut problems = Vec::new();
        let mut loaded = Vec::new();
        for spec in specs.iter().filter(|s| s.backbone) {
            match file.tensor(&spec.name) {
                Err(_) => problems.push(format!("{}: missing", spec.name)),
                Ok(view) if view.shape() != spec.shape.as_slice() => {
                    problems.push(format!("{}: shape {:?}, expected {:?}", spec.name, view.shape(), spec.shape))
                }
                Ok(view) => match decode_floats(&view) {
                    Some(values) => loaded.push((spec.name.clone(), values)),
                    None => problems.push(format!("{}: unsupported dtype {:?}", spec.name, view.dtype())),
                },
            }
        }
        if !problems.is_empty() {
            return Err(Error::load(path, format!("mismatched backbone layers: {}", problems.join(", "))));
        }
        for (name, values) in loaded {
            let p = self.entries.get_mut(&name).expect("spec'd parameter exists");
            p.values = values;
            p.init = InitTag::Pretrained;
        }
        Ok(())
    }

    /// Serialized as `f64` tensors named `{prefix}{name}`.
    pub(crate) fn encode(&self, prefix: &str, out: &mut Vec<(String, Vec<usize>, Vec<u8>)>) {
        for (name, p) in &self.entries {
            out.push((format!("{prefix}{name}"), p.shape.clone(), f64_bytes(&p.values)));
        }
    }

    /// Init tags, for round-tripping through a checkpoint's metadata.
    pub(crate) fn init_tags(&self) -> BTreeMap<String, InitTag> {
        self.entries.iter().map(|(k, p)| (k.clone(), p.init)).collect()
    }

    pub(crate) fn decode(file: &SafeTensors, prefix: &str, tags: &BTreeMap<String, InitTag>) -> std::result::Result<Self, String> {
        let mut entries = BTreeMap::new();
        for name in file.names() {
            let Some(short) = name.strip_prefix(prefix) else { continue };
            let view = file.tensor(name).map_err(|e| e.to_string())?;
            if view.dtype() != Dtype::F64 {
                return Err(format!("{name}: expected F64, found {:?}", view.dtype()));
            }
            entries.insert(
                short.to_owned(),
                Parameter {
                    shape: view.shape().to_vec(),
                    values: decode_floats(&view).expect("F64 decodes"),
                    init: tags.get(short).copied().unwrap_or(InitTag::Constant),
                },
            );
        }
        Ok(Self { entries })
    }
}

/// Separable bilinear upsampling kernel, one copy per channel scaled by `scale[c]`.
fn bilinear_weight(scale: &[f64], kernel: usize) -> Vec<f64> {
    let factor = kernel.div_ceil(2) as f64;
    let center = if kernel % 2 == 0 { factor - 0.5 } else { factor - 1.0 };
    let taps: Vec<f64> = (0..kernel).map(|i| 1.0 - (i as f64 - center).abs() / factor).collect();
    let mut out = Vec::with_capacity(scale.len() * kernel * kernel);
    for &s in scale {
        for &ty in &taps {
            out.extend(taps.iter().map(|&tx| s * ty * tx));
        }
    }
    out
}

fn sample_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub(crate) fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_floats(view: &TensorView) -> Option<Vec<f64>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F64 => Some(data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        Dtype::F32 => Some(data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()),
        _ => None,
    }
}

/// Writes named `f64` arrays plus string metadata as a safetensors file.
pub(crate) fn write_safetensors(path: &Path, tensors: &[(String, Vec<usize>, Vec<u8>)], metadata: HashMap<String, String>) -> Result<()> {
    let views = tensors
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::export(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::tensor::serialize(views, &Some(metadata)).map_err(|e| Error::export(path, e))?;
    let bytes = sorted_header(&bytes).map_err(|e| Error::export(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::export(path, e))
}

/// Re-emits the JSON header with sorted keys. The metadata map is written in
/// hash order, which differs between processes; offsets are relative to the
/// data section, so the payload is copied unchanged.
fn sorted_header(file: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let len = u64::from_le_bytes(file[..8].try_into().map_err(|_| "short file")?) as usize;
    let header: serde_json::Value = serde_json::from_slice(&file[8..8 + len]).map_err(|e| e.to_string())?;
    let mut text = serde_json::to_vec(&header).map_err(|e| e.to_string())?;
    text.resize(text.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + text.len() + file.len() - 8 - len);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&file[8 + len..]);
    Ok(out)
}

/// Writes the backbone convolutions of `store` as a pretrained-weights file.
pub fn save_backbone(store: &ParameterStore, specs: &[ParamSpec], path: &Path) -> Result<()> {
    let tensors: Vec<_> = specs
        .iter()
        .filter(|s| s.backbone)
        .map(|s| {
            let p = store.get(&s.name)?;
            Ok((s.name.clone(), p.shape.clone(), f64_bytes(&p.values)))
        })
        .collect::<Result<_>>()?;
    write_safetensors(path, &tensors, HashMap::from([("format".to_owned(), "msfanet-backbone".to_owned())]))
}

/// Per-parameter accumulators shaped like a [`ParameterStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self {
            entries: store.entries.iter().map(|(k, p)| (k.clone(), vec![0.0; p.values.len()])).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub(crate) fn slot(&mut self, name: &str) -> &mut Vec<f64> {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("no gradient slot for `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (k, g) in &mut self.entries {
            if let Some(o) = other.entries.get(k) {
                for (a, b) in g.iter_mut().zip(o) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            for v in g {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn encode(&self, prefix: &str, out: &mut Vec<(String, Vec<usize>, Vec<u8>)>) {
        for (name, g) in &self.entries {
            out.push((format!("{prefix}{name}"), vec![g.len()], f64_bytes(g)));
        }
    }

    pub(crate) fn decode(file: &SafeTensors, prefix: &str) -> std::result::Result<Self, String> {
        let mut entries = BTreeMap::new();
        for name in file.names() {
            let Some(short) = name.strip_prefix(prefix) else { continue };
            let view = file.tensor(name).map_err(|e| e.to_string())?;
            if view.dtype() != Dtype::F64 {
                return Err(format!("{name}: expected F64"));
            }
            entries.insert(short.to_owned(), decode_floats(&view).expect("F64 decodes"));
        }
        Ok(Self { entries })
    }

    pub(crate) fn matches(&self, store: &ParameterStore) -> bool {
        self.entries.len() == store.len()
            && store.iter().all(|(k, p)| self.entries.get(k).is_some_and(|g| g.len() == p.values.len()))
    }
}
