//! The MSFANet graph: VGG-16 backbone in five blocks, ShortAgg residual
//! projections, a windowed-attention stem feeding SkipAgg adapters, and a
//! density regressor producing a 1/8-resolution map.

use std::path::Path;

use super::config::ModelConfig;
use super::params::{Gradients, ParamRole, ParamSpec, ParameterStore};
use super::tape::{Tape, ValueId};
use crate::data::DensityMap;
use crate::error::{Error, Result};
use crate::nn::attention::{swin_param_shapes, AttentionSpec};
use crate::nn::{ConvSpec, FeatureGrid};

/// Output stride of the density map.
pub const OUTPUT_STRIDE: usize = 8;

const TRANSPOSED_KERNEL: usize = 4;

/// Spatial stride of block `b`'s output (blocks 1–4 end in a 2×2 max-pool).
pub fn block_output_stride(block: usize) -> usize {
    1 << block.min(4)
}

fn block_input_stride(block: usize) -> usize {
    1 << (block - 1).min(4)
}

#[derive(Clone, Debug)]
pub struct MsfaNet {
    config: ModelConfig,
    blocks: [usize; 5],
    stem: (usize, usize),
    regressor: [usize; 3],
}

/// Result of a forward pass: the cropped density map plus everything needed
/// for back-propagation and feature inspection.
pub struct ForwardPass {
    tape: Tape,
    output: ValueId,
    hooks: Vec<(String, ValueId)>,
    pub density: DensityMap,
    /// Rows/columns of reflective padding added below/right of the input.
    pub padding: (usize, usize),
}

impl ForwardPass {
    /// Named intermediate features: `input`, `stem`, `block1..block5`
    /// (fused outputs), `block{b}.main` (before fusion), `head`.
    pub fn feature(&self, name: &str) -> Option<&FeatureGrid> {
        self.hooks.iter().find(|(n, _)| n == name).map(|(_, id)| self.tape.value(*id))
    }

    pub fn hook_names(&self) -> impl Iterator<Item = &str> {
        self.hooks.iter().map(|(n, _)| n.as_str())
    }
}

impl MsfaNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::contract(problems.join("; ")));
        }
        let mut blocks = [0; 5];
        for (b, c) in blocks.iter_mut().zip(&config.block_channels) {
            *b = config.scaled(*c);
        }
        let stem = (config.scaled(config.stem_channels.0), config.scaled(config.stem_channels.1));
        let regressor = [
            config.scaled(config.regressor_channels[0]),
            config.scaled(config.regressor_channels[1]),
            config.scaled(config.regressor_channels[2]),
        ];
        Ok(Self {
            config,
            blocks,
            stem,
            regressor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Output channels of block `b` (1-based).
    pub fn block_channels(&self, block: usize) -> usize {
        self.blocks[block - 1]
    }

    fn block_in_channels(&self, block: usize) -> usize {
        if block == 1 {
            3
        } else {
            self.blocks[block - 2]
        }
    }

    fn skip_targets(&self) -> Vec<usize> {
        if !self.config.enable_skipagg {
            return Vec::new();
        }
        let mut t = self.config.skip_targets.clone();
        t.sort_unstable();
        t
    }

    fn attention_spec(&self, shifted: bool) -> AttentionSpec {
        AttentionSpec {
            dim: self.stem.0,
            heads: self.config.stem_heads,
            window: self.config.stem_window,
            shifted,
            mask_shifted: true,
        }
    }

    /// Input dims must be multiples of this (after padding).
    pub fn input_multiple(&self) -> usize {
        let base = 16;
        if self.config.enable_skipagg {
            lcm(base, 2 * self.config.stem_window)
        } else {
            base
        }
    }

    /// Every learnable tensor the graph reads, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<ParamSpec>, name: String, co: usize, ci: usize, k: usize, bias: bool, backbone: bool| {
            let fan_in = ci * k * k;
            let fusion = name.starts_with("shortagg") || name.starts_with("skipagg") || name.starts_with("stem");
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![co, ci, k, k],
                role: if fusion { ParamRole::FusionWeight { fan_in } } else { ParamRole::Weight { fan_in } },
                backbone,
            });
            if bias {
                specs.push(ParamSpec {
                    name: format!("{name}.bias"),
                    shape: vec![co],
                    role: ParamRole::Bias,
                    backbone,
                });
            }
        };
        for b in 1..=5 {
            let mut ci = self.block_in_channels(b);
            let co = self.block_channels(b);
            for j in 1..=self.config.convs_per_block[b - 1] {
                conv(&mut specs, format!("block{b}.conv{j}"), co, ci, 3, true, true);
                ci = co;
            }
        }
        if self.config.enable_shortagg {
            for b in 2..=5 {
                conv(&mut specs, format!("shortagg{b}"), self.block_channels(b), self.block_in_channels(b), 1, false, false);
            }
        }
        if self.config.enable_skipagg {
            let (embed, out) = self.stem;
            conv(&mut specs, "stem.embed".into(), embed, 3, 1, true, false);
            let hidden = embed * self.config.stem_mlp_ratio;
            for blk in 0..2 {
                for (n, shape) in swin_param_shapes(embed, self.config.stem_heads, self.config.stem_window, hidden) {
                    let role = if n.starts_with("norm") {
                        if n.ends_with("weight") {
                            ParamRole::NormScale
                        } else {
                            ParamRole::NormShift
                        }
                    } else if n.ends_with("relative_position_bias") {
                        ParamRole::PositionBias
                    } else if n.ends_with("bias") {
                        ParamRole::Bias
                    } else {
                        ParamRole::FusionWeight { fan_in: shape[1] }
                    };
                    specs.push(ParamSpec {
                        name: format!("stem.block{blk}.{n}"),
                        shape,
                        role,
                        backbone: false,
                    });
                }
            }
            conv(&mut specs, "stem.proj".into(), out, embed, 3, true, false);
            for t in self.skip_targets() {
                conv(&mut specs, format!("skipagg{t}"), self.block_channels(t), out, 1, false, false);
            }
        }
        let mut ci = self.block_channels(5);
        for (j, &co) in self.regressor.iter().enumerate() {
            conv(&mut specs, format!("head.conv{}", j + 1), co, ci, 3, true, false);
            ci = co;
        }
        let k = TRANSPOSED_KERNEL;
        specs.push(ParamSpec {
            name: "head.deconv.weight".into(),
            shape: vec![ci, 1, k, k],
            role: ParamRole::Upsample { channels: ci, kernel: k },
            backbone: false,
        });
        specs.push(ParamSpec {
            name: "head.deconv.bias".into(),
            shape: vec![1],
            role: ParamRole::Bias,
            backbone: false,
        });
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Fresh parameters from `config.init`, with the 13 backbone convolutions
    /// optionally loaded from a pretrained safetensors file.
    pub fn init_parameters(&self, seed: u64, pretrained: Option<&Path>) -> Result<ParameterStore> {
        let specs = self.param_specs();
        let mut store = ParameterStore::initialize(&specs, self.config.init, seed);
        if let Some(path) = pretrained {
            if self.config.channel_multiplier != 1.0 {
                return Err(Error::load(path, "pretrained backbones require channel_multiplier 1.0"));
            }
            store.load_backbone(&specs, path)?;
        }
        Ok(store)
    }

    fn check_block_input(&self, x: &FeatureGrid, block: usize) -> Result<()> {
        if !(1..=5).contains(&block) {
            return Err(Error::contract(format!("block index {block} outside 1..=5")));
        }
        if x.channels != self.block_in_channels(block) || x.stride != block_input_stride(block) {
            return Err(Error::contract(format!(
                "block {block} expects {} channels at stride {}, got {} at stride {}",
                self.block_in_channels(block),
                block_input_stride(block),
                x.channels,
                x.stride
            )));
        }
        Ok(())
    }

    fn record_block(&self, tape: &mut Tape, params: &ParameterStore, x: ValueId, block: usize) -> Result<ValueId> {
        self.check_block_input(tape.value(x), block)?;
        let mut cur = x;
        for j in 1..=self.config.convs_per_block[block - 1] {
            let c = tape.conv(params, cur, &format!("block{block}.conv{j}.weight"), Some(&format!("block{block}.conv{j}.bias")), ConvSpec::same3())?;
            cur = tape.relu(c);
        }
        if block < 5 {
            cur = tape.max_pool(cur)?;
        }
        Ok(cur)
    }

    fn record_short_agg(&self, tape: &mut Tape, params: &ParameterStore, block_input: ValueId, block_output: ValueId, block: usize) -> Result<ValueId> {
        if !(2..=5).contains(&block) {
            return Err(Error::contract(format!("ShortAgg applies to blocks 2..=5, got {block}")));
        }
        let stride = if block == 5 { 1 } else { 2 };
        let proj = tape.conv(params, block_input, &format!("shortagg{block}.weight"), None, ConvSpec::pointwise(stride))?;
        tape.add(block_output, proj)
    }

    fn record_stem(&self, tape: &mut Tape, params: &ParameterStore, image: ValueId) -> Result<ValueId> {
        let (h, w) = (tape.value(image).height, tape.value(image).width);
        let win = self.config.stem_window;
        if h % (2 * win) != 0 || w % (2 * win) != 0 {
            return Err(Error::contract(format!(
                "stem needs input dims divisible by {} (2 x window), got {h}x{w}",
                2 * win
            )));
        }
        let e = tape.conv(params, image, "stem.embed.weight", Some("stem.embed.bias"), ConvSpec::pointwise(1))?;
        let p = tape.avg_pool(e)?;
        let b0 = tape.swin(params, p, "stem.block0", self.attention_spec(false))?;
        let b1 = tape.swin(params, b0, "stem.block1", self.attention_spec(true))?;
        let c = tape.conv(params, b1, "stem.proj.weight", Some("stem.proj.bias"), ConvSpec::same3())?;
        Ok(tape.resize(c, h / 2, w / 2, 2))
    }

    fn record_skip_adapter(&self, tape: &mut Tape, params: &ParameterStore, stem: ValueId, target: usize) -> Result<ValueId> {
        let s = tape.value(stem);
        if !(3..=5).contains(&target) {
            return Err(Error::contract(format!("SkipAgg targets blocks 3..=5, got {target}")));
        }
        if s.stride != 2 {
            return Err(Error::contract(format!("stem features must be at stride 2, got {}", s.stride)));
        }
        let stride = block_output_stride(target) / 2;
        tape.conv(params, stem, &format!("skipagg{target}.weight"), None, ConvSpec::pointwise(stride))
    }

    /// One backbone block: its 3×3 conv+ReLU stack, then max-pool for blocks 1–4.
    pub fn vgg_block_forward(&self, params: &ParameterStore, x: &FeatureGrid, block: usize) -> Result<FeatureGrid> {
        let mut tape = Tape::default();
        let i = tape.input(x.clone());
        let y = self.record_block(&mut tape, params, i, block)?;
        Ok(tape.into_value(y))
    }

    /// `block_output + w_s * block_input` with a strided 1×1 projection.
    pub fn short_agg(&self, params: &ParameterStore, block_input: &FeatureGrid, block_output: &FeatureGrid, block: usize) -> Result<FeatureGrid> {
        let mut tape = Tape::default();
        let x = tape.input(block_input.clone());
        let y = tape.input(block_output.clone());
        let out = self.record_short_agg(&mut tape, params, x, y, block)?;
        Ok(tape.into_value(out))
    }

    /// Transformer stem on an (already padded) image; stride-2 output.
    pub fn transformer_stem_forward(&self, params: &ParameterStore, image: &FeatureGrid) -> Result<FeatureGrid> {
        let mut tape = Tape::default();
        let x = tape.input(image.clone());
        let out = self.record_stem(&mut tape, params, x)?;
        Ok(tape.into_value(out))
    }

    /// Projects stem features to the resolution and width of block `target`'s output.
    pub fn skip_agg_adapt(&self, params: &ParameterStore, stem: &FeatureGrid, target: usize) -> Result<FeatureGrid> {
        let mut tape = Tape::default();
        let x = tape.input(stem.clone());
        let out = self.record_skip_adapter(&mut tape, params, x, target)?;
        Ok(tape.into_value(out))
    }

    /// Full forward pass. The image is reflect-padded on the bottom/right to
    /// [`input_multiple`](Self::input_multiple) and the density map cropped back
    /// to `ceil(H/8) × ceil(W/8)`.
    pub fn forward(&self, params: &ParameterStore, image: &FeatureGrid) -> Result<ForwardPass> {
        if image.channels != 3 {
            return Err(Error::contract(format!("expected a 3-channel image, got {}", image.channels)));
        }
        if image.height == 0 || image.width == 0 {
            return Err(Error::contract("empty image"));
        }
        let m = self.input_multiple();
        let (ph, pw) = (image.height.div_ceil(m) * m, image.width.div_ceil(m) * m);
        let mut tape = Tape::default();
        let mut hooks = Vec::new();
        let input = tape.input(reflect_pad(image, ph, pw));
        hooks.push(("input".to_owned(), input));

        let stem = if self.config.enable_skipagg {
            let s = self.record_stem(&mut tape, params, input)?;
            hooks.push(("stem".to_owned(), s));
            Some(s)
        } else {
            None
        };
        let targets = self.skip_targets();
        let mut cur = input;
        for b in 1..=5 {
            let main = self.record_block(&mut tape, params, cur, b)?;
            hooks.push((format!("block{b}.main"), main));
            let mut out = main;
            if self.config.enable_shortagg && b >= 2 {
                out = self.record_short_agg(&mut tape, params, cur, out, b)?;
            }
            if let Some(stem) = stem.filter(|_| targets.contains(&b)) {
                let adapted = self.record_skip_adapter(&mut tape, params, stem, b)?;
                out = tape.add(out, adapted)?;
            }
            hooks.push((format!("block{b}"), out));
            cur = out;
        }
        for j in 1..=3 {
            let c = tape.conv(params, cur, &format!("head.conv{j}.weight"), Some(&format!("head.conv{j}.bias")), ConvSpec::same3())?;
            cur = tape.relu(c);
        }
        hooks.push(("head".to_owned(), cur));
        let up = tape.conv_transpose(params, cur, "head.deconv.weight", Some("head.deconv.bias"), ConvSpec::new(TRANSPOSED_KERNEL, 2, 1))?;
        let dens = tape.relu(up);
        let (oh, ow) = (image.height.div_ceil(OUTPUT_STRIDE), image.width.div_ceil(OUTPUT_STRIDE));
        let output = tape.crop(dens, oh, ow);
        let g = tape.value(output);
        let density = DensityMap::from_vec(oh, ow, OUTPUT_STRIDE, g.data.clone())?;
        Ok(ForwardPass {
            tape,
            output,
            hooks,
            density,
            padding: (ph - image.height, pw - image.width),
        })
    }

    pub fn predict(&self, params: &ParameterStore, image: &FeatureGrid) -> Result<DensityMap> {
        Ok(self.forward(params, image)?.density)
    }

    /// Parameter gradients given the objective's gradient w.r.t. the (cropped)
    /// density map, row-major.
    pub fn backward(&self, params: &ParameterStore, pass: &ForwardPass, d_density: &[f64]) -> Result<Gradients> {
        let d = &pass.density;
        let seed = FeatureGrid::from_vec(1, d.height, d.width, OUTPUT_STRIDE, d_density.to_vec())?;
        pass.tape.backward(params, pass.output, seed)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Mirror index without repeating the edge sample (`...2 1 | 0 1 2 ... n-1 | n-2 ...`).
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads on the bottom and right up to `height × width`.
pub fn reflect_pad(x: &FeatureGrid, height: usize, width: usize) -> FeatureGrid {
    if height == x.height && width == x.width {
        return x.clone();
    }
    let mut out = FeatureGrid::zeros(x.channels, height, width, x.stride);
    for c in 0..x.channels {
        for y in 0..height {
            let sy = reflect_index(y, x.height);
            for xx in 0..width {
                let i = out.idx(c, y, xx);
                out.data[i] = x.at(c, sy, reflect_index(xx, x.width));
            }
        }
    }
    out
}
