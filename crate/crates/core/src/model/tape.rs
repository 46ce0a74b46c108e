//! Recorded forward computation with reverse-mode gradients.

use super::params::{Gradients, ParameterStore};
use crate::error::{Error, Result};
use crate::nn::attention::{self, swin_param_shapes, AttentionSpec, SwinBlockCache, SwinBlockWeights, Tokens};
use crate::nn::conv::{self, ConvSpec};
use crate::nn::pool;
use crate::nn::FeatureGrid;

pub(crate) type ValueId = usize;

enum Op {
    Input,
    Conv {
        x: ValueId,
        weight: String,
        bias: Option<String>,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: ValueId,
        weight: String,
        bias: Option<String>,
        spec: ConvSpec,
    },
    Relu {
        x: ValueId,
    },
    MaxPool {
        x: ValueId,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Swin {
        x: ValueId,
        prefix: String,
        spec: AttentionSpec,
        cache: Box<SwinBlockCache>,
    },
    Resize {
        x: ValueId,
    },
    Crop {
        x: ValueId,
    },
}

/// Values are appended in execution order; op `i` produced value `i`.
#[derive(Default)]
pub(crate) struct Tape {
    values: Vec<FeatureGrid>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

impl Tape {
    pub fn value(&self, id: ValueId) -> &FeatureGrid {
        &self.values[id]
    }

    pub fn into_value(mut self, id: ValueId) -> FeatureGrid {
        self.values.swap_remove(id)
    }

    fn push(&mut self, op: Op, value: FeatureGrid, needs_grad: bool) -> ValueId {
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.values.len() - 1
    }

    pub fn input(&mut self, x: FeatureGrid) -> ValueId {
        self.push(Op::Input, x, false)
    }

    pub fn conv(&mut self, params: &ParameterStore, x: ValueId, weight: &str, bias: Option<&str>, spec: ConvSpec) -> Result<ValueId> {
        let w = params.get(weight)?;
        let in_ch = self.values[x].channels;
        if w.shape.len() != 4 || w.shape[1] != in_ch || w.shape[2] != spec.kernel {
            return Err(Error::contract(format!(
                "`{weight}` {:?} cannot consume {in_ch}-channel input",
                w.shape
            )));
        }
        let b = bias.map(|b| params.values(b)).transpose()?;
        let y = conv::conv2d(&self.values[x], &w.values, b, w.shape[0], spec)?;
        Ok(self.push(
            Op::Conv {
                x,
                weight: weight.to_owned(),
                bias: bias.map(str::to_owned),
                spec,
            },
            y,
            true,
        ))
    }

    pub fn conv_transpose(&mut self, params: &ParameterStore, x: ValueId, weight: &str, bias: Option<&str>, spec: ConvSpec) -> Result<ValueId> {
        let w = params.get(weight)?;
        let in_ch = self.values[x].channels;
        if w.shape.len() != 4 || w.shape[0] != in_ch {
            return Err(Error::contract(format!(
                "`{weight}` {:?} cannot consume {in_ch}-channel input",
                w.shape
            )));
        }
        let b = bias.map(|b| params.values(b)).transpose()?;
        let y = conv::conv_transpose2d(&self.values[x], &w.values, b, w.shape[1], spec)?;
        Ok(self.push(
            Op::ConvTranspose {
                x,
                weight: weight.to_owned(),
                bias: bias.map(str::to_owned),
                spec,
            },
            y,
            true,
        ))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let y = pool::relu(&self.values[x]);
        let ng = self.needs_grad[x];
        self.push(Op::Relu { x }, y, ng)
    }

    pub fn max_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let (y, argmax) = pool::max_pool2(&self.values[x])?;
        let ng = self.needs_grad[x];
        Ok(self.push(Op::MaxPool { x, argmax }, y, ng))
    }

    pub fn avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let y = pool::avg_pool2(&self.values[x])?;
        let ng = self.needs_grad[x];
        Ok(self.push(Op::AvgPool { x }, y, ng))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (va, vb) = (&self.values[a], &self.values[b]);
        if !va.same_shape(vb) {
            return Err(Error::contract(format!(
                "cannot add {:?} and {:?} feature grids",
                va.shape(),
                vb.shape()
            )));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        let ng = self.needs_grad[a] || self.needs_grad[b];
        Ok(self.push(Op::Add { a, b }, y, ng))
    }

    pub fn swin(&mut self, params: &ParameterStore, x: ValueId, prefix: &str, spec: AttentionSpec) -> Result<ValueId> {
        let weights = swin_weights(params, prefix, &spec)?;
        let g = &self.values[x];
        let tokens = Tokens::from_grid(g);
        let (y, cache) = attention::swin_block(&tokens, g.height, g.width, &spec, &weights)?;
        let out = y.to_grid(g.height, g.width, g.stride);
        Ok(self.push(
            Op::Swin {
                x,
                prefix: prefix.to_owned(),
                spec,
                cache: Box::new(cache),
            },
            out,
            true,
        ))
    }

    pub fn resize(&mut self, x: ValueId, height: usize, width: usize, stride: usize) -> ValueId {
        let y = pool::resize_bilinear(&self.values[x], height, width, stride);
        let ng = self.needs_grad[x];
        self.push(Op::Resize { x }, y, ng)
    }

    /// Keeps the top-left `height × width` region.
    pub fn crop(&mut self, x: ValueId, height: usize, width: usize) -> ValueId {
        let src = &self.values[x];
        let mut y = FeatureGrid::zeros(src.channels, height, width, src.stride);
        for c in 0..src.channels {
            for r in 0..height {
                let s = src.idx(c, r, 0);
                let d = y.idx(c, r, 0);
                y.data[d..d + width].copy_from_slice(&src.data[s..s + width]);
            }
        }
        let ng = self.needs_grad[x];
        self.push(Op::Crop { x }, y, ng)
    }

    /// Back-propagates `seed` (the gradient of the objective w.r.t. `output`)
    /// and returns gradients for every parameter of `params`.
    pub fn backward(&self, params: &ParameterStore, output: ValueId, seed: FeatureGrid) -> Result<Gradients> {
        if !self.values[output].same_shape(&seed) {
            return Err(Error::contract("output gradient shape mismatch"));
        }
        let mut grads = Gradients::zeros_like(params);
        let mut dv: Vec<Option<FeatureGrid>> = vec![None; self.values.len()];
        dv[output] = Some(seed);
        for id in (0..=output).rev() {
            let Some(dy) = dv[id].take() else { continue };
            match &self.ops[id] {
                Op::Input => {}
                Op::Conv { x, weight, bias, spec } => {
                    let w = params.values(weight)?;
                    let mut dw = std::mem::take(grads.slot(weight));
                    let mut db = bias.as_ref().map(|b| std::mem::take(grads.slot(b)));
                    let dx = conv::conv2d_backward(&self.values[*x], w, *spec, &dy, &mut dw, db.as_deref_mut(), self.needs_grad[*x]);
                    *grads.slot(weight) = dw;
                    if let (Some(b), Some(db)) = (bias, db) {
                        *grads.slot(b) = db;
                    }
                    accumulate(&mut dv, *x, dx);
                }
                Op::ConvTranspose { x, weight, bias, spec } => {
                    let w = params.values(weight)?;
                    let mut dw = std::mem::take(grads.slot(weight));
                    let mut db = bias.as_ref().map(|b| std::mem::take(grads.slot(b)));
                    let dx = conv::conv_transpose2d_backward(&self.values[*x], w, *spec, &dy, &mut dw, db.as_deref_mut(), self.needs_grad[*x]);
                    *grads.slot(weight) = dw;
                    if let (Some(b), Some(db)) = (bias, db) {
                        *grads.slot(b) = db;
                    }
                    accumulate(&mut dv, *x, dx);
                }
                Op::Relu { x } => {
                    let dx = pool::relu_backward(&self.values[id], &dy);
                    accumulate(&mut dv, *x, Some(dx));
                }
                Op::MaxPool { x, argmax } => {
                    let dx = pool::max_pool2_backward(&self.values[*x], argmax, &dy);
                    accumulate(&mut dv, *x, Some(dx));
                }
                Op::AvgPool { x } => {
                    let dx = pool::avg_pool2_backward(&self.values[*x], &dy);
                    accumulate(&mut dv, *x, Some(dx));
                }
                Op::Add { a, b } => {
                    if self.needs_grad[*b] {
                        accumulate(&mut dv, *b, Some(dy.clone()));
                    }
                    accumulate(&mut dv, *a, Some(dy));
                }
                Op::Swin { x, prefix, spec, cache } => {
                    let weights = swin_weights(params, prefix, spec)?;
                    let mut g = weights.zeros_like();
                    let d_tokens = Tokens::from_grid(&dy);
                    let dx = attention::swin_block_backward(cache, spec, &weights, &d_tokens, &mut g);
                    let names = swin_names(prefix, spec);
                    for (name, part) in names.iter().zip(g.into_parts()) {
                        for (a, b) in grads.slot(name).iter_mut().zip(part) {
                            *a += b;
                        }
                    }
                    let src = &self.values[*x];
                    accumulate(&mut dv, *x, Some(dx.to_grid(src.height, src.width, src.stride)));
                }
                Op::Resize { x } => {
                    let dx = pool::resize_bilinear_backward(&self.values[*x], &dy);
                    accumulate(&mut dv, *x, Some(dx));
                }
                Op::Crop { x } => {
                    let mut dx = self.values[*x].zeros_like();
                    for c in 0..dy.channels {
                        for r in 0..dy.height {
                            let s = dy.idx(c, r, 0);
                            let d = dx.idx(c, r, 0);
                            dx.data[d..d + dy.width].copy_from_slice(&dy.data[s..s + dy.width]);
                        }
                    }
                    accumulate(&mut dv, *x, Some(dx));
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(dv: &mut [Option<FeatureGrid>], id: ValueId, g: Option<FeatureGrid>) {
    let Some(g) = g else { return };
    match &mut dv[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hidden_dim(params: &ParameterStore, prefix: &str) -> Result<usize> {
    Ok(params.get(&format!("{prefix}.mlp.fc1.bias"))?.values.len())
}

fn swin_names(prefix: &str, spec: &AttentionSpec) -> Vec<String> {
    swin_param_shapes(spec.dim, spec.heads, spec.window, 1)
        .into_iter()
        .map(|(n, _)| format!("{prefix}.{n}"))
        .collect()
}

pub(crate) fn swin_weights(params: &ParameterStore, prefix: &str, spec: &AttentionSpec) -> Result<SwinBlockWeights> {
    let hidden = hidden_dim(params, prefix)?;
    let parts = swin_param_shapes(spec.dim, spec.heads, spec.window, hidden)
        .into_iter()
        .map(|(n, shape)| {
            let name = format!("{prefix}.{n}");
            let p = params.get(&name)?;
            if p.shape != shape {
                return Err(Error::contract(format!("`{name}` has shape {:?}, expected {shape:?}", p.shape)));
            }
            Ok(p.values.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SwinBlockWeights::from_parts(parts))
}
