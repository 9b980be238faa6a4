use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::layers::{gemm, maxpool_backward, maxpool_forward, relu_backward, relu_inplace, Act, Conv2d, Group, Linear, Param};
use super::{BackboneSpec, HeadLayout, HeadType, ModelConfig};
use crate::targets::{NUM_CLASSES, NUM_SQUARES};

/// Residual branch output scale at init; keeps the un-normalized stack close
/// to identity so plain Adam trains it from scratch.
const BRANCH_INIT_SCALE: f32 = 0.1;

/// Grouped-convolution bottleneck: 1x1 reduce, grouped 3x3 (strided), 1x1
/// expand, plus a projection shortcut when the shape changes.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub reduce: Conv2d,
    pub grouped: Conv2d,
    pub expand: Conv2d,
    pub shortcut: Option<Conv2d>,
}

struct BlockTape {
    a1: Act,
    a2: Act,
    out: Act,
}

impl Block {
    fn forward(&self, x: &Act) -> BlockTape {
        let mut a1 = self.reduce.forward(x);
        relu_inplace(&mut a1);
        let mut a2 = self.grouped.forward(&a1);
        relu_inplace(&mut a2);
        let mut out = self.expand.forward(&a2);
        match &self.shortcut {
            Some(s) => out.data.iter_mut().zip(s.forward(x).data).for_each(|(o, v)| *o += v),
            None => out.data.iter_mut().zip(&x.data).for_each(|(o, v)| *o += v),
        }
        relu_inplace(&mut out);
        BlockTape { a1, a2, out }
    }

    fn backward(&mut self, x: &Act, tape: &BlockTape, mut dy: Act, need_dx: bool) -> Option<Act> {
        relu_backward(&tape.out, &mut dy);
        let mut da2 = self.expand.backward(&tape.a2, &dy, true).unwrap();
        relu_backward(&tape.a2, &mut da2);
        let mut da1 = self.grouped.backward(&tape.a1, &da2, true).unwrap();
        relu_backward(&tape.a1, &mut da1);
        let dx = self.reduce.backward(x, &da1, need_dx);
        let ds = match &mut self.shortcut {
            Some(s) => s.backward(x, &dy, need_dx),
            None => need_dx.then_some(dy),
        };
        match (dx, ds) {
            (Some(mut a), Some(b)) => {
                a.data.iter_mut().zip(b.data).for_each(|(u, v)| *u += v);
                Some(a)
            }
            _ => None,
        }
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = [&self.reduce, &self.grouped, &self.expand].into_iter().flat_map(|c| c.params()).collect();
        if let Some(s) = &self.shortcut {
            v.extend(s.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        v.extend(self.reduce.params_mut());
        v.extend(self.grouped.params_mut());
        v.extend(self.expand.params_mut());
        if let Some(s) = &mut self.shortcut {
            v.extend(s.params_mut());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Pool { fc: Linear },
    Flatten { reduce: Conv2d, fc: Linear },
    /// `mix` is `[slots, h * w]`; `classify` maps each slot's pooled
    /// features to its outputs, `slot_bias` is `[slots, per_slot]`.
    Factorized { reduce: Conv2d, mix: Param, classify: Linear, slot_bias: Param },
}

/// Backbone plus output head; outputs are raw logits (classification) or
/// raw query vectors (detection, coordinates before the sigmoid).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub stem: Conv2d,
    pub stem_pool: bool,
    pub blocks: Vec<Block>,
    pub head: Head,
    pub out_dim: usize,
}

pub(crate) struct Tape {
    input: Act,
    stem: Act,
    pool: Option<(Act, Vec<u32>)>,
    blocks: Vec<BlockTape>,
    head_in: Vec<f32>,
    head_reduce: Option<Act>,
}

/// Output slots and values per slot of a head.
fn slot_shape(config: &ModelConfig) -> (usize, usize) {
    match config.head {
        HeadType::Classification => (NUM_SQUARES, NUM_CLASSES),
        HeadType::RelativeDetection => (config.queries, NUM_CLASSES + 2),
    }
}

pub fn output_dim(config: &ModelConfig) -> usize {
    match config.head {
        HeadType::Classification => NUM_SQUARES * NUM_CLASSES,
        HeadType::RelativeDetection => config.queries * (NUM_CLASSES + 2),
    }
}

/// Spatial size after the stem and every stage.
pub fn feature_size(backbone: &BackboneSpec, resolution: usize) -> usize {
    let conv = |x: usize, k: usize, s: usize| (x + 2 * (k / 2)).saturating_sub(k) / s + 1;
    let mut s = conv(resolution, backbone.stem_kernel, backbone.stem_stride);
    if backbone.stem_pool {
        s = conv(s, 3, 2);
    }
    for st in &backbone.stages {
        s = conv(s, 3, st.stride);
    }
    s
}

impl Network {
    pub fn new(config: &ModelConfig, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &config.backbone;
        let stem = Conv2d::new("stem", 3, b.stem_channels, b.stem_kernel, b.stem_stride, 1, 1.0, Group::Backbone, &mut rng);
        let mut blocks = Vec::new();
        let mut in_c = b.stem_channels;
        for (si, st) in b.stages.iter().enumerate() {
            for bi in 0..st.blocks {
                let name = format!("stage{si}.block{bi}");
                let stride = if bi == 0 { st.stride } else { 1 };
                let reduce = Conv2d::new(&format!("{name}.reduce"), in_c, st.width, 1, 1, 1, 1.0, Group::Backbone, &mut rng);
                let grouped =
                    Conv2d::new(&format!("{name}.grouped"), st.width, st.width, 3, stride, b.cardinality, 1.0, Group::Backbone, &mut rng);
                let expand =
                    Conv2d::new(&format!("{name}.expand"), st.width, st.out_channels, 1, 1, 1, BRANCH_INIT_SCALE, Group::Backbone, &mut rng);
                let shortcut = (stride != 1 || in_c != st.out_channels).then(|| {
                    let mut c = Conv2d::new(&format!("{name}.shortcut"), in_c, st.out_channels, 1, 1, 1, 1.0, Group::Backbone, &mut rng);
                    c.stride = stride;
                    c
                });
                blocks.push(Block { reduce, grouped, expand, shortcut });
                in_c = st.out_channels;
            }
        }
        let out_dim = output_dim(config);
        let fs = feature_size(b, config.input_resolution as usize);
        let head = match config.head_layout {
            HeadLayout::GlobalPool => Head::Pool { fc: Linear::new("head.fc", in_c, out_dim, Group::Head, &mut rng) },
            HeadLayout::Flatten { channels } => Head::Flatten {
                reduce: Conv2d::new("head.reduce", in_c, channels, 1, 1, 1, 1.0, Group::Head, &mut rng),
                fc: Linear::new("head.fc", channels * fs * fs, out_dim, Group::Head, &mut rng),
            },
            HeadLayout::Factorized { channels } => {
                let (slots, per_slot) = slot_shape(config);
                let hw = fs * fs;
                let u = Uniform::new(0.0, 2.0 / hw as f32);
                let mix = (0..slots * hw).map(|_| u.sample(&mut rng)).collect();
                Head::Factorized {
                    reduce: Conv2d::new("head.reduce", in_c, channels, 1, 1, 1, 1.0, Group::Head, &mut rng),
                    mix: Param::new("head.mix".into(), vec![slots, hw], mix, Group::Head, true),
                    classify: Linear::new("head.classify", channels, per_slot, Group::Head, &mut rng),
                    slot_bias: Param::new("head.slot_bias".into(), vec![slots, per_slot], vec![0.0; slots * per_slot], Group::Head, true),
                }
            }
        };
        Network { stem, stem_pool: b.stem_pool, blocks, head, out_dim }
    }

    pub(crate) fn forward_tape(&self, input: Act) -> (Vec<f32>, Tape) {
        let n = input.n;
        let mut stem = self.stem.forward(&input);
        relu_inplace(&mut stem);
        let pool = self.stem_pool.then(|| maxpool_forward(&stem));
        let mut tapes: Vec<BlockTape> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let x = tapes.last().map(|t| &t.out).or(pool.as_ref().map(|p| &p.0)).unwrap_or(&stem);
            let t = block.forward(x);
            tapes.push(t);
        }
        let feat = tapes.last().map(|t| &t.out).or(pool.as_ref().map(|p| &p.0)).unwrap_or(&stem);
        let (head_in, head_reduce, out) = match &self.head {
            Head::Pool { fc } => {
                let hw = (feat.h * feat.w) as f32;
                let pooled: Vec<f32> = feat.data.chunks(feat.h * feat.w).map(|c| c.iter().sum::<f32>() / hw).collect();
                let out = fc.forward(&pooled, n);
                (pooled, None, out)
            }
            Head::Flatten { reduce, fc } => {
                let mut r = reduce.forward(feat);
                relu_inplace(&mut r);
                let out = fc.forward(&r.data, n);
                (Vec::new(), Some(r), out)
            }
            Head::Factorized { reduce, mix, classify, slot_bias } => {
                let mut r = reduce.forward(feat);
                relu_inplace(&mut r);
                let (slots, hw, k) = (mix.shape[0], mix.shape[1], r.c);
                let mut pooled = vec![0.0; n * slots * k];
                for i in 0..n {
                    // pooled_i = mix (slots x hw) . r_i^T (hw x k)
                    gemm(slots, hw, k, 1.0, &mix.value, (hw, 1), r.image(i), (1, hw), 0.0, &mut pooled[i * slots * k..], (k, 1));
                }
                let mut out = classify.forward(&pooled, n * slots);
                for chunk in out.chunks_mut(slot_bias.len()) {
                    chunk.iter_mut().zip(&slot_bias.value).for_each(|(o, b)| *o += b);
                }
                (pooled, Some(r), out)
            }
        };
        (out, Tape { input, stem, pool, blocks: tapes, head_in, head_reduce })
    }

    pub fn forward(&self, input: Act) -> Vec<f32> {
        self.forward_tape(input).0
    }

    /// Accumulates gradients of a loss whose gradient wrt the outputs is
    /// `dout` (`[n, out_dim]`).
    pub(crate) fn backward(&mut self, tape: &Tape, dout: &[f32]) {
        let n = tape.input.n;
        let feat = tape.blocks.last().map(|t| &t.out).or(tape.pool.as_ref().map(|p| &p.0)).unwrap_or(&tape.stem);
        let mut dfeat = match &mut self.head {
            Head::Pool { fc } => {
                let dp = fc.backward(&tape.head_in, dout, n);
                let hw = feat.h * feat.w;
                let mut d = feat.zeros_like();
                for (chunk, g) in d.data.chunks_mut(hw).zip(dp) {
                    chunk.fill(g / hw as f32);
                }
                d
            }
            Head::Flatten { reduce, fc } => {
                let r = tape.head_reduce.as_ref().unwrap();
                let mut dr = r.zeros_like();
                dr.data = fc.backward(&r.data, dout, n);
                relu_backward(r, &mut dr);
                reduce.backward(feat, &dr, true).unwrap()
            }
            Head::Factorized { reduce, mix, classify, slot_bias } => {
                let r = tape.head_reduce.as_ref().unwrap();
                let (slots, hw, k) = (mix.shape[0], mix.shape[1], r.c);
                for chunk in dout.chunks(slot_bias.len()) {
                    slot_bias.grad.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                }
                let dpooled = classify.backward(&tape.head_in, dout, n * slots);
                let mut dr = r.zeros_like();
                for i in 0..n {
                    let dp = &dpooled[i * slots * k..(i + 1) * slots * k];
                    // dmix += dp (slots x k) . r_i (k x hw)
                    gemm(slots, k, hw, 1.0, dp, (k, 1), r.image(i), (hw, 1), 1.0, &mut mix.grad, (hw, 1));
                    // dr_i (k x hw) = dp^T (k x slots) . mix (slots x hw)
                    gemm(k, slots, hw, 1.0, dp, (1, k), &mix.value, (hw, 1), 0.0, &mut dr.data[i * k * hw..], (hw, 1));
                }
                relu_backward(r, &mut dr);
                reduce.backward(feat, &dr, true).unwrap()
            }
        };
        for i in (0..self.blocks.len()).rev() {
            let x = if i > 0 { &tape.blocks[i - 1].out } else { tape.pool.as_ref().map(|p| &p.0).unwrap_or(&tape.stem) };
            dfeat = self.blocks[i].backward(x, &tape.blocks[i], dfeat, true).unwrap();
        }
        if let Some((_, arg)) = &tape.pool {
            dfeat = maxpool_backward(&tape.stem, &dfeat, arg);
        }
        relu_backward(&tape.stem, &mut dfeat);
        self.stem.backward(&tape.input, &dfeat, false);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.stem.params().into_iter().collect();
        for b in &self.blocks {
            v.extend(b.params());
        }
        match &self.head {
            Head::Pool { fc } => v.extend(fc.params()),
            Head::Flatten { reduce, fc } => {
                v.extend(reduce.params());
                v.extend(fc.params());
            }
            Head::Factorized { reduce, mix, classify, slot_bias } => {
                v.extend(reduce.params());
                v.push(mix);
                v.extend(classify.params());
                v.push(slot_bias);
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.stem.params_mut().into_iter().collect();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        match &mut self.head {
            Head::Pool { fc } => v.extend(fc.params_mut()),
            Head::Flatten { reduce, fc } => {
                v.extend(reduce.params_mut());
                v.extend(fc.params_mut());
            }
            Head::Factorized { reduce, mix, classify, slot_bias } => {
                v.extend(reduce.params_mut());
                v.push(mix);
                v.extend(classify.params_mut());
                v.push(slot_bias);
            }
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
