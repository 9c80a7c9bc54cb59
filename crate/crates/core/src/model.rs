//! The super-resolution network pair: a U-Net-style primal network built from
//! residual channel attention blocks with multi-scale tails, and one small
//! dual network per scale transition mapping images back down.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::bicubic_resize;
use crate::element::Element;
use crate::error::{DrnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrnConfig {
    /// Upscaling factor, one of 2, 4, 8.
    pub scale: usize,
    /// RCABs per up-module.
    pub blocks: usize,
    /// Base feature channels.
    pub channels: usize,
    /// Channel-attention reduction ratio.
    pub reduction: usize,
    /// LeakyReLU negative slope.
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Small model: B=30 with F=16 (2x/4x) or F=8 (8x).
    S,
    /// Large model: B=40/F=20 (2x/4x) or B=36/F=10 (8x).
    L,
    /// Desk-scale model: B=2, F=8 at any scale.
    T,
}

impl std::str::FromStr for Preset {
    type Err = DrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drn-s" | "s" => Ok(Preset::S),
            "drn-l" | "l" => Ok(Preset::L),
            "drn-t" | "t" => Ok(Preset::T),
            other => Err(DrnError::InvalidArgument(format!(
                "unknown preset {other:?} (expected drn-s, drn-l, or drn-t)"
            ))),
        }
    }
}

impl DrnConfig {
    pub fn preset(preset: Preset, scale: usize) -> Result<Self> {
        let (blocks, channels) = match (preset, scale) {
            (Preset::S, 2 | 4) => (30, 16),
            (Preset::S, 8) => (30, 8),
            (Preset::L, 2 | 4) => (40, 20),
            (Preset::L, 8) => (36, 10),
            (Preset::T, 2 | 4 | 8) => (2, 8),
            _ => {
                return Err(DrnError::InvalidArgument(format!(
                    "scale must be one of 2, 4, 8, got {scale}"
                )))
            }
        };
        Ok(DrnConfig {
            scale,
            blocks,
            channels,
            reduction: 16,
            slope: 0.2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4 | 8) {
            return Err(DrnError::InvalidArgument(format!(
                "scale must be one of 2, 4, 8, got {}",
                self.scale
            )));
        }
        if self.blocks == 0 || self.channels == 0 || self.reduction == 0 {
            return Err(DrnError::InvalidArgument(
                "blocks, channels, and reduction must be >= 1".into(),
            ));
        }
        if !self.slope.is_finite() || self.slope < 0.0 {
            return Err(DrnError::InvalidArgument(format!(
                "slope must be finite and >= 0, got {}",
                self.slope
            )));
        }
        Ok(())
    }

    /// Number of down modules = up modules = dual networks = log2(scale).
    pub fn levels(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    /// Channels entering up-module `k` (1-based).
    fn up_in_channels(&self, k: usize) -> usize {
        let levels = self.levels();
        if k == 1 {
            (1 << levels) * self.channels
        } else {
            (1 << (levels - k + 2)) * self.channels
        }
    }

    fn attention_channels(&self, c: usize) -> usize {
        (c / self.reduction).max(1)
    }
}

/// One convolution layer: parameter ids plus fixed geometry.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn param_count(&self) -> u64 {
        (self.out_c * self.in_c * self.k * self.k + self.out_c) as u64
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.k) / self.stride + 1,
            (w + 2 * self.padding - self.k) / self.stride + 1,
        )
    }

    /// Multiply-accumulates for one forward application at the given input size.
    pub fn madds(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_dims(h, w);
        (self.out_c * oh * ow * self.in_c * self.k * self.k) as u64
    }
}

/// Conv-ReLU-Conv trunk rescaled by squeeze-style channel attention, with a
/// residual add of the block input.
#[derive(Debug, Clone, Copy)]
pub struct Rcab {
    pub conv1: Conv2dSpec,
    pub conv2: Conv2dSpec,
    pub att1: Conv2dSpec,
    pub att2: Conv2dSpec,
}

/// Strided conv, LeakyReLU, conv: halves spatial dims, doubles channels.
#[derive(Debug, Clone, Copy)]
pub struct DownBlock {
    pub conv1: Conv2dSpec,
    pub conv2: Conv2dSpec,
}

/// B RCABs, a 2x upsampler (conv to 4C then pixel-shuffle), and a 1x1
/// channel reduction to match the skip connection it concatenates with.
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub rcabs: Vec<Rcab>,
    pub upsample: Conv2dSpec,
    pub reduce: Conv2dSpec,
}

/// Strided conv, LeakyReLU, conv on 3-channel images; halves spatial dims.
#[derive(Debug, Clone, Copy)]
pub struct DualNetwork {
    pub conv1: Conv2dSpec,
    pub conv2: Conv2dSpec,
}

#[derive(Debug, Clone)]
pub struct PrimalNetwork {
    pub head: Conv2dSpec,
    pub downs: Vec<DownBlock>,
    pub ups: Vec<UpBlock>,
    /// `tails[0]` reads the bottleneck; `tails[k]` reads concat output `k`.
    pub tails: Vec<Conv2dSpec>,
}

pub struct DrnModel<E: Element = f32> {
    pub config: DrnConfig,
    pub store: ParamStore<E>,
    pub primal: PrimalNetwork,
    pub duals: Vec<DualNetwork>,
    primal_params: Vec<ParamId>,
    dual_params: Vec<ParamId>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent deterministic stream per (seed, name); initialization order
/// therefore never matters, and networks draw from disjoint namespaces.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let h1 = fnv1a64(name.as_bytes());
    let h2 = fnv1a64(&h1.to_le_bytes());
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&h1.to_le_bytes());
    key[16..24].copy_from_slice(&h2.to_le_bytes());
    key[24..32].copy_from_slice(&(name.len() as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

struct NetBuilder<'a, E: Element> {
    store: &'a mut ParamStore<E>,
    seed: u64,
    slope: f64,
    registered: Vec<ParamId>,
}

impl<'a, E: Element> NetBuilder<'a, E> {
    fn conv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Conv2dSpec {
        let fan_in = (in_c * k * k) as f64;
        let bound = (6.0 / ((1.0 + self.slope * self.slope) * fan_in)).sqrt();
        let wname = format!("{name}.weight");
        let mut rng = named_rng(self.seed, &wname);
        let data: Vec<E> = (0..out_c * in_c * k * k)
            .map(|_| E::from_f64_val(rng.gen_range(-bound..bound)))
            .collect();
        let weight = self
            .store
            .register(wname, Tensor::new([out_c, in_c, k, k], data).expect("init shape"));
        let bias = self
            .store
            .register(format!("{name}.bias"), Tensor::zeros([1, out_c, 1, 1]));
        self.registered.push(weight);
        self.registered.push(bias);
        Conv2dSpec {
            weight,
            bias,
            in_c,
            out_c,
            k,
            stride,
            padding,
        }
    }
}

impl<E: Element> DrnModel<E> {
    /// Builds the primal/dual pair with deterministic initialization.
    pub fn build(config: DrnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let levels = config.levels();
        let f = config.channels;
        let mut store = ParamStore::new();

        let mut b = NetBuilder {
            store: &mut store,
            seed,
            slope: config.slope,
            registered: Vec::new(),
        };

        let head = b.conv("primal.head", 3, f, 3, 1, 1);
        let downs: Vec<DownBlock> = (1..=levels)
            .map(|k| {
                let c_in = (1 << (k - 1)) * f;
                DownBlock {
                    conv1: b.conv(&format!("primal.down{k}.conv1"), c_in, 2 * c_in, 3, 2, 1),
                    conv2: b.conv(&format!("primal.down{k}.conv2"), 2 * c_in, 2 * c_in, 3, 1, 1),
                }
            })
            .collect();
        let ups: Vec<UpBlock> = (1..=levels)
            .map(|k| {
                let c = config.up_in_channels(k);
                let att_c = config.attention_channels(c);
                let rcabs = (1..=config.blocks)
                    .map(|i| {
                        let base = format!("primal.up{k}.rcab{i}");
                        Rcab {
                            conv1: b.conv(&format!("{base}.conv1"), c, c, 3, 1, 1),
                            conv2: b.conv(&format!("{base}.conv2"), c, c, 3, 1, 1),
                            att1: b.conv(&format!("{base}.att1"), c, att_c, 1, 1, 0),
                            att2: b.conv(&format!("{base}.att2"), att_c, c, 1, 1, 0),
                        }
                    })
                    .collect();
                let skip_c = (1 << (levels - k)) * f;
                UpBlock {
                    rcabs,
                    upsample: b.conv(&format!("primal.up{k}.upsample"), c, 4 * c, 3, 1, 1),
                    reduce: b.conv(&format!("primal.up{k}.reduce"), c, skip_c, 1, 1, 0),
                }
            })
            .collect();
        let tails: Vec<Conv2dSpec> = (0..=levels)
            .map(|k| {
                let c = if k == 0 {
                    (1 << levels) * f
                } else {
                    2 * (1 << (levels - k)) * f
                };
                b.conv(&format!("primal.tail{k}"), c, 3, 3, 1, 1)
            })
            .collect();
        let primal_params = std::mem::take(&mut b.registered);

        // dual{i} maps the scale-2^i output down to scale 2^(i-1).
        let duals: Vec<DualNetwork> = (1..=levels)
            .map(|i| DualNetwork {
                conv1: b.conv(&format!("dual{i}.conv1"), 3, 3, 3, 2, 1),
                conv2: b.conv(&format!("dual{i}.conv2"), 3, 3, 3, 1, 1),
            })
            .collect();
        let dual_params = b.registered;

        Ok(DrnModel {
            config,
            store,
            primal: PrimalNetwork {
                head,
                downs,
                ups,
                tails,
            },
            duals,
            primal_params,
            dual_params,
        })
    }

    pub fn primal_params(&self) -> &[ParamId] {
        &self.primal_params
    }

    pub fn dual_params(&self) -> &[ParamId] {
        &self.dual_params
    }

    pub fn count_params(&self) -> u64 {
        self.store.iter().map(|p| p.value.numel() as u64).sum()
    }

    pub fn count_primal_params(&self) -> u64 {
        self.primal_params
            .iter()
            .map(|&id| self.store.value(id).numel() as u64)
            .sum()
    }

    pub fn count_dual_params(&self) -> u64 {
        self.dual_params
            .iter()
            .map(|&id| self.store.value(id).numel() as u64)
            .sum()
    }

    /// Multiply-accumulates of all convolutions (primal and dual) for one
    /// image at LR input size `(h, w)`.
    pub fn count_madds(&self, h: usize, w: usize) -> u64 {
        let (sh, sw) = (self.config.scale * h, self.config.scale * w);
        let mut total = self.primal.head.madds(sh, sw);
        let mut dims = (sh, sw);
        for down in &self.primal.downs {
            total += down.conv1.madds(dims.0, dims.1);
            dims = (dims.0 / 2, dims.1 / 2);
            total += down.conv2.madds(dims.0, dims.1);
        }
        total += self.primal.tails[0].madds(dims.0, dims.1);
        for (k, up) in self.primal.ups.iter().enumerate() {
            for rcab in &up.rcabs {
                total += rcab.conv1.madds(dims.0, dims.1);
                total += rcab.conv2.madds(dims.0, dims.1);
                total += rcab.att1.madds(1, 1);
                total += rcab.att2.madds(1, 1);
            }
            total += up.upsample.madds(dims.0, dims.1);
            dims = (dims.0 * 2, dims.1 * 2);
            total += up.reduce.madds(dims.0, dims.1);
            total += self.primal.tails[k + 1].madds(dims.0, dims.1);
        }
        for (i, dual) in self.duals.iter().enumerate() {
            let scale = 1 << (i + 1);
            let (dh, dw) = (scale * h, scale * w);
            total += dual.conv1.madds(dh, dw);
            total += dual.conv2.madds(dh / 2, dw / 2);
        }
        total
    }

    /// Super-resolves one LR batch with no gradient tracking; returns the
    /// final-scale output.
    pub fn infer(&self, lr: &Tensor<E>) -> Result<Tensor<E>> {
        let mut pass = ForwardPass::new(self, TrackMode::None);
        let outputs = pass.forward_primal(lr)?;
        Ok(pass.tape.value(*outputs.last().expect("levels+1 outputs")).clone())
    }
}

/// Which parameter group accumulates gradients during a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackMode {
    None,
    All,
    PrimalOnly,
    DualOnly,
}

/// One recorded forward pass over the model; parameters are registered on the
/// tape at most once each, so gradients accumulate across sub-batches.
pub struct ForwardPass<'m, E: Element> {
    model: &'m DrnModel<E>,
    pub tape: Tape<E>,
    leaves: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'m, E: Element> ForwardPass<'m, E> {
    pub fn new(model: &'m DrnModel<E>, track: TrackMode) -> Self {
        let mut trainable = vec![false; model.store.len()];
        let (primal_on, dual_on) = match track {
            TrackMode::None => (false, false),
            TrackMode::All => (true, true),
            TrackMode::PrimalOnly => (true, false),
            TrackMode::DualOnly => (false, true),
        };
        for &id in &model.primal_params {
            trainable[id.0] = primal_on;
        }
        for &id in &model.dual_params {
            trainable[id.0] = dual_on;
        }
        ForwardPass {
            model,
            tape: Tape::new(),
            leaves: vec![None; model.store.len()],
            trainable,
        }
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let v = self.model.store.leaf(&mut self.tape, id, self.trainable[id.0]);
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn conv(&mut self, spec: Conv2dSpec, x: Var) -> Result<Var> {
        let w = self.param(spec.weight);
        let b = self.param(spec.bias);
        self.tape.conv2d(x, w, Some(b), spec.stride, spec.padding)
    }

    pub fn rcab(&mut self, spec: Rcab, x: Var) -> Result<Var> {
        let (out, _) = self.rcab_with_attention(spec, x)?;
        Ok(out)
    }

    pub(crate) fn rcab_with_attention(&mut self, spec: Rcab, x: Var) -> Result<(Var, Var)> {
        let t = self.conv(spec.conv1, x)?;
        let t = self.tape.relu(t);
        let trunk = self.conv(spec.conv2, t)?;
        let a = self.tape.global_avg_pool(trunk)?;
        let a = self.conv(spec.att1, a)?;
        let a = self.tape.relu(a);
        let a = self.conv(spec.att2, a)?;
        let att = self.tape.sigmoid(a);
        let scaled = self.tape.mul_broadcast(trunk, att)?;
        let out = self.tape.add(x, scaled)?;
        Ok((out, att))
    }

    fn down(&mut self, spec: DownBlock, x: Var) -> Result<Var> {
        let slope = E::from_f64_val(self.model.config.slope);
        let y = self.conv(spec.conv1, x)?;
        let y = self.tape.leaky_relu(y, slope);
        self.conv(spec.conv2, y)
    }

    fn up(&mut self, k: usize, x: Var, skip: Var) -> Result<Var> {
        let nblocks = self.model.primal.ups[k].rcabs.len();
        let mut cur = x;
        for i in 0..nblocks {
            let rcab = self.model.primal.ups[k].rcabs[i];
            cur = self.rcab(rcab, cur)?;
        }
        let up = self.model.primal.ups[k].clone();
        cur = self.conv(up.upsample, cur)?;
        cur = self.tape.pixel_shuffle(cur, 2)?;
        cur = self.conv(up.reduce, cur)?;
        self.tape.concat_channels(cur, skip)
    }

    /// Runs the primal network on an LR batch `(n, 3, h, w)`; the input is
    /// first upscaled to `(s*h, s*w)` with the bicubic kernel. Returns
    /// `levels + 1` outputs at scales `2^0 (h, w)` up to `2^levels (h, w)`.
    pub fn forward_primal(&mut self, lr: &Tensor<E>) -> Result<Vec<Var>> {
        let [_, c, h, w] = lr.shape();
        if c != 3 || h == 0 || w == 0 {
            return Err(DrnError::InvalidArgument(format!(
                "forward_primal expects a non-empty (n, 3, h, w) input, got {:?}",
                lr.shape()
            )));
        }
        let s = self.model.config.scale;
        let upscaled = bicubic_resize(lr, s * h, s * w)?;
        let x = self.tape.constant(upscaled);

        let levels = self.model.config.levels();
        let head = self.conv(self.model.primal.head, x)?;
        let mut skips = vec![head];
        let mut cur = head;
        for k in 0..levels {
            cur = self.down(self.model.primal.downs[k], cur)?;
            skips.push(cur);
        }
        let mut outputs = vec![self.conv(self.model.primal.tails[0], cur)?];
        for k in 0..levels {
            cur = self.up(k, cur, skips[levels - 1 - k])?;
            outputs.push(self.conv(self.model.primal.tails[k + 1], cur)?);
        }
        Ok(outputs)
    }

    /// Applies dual network `i` to the scale-`2^(i+1)` primal output,
    /// producing `levels` reconstructions, one scale down each.
    pub fn forward_dual(&mut self, sr_outputs: &[Var]) -> Result<Vec<Var>> {
        let levels = self.model.config.levels();
        if sr_outputs.len() != levels + 1 {
            return Err(DrnError::InvalidArgument(format!(
                "forward_dual expects {} primal outputs, got {}",
                levels + 1,
                sr_outputs.len()
            )));
        }
        let slope = E::from_f64_val(self.model.config.slope);
        let mut recons = Vec::with_capacity(levels);
        for i in 0..levels {
            let dual = self.model.duals[i];
            let y = self.conv(dual.conv1, sr_outputs[i + 1])?;
            let y = self.tape.leaky_relu(y, slope);
            recons.push(self.conv(dual.conv2, y)?);
        }
        Ok(recons)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        self.tape.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients accumulated for every store parameter, indexed by parameter;
    /// untracked or unreached parameters yield `None`.
    pub fn take_param_grads(&mut self) -> Vec<Option<Tensor<E>>> {
        self.leaves
            .iter()
            .map(|leaf| leaf.and_then(|v| self.tape.take_grad(v)))
            .collect()
    }

    /// Gradient of one parameter after [`ForwardPass::backward`].
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.leaves[id.0].and_then(|v| self.tape.grad(v))
    }
}
