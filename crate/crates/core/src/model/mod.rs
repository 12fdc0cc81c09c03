//! The segmentation network: residual CNN encoder, per-level transformer
//! branches, multi-level fusion and a U-shaped decoder.
//!
//! All forward methods record onto a caller-supplied [`Graph`], which lets
//! training, gradient checks and plain inference share one code path.

mod config;
mod params;

pub use config::ModelConfig;
pub use params::{Gradients, ParamId, ParamStore};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ProbabilityMap;
use crate::scalar::Scalar;
use crate::tensor::checkpoint::{self, Checkpoint};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Architectural switches for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVariant {
    /// Whether the multi-level transformer branches are present. Without
    /// them the fusion convolution sees only the deepest CNN feature.
    pub mvtm: bool,
}

impl Default for ModelVariant {
    fn default() -> Self {
        Self { mvtm: true }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: ParamId,
    shift: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ResBlockIds {
    conv1: ConvIds,
    conv2: ConvIds,
    shortcut: Option<ConvIds>,
    stride: usize,
}

#[derive(Clone, Copy, Debug)]
struct VitIds {
    pos: ParamId,
    norm1: NormIds,
    query: LinearIds,
    key: LinearIds,
    value: LinearIds,
    proj: LinearIds,
    norm2: NormIds,
    mlp_in: LinearIds,
    mlp_out: LinearIds,
    /// Final norm applied to `E_b` before folding back to a feature map.
    norm_out: NormIds,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvIds,
    /// Two residual blocks per level `1..=k`.
    encoder: Vec<[ResBlockIds; 2]>,
    /// Transformer branch for levels `1..k`; empty when ablated.
    vit: Vec<VitIds>,
    fuse: ConvIds,
    /// `decoder[i]` produces `M_i` for `i = 0..k`.
    decoder: Vec<ConvIds>,
    head: ConvIds,
}

struct Builder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn xavier(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.xavier(name.to_string(), shape, &mut self.rng)
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, ks: usize) -> ConvIds {
        ConvIds {
            weight: self.xavier(&format!("{name}.weight"), &[co, ci, ks, ks]),
            bias: self.store.zeros(format!("{name}.bias"), &[co]),
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearIds {
        LinearIds {
            weight: self.xavier(&format!("{name}.weight"), &[din, dout]),
            bias: self.store.zeros(format!("{name}.bias"), &[dout]),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.store.ones(format!("{name}.gain"), &[d]),
            shift: self.store.zeros(format!("{name}.shift"), &[d]),
        }
    }
}

/// Multi-scale CNN features `F_0..F_k`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub pyramid: FeaturePyramid,
    /// `V_1..V_{k-1}`; empty for the ablated variant.
    pub refined: Vec<Var>,
    pub fused: Var,
    /// Pre-sigmoid output `[1,H,W]`.
    pub logits: Var,
    /// `sigmoid(logits)`.
    pub probs: Var,
}

/// The network and its parameters.
#[derive(Clone, Debug)]
pub struct MtuNet<T> {
    config: ModelConfig,
    variant: ModelVariant,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> MtuNet<T> {
    /// Builds the network with Xavier-initialised weights and zero biases,
    /// seeded from `config.seed`.
    pub fn new(config: ModelConfig, variant: ModelVariant) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };

        let stem = b.conv("stem", config.stem_channels, 1, 3);
        let mut encoder = Vec::with_capacity(config.k);
        for level in 1..=config.k {
            let (cin, cout) = (config.width(level - 1), config.width(level));
            let p = format!("enc{level}");
            let down = ResBlockIds {
                conv1: b.conv(&format!("{p}.block0.conv1"), cout, cin, 3),
                conv2: b.conv(&format!("{p}.block0.conv2"), cout, cout, 3),
                shortcut: Some(b.conv(&format!("{p}.block0.shortcut"), cout, cin, 1)),
                stride: 2,
            };
            let keep = ResBlockIds {
                conv1: b.conv(&format!("{p}.block1.conv1"), cout, cout, 3),
                conv2: b.conv(&format!("{p}.block1.conv2"), cout, cout, 3),
                shortcut: None,
                stride: 1,
            };
            encoder.push([down, keep]);
        }

        let mut vit = Vec::new();
        if variant.mvtm {
            for level in 1..config.k {
                let p = format!("vit{level}");
                let (n, d) = (config.tokens(level), config.token_dim(level));
                let hidden = d * config.mlp_ratio;
                vit.push(VitIds {
                    pos: b.xavier(&format!("{p}.pos"), &[n, d]),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    query: b.linear(&format!("{p}.query"), d, d),
                    key: b.linear(&format!("{p}.key"), d, d),
                    value: b.linear(&format!("{p}.value"), d, d),
                    proj: b.linear(&format!("{p}.proj"), d, d),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                    mlp_in: b.linear(&format!("{p}.mlp_in"), d, hidden),
                    mlp_out: b.linear(&format!("{p}.mlp_out"), hidden, d),
                    norm_out: b.norm(&format!("{p}.norm_out"), d),
                });
            }
        }

        let ck = config.width(config.k);
        let fuse_in = if variant.mvtm {
            (1..=config.k).map(|l| config.width(l)).sum()
        } else {
            ck
        };
        let fuse = b.conv("fuse", ck, fuse_in, 1);

        let mut decoder = Vec::with_capacity(config.k);
        for level in 0..config.k {
            let cin = config.width(level) + config.width(level + 1);
            decoder.push(b.conv(&format!("dec{level}"), config.width(level), cin, 3));
        }
        let head = b.conv("head", 1, config.stem_channels, 1);

        Ok(Self {
            config,
            variant,
            params: b.store,
            layout: Layout {
                stem,
                encoder,
                vit,
                fuse,
                decoder,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> MtuNet<U> {
        MtuNet {
            config: self.config.clone(),
            variant: self.variant,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn bind_conv<'a>(&'a self, g: &mut Graph<'a, T>, ids: ConvIds) -> (Var, Var) {
        (
            g.param(self.params.tensor(ids.weight)),
            g.param(self.params.tensor(ids.bias)),
        )
    }

    fn conv<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        x: Var,
        ids: ConvIds,
        stride: usize,
    ) -> Result<Var> {
        let (w, b) = self.bind_conv(g, ids);
        let k = g.shape(w)[2];
        g.conv2d(x, w, Some(b), stride, k / 2)
    }

    fn linear<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, ids: LinearIds) -> Result<Var> {
        let w = g.param(self.params.tensor(ids.weight));
        let b = g.param(self.params.tensor(ids.bias));
        g.linear(x, w, Some(b))
    }

    fn norm<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, ids: NormIds) -> Result<Var> {
        let gain = g.param(self.params.tensor(ids.gain));
        let shift = g.param(self.params.tensor(ids.shift));
        g.layer_norm(x, gain, shift, T::of(LN_EPS))
    }

    fn residual<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, ids: ResBlockIds) -> Result<Var> {
        let h = self.conv(g, x, ids.conv1, ids.stride)?;
        let h = g.relu(h)?;
        let h = self.conv(g, h, ids.conv2, 1)?;
        let skip = match ids.shortcut {
            Some(sc) => self.conv(g, x, sc, ids.stride)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        g.relu(sum)
    }

    /// Records the input image `[1,H,W]` as a constant leaf.
    pub fn image_input<'a>(&'a self, g: &mut Graph<'a, T>, image: Tensor<T>) -> Result<Var> {
        let s = self.config.input_size;
        if image.shape() != [1, s, s] {
            return Err(Error::shape(
                "forward",
                format!("expected image [1,{s},{s}], got {:?}", image.shape()),
            ));
        }
        Ok(g.input(image))
    }

    /// CNN feature pyramid `F_0..F_k`; `F_i` is `C_i × H/2^i × W/2^i`.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a, T>, image: Var) -> Result<FeaturePyramid> {
        let s = self.config.input_size;
        if g.shape(image) != [1, s, s] {
            return Err(Error::shape(
                "encode",
                format!("expected [1,{s},{s}], got {:?}", g.shape(image)),
            ));
        }
        let stem = self.conv(g, image, self.layout.stem, 1)?;
        let mut levels = vec![g.relu(stem)?];
        for blocks in &self.layout.encoder {
            let mut x = *levels.last().expect("stem level present");
            for ids in blocks {
                x = self.residual(g, x, *ids)?;
            }
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Transformer tokens `E_b` for a level-`level` feature map, before they
    /// are folded back into a spatial map.
    pub fn vit_tokens<'a>(&'a self, g: &mut Graph<'a, T>, level: usize, feature: Var) -> Result<Var> {
        let ids = self.vit_ids(level)?;
        let patch = self.config.patch();
        let tokens = g.patchify(feature, patch)?;
        let pos = g.param(self.params.tensor(ids.pos));
        if g.shape(pos) != g.shape(tokens) {
            return Err(Error::shape(
                "vit_branch",
                format!("tokens {:?} vs position table {:?}", g.shape(tokens), g.shape(pos)),
            ));
        }
        let embedded = g.add(tokens, pos)?;
        self.transformer_block(g, embedded, &ids, self.config.heads_per_level[level - 1])
    }

    /// Pre-norm attention + MLP block over `[N, D]` tokens.
    fn transformer_block<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        tokens: Var,
        ids: &VitIds,
        heads: usize,
    ) -> Result<Var> {
        let normed = self.norm(g, tokens, ids.norm1)?;
        let attended = self.attention(g, normed, ids, heads)?;
        let interacted = g.add(attended, tokens)?;

        let normed = self.norm(g, interacted, ids.norm2)?;
        let hidden = self.linear(g, normed, ids.mlp_in)?;
        let hidden = g.relu(hidden)?;
        let mlp = self.linear(g, hidden, ids.mlp_out)?;
        g.add(mlp, interacted)
    }

    /// Multi-head scaled dot-product self-attention with output projection.
    fn attention<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, ids: &VitIds, heads: usize) -> Result<Var> {
        let q = self.linear(g, x, ids.query)?;
        let k = self.linear(g, x, ids.key)?;
        let v = self.linear(g, x, ids.value)?;
        let dim = g.shape(q)[1];
        let head_dim = dim / heads;
        let scale = T::one() / T::of(head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                let start = h * head_dim;
                (
                    g.slice_cols(q, start, head_dim)?,
                    g.slice_cols(k, start, head_dim)?,
                    g.slice_cols(v, start, head_dim)?,
                )
            };
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax_rows(scores)?;
            outputs.push(g.matmul(weights, vh)?);
        }
        let merged = if heads == 1 {
            outputs[0]
        } else {
            g.concat_cols(&outputs)?
        };
        self.linear(g, merged, ids.proj)
    }

    fn vit_ids(&self, level: usize) -> Result<VitIds> {
        if !self.variant.mvtm {
            return Err(Error::Config("transformer branches are ablated in this variant".into()));
        }
        if level == 0 || level >= self.config.k {
            return Err(Error::Config(format!(
                "transformer branches exist for levels 1..{}, not {level}",
                self.config.k - 1
            )));
        }
        Ok(self.layout.vit[level - 1])
    }

    /// Refined feature `V_i` of shape `C_i × H_k × W_k`: normalised tokens are folded
    /// back to their source grid positions and average-pooled to `H_k × W_k`.
    pub fn vit_branch<'a>(&'a self, g: &mut Graph<'a, T>, level: usize, feature: Var) -> Result<Var> {
        let tokens = self.vit_tokens(g, level, feature)?;
        // Keeps V_i on the scale of the CNN features however large the
        // residual stream grows.
        let tokens = self.norm(g, tokens, self.vit_ids(level)?.norm_out)?;
        let (c, side) = (self.config.width(level), self.config.spatial(level));
        let grid = g.unpatchify(tokens, self.config.patch(), c, side, side)?;
        let hk = self.config.patch();
        g.adaptive_avg_pool(grid, hk, hk)
    }

    /// `M_k = Conv1×1(Concat(F_k, V_{k-1}, …, V_1))`. `refined` is ordered
    /// `V_1..V_{k-1}`; pass an empty slice for the ablated variant.
    pub fn fuse<'a>(&'a self, g: &mut Graph<'a, T>, deepest: Var, refined: &[Var]) -> Result<Var> {
        let expected = if self.variant.mvtm { self.config.k - 1 } else { 0 };
        if refined.len() != expected {
            return Err(Error::shape(
                "fuse",
                format!("expected {expected} refined features, got {}", refined.len()),
            ));
        }
        let spatial = &g.shape(deepest)[1..].to_vec();
        for &v in refined {
            if &g.shape(v)[1..] != spatial.as_slice() {
                return Err(Error::shape(
                    "fuse",
                    format!("{:?} vs spatial {spatial:?}", g.shape(v)),
                ));
            }
        }
        let mut parts = vec![deepest];
        parts.extend(refined.iter().rev());
        let stacked = if parts.len() == 1 {
            deepest
        } else {
            g.concat_channels(&parts)?
        };
        self.conv(g, stacked, self.layout.fuse, 1)
    }

    /// U-shaped decoder: `M_{i-1} = Conv(Concat[F_{i-1}, Upsample(M_i)])`
    /// down to `M_0`, then a 1×1 head. Returns `(logits, probabilities)`.
    pub fn decode<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        fused: Var,
        pyramid: &FeaturePyramid,
    ) -> Result<(Var, Var)> {
        let mut m = fused;
        for level in (1..=self.config.k).rev() {
            let up = g.upsample2(m)?;
            let cat = g.concat_channels(&[pyramid.levels[level - 1], up])?;
            let conv = self.conv(g, cat, self.layout.decoder[level - 1], 1)?;
            m = g.relu(conv)?;
        }
        let logits = self.conv(g, m, self.layout.head, 1)?;
        let probs = g.sigmoid(logits)?;
        Ok((logits, probs))
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, image: Var) -> Result<ForwardPass> {
        let pyramid = self.encode(g, image)?;
        let mut refined = Vec::new();
        if self.variant.mvtm {
            for level in 1..self.config.k {
                refined.push(self.vit_branch(g, level, pyramid.levels[level])?);
            }
        }
        let fused = self.fuse(g, pyramid.levels[self.config.k], &refined)?;
        let (logits, probs) = self.decode(g, fused, &pyramid)?;
        Ok(ForwardPass {
            pyramid,
            refined,
            fused,
            logits,
            probs,
        })
    }

    /// Parameter gradients left in `g` by its last reverse pass.
    pub fn gradients(&self, g: &Graph<'_, T>) -> Gradients<T> {
        let mut out = Gradients::zeros_like(&self.params);
        let by_address: HashMap<*const Tensor<T>, ParamId> = self
            .params
            .ids()
            .map(|id| (self.params.tensor(id) as *const Tensor<T>, id))
            .collect();
        for (tensor, grad) in g.param_grads() {
            if let Some(&id) = by_address.get(&(tensor as *const Tensor<T>)) {
                out.get_mut(id)
                    .iter_mut()
                    .zip(grad)
                    .for_each(|(a, &d)| *a += d);
            }
        }
        out
    }

    /// Inference on one patch `[1,H,W]`.
    pub fn predict(&self, image: Tensor<T>, origin: (usize, usize)) -> Result<ProbabilityMap<T>> {
        let mut g = Graph::new();
        let x = self.image_input(&mut g, image)?;
        let pass = self.forward(&mut g, x)?;
        let s = self.config.input_size;
        Ok(ProbabilityMap::new(
            s,
            s,
            g.value(pass.probs).data().to_vec(),
            origin,
        ))
    }

    /// Checkpoint header: `{"model": ModelConfig, "variant": ModelVariant}`.
    fn header(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.config, "variant": self.variant })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let named: Vec<(&str, &Tensor<T>)> = self.params.named().collect();
        checkpoint::save(path, &self.header(), &named)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.config["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let variant: ModelVariant = serde_json::from_value(ck.config["variant"].clone())
            .map_err(|e| Error::Checkpoint(format!("variant: {e}")))?;
        let mut net = Self::new(config, variant)?;
        if ck.tensors.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                net.params.len(),
                ck.tensors.len()
            )));
        }
        for (name, stored) in &ck.tensors {
            let id = net
                .params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            let target = net.params.tensor_mut(id);
            if target.shape() != stored.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    stored.shape(),
                    target.shape()
                )));
            }
            target
                .data_mut()
                .iter_mut()
                .zip(stored.data())
                .for_each(|(d, &s)| *d = T::of(s as f64));
        }
        Ok(net)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}
