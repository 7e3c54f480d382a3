//! Dual-complexity image encoder.
//!
//! The RGB bands go through a ViT-style stack of transformer blocks. The depth
//! band enters a lightweight convolutional path through a strided stem. Before
//! every transformer block a LWCNN block reads both paths, advances the depth
//! state, and writes a residual update into the RGB tokens. The update's final
//! projection starts at zero, so an untrained dual backbone computes exactly
//! what the RGB-only stack computes.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{all_finite, Act, Attention, Conv2d, LayerNorm, Linear, Mlp, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub cnn_channels: usize,
    pub mlp_ratio: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 256,
            patch_size: 16,
            embed_dim: 192,
            blocks: 12,
            heads: 3,
            cnn_channels: 32,
            mlp_ratio: 4.0,
        }
    }
}

impl BackboneConfig {
    /// Small configuration used for the training experiments in the test suites.
    pub fn desk() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            blocks: 4,
            heads: 2,
            cnn_channels: 8,
            mlp_ratio: 2.0,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f32 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("backbone.{k}");
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                key("patch_size"),
                format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                key("heads"),
                format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads),
            ));
        }
        if self.embed_dim % 8 != 0 {
            return Err(Error::config(key("embed_dim"), "must be a multiple of 8"));
        }
        if self.blocks == 0 {
            return Err(Error::config(key("blocks"), "need at least one block"));
        }
        if self.cnn_channels == 0 {
            return Err(Error::config(key("cnn_channels"), "must be positive"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config(key("mlp_ratio"), "must be positive"));
        }
        Ok(())
    }
}

/// Image features: `[B, G*G, E]` tokens in row-major grid order.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    pub tokens: Tensor,
    pub grid: usize,
}

fn tokens_to_map(x: &Tensor, grid: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.reshape((b, grid, grid, c))?.permute((0, 3, 1, 2))?.contiguous()?)
}

fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.permute((0, 2, 3, 1))?.reshape((b, h * w, c))?)
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    proj: Conv2d,
    pos: String,
    positional: bool,
    image_size: usize,
}

impl PatchEmbed {
    fn new<R: Rng>(store: &mut ParamStore, cfg: &BackboneConfig, positional: bool, rng: &mut R) -> Result<Self> {
        let p = cfg.patch_size;
        Ok(PatchEmbed {
            proj: Conv2d::new(store, "transformer.patch_embed", 3, cfg.embed_dim, p, p, 0, rng)?,
            pos: store.normal("transformer.pos_embed", &[1, cfg.tokens(), cfg.embed_dim], 0.02, rng)?,
            positional,
            image_size: cfg.image_size,
        })
    }

    /// `[B, 3, S, S]` → `[B, G*G, E]`.
    pub fn forward(&self, store: &ParamStore, rgb: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = rgb.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "patch embed expects [B, 3, {s}, {s}], got {:?}",
                rgb.dims(),
                s = self.image_size
            )));
        }
        let t = map_to_tokens(&self.proj.forward(store, rgb)?)?;
        if self.positional {
            Ok(t.broadcast_add(&store.get(&self.pos)?)?)
        } else {
            Ok(t)
        }
    }
}

/// Pre-norm self-attention + MLP block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let e = cfg.embed_dim;
        Ok(EncoderBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), e)?,
            attn: Attention::new(store, &format!("{name}.attn"), e, cfg.heads, 1, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), e)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[e, cfg.mlp_dim(), e], Act::Gelu, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(store, x)?;
        let x = (x + self.attn.forward(store, &h, &h, &h)?)?;
        let h = self.norm2.forward(store, &x)?;
        Ok((&x + self.mlp.forward(store, &h)?)?)
    }
}

/// Lightweight fusion block: reduce the RGB tokens to the CNN width, convolve
/// them together with the depth state, and project back as a residual.
#[derive(Debug, Clone)]
pub struct LwcnnBlock {
    pub reduce: Linear,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Linear,
}

impl LwcnnBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let (e, c) = (cfg.embed_dim, cfg.cnn_channels);
        Ok(LwcnnBlock {
            reduce: Linear::new(store, &format!("{name}.reduce"), e, c, rng)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), 2 * c, c, 3, 1, 1, rng)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, rng)?,
            proj: Linear::zero_init(store, &format!("{name}.proj"), c, e)?,
        })
    }

    /// Returns the fused RGB tokens and the advanced depth state.
    pub fn forward(&self, store: &ParamStore, tokens: &Tensor, depth_state: &Tensor, grid: usize) -> Result<(Tensor, Tensor)> {
        let (b, n, _) = tokens.dims3()?;
        let (db, dc, dh, dw) = depth_state.dims4()?;
        if db != b || dh != grid || dw != grid || n != grid * grid || dc != self.conv2.out_ch {
            return Err(Error::Shape(format!(
                "lwcnn: tokens {:?} vs depth state {:?}",
                tokens.dims(),
                depth_state.dims()
            )));
        }
        let r = tokens_to_map(&self.reduce.forward(store, tokens)?, grid)?;
        let h = Tensor::cat(&[&r, depth_state], 1)?;
        let h = self.conv1.forward(store, &h)?.gelu_erf()?;
        let h = self.conv2.forward(store, &h)?;
        let state = (depth_state + h)?;
        let update = self.proj.forward(store, &map_to_tokens(&state.gelu_erf()?)?)?;
        Ok(((tokens + update)?, state))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamPartition {
    pub transformer: usize,
    pub cnn: usize,
    pub other: usize,
}

impl ParamPartition {
    pub fn total(&self) -> usize {
        self.transformer + self.cnn + self.other
    }

    pub fn cnn_ratio(&self) -> f64 {
        self.cnn as f64 / self.transformer as f64
    }
}

#[derive(Debug, Clone)]
pub struct DualBackbone {
    pub cfg: BackboneConfig,
    pub patch_embed: PatchEmbed,
    pub stem: Conv2d,
    pub cnn: Vec<LwcnnBlock>,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl DualBackbone {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &BackboneConfig, positional: bool, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = PatchEmbed::new(store, cfg, positional, rng)?;
        let p = cfg.patch_size;
        let stem = Conv2d::new(store, "stem", 1, cfg.cnn_channels, p, p, 0, rng)?;
        let cnn = (0..cfg.blocks)
            .map(|i| LwcnnBlock::new(store, &format!("cnn.{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(store, &format!("transformer.blocks.{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "transformer.norm", cfg.embed_dim)?;
        Ok(DualBackbone {
            cfg: cfg.clone(),
            patch_embed,
            stem,
            cnn,
            blocks,
            norm,
        })
    }

    fn run(&self, store: &ParamStore, rgb: &Tensor, depth: Option<&Tensor>, check: bool) -> Result<Tensor> {
        let grid = self.cfg.grid();
        let mut x = self.patch_embed.forward(store, rgb)?;
        let mut state = match depth {
            Some(d) => {
                let (b, c, h, w) = d.dims4()?;
                if c != 1 || h != self.cfg.image_size || w != self.cfg.image_size || b != rgb.dim(0)? {
                    return Err(Error::Shape(format!("depth input {:?} does not match rgb {:?}", d.dims(), rgb.dims())));
                }
                Some(self.stem.forward(store, d)?)
            }
            None => None,
        };
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(s) = state.take() {
                let (nx, ns) = self.cnn[i].forward(store, &x, &s, grid)?;
                x = nx;
                state = Some(ns);
            }
            x = block.forward(store, &x)?;
            if check && !all_finite(&x)? {
                return Err(Error::numeric(Some(i), "non-finite backbone activations"));
            }
        }
        let out = self.norm.forward(store, &x)?;
        if !all_finite(&out)? {
            if !check {
                // re-run with per-stage checks to name the offending stage
                self.run(store, rgb, depth, true)?;
            }
            return Err(Error::numeric(Some(self.cfg.blocks), "non-finite backbone output"));
        }
        Ok(out)
    }

    /// Full RGB-D forward; only the last group's output is returned.
    pub fn forward(&self, store: &ParamStore, rgb: &Tensor, depth: &Tensor) -> Result<ImageEmbedding> {
        Ok(ImageEmbedding {
            tokens: self.run(store, rgb, Some(depth), false)?,
            grid: self.cfg.grid(),
        })
    }

    /// The same stack with the CNN branch removed.
    pub fn forward_rgb_only(&self, store: &ParamStore, rgb: &Tensor) -> Result<ImageEmbedding> {
        Ok(ImageEmbedding {
            tokens: self.run(store, rgb, None, false)?,
            grid: self.cfg.grid(),
        })
    }

    /// Parameter counts by branch over the whole store. `other` holds
    /// everything outside `transformer.*` and `cnn.*` (stem, prompt, decoder).
    pub fn parameter_partition(store: &ParamStore) -> ParamPartition {
        let transformer = store.count("transformer.");
        let cnn = store.count("cnn.");
        ParamPartition {
            transformer,
            cnn,
            other: store.total() - transformer - cnn,
        }
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn build(cfg: &BackboneConfig, positional: bool) -> (ParamStore, DualBackbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new(DType::F32);
        let bb = DualBackbone::new(&mut store, cfg, positional, &mut rng).unwrap();
        (store, bb)
    }

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            blocks: 2,
            heads: 2,
            cnn_channels: 4,
            mlp_ratio: 2.0,
        }
    }

    #[test]
    fn patch_embed_shape() {
        let cfg = BackboneConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 96,
            blocks: 1,
            heads: 3,
            cnn_channels: 8,
            mlp_ratio: 1.0,
        };
        let (store, bb) = build(&cfg, true);
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let t = bb.patch_embed.forward(&store, &x).unwrap();
        assert_eq!(t.dims(), &[1, 64, 96]);
        let bad = Tensor::zeros((1, 3, 32, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.patch_embed.forward(&store, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_projection_leaves_positional_term() {
        let cfg = small();
        let (store, bb) = build(&cfg, true);
        let w = store.var(&bb.patch_embed.proj.weight).unwrap();
        w.set(&w.zeros_like().unwrap()).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let t = bb.patch_embed.forward(&store, &x).unwrap();
        let pos = store.get("transformer.pos_embed").unwrap();
        let d = (t - pos).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn distinct_images_distinct_embeddings() {
        let (store, bb) = build(&small(), true);
        let a = Tensor::rand(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let b = Tensor::rand(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let ea = bb.patch_embed.forward(&store, &a).unwrap();
        let eb = bb.patch_embed.forward(&store, &b).unwrap();
        let d = (ea - eb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn lwcnn_identity_at_init_and_zero_depth_finite() {
        let cfg = small();
        let (store, bb) = build(&cfg, true);
        let x = Tensor::randn(0f32, 1.0, (2, 16, 16), &Device::Cpu).unwrap();
        let d = Tensor::randn(0f32, 1.0, (2, 4, 4, 4), &Device::Cpu).unwrap();
        let (y, _) = bb.cnn[0].forward(&store, &x, &d, 4).unwrap();
        let diff = (&y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        let z = d.zeros_like().unwrap();
        let (y, s) = bb.cnn[1].forward(&store, &x, &z, 4).unwrap();
        assert!(all_finite(&y).unwrap() && all_finite(&s).unwrap());
        let bad = Tensor::zeros((2, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.cnn[0].forward(&store, &x, &bad, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_block_shape_and_permutation_equivariance() {
        let cfg = small();
        let (store, bb) = build(&cfg, false);
        let x = Tensor::randn(0f32, 1.0, (1, 16, 16), &Device::Cpu).unwrap();
        let y = bb.blocks[0].forward(&store, &x).unwrap();
        assert_eq!(y.dims(), x.dims());
        // swap tokens 2 and 9
        let mut perm: Vec<u32> = (0..16).collect();
        perm.swap(2, 9);
        let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
        let xp = x.index_select(&idx, 1).unwrap();
        let yp = bb.blocks[0].forward(&store, &xp).unwrap();
        let back = yp.index_select(&idx, 1).unwrap();
        let d = (back - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn default_config_complexity_split() {
        let cfg = BackboneConfig::default();
        let (store, bb) = build(&cfg, true);
        let part = DualBackbone::parameter_partition(&store);
        assert_eq!(part.total(), store.total());
        assert!(part.cnn_ratio() < 0.15, "{}", part.cnn_ratio());
        let one_cnn = store.count("cnn.0.");
        let one_tf = store.count("transformer.blocks.0.");
        assert!((one_cnn as f64) < 0.1 * one_tf as f64, "{one_cnn} vs {one_tf}");
        assert_eq!(bb.blocks.len(), 12);

        let half = BackboneConfig {
            cnn_channels: cfg.cnn_channels / 2,
            ..cfg
        };
        let (store_half, _) = build(&half, true);
        assert!(DualBackbone::parameter_partition(&store_half).cnn < part.cnn);
    }

    #[test]
    fn desk_config_complexity_split() {
        let (store, _) = build(&BackboneConfig::desk(), true);
        assert!(DualBackbone::parameter_partition(&store).cnn_ratio() < 0.15);
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::default();
        c.image_size = 250;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "backbone.patch_size"));
        let mut c = BackboneConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
    }
}
