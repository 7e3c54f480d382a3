//! Box prompt encoding and the three-mask decoder.
//!
//! Box corners become two tokens: a fixed sinusoidal encoding of the corner
//! position plus a learned per-corner type embedding. The decoder runs a
//! two-way transformer between the prompt/output tokens and the image tokens,
//! upsamples the image side with two stride-2 transposed convolutions, and
//! turns each of three mask tokens into a per-pixel linear read-out.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageEmbedding;
use crate::data::{BoxPrompt, Mask};
use crate::error::{Error, Result};
use crate::nn::{Act, Attention, ConvTranspose2d, LayerNorm, Mlp, ParamStore};

pub const NUM_MASKS: usize = 3;

/// Sinusoidal encoding of a point with coordinates normalised to `[0, 1]`.
///
/// Layout: `[sin x, cos x, sin y, cos y]`, each `dim / 4` wide, with
/// geometrically spaced frequencies from π up to π·`resolution`/2.
pub fn sinusoidal_encoding(x: f64, y: f64, dim: usize, resolution: usize) -> Vec<f32> {
    let k = dim / 4;
    let top = (resolution.max(2) as f64 / 2.0).ln();
    let freqs: Vec<f64> = (0..k)
        .map(|i| {
            let t = if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 };
            std::f64::consts::PI * (t * top).exp()
        })
        .collect();
    let mut out = Vec::with_capacity(dim);
    for v in [x, y] {
        out.extend(freqs.iter().map(|f| (f * v).sin() as f32));
        out.extend(freqs.iter().map(|f| (f * v).cos() as f32));
    }
    out
}

/// Two corner tokens per box: `[2, E]` for one prompt.
#[derive(Debug, Clone)]
pub struct PromptTokens {
    pub tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    pub corner_embed: String,
    pub no_mask_embed: String,
    pub embed_dim: usize,
    pub image_size: usize,
    pub positional: bool,
}

impl PromptEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, embed_dim: usize, image_size: usize, positional: bool, rng: &mut R) -> Result<Self> {
        Ok(PromptEncoder {
            corner_embed: store.normal("prompt.corner_embed", &[2, embed_dim], 1.0, rng)?,
            no_mask_embed: store.normal("prompt.no_mask_embed", &[embed_dim], 0.02, rng)?,
            embed_dim,
            image_size,
            positional,
        })
    }

    fn corner_pe(&self, b: &BoxPrompt) -> Vec<f32> {
        if !self.positional {
            return vec![0.0; 2 * self.embed_dim];
        }
        let s = self.image_size as f64;
        let mut v = sinusoidal_encoding(b.x_min as f64 / s, b.y_min as f64 / s, self.embed_dim, self.image_size);
        v.extend(sinusoidal_encoding(b.x_max as f64 / s, b.y_max as f64 / s, self.embed_dim, self.image_size));
        v
    }

    pub fn encode_box_prompt(&self, store: &ParamStore, b: &BoxPrompt) -> Result<PromptTokens> {
        let t = self.encode_boxes(store, std::slice::from_ref(b))?;
        Ok(PromptTokens { tokens: t.squeeze(0)? })
    }

    /// `[B, 2, E]` tokens for a batch of boxes.
    pub fn encode_boxes(&self, store: &ParamStore, boxes: &[BoxPrompt]) -> Result<Tensor> {
        let mut pe = Vec::with_capacity(boxes.len() * 2 * self.embed_dim);
        for b in boxes {
            if !b.is_valid_for(self.image_size, self.image_size) {
                return Err(Error::Prompt(format!("box {b:?} is degenerate or outside the image")));
            }
            pe.extend(self.corner_pe(b));
        }
        let pe = Tensor::from_vec(pe, (boxes.len(), 2, self.embed_dim), store.device())?.to_dtype(store.dtype())?;
        Ok(pe.broadcast_add(&store.get(&self.corner_embed)?)?)
    }

    /// Positional encoding of every image token centre, `[1, G*G, E]`.
    pub fn dense_pe(&self, grid: usize, dtype: DType) -> Result<Tensor> {
        let mut v = Vec::with_capacity(grid * grid * self.embed_dim);
        for r in 0..grid {
            for c in 0..grid {
                if self.positional {
                    let (x, y) = ((c as f64 + 0.5) / grid as f64, (r as f64 + 0.5) / grid as f64);
                    v.extend(sinusoidal_encoding(x, y, self.embed_dim, self.image_size));
                } else {
                    v.extend(std::iter::repeat(0.0).take(self.embed_dim));
                }
            }
        }
        Ok(Tensor::from_vec(v, (1, grid * grid, self.embed_dim), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Two-way attention layers.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    /// Internal width divisor for the token/image cross attention.
    pub cross_downsample: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            cross_downsample: 2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("decoder.depth", "need at least one layer"));
        }
        if self.heads == 0 || self.cross_downsample == 0 || (embed_dim / self.cross_downsample) % self.heads != 0 || embed_dim % self.heads != 0 {
            return Err(Error::config(
                "decoder.heads",
                format!("embed_dim {embed_dim} / {} not divisible by {} heads", self.cross_downsample, self.heads),
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("decoder.mlp_ratio", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct TwoWayLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_image_to_token: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, cfg: &DecoderConfig, skip_first_pe: bool, rng: &mut R) -> Result<Self> {
        let mlp_dim = (dim as f32 * cfg.mlp_ratio).round() as usize;
        Ok(TwoWayLayer {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, cfg.heads, 1, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            cross_token_to_image: Attention::new(store, &format!("{name}.cross_t2i"), dim, cfg.heads, cfg.cross_downsample, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[dim, mlp_dim, dim], Act::Relu, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim)?,
            cross_image_to_token: Attention::new(store, &format!("{name}.cross_i2t"), dim, cfg.heads, cfg.cross_downsample, rng)?,
            norm4: LayerNorm::new(store, &format!("{name}.norm4"), dim)?,
            skip_first_pe,
        })
    }

    fn forward(&self, store: &ParamStore, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = if self.skip_first_pe {
            self.self_attn.forward(store, queries, queries, queries)?
        } else {
            let qp = (queries + query_pe)?;
            (queries + self.self_attn.forward(store, &qp, &qp, queries)?)?
        };
        let q = self.norm1.forward(store, &q)?;

        let qp = (&q + query_pe)?;
        let kp = keys.broadcast_add(key_pe)?;
        let q = (&q + self.cross_token_to_image.forward(store, &qp, &kp, keys)?)?;
        let q = self.norm2.forward(store, &q)?;

        let q = (&q + self.mlp.forward(store, &q)?)?;
        let q = self.norm3.forward(store, &q)?;

        let qp = (&q + query_pe)?;
        let k = (keys + self.cross_image_to_token.forward(store, &kp, &qp, &q)?)?;
        let k = self.norm4.forward(store, &k)?;
        Ok((q, k))
    }
}

/// Decoder output for a batch of prompts.
#[derive(Debug, Clone)]
pub struct MaskOutput {
    /// `[B, 3, S, S]` mask logits at input resolution.
    pub logits: Tensor,
    /// `[B, 3]` predicted IoU in `[0, 1]`.
    pub iou: Tensor,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub iou_token: String,
    pub mask_tokens: String,
    layers: Vec<TwoWayLayer>,
    final_attn: Attention,
    final_norm: LayerNorm,
    up1: ConvTranspose2d,
    up_norm: LayerNorm,
    up2: ConvTranspose2d,
    pub hyper: Vec<Mlp>,
    pub iou_head: Mlp,
    embed_dim: usize,
    image_size: usize,
}

/// Bilinear interpolation weights (half-pixel centres), `[out, in]`.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Array2<f32> {
    let mut m = Array2::<f32>::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let t = (src - i0 as f64) as f32;
        m[[o, i0]] += 1.0 - t;
        m[[o, i1]] += t;
    }
    m
}

fn resize_bilinear(x: &Tensor, out: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out && w == out {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rw = bilinear_matrix(w, out);
    let rh = bilinear_matrix(h, out);
    let rw_t = Tensor::from_slice(rw.t().as_standard_layout().as_slice().unwrap(), (w, out), dev)?.to_dtype(x.dtype())?;
    let rh_t = Tensor::from_slice(rh.t().as_standard_layout().as_slice().unwrap(), (h, out), dev)?.to_dtype(x.dtype())?;
    let y = x.reshape((b * c * h, w))?.matmul(&rw_t)?; // [(bc h), out]
    let y = y.reshape((b * c, h, out))?.transpose(1, 2)?.contiguous()?.reshape((b * c * out, h))?;
    let y = y.matmul(&rh_t)?.reshape((b * c, out, out))?.transpose(1, 2)?;
    Ok(y.reshape((b, c, out, out))?)
}

impl MaskDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, embed_dim: usize, image_size: usize, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(embed_dim)?;
        let e = embed_dim;
        let layers = (0..cfg.depth)
            .map(|i| TwoWayLayer::new(store, &format!("decoder.transformer.{i}"), e, cfg, i == 0, rng))
            .collect::<Result<Vec<_>>>()?;
        let hyper = (0..NUM_MASKS)
            .map(|i| Mlp::new(store, &format!("decoder.hyper.{i}"), &[e, e, e, e / 8], Act::Relu, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut iou_head = Mlp::new(store, "decoder.iou_head.mlp", &[e, e, e], Act::Relu, rng)?;
        // untrained head: every candidate scores exactly sigmoid(0)
        iou_head.layers.push(crate::nn::Linear::zero_init(store, "decoder.iou_head.mlp.2", e, NUM_MASKS)?);
        Ok(MaskDecoder {
            iou_token: store.normal("decoder.iou_head.token", &[1, e], 1.0, rng)?,
            mask_tokens: store.normal("decoder.mask_tokens", &[NUM_MASKS, e], 1.0, rng)?,
            layers,
            final_attn: Attention::new(store, "decoder.transformer.final_attn", e, cfg.heads, cfg.cross_downsample, rng)?,
            final_norm: LayerNorm::new(store, "decoder.transformer.final_norm", e)?,
            up1: ConvTranspose2d::new(store, "decoder.upscale.0", e, e / 4, 2, rng)?,
            up_norm: LayerNorm::new(store, "decoder.upscale.norm", e / 4)?,
            up2: ConvTranspose2d::new(store, "decoder.upscale.1", e / 4, e / 8, 2, rng)?,
            hyper,
            iou_head,
            embed_dim,
            image_size,
        })
    }

    /// `prompts`: `[B, 2, E]`; `dense`: `[E]` added to every image token;
    /// `image_pe`: `[1, G*G, E]`.
    pub fn decode_masks(
        &self,
        store: &ParamStore,
        embedding: &ImageEmbedding,
        prompts: &Tensor,
        dense: &Tensor,
        image_pe: &Tensor,
    ) -> Result<MaskOutput> {
        let (b, n, e) = embedding.tokens.dims3()?;
        let (pb, np, pe_dim) = prompts.dims3()?;
        if pb != b || e != self.embed_dim || pe_dim != e || n != embedding.grid * embedding.grid {
            return Err(Error::Shape(format!(
                "decoder: embedding {:?} vs prompts {:?}",
                embedding.tokens.dims(),
                prompts.dims()
            )));
        }
        let out_tokens = Tensor::cat(&[store.get(&self.iou_token)?, store.get(&self.mask_tokens)?], 0)?;
        let out_tokens = out_tokens.unsqueeze(0)?.broadcast_as((b, 1 + NUM_MASKS, e))?;
        let tokens = Tensor::cat(&[&out_tokens, prompts], 1)?.contiguous()?;
        debug_assert_eq!(tokens.dim(1)?, 1 + NUM_MASKS + np);

        let mut keys = embedding.tokens.broadcast_add(dense)?;
        let mut queries = tokens.clone();
        for layer in &self.layers {
            let (q, k) = layer.forward(store, &queries, &keys, &tokens, image_pe)?;
            queries = q;
            keys = k;
        }
        let qp = (&queries + &tokens)?;
        let kp = keys.broadcast_add(image_pe)?;
        let queries = (&queries + self.final_attn.forward(store, &qp, &kp, &keys)?)?;
        let queries = self.final_norm.forward(store, &queries)?;

        let g = embedding.grid;
        let map = keys.reshape((b, g, g, e))?.permute((0, 3, 1, 2))?.contiguous()?;
        let up = self.up1.forward(store, &map)?;
        let up = self.up_norm.forward_nchw(store, &up)?.gelu_erf()?;
        let up = self.up2.forward(store, &up)?.gelu_erf()?;
        let (_, c8, uh, uw) = up.dims4()?;

        let hyper_in = self
            .hyper
            .iter()
            .enumerate()
            .map(|(i, mlp)| mlp.forward(store, &queries.narrow(1, 1 + i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        let hyper_in = Tensor::cat(&hyper_in, 1)?; // [B, 3, E/8]
        let masks = hyper_in.matmul(&up.reshape((b, c8, uh * uw))?)?.reshape((b, NUM_MASKS, uh, uw))?;
        let logits = resize_bilinear(&masks, self.image_size)?;

        let iou = candle_nn::ops::sigmoid(&self.iou_head.forward(store, &queries.narrow(1, 0, 1)?.squeeze(1)?)?)?;
        Ok(MaskOutput { logits, iou })
    }
}

/// Threshold at logit 0; exact zeros count as foreground.
pub fn binarize_mask(logits: &Array2<f32>) -> Mask {
    logits.mapv(|v| v >= 0.0)
}

/// Host copy of one prompt's decoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTriplet {
    /// `3×H×W`.
    pub logits: Array3<f32>,
    pub iou_scores: [f32; NUM_MASKS],
}

impl MaskTriplet {
    pub fn mask_logits(&self, i: usize) -> Array2<f32> {
        self.logits.index_axis(ndarray::Axis(0), i).to_owned()
    }

    pub fn binary(&self, i: usize) -> Mask {
        binarize_mask(&self.mask_logits(i))
    }
}

/// Split a `MaskOutput` into per-prompt host triplets.
pub fn to_triplets(out: &MaskOutput) -> Result<Vec<MaskTriplet>> {
    let (b, m, h, w) = out.logits.dims4()?;
    let logits = out.logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let iou = out.iou.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = m * h * w;
    (0..b)
        .map(|i| {
            let arr = Array3::from_shape_vec((m, h, w), logits[i * per..(i + 1) * per].to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?;
            let mut s = [0f32; NUM_MASKS];
            s.copy_from_slice(&iou[i * m..(i + 1) * m]);
            Ok(MaskTriplet { logits: arr, iou_scores: s })
        })
        .collect()
}
