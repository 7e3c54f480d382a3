//! Mask losses and min-of-three routing.
//!
//! All functions reduce over the last two (spatial) axes, so `[H, W]` logits
//! give a scalar and `[B, 3, H, W]` logits give one loss per candidate.
//! Targets broadcast against the logits (`[B, 1, H, W]` for candidate stacks).

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_focal: f64,
    pub w_dice: f64,
    pub w_mse: f64,
}

impl LossWeights {
    /// Focal + dice, 1:1, no IoU regression.
    pub const PAPER: LossWeights = LossWeights {
        w_focal: 1.0,
        w_dice: 1.0,
        w_mse: 0.0,
    };

    /// Focal : dice : IoU-MSE = 20 : 1 : 1.
    pub const EFFICIENTSAM: LossWeights = LossWeights {
        w_focal: 20.0,
        w_dice: 1.0,
        w_mse: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_focal, self.w_dice, self.w_mse];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss", "weights must be finite and >= 0"));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::config("loss", "at least one weight must be > 0"));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        LossWeights {
            w_focal: self.w_focal * c,
            w_dice: self.w_dice * c,
            w_mse: self.w_mse * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_focal: f64,
    pub w_dice: f64,
    pub w_mse: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::with_weights(LossWeights::PAPER)
    }
}

impl LossConfig {
    pub fn with_weights(w: LossWeights) -> Self {
        LossConfig {
            w_focal: w.w_focal,
            w_dice: w.w_dice,
            w_mse: w.w_mse,
            gamma: 2.0,
            alpha: 0.25,
            eps: 1.0,
        }
    }

    /// `paper` = (1, 1, 0), `efficientsam` = (20, 1, 1).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::with_weights(LossWeights::PAPER)),
            "efficientsam" => Ok(Self::with_weights(LossWeights::EFFICIENTSAM)),
            other => Err(Error::config("loss.preset", format!("unknown preset `{other}`"))),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_focal: self.w_focal,
            w_dice: self.w_dice,
            w_mse: self.w_mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.gamma >= 0.0) {
            return Err(Error::config("loss.gamma", "must be >= 0"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("loss.alpha", "must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("loss.eps", "must be > 0"));
        }
        Ok(())
    }
}

pub fn check_binary(target: &Tensor) -> Result<()> {
    let v = target.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Input("target must be binary (0 or 1)".into()));
    }
    Ok(())
}

fn mean_spatial(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

fn sum_spatial(x: &Tensor) -> Result<Tensor> {
    Ok(x.sum(D::Minus1)?.sum(D::Minus1)?)
}

/// `log(sigmoid(x))` without overflow: `-(relu(-x) + ln(1 + e^{-|x|}))`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let soft = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.neg()?.relu()? + soft)?.neg()?)
}

/// Mean over pixels of `-α_t (1 - p_t)^γ ln p_t`.
pub fn focal_loss(logits: &Tensor, target: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    if !(gamma >= 0.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("loss", format!("need gamma >= 0 and alpha in (0,1), got {gamma}, {alpha}")));
    }
    check_binary(target)?;
    let t = target.to_dtype(logits.dtype())?;
    let not_t = t.affine(-1.0, 1.0)?;
    let ls_pos = log_sigmoid(logits)?;
    let ls_neg = log_sigmoid(&logits.neg()?)?;
    let log_pt = (ls_pos.broadcast_mul(&t)? + ls_neg.broadcast_mul(&not_t)?)?;
    let log_1m_pt = (ls_neg.broadcast_mul(&t)? + ls_pos.broadcast_mul(&not_t)?)?;
    let alpha_t = t.affine(2.0 * alpha - 1.0, 1.0 - alpha)?;
    let modulator = if gamma == 0.0 {
        log_1m_pt.ones_like()?
    } else {
        (log_1m_pt * gamma)?.exp()?
    };
    let per_px = (modulator * log_pt)?.broadcast_mul(&alpha_t)?.neg()?;
    mean_spatial(&per_px)
}

/// `1 - (2 Σ p t + eps) / (Σ p + Σ t + eps)`, `p = sigmoid(logits)`.
pub fn dice_loss(logits: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::config("loss.eps", "must be > 0"));
    }
    check_binary(target)?;
    let t = target.to_dtype(logits.dtype())?;
    let p = candle_nn::ops::sigmoid(logits)?;
    let inter = sum_spatial(&p.broadcast_mul(&t)?)?;
    let denom = sum_spatial(&p)?.broadcast_add(&sum_spatial(&t)?)?;
    let ratio = ((inter * 2.0)? + eps)?.div(&(denom + eps)?)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

/// IoU of the thresholded logits against the target, per mask, no gradient.
pub fn mask_iou(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let pred = logits.detach().ge(0.0)?.to_dtype(logits.dtype())?;
    let t = target.to_dtype(logits.dtype())?;
    let inter = sum_spatial(&pred.broadcast_mul(&t)?)?;
    let union = (sum_spatial(&pred)?.broadcast_add(&sum_spatial(&t)?)? - &inter)?;
    let (i, u) = (
        inter.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
        union.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
    );
    let iou: Vec<f64> = i.iter().zip(&u).map(|(&a, &b)| if b == 0.0 { 1.0 } else { a / b }).collect();
    Ok(Tensor::from_vec(iou, inter.shape(), logits.device())?.to_dtype(logits.dtype())?)
}

/// `w_focal·focal + w_dice·dice + w_mse·(iou_pred − iou)²`; zero-weight terms
/// are not evaluated.
pub fn combined_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig, iou_pred: Option<&Tensor>) -> Result<Tensor> {
    cfg.validate()?;
    let w = cfg.weights();
    let shape = {
        let d = logits.dims();
        d[..d.len().saturating_sub(2)].to_vec()
    };
    let mut total = Tensor::zeros(shape, logits.dtype(), logits.device())?;
    if w.w_focal > 0.0 {
        total = (total + (focal_loss(logits, target, cfg.gamma, cfg.alpha)? * w.w_focal)?)?;
    }
    if w.w_dice > 0.0 {
        total = (total + (dice_loss(logits, target, cfg.eps)? * w.w_dice)?)?;
    }
    if w.w_mse > 0.0 {
        let pred = iou_pred.ok_or_else(|| Error::config("loss.w_mse", "w_mse > 0 needs IoU predictions"))?;
        let actual = mask_iou(logits, target)?;
        let err = (pred.to_dtype(logits.dtype())? - actual)?.sqr()?;
        total = (total + (err * w.w_mse)?)?;
    }
    Ok(total)
}

/// Lowest loss per row of a `[B, 3]` loss matrix; ties go to the lowest index.
///
/// The returned `[B]` tensor depends only on the chosen entries: the others
/// are multiplied by an exact zero mask, so their paths get zero gradient.
pub fn min_of_three(losses: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, m) = losses.dims2()?;
    let vals = losses.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut idx = Vec::with_capacity(b);
    let mut onehot = vec![0f64; b * m];
    for (r, row) in vals.iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(None, format!("non-finite candidate loss {row:?}")));
        }
        let mut best = 0;
        for i in 1..m {
            if row[i] < row[best] {
                best = i;
            }
        }
        onehot[r * m + best] = 1.0;
        idx.push(best);
    }
    let mask = Tensor::from_vec(onehot, (b, m), losses.device())?.to_dtype(losses.dtype())?;
    Ok(((losses * mask)?.sum(D::Minus1)?, idx))
}

/// Candidate losses for `[B, 3, H, W]` logits against `[B, 1, H, W]`
/// targets, followed by min-of-three selection.
pub fn min_of_three_loss(
    logits: &Tensor,
    target: &Tensor,
    cfg: &LossConfig,
    iou_pred: Option<&Tensor>,
) -> Result<(Tensor, Vec<usize>, Vec<Vec<f64>>)> {
    let per = combined_loss(logits, target, cfg, iou_pred)?;
    let vals = per.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let (sel, idx) = min_of_three(&per)?;
    Ok((sel, idx, vals))
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t64(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    // direct per-pixel evaluation, independent of the log-space route
    fn focal_oracle(x: &[f64], t: &[f64], gamma: f64, alpha: f64) -> f64 {
        x.iter()
            .zip(t)
            .map(|(&x, &t)| {
                let p = 1.0 / (1.0 + (-x).exp());
                let pt = if t == 1.0 { p } else { 1.0 - p };
                let at = if t == 1.0 { alpha } else { 1.0 - alpha };
                -at * (1.0 - pt).powf(gamma) * pt.ln()
            })
            .sum::<f64>()
            / x.len() as f64
    }

    fn bce_oracle(x: &[f64], t: &[f64]) -> f64 {
        x.iter()
            .zip(t)
            .map(|(&x, &t)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / x.len() as f64
    }

    fn dice_oracle(x: &[f64], t: &[f64], eps: f64) -> f64 {
        let p: Vec<f64> = x.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        1.0 - (2.0 * inter + eps) / (p.iter().sum::<f64>() + t.iter().sum::<f64>() + eps)
    }

    fn random_case(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        (x, t)
    }

    #[test]
    fn focal_confident_correct_is_tiny() {
        let l = focal_loss(&t64(vec![20.0], &[1, 1]), &t64(vec![1.0], &[1, 1]), 2.0, 0.25).unwrap();
        assert!(scalar(&l) < 1e-6);
    }

    #[test]
    fn focal_closed_form_at_half() {
        // p_t = 0.5 on a foreground pixel: alpha_t = 0.25
        let l = focal_loss(&t64(vec![0.0], &[1, 1]), &t64(vec![1.0], &[1, 1]), 2.0, 0.25).unwrap();
        let expect = -0.25 * 0.25 * 0.5f64.ln();
        assert!((scalar(&l) - expect).abs() < 1e-12);
        assert!((expect - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn focal_gamma_zero_is_half_bce() {
        let (x, t) = random_case(1, 64);
        let l = focal_loss(&t64(x.clone(), &[8, 8]), &t64(t.clone(), &[8, 8]), 0.0, 0.5).unwrap();
        assert!((scalar(&l) - 0.5 * bce_oracle(&x, &t)).abs() < 1e-12);
    }

    #[test]
    fn focal_and_dice_match_direct_oracles() {
        for seed in 0..5 {
            let (x, t) = random_case(seed, 64);
            let f = focal_loss(&t64(x.clone(), &[8, 8]), &t64(t.clone(), &[8, 8]), 2.0, 0.25).unwrap();
            assert!((scalar(&f) - focal_oracle(&x, &t, 2.0, 0.25)).abs() < 1e-12);
            let d = dice_loss(&t64(x.clone(), &[8, 8]), &t64(t.clone(), &[8, 8]), 1.0).unwrap();
            assert!((scalar(&d) - dice_oracle(&x, &t, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_limits_and_hand_count() {
        let t: Vec<f64> = (0..64).map(|i| if i < 32 { 1.0 } else { 0.0 }).collect();
        let x: Vec<f64> = t.iter().map(|&v| if v == 1.0 { 30.0 } else { -30.0 }).collect();
        let l = dice_loss(&t64(x.clone(), &[8, 8]), &t64(t.clone(), &[8, 8]), 1.0).unwrap();
        assert!(scalar(&l) < 1e-3);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let l = dice_loss(&t64(neg, &[8, 8]), &t64(t, &[8, 8]), 1.0).unwrap();
        assert!((scalar(&l) - (1.0 - 1.0 / 65.0)).abs() < 1e-9);
        // two predicted pixels, two target pixels, one shared
        let x = vec![40.0, 40.0, -40.0, -40.0];
        let t = vec![1.0, 0.0, 1.0, 0.0];
        let l = dice_loss(&t64(x, &[2, 2]), &t64(t, &[2, 2]), 1e-9).unwrap();
        assert!((scalar(&l) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_binary_target_rejected() {
        let x = t64(vec![0.0; 4], &[2, 2]);
        let t = t64(vec![0.0, 0.5, 1.0, 1.0], &[2, 2]);
        assert!(matches!(focal_loss(&x, &t, 2.0, 0.25), Err(Error::Input(_))));
        assert!(matches!(dice_loss(&x, &t, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn combined_weights() {
        let (x, t) = random_case(3, 64);
        let (x, t) = (t64(x, &[8, 8]), t64(t, &[8, 8]));
        let f = scalar(&focal_loss(&x, &t, 2.0, 0.25).unwrap());
        let d = scalar(&dice_loss(&x, &t, 1.0).unwrap());
        let paper = scalar(&combined_loss(&x, &t, &LossConfig::preset("paper").unwrap(), None).unwrap());
        assert_eq!(paper, f + d);
        let dice_only = LossConfig::with_weights(LossWeights {
            w_focal: 0.0,
            w_dice: 1.0,
            w_mse: 0.0,
        });
        assert_eq!(scalar(&combined_loss(&x, &t, &dice_only, None).unwrap()), d);
        let es = LossConfig::preset("efficientsam").unwrap();
        assert!(matches!(combined_loss(&x, &t, &es, None), Err(Error::Config { .. })));
        let iou_pred = t64(vec![0.3], &[]);
        let actual = scalar(&mask_iou(&x, &t).unwrap());
        let got = scalar(&combined_loss(&x, &t, &es, Some(&iou_pred)).unwrap());
        assert!((got - (20.0 * f + d + (0.3 - actual).powi(2))).abs() < 1e-12);
        assert!(LossConfig::preset("nope").is_err());
    }

    #[test]
    fn min_selection_and_ties() {
        let l = t64(vec![0.5, 0.2, 0.9, 0.4, 0.7, 0.4], &[2, 3]);
        let (v, idx) = min_of_three(&l).unwrap();
        assert_eq!(idx, vec![1, 0]);
        assert_eq!(v.to_vec1::<f64>().unwrap(), vec![0.2, 0.4]);
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..3 {
            let (x, t) = random_case(10 + seed, 64);
            let tt = t64(t.clone(), &[8, 8]);
            for which in ["focal", "dice"] {
                let f = |v: &Tensor| -> Tensor {
                    match which {
                        "focal" => focal_loss(v, &tt, 2.0, 0.25).unwrap(),
                        _ => dice_loss(v, &tt, 1.0).unwrap(),
                    }
                };
                let var = Var::from_tensor(&t64(x.clone(), &[8, 8])).unwrap();
                let g = f(var.as_tensor()).backward().unwrap();
                let g = g.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let h = 1e-5;
                let fd: Vec<f64> = (0..x.len())
                    .map(|i| {
                        let mut p = x.clone();
                        p[i] += h;
                        let mut m = x.clone();
                        m[i] -= h;
                        (scalar(&f(&t64(p, &[8, 8]))) - scalar(&f(&t64(m, &[8, 8])))) / (2.0 * h)
                    })
                    .collect();
                let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
                assert!(num / den < 1e-3, "{which}: rel err {}", num / den);
            }
        }
    }
}
