//! Partition comparison: Rand index, variation of information, segmentation
//! covering.
//!
//! A partition is a label raster; 0 is the non-plane background and every
//! positive label is one plane instance. RI and VOI treat the background as an
//! ordinary region. SC averages over ground-truth plane regions only.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Partition = Array2<u32>;

/// Joint label counts with marginals. Labels are compacted in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Contingency {
    pub pred_labels: Vec<u32>,
    pub gt_labels: Vec<u32>,
    /// `counts[i][j]` = pixels with `pred_labels[i]` and `gt_labels[j]`.
    pub counts: Vec<Vec<u64>>,
    pub pred_marginal: Vec<u64>,
    pub gt_marginal: Vec<u64>,
    pub total: u64,
}

pub fn contingency(pred: &Partition, gt: &Partition) -> Result<Contingency> {
    if pred.dim() != gt.dim() {
        return Err(Error::Input(format!(
            "partition shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let index = |p: &Partition| -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for &v in p.iter() {
            m.insert(v, 0);
        }
        for (i, v) in m.values_mut().enumerate() {
            *v = i;
        }
        m
    };
    let (pi, gi) = (index(pred), index(gt));
    let mut counts = vec![vec![0u64; gi.len()]; pi.len()];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        counts[pi[&p]][gi[&g]] += 1;
    }
    let pred_marginal = counts.iter().map(|r| r.iter().sum()).collect();
    let gt_marginal = (0..gi.len()).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency {
        pred_labels: pi.into_keys().collect(),
        gt_labels: gi.into_keys().collect(),
        counts,
        pred_marginal,
        gt_marginal,
        total: pred.len() as u64,
    })
}

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Fraction of unordered pixel pairs on which the partitions agree.
pub fn rand_index(pred: &Partition, gt: &Partition) -> Result<f64> {
    let c = contingency(pred, gt)?;
    if c.total < 2 {
        return Err(Error::Input("rand index needs at least two pixels".into()));
    }
    let all = pairs(c.total);
    let joint: u128 = c.counts.iter().flatten().map(|&n| pairs(n)).sum();
    let a: u128 = c.pred_marginal.iter().map(|&n| pairs(n)).sum();
    let b: u128 = c.gt_marginal.iter().map(|&n| pairs(n)).sum();
    // agreements = all − a − b + 2·joint, all integers
    let agree = all + 2 * joint - a - b;
    Ok(agree as f64 / all as f64)
}

/// `H(pred) + H(gt) − 2 I(pred; gt)` in nats.
pub fn variation_of_information(pred: &Partition, gt: &Partition) -> Result<f64> {
    let c = contingency(pred, gt)?;
    if c.total == 0 {
        return Err(Error::Input("empty partitions".into()));
    }
    let n = c.total as f64;
    // VOI = Σ_ij p_ij [ln(p_i / p_ij) + ln(p_j / p_ij)]
    let mut voi = 0.0;
    for (i, row) in c.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            let (ni, nj) = (c.pred_marginal[i] as f64, c.gt_marginal[j] as f64);
            voi += nij / n * ((ni / nij).ln() + (nj / nij).ln());
        }
    }
    Ok(voi.max(0.0))
}

/// Area-weighted best IoU of every ground-truth plane region (labels ≥ 1)
/// against any predicted region.
pub fn segmentation_covering(pred: &Partition, gt: &Partition) -> Result<f64> {
    let c = contingency(pred, gt)?;
    let mut covered = 0.0;
    let mut plane_px = 0u64;
    for (j, &gl) in c.gt_labels.iter().enumerate() {
        if gl == 0 {
            continue;
        }
        let area = c.gt_marginal[j];
        plane_px += area;
        let mut best = 0.0f64;
        for (i, &pl) in c.pred_labels.iter().enumerate() {
            if pl == 0 {
                continue;
            }
            let inter = c.counts[i][j];
            if inter == 0 {
                continue;
            }
            let union = c.pred_marginal[i] + area - inter;
            best = best.max(inter as f64 / union as f64);
        }
        covered += area as f64 * best;
    }
    if plane_px == 0 {
        return Err(Error::Input("ground truth has no plane pixels".into()));
    }
    Ok(covered / plane_px as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub voi: f64,
    pub ri: f64,
    pub sc: f64,
}

pub fn partition_metrics(pred: &Partition, gt: &Partition) -> Result<PartitionMetrics> {
    Ok(PartitionMetrics {
        voi: variation_of_information(pred, gt)?,
        ri: rand_index(pred, gt)?,
        sc: segmentation_covering(pred, gt)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(flatten)]
    pub metrics: PartitionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub per_image: Vec<ImageMetrics>,
    pub mean: PartitionMetrics,
}

/// Unweighted mean over images; errors carry the image id.
pub fn evaluate_dataset<'a, I>(pairs: I) -> Result<DatasetMetrics>
where
    I: IntoIterator<Item = (&'a str, &'a Partition, &'a Partition)>,
{
    let per_image = pairs
        .into_iter()
        .map(|(id, p, g)| {
            partition_metrics(p, g)
                .map(|metrics| ImageMetrics { id: id.to_string(), metrics })
                .map_err(|e| e.for_image(id))
        })
        .collect::<Result<Vec<_>>>()?;
    if per_image.is_empty() {
        return Err(Error::Input("no image pairs to evaluate".into()));
    }
    let n = per_image.len() as f64;
    let sum = |f: fn(&PartitionMetrics) -> f64| per_image.iter().map(|m| f(&m.metrics)).sum::<f64>() / n;
    let mean = PartitionMetrics {
        voi: sum(|m| m.voi),
        ri: sum(|m| m.ri),
        sc: sum(|m| m.sc),
    };
    Ok(DatasetMetrics { per_image, mean })
}

/// Delimited table, columns `id  VOI  RI  SC`, aggregate row last.
pub fn format_table(m: &DatasetMetrics, sep: &str) -> String {
    let mut s = format!("id{sep}VOI{sep}RI{sep}SC\n");
    for r in &m.per_image {
        s.push_str(&format!(
            "{}{sep}{:.6}{sep}{:.6}{sep}{:.6}\n",
            r.id, r.metrics.voi, r.metrics.ri, r.metrics.sc
        ));
    }
    s.push_str(&format!(
        "mean{sep}{:.6}{sep}{:.6}{sep}{:.6}\n",
        m.mean.voi, m.mean.ri, m.mean.sc
    ));
    s
}
