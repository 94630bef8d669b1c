//! Batch-hard soft-margin triplet loss, identity cross-entropy, and their sum.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::backbone::HeadOutput;
use crate::error::{Error, Result};
use crate::fusion::Modality;
use crate::numerics::layers::{sigmoid, softplus};
use crate::numerics::DenseArray;

/// Global features of one single-modality P×K batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub features: DenseArray,
    pub labels: Vec<u32>,
    pub modality: Modality,
}

impl TripletBatch {
    pub fn new(features: DenseArray, labels: Vec<u32>, modality: Modality) -> Result<Self> {
        let b = Self {
            features,
            labels,
            modality,
        };
        b.composition()?;
        Ok(b)
    }

    /// `(P, K)`; fails unless every label appears exactly K times with P, K ≥ 2.
    pub fn composition(&self) -> Result<(usize, usize)> {
        if self.features.shape().len() != 2 || self.features.rows() != self.labels.len() {
            return Err(Error::shape(
                "triplet_batch",
                format!("features {:?} with {} labels", self.features.shape(), self.labels.len()),
            ));
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_default() += 1;
        }
        let p = counts.len();
        let k = counts.values().next().copied().unwrap_or(0);
        if counts.values().any(|&c| c != k) {
            return Err(Error::Data(format!("labels are not balanced: counts {counts:?}")));
        }
        if p < 2 || k < 2 {
            return Err(Error::Data(format!(
                "a triplet batch needs P >= 2 identities and K >= 2 samples each, got P={p}, K={k}"
            )));
        }
        Ok((p, k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_id: f64,
    pub l_triplet: f64,
    pub l_total: f64,
    /// Anchors whose hardest positive is farther than their hardest negative.
    pub active_triplets: usize,
}

/// `d[a, b] = Σ_k (f[a, k] − f[b, k])²`, exactly symmetric with a zero diagonal.
pub fn pairwise_sq_dist(features: &DenseArray) -> DenseArray {
    let b = features.rows();
    let mut d = DenseArray::zeros(&[b, b]);
    for i in 0..b {
        for j in i + 1..b {
            let v: f64 = features
                .row(i)
                .iter()
                .zip(features.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .max(0.0);
            d.data_mut()[i * b + j] = v;
            d.data_mut()[j * b + i] = v;
        }
    }
    d
}

#[derive(Clone, Debug)]
pub struct TripletOutput {
    pub loss: f64,
    pub active_triplets: usize,
    /// Gradient of the loss with respect to `features`.
    pub grad: DenseArray,
    /// Hardest positive and negative index per anchor.
    pub mined: Vec<(usize, usize)>,
}

/// Mean over anchors of `softplus(d[a, p*] − d[a, n*])` with the hardest
/// positive and negative of each anchor; ties go to the lowest index.
pub fn triplet_loss_batch_hard(batch: &TripletBatch) -> Result<f64> {
    Ok(triplet_loss_with_grad(batch)?.loss)
}

pub fn triplet_loss_with_grad(batch: &TripletBatch) -> Result<TripletOutput> {
    batch.composition()?;
    let f = &batch.features;
    let (b, dim) = (f.rows(), f.cols());
    let d = pairwise_sq_dist(f);
    let mut grad = DenseArray::zeros(&[b, dim]);
    let mut loss = 0.0;
    let mut active = 0;
    let mut mined = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let dj = d.get2(a, j);
            if batch.labels[j] == batch.labels[a] {
                if pos.is_none_or(|p| dj > d.get2(a, p)) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| dj < d.get2(a, n)) {
                neg = Some(j);
            }
        }
        let (p, n) = (pos.expect("validated batch"), neg.expect("validated batch"));
        let margin = d.get2(a, p) - d.get2(a, n);
        loss += softplus(margin);
        if margin > 0.0 {
            active += 1;
        }
        mined.push((p, n));
        let w = sigmoid(margin) / b as f64;
        for k in 0..dim {
            let fa = f.get2(a, k);
            let gp = 2.0 * w * (fa - f.get2(p, k));
            let gn = 2.0 * w * (fa - f.get2(n, k));
            grad.data_mut()[a * dim + k] += gp - gn;
            grad.data_mut()[p * dim + k] -= gp;
            grad.data_mut()[n * dim + k] += gn;
        }
    }
    Ok(TripletOutput {
        loss: loss / b as f64,
        active_triplets: active,
        grad,
        mined,
    })
}

/// Mean cross-entropy of `logits` against class `labels`, with the target
/// mixed as `(1 − ε)·onehot + ε/M`.
pub fn id_loss(logits: &DenseArray, labels: &[usize], smoothing: f64) -> Result<f64> {
    Ok(id_loss_with_grad(logits, labels, smoothing)?.0)
}

pub fn id_loss_with_grad(logits: &DenseArray, labels: &[usize], smoothing: f64) -> Result<(f64, DenseArray)> {
    let (b, m) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::shape("id_loss", format!("{b} logit rows with {} labels", labels.len())));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::Data(format!("class label {bad} outside [0, {m})")));
    }
    let mut grad = DenseArray::zeros(&[b, m]);
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let g = grad.row_mut(r);
        for (c, v) in row.iter().enumerate() {
            let logp = v - lse;
            let q = smoothing / m as f64 + if c == label { 1.0 - smoothing } else { 0.0 };
            if q > 0.0 {
                total -= q * logp;
            }
            g[c] = (logp.exp() - q) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Triplet loss on the pre-BN global features plus ID loss on the logits.
pub fn total_loss(batch: &TripletBatch, head: &HeadOutput, class_labels: &[usize], smoothing: f64) -> Result<LossReport> {
    let t = triplet_loss_with_grad(batch)?;
    let l_id = id_loss(&head.logits, class_labels, smoothing)?;
    Ok(LossReport {
        l_id,
        l_triplet: t.loss,
        l_total: l_id + t.loss,
        active_triplets: t.active_triplets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]], labels: &[u32]) -> TripletBatch {
        let f = DenseArray::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        TripletBatch::new(f, labels.to_vec(), Modality::Image).unwrap()
    }

    #[test]
    fn pairwise_examples() {
        let d = pairwise_sq_dist(&DenseArray::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap());
        assert_eq!(d.get2(0, 1), 25.0);
        assert_eq!(d.get2(1, 0), 25.0);
        assert_eq!(d.get2(0, 0), 0.0);
        let same = pairwise_sq_dist(&DenseArray::filled(&[3, 2], 1.5));
        assert!(same.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_distances_give_ln2() {
        let zero = batch(&[&[0.0], &[0.0], &[0.0], &[0.0]], &[1, 1, 2, 2]);
        assert!((triplet_loss_batch_hard(&zero).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let far = batch(&[&[0.0], &[0.0], &[1e3], &[1e3]], &[1, 1, 2, 2]);
        assert!(triplet_loss_batch_hard(&far).unwrap() < 1e-300);
    }

    #[test]
    fn four_sample_example() {
        let b = batch(&[&[0.0], &[0.1], &[5.0], &[5.1]], &[1, 1, 2, 2]);
        let out = triplet_loss_with_grad(&b).unwrap();
        let oracle = [-24.99f64, -24.0, -24.0, -24.99].iter().map(|m| m.exp().ln_1p()).sum::<f64>() / 4.0;
        assert!((out.loss - oracle).abs() / oracle < 1e-12, "{} vs {oracle}", out.loss);
        assert!((out.loss - 2.5889e-11).abs() < 1e-15);
        assert_eq!(out.active_triplets, 0);
        assert_eq!(out.mined, vec![(1, 2), (0, 2), (3, 1), (2, 1)]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // anchor 0 sees positives 1 and 2 at the same distance, negatives 3 and 4 likewise
        let b = batch(
            &[&[0.0], &[1.0], &[-1.0], &[2.0], &[-2.0], &[9.0]],
            &[1, 1, 1, 2, 2, 2],
        );
        let out = triplet_loss_with_grad(&b).unwrap();
        assert_eq!(out.mined[0], (1, 3));
    }

    #[test]
    fn rejects_bad_composition() {
        let f = DenseArray::zeros(&[3, 2]);
        assert!(TripletBatch::new(f.clone(), vec![1, 1, 2], Modality::Image).is_err());
        assert!(TripletBatch::new(f, vec![1, 1, 1], Modality::Image).is_err());
        let f = DenseArray::zeros(&[2, 2]);
        assert!(TripletBatch::new(f, vec![1, 2], Modality::Image).is_err());
    }

    #[test]
    fn id_loss_examples() {
        let uniform = DenseArray::filled(&[2, 4], 0.3);
        assert!((id_loss(&uniform, &[0, 3], 0.0).unwrap() - 4f64.ln()).abs() < 1e-15);
        let l = DenseArray::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let oracle = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((id_loss(&l, &[0], 0.0).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 0.126928).abs() < 1e-6);
        assert!(id_loss(&l, &[2], 0.0).is_err());
        assert!(id_loss(&l, &[0], 1.0).is_err());
        let big = DenseArray::from_rows(&[vec![800.0, 0.0]]).unwrap();
        assert!(id_loss(&big, &[0], 0.0).unwrap() < 1e-300);
    }

    #[test]
    fn smoothing_matches_direct_sum() {
        let l = DenseArray::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let z: f64 = l.row(0).iter().map(|v| v.exp()).sum();
        let logp: Vec<f64> = l.row(0).iter().map(|v| (v.exp() / z).ln()).collect();
        let eps = 0.1;
        let oracle = -(0..3)
            .map(|c| (eps / 3.0 + if c == 1 { 1.0 - eps } else { 0.0 }) * logp[c])
            .sum::<f64>();
        assert!((id_loss(&l, &[1], eps).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| (0..3).map(|k| ((i * 7 + k * 3) % 5) as f64 * 0.3 - 0.4 + i as f64 * 0.05).collect()).collect();
        let f = DenseArray::from_rows(&rows).unwrap();
        let labels = vec![4, 4, 9, 9, 1, 1];
        let b = TripletBatch::new(f.clone(), labels.clone(), Modality::Image).unwrap();
        let out = triplet_loss_with_grad(&b).unwrap();
        let h = 1e-6;
        for i in 0..f.len() {
            let (mut p, mut m) = (f.clone(), f.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let lp = triplet_loss_batch_hard(&TripletBatch::new(p, labels.clone(), Modality::Image).unwrap()).unwrap();
            let lm = triplet_loss_batch_hard(&TripletBatch::new(m, labels.clone(), Modality::Image).unwrap()).unwrap();
            let num = (lp - lm) / (2.0 * h);
            let ana = out.grad.data()[i];
            assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-8) < 1e-4, "{i}: {num} {ana}");
        }

        let logits = DenseArray::from_rows(&[vec![0.3, -0.2, 1.1], vec![2.0, 0.1, -0.5]]).unwrap();
        let (_, g) = id_loss_with_grad(&logits, &[2, 0], 0.1).unwrap();
        for i in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (id_loss(&p, &[2, 0], 0.1).unwrap() - id_loss(&m, &[2, 0], 0.1).unwrap()) / (2.0 * h);
            assert!((num - g.data()[i]).abs() / num.abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn total_is_the_sum() {
        let b = batch(&[&[0.0], &[0.0], &[0.0], &[0.0]], &[1, 1, 2, 2]);
        let head = HeadOutput {
            global_feature: b.features.clone(),
            bn_feature: b.features.clone(),
            logits: DenseArray::zeros(&[4, 4]),
        };
        let r = total_loss(&b, &head, &[0, 1, 2, 3], 0.0).unwrap();
        assert!((r.l_total - 8f64.ln()).abs() < 1e-12);
        assert_eq!(r.l_total, r.l_id + r.l_triplet);
    }
}
