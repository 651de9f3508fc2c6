//! Granularity-discrimination losses at pixel, structure, and global level,
//! plus the reconstruction and least-squares adversarial terms of the total
//! objective.

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{HgdError, Result};
use crate::tape::{Id, Tape, TensorData};

/// Loss weights and temperatures for the full objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub lambda7: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub alpha_s: f64,
    pub alpha_p: f64,
    /// cap on pixel anchors sampled per map per step
    pub pgd_max_anchors: usize,
    /// compare mean-pooled structure features instead of flattened maps
    pub sgd_mean_pool: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 10.0,
            lambda4: 10.0,
            lambda5: 1.0,
            lambda6: 2.0,
            lambda7: 1.0,
            tau1: 0.5,
            tau2: 0.5,
            alpha_s: 0.5,
            alpha_p: 0.01,
            pgd_max_anchors: 256,
            sgd_mean_pool: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
            self.lambda7,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(HgdError::Config("loss weights must be finite and >= 0".into()));
        }
        if self.tau1 <= 0.0 || self.tau2 <= 0.0 {
            return Err(HgdError::Config("temperatures must be > 0".into()));
        }
        if self.alpha_s <= 0.0 {
            return Err(HgdError::Config("alpha_s must be > 0".into()));
        }
        if !(self.alpha_p > 0.0 && self.alpha_p <= 1.0) {
            return Err(HgdError::Config("alpha_p must be in (0, 1]".into()));
        }
        if self.pgd_max_anchors == 0 {
            return Err(HgdError::Config("pgd_max_anchors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pixel-level discrimination. Anchors are pixels of the original content
/// map; the positive is the same spatial index in the translated map, and
/// negatives are the remaining pixels of the anchor map plus all pixels of
/// other subjects' maps. `anchors` optionally restricts to a sampled pixel
/// subset.
pub fn pgd_loss(
    t: &mut Tape,
    content_orig: Id,
    content_trans: Id,
    others: &[Id],
    tau1: f64,
    anchors: Option<&[usize]>,
) -> Result<Id> {
    let shape = t.shape(content_orig).to_vec();
    if shape.len() != 3 {
        return Err(HgdError::Shape("pgd_loss: content maps must be CHW".into()));
    }
    if t.shape(content_trans) != shape.as_slice() {
        return Err(HgdError::Shape(format!(
            "pgd_loss: translated map shape {:?} does not match original {:?}",
            t.shape(content_trans),
            shape
        )));
    }
    let hw = shape[1] * shape[2];
    let orig_pix = t.chw_to_pixels(content_orig);
    let trans_pix = t.chw_to_pixels(content_trans);
    let mut pool_parts = vec![trans_pix, orig_pix];
    for &o in others {
        if t.shape(o) != shape.as_slice() {
            return Err(HgdError::Shape("pgd_loss: pool map shape mismatch".into()));
        }
        pool_parts.push(t.chw_to_pixels(o));
    }
    let pool = t.stack_rows(&pool_parts);
    let pool_cols = hw * (2 + others.len());

    let anchor_idx: Vec<usize> = match anchors {
        Some(a) => {
            if a.iter().any(|&n| n >= hw) {
                return Err(HgdError::Argument("pgd_loss: anchor index out of range".into()));
            }
            a.to_vec()
        }
        None => (0..hw).collect(),
    };
    let anchor_rows = if anchor_idx.len() == hw && anchor_idx.iter().enumerate().all(|(i, &n)| i == n)
    {
        orig_pix
    } else {
        t.select_rows(orig_pix, anchor_idx.clone())
    };

    let an = t.rows_normalize(anchor_rows);
    let pn = t.rows_normalize(pool);
    let sims = t.matmul_nt(an, pn);

    let mut positives = Vec::with_capacity(anchor_idx.len());
    let mut mask = Vec::with_capacity(anchor_idx.len());
    for &n in &anchor_idx {
        positives.push(vec![(n, 1.0)]);
        let mut row = vec![true; pool_cols];
        // translated block: only the aligned pixel takes part
        for j in 0..hw {
            row[j] = j == n;
        }
        // anchor map block: the anchor itself is excluded
        row[hw + n] = false;
        mask.push(row);
    }
    t.info_nce(sims, positives, mask, tau1)
}

/// Hadamard product of a content map with the indicator of label class `s`.
pub fn mask_structure(t: &mut Tape, z: Id, labels: &LabelMap, s: u8) -> Result<Id> {
    let shape = t.shape(z).to_vec();
    if shape.len() != 3 {
        return Err(HgdError::Shape("mask_structure: map must be CHW".into()));
    }
    if labels.height != shape[1] || labels.width != shape[2] {
        return Err(HgdError::Shape(format!(
            "mask_structure: labels {}x{} vs map {}x{}",
            labels.height, labels.width, shape[1], shape[2]
        )));
    }
    if (s as usize) >= labels.num_classes {
        return Err(HgdError::Argument(format!(
            "mask_structure: class {s} outside [0, {})",
            labels.num_classes
        )));
    }
    let mask: Vec<f64> = labels
        .classes
        .iter()
        .map(|&c| if c == s { 1.0 } else { 0.0 })
        .collect();
    Ok(t.mul_mask(z, mask))
}

/// Deformation magnitude: sum of absolute differences over all entries.
pub fn deformation(a: &TensorData, b: &TensorData) -> Result<f64> {
    if a.shape != b.shape {
        return Err(HgdError::Shape("deformation: shape mismatch".into()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum())
}

/// Ranking-based weights `exp(-alpha_s * rank)`, rank 0 for the largest
/// deformation so the hardest pair gets weight 1. Ties share the smaller
/// rank (competition ranking).
pub fn rank_weights(deformations: &[f64], alpha_s: f64) -> Result<Vec<f64>> {
    if deformations.is_empty() {
        return Err(HgdError::Argument("rank_weights: empty input".into()));
    }
    if deformations.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(HgdError::Argument("rank_weights: deformations must be finite and >= 0".into()));
    }
    let mut order: Vec<usize> = (0..deformations.len()).collect();
    order.sort_by(|&a, &b| deformations[b].partial_cmp(&deformations[a]).unwrap());
    let mut weights = vec![0.0; deformations.len()];
    let mut rank = 0usize;
    for (pos, &idx) in order.iter().enumerate() {
        if pos > 0 && deformations[idx] < deformations[order[pos - 1]] {
            rank = pos;
        }
        weights[idx] = (-alpha_s * rank as f64).exp();
    }
    Ok(weights)
}

fn structure_feature(
    t: &mut Tape,
    z: Id,
    labels: &LabelMap,
    s: u8,
    mean_pool: bool,
) -> Result<(Id, Id)> {
    let masked = mask_structure(t, z, labels, s)?;
    let feat = if mean_pool {
        let count = labels.classes.iter().filter(|&&c| c == s).count();
        let hw = labels.height * labels.width;
        let gap = t.global_avg_pool(masked);
        let scaled = t.scale(gap, hw as f64 / count as f64);
        t.flatten_row(scaled)
    } else {
        t.flatten_row(masked)
    };
    Ok((masked, feat))
}

/// Structure-level discrimination. Returns the loss plus the number of
/// declared classes absent from the anchor labels (skipped structures).
#[allow(clippy::too_many_arguments)]
pub fn sgd_loss(
    t: &mut Tape,
    content_orig: Id,
    content_trans: Id,
    labels: &LabelMap,
    others: &[(Id, &LabelMap)],
    tau2: f64,
    alpha_s: f64,
    mean_pool: bool,
) -> Result<(Id, usize)> {
    if t.shape(content_orig) != t.shape(content_trans) {
        return Err(HgdError::Shape("sgd_loss: map shape mismatch".into()));
    }
    let present: Vec<u8> = (0..labels.num_classes as u8)
        .filter(|s| labels.classes.contains(s))
        .collect();
    let skipped = labels.num_classes - present.len();
    if present.is_empty() {
        return Err(HgdError::Validation("sgd_loss: no structures present".into()));
    }

    let mut anchor_feats = Vec::new();
    let mut pool_feats = Vec::new();
    let mut defs = Vec::new();
    for &s in &present {
        let (m_orig, f_orig) = structure_feature(t, content_orig, labels, s, mean_pool)?;
        let (m_trans, f_trans) = structure_feature(t, content_trans, labels, s, mean_pool)?;
        defs.push(deformation(t.value(m_orig), t.value(m_trans))?);
        anchor_feats.push(f_orig);
        pool_feats.push(f_trans);
    }
    for &(z, l) in others {
        for s in 0..l.num_classes as u8 {
            if l.classes.contains(&s) {
                let (_, f) = structure_feature(t, z, l, s, mean_pool)?;
                pool_feats.push(f);
            }
        }
    }
    if pool_feats.len() < 2 {
        return Err(HgdError::Validation(
            "sgd_loss: a single structure with no cross-subject pool has no negatives".into(),
        ));
    }

    let weights = rank_weights(&defs, alpha_s)?;
    let anchors = t.stack_rows(&anchor_feats);
    let pool = t.stack_rows(&pool_feats);
    let an = t.rows_normalize(anchors);
    let pn = t.rows_normalize(pool);
    let sims = t.matmul_nt(an, pn);
    let positives: Vec<Vec<(usize, f64)>> =
        weights.iter().enumerate().map(|(k, &w)| vec![(k, w)]).collect();
    let mask = vec![vec![true; pool_feats.len()]; present.len()];
    let loss = t.info_nce(sims, positives, mask, tau2)?;
    Ok((loss, skipped))
}

/// Global-level discrimination on whole-map features with unit weights.
pub fn ggd_loss(
    t: &mut Tape,
    content_orig: Id,
    content_trans: Id,
    others: &[Id],
    tau2: f64,
) -> Result<Id> {
    if t.shape(content_orig) != t.shape(content_trans) {
        return Err(HgdError::Shape("ggd_loss: map shape mismatch".into()));
    }
    if others.is_empty() {
        return Err(HgdError::Validation(
            "ggd_loss: needs at least one other subject for negatives".into(),
        ));
    }
    let a = t.flatten_row(content_orig);
    let p = t.flatten_row(content_trans);
    let mut pool_parts = vec![p];
    for &o in others {
        pool_parts.push(t.flatten_row(o));
    }
    let pool = t.stack_rows(&pool_parts);
    let an = t.rows_normalize(a);
    let pn = t.rows_normalize(pool);
    let sims = t.matmul_nt(an, pn);
    let mask = vec![vec![true; 1 + others.len()]];
    t.info_nce(sims, vec![vec![(0, 1.0)]], mask, tau2)
}

pub fn cycle_loss(t: &mut Tape, m: Id, m_reconstructed: Id) -> Id {
    t.l1(m, m_reconstructed, true)
}

pub fn self_recon_loss(t: &mut Tape, m: Id, m_self: Id) -> Id {
    t.l1(m, m_self, true)
}

/// Least-squares GAN discriminator objective: real toward 1, fake toward 0.
pub fn lsgan_d_loss(t: &mut Tape, real_out: Id, fake_out: Id) -> Id {
    let r = t.mse_const(real_out, 1.0);
    let f = t.mse_const(fake_out, 0.0);
    t.add_scalars(&[(r, 0.5), (f, 0.5)])
}

/// Least-squares GAN generator objective: fake toward 1.
pub fn lsgan_g_loss(t: &mut Tape, fake_out: Id) -> Id {
    t.mse_const(fake_out, 1.0)
}

/// Content discriminator: classify which modality a content map came from.
pub fn content_d_loss(t: &mut Tape, out_i: Id, out_j: Id) -> Id {
    let a = t.mse_const(out_i, 1.0);
    let b = t.mse_const(out_j, 0.0);
    t.add_scalars(&[(a, 0.5), (b, 0.5)])
}

/// Content-adversarial encoder objective: push the discriminator to
/// maximal confusion on both modalities.
pub fn content_e_loss(t: &mut Tape, out_i: Id, out_j: Id) -> Id {
    let a = t.mse_const(out_i, 0.5);
    let b = t.mse_const(out_j, 0.5);
    t.add_scalars(&[(a, 0.5), (b, 0.5)])
}

/// Scalar term ids for the total objective; `None` means the term is
/// disabled or excluded this step and contributes zero.
#[derive(Default, Clone, Copy)]
pub struct TermIds {
    pub adv_content: Option<Id>,
    pub adv_domain: Option<Id>,
    pub cycle: Option<Id>,
    pub self_recon: Option<Id>,
    pub pgd: Option<Id>,
    pub sgd: Option<Id>,
    pub ggd: Option<Id>,
}

pub const TERM_NAMES: [&str; 7] =
    ["adv_content", "adv_domain", "cycle", "self_recon", "pgd", "sgd", "ggd"];

/// Weighted sum of the present terms plus the per-term weighted breakdown
/// in `TERM_NAMES` order.
pub fn total_loss(t: &mut Tape, terms: &TermIds, cfg: &LossConfig) -> (Id, [f64; 7]) {
    let pairs = [
        (terms.adv_content, cfg.lambda1),
        (terms.adv_domain, cfg.lambda2),
        (terms.cycle, cfg.lambda3),
        (terms.self_recon, cfg.lambda4),
        (terms.pgd, cfg.lambda5),
        (terms.sgd, cfg.lambda6),
        (terms.ggd, cfg.lambda7),
    ];
    let mut breakdown = [0.0; 7];
    let mut weighted = Vec::new();
    for (k, &(id, lambda)) in pairs.iter().enumerate() {
        if let Some(id) = id {
            breakdown[k] = lambda * t.value(id).data[0];
            weighted.push((id, lambda));
        }
    }
    let total = if weighted.is_empty() {
        t.leaf(TensorData::scalar(0.0), false)
    } else {
        t.add_scalars(&weighted)
    };
    (total, breakdown)
}
