//! Key-value memory bank: shared unit-norm keys, per-domain value vectors,
//! slots partitioned into structure-assigned and global categories, with
//! softmax-affinity reads and a momentum write rule.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{HgdError, Result};
use crate::nn::gaussian_tensor;
use crate::tape::TensorData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotCategory {
    Structure(u8),
    Global,
}

impl SlotCategory {
    pub fn tag(&self, class_names: &[String]) -> String {
        match self {
            SlotCategory::Structure(c) => class_names
                .get(*c as usize)
                .cloned()
                .unwrap_or_else(|| format!("class_{c}")),
            SlotCategory::Global => "global".to_string(),
        }
    }
}

/// Slot counts per category. Structure and global halves must be the same
/// size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankLayout {
    /// (structure class id, slot count)
    pub structure_slots: Vec<(u8, usize)>,
    pub global_slots: usize,
}

impl BankLayout {
    /// 2 background + 2 CSF + 3 GM + 3 WM + 10 global = 20 slots.
    pub fn ixi_default() -> Self {
        BankLayout {
            structure_slots: vec![(0, 2), (1, 2), (2, 3), (3, 3)],
            global_slots: 10,
        }
    }

    pub fn total(&self) -> usize {
        self.structure_total() + self.global_slots
    }

    pub fn structure_total(&self) -> usize {
        self.structure_slots.iter().map(|&(_, n)| n).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.structure_slots.iter().any(|&(_, n)| n == 0) || self.global_slots == 0 {
            return Err(HgdError::Config("bank layout: every slot count must be >= 1".into()));
        }
        if self.structure_total() != self.global_slots {
            return Err(HgdError::Config(format!(
                "bank layout asymmetric: {} structure slots vs {} global slots",
                self.structure_total(),
                self.global_slots
            )));
        }
        Ok(())
    }

    fn categories(&self) -> Vec<SlotCategory> {
        let mut cats = Vec::with_capacity(self.total());
        for &(class, n) in &self.structure_slots {
            cats.extend(std::iter::repeat(SlotCategory::Structure(class)).take(n));
        }
        cats.extend(std::iter::repeat(SlotCategory::Global).take(self.global_slots));
        cats
    }
}

/// Softmax-normalized affinity scores, one row per pixel query.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    /// `[n_queries, n_slots]`, rows sum to 1
    pub scores: Vec<f64>,
    pub n_queries: usize,
    pub n_slots: usize,
}

impl AffinityMatrix {
    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.n_slots..(q + 1) * self.n_slots]
    }

    pub fn argmax_row(&self, q: usize) -> usize {
        let row = self.row(q);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

fn normalize_rows(data: &mut [f64], n: usize, dim: usize) {
    for r in 0..n {
        let row = &mut data[r * dim..(r + 1) * dim];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v /= norm;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryBank {
    /// `[n_slots, key_dim]`, unit rows, shared across domains
    pub keys: Vec<f64>,
    /// per-domain `[n_slots, value_dim]`, unit rows
    pub values: Vec<Vec<f64>>,
    pub slot_categories: Vec<SlotCategory>,
    pub key_dim: usize,
    pub value_dim: usize,
    pub alpha_p: f64,
    /// literal readings of the update/read equations, kept for ablation
    pub literal_eq6_weights: bool,
}

/// Cosine similarity; zero-norm input is defined as similarity 0.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_sim: dim mismatch");
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        eprintln!("warning: cosine_sim on zero-norm vector, returning 0");
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Builds a bank with seeded Gaussian keys/values, row-normalized.
pub fn build_bank(
    layout: &BankLayout,
    key_dim: usize,
    value_dim: usize,
    n_domains: usize,
    alpha_p: f64,
    seed: u64,
) -> Result<MemoryBank> {
    layout.validate()?;
    if !(0.0..=1.0).contains(&alpha_p) || alpha_p == 0.0 {
        return Err(HgdError::Config(format!("alpha_p must be in (0, 1], got {alpha_p}")));
    }
    let n = layout.total();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys = gaussian_tensor(&mut rng, vec![n, key_dim], 1.0).data;
    normalize_rows(&mut keys, n, key_dim);
    // every slot of a domain starts at one shared unit vector, so slots
    // that have not yet been written read as a common blank instead of
    // per-slot noise
    let mut values = Vec::with_capacity(n_domains);
    for _ in 0..n_domains {
        let mut seed_row = gaussian_tensor(&mut rng, vec![1, value_dim], 1.0).data;
        normalize_rows(&mut seed_row, 1, value_dim);
        let mut v = Vec::with_capacity(n * value_dim);
        for _ in 0..n {
            v.extend_from_slice(&seed_row);
        }
        values.push(v);
    }
    Ok(MemoryBank {
        keys,
        values,
        slot_categories: layout.categories(),
        key_dim,
        value_dim,
        alpha_p,
        literal_eq6_weights: false,
    })
}

impl MemoryBank {
    pub fn n_slots(&self) -> usize {
        self.slot_categories.len()
    }

    pub fn n_domains(&self) -> usize {
        self.values.len()
    }

    pub fn key(&self, slot: usize) -> &[f64] {
        &self.keys[slot * self.key_dim..(slot + 1) * self.key_dim]
    }

    pub fn value(&self, domain: usize, slot: usize) -> &[f64] {
        &self.values[domain][slot * self.value_dim..(slot + 1) * self.value_dim]
    }

    pub fn max_row_norm_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..self.n_slots() {
            let kn = self.key(s).iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max((kn - 1.0).abs());
            for d in 0..self.n_domains() {
                let vn = self.value(d, s).iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max((vn - 1.0).abs());
            }
        }
        worst
    }

    /// Softmax over slots of cosine similarity, one row per query.
    /// `queries` is `[n_q, key_dim]` row-major.
    pub fn affinities(&self, queries: &[f64]) -> Result<AffinityMatrix> {
        if queries.len() % self.key_dim != 0 {
            return Err(HgdError::Shape(format!(
                "queries length {} is not a multiple of key dim {}",
                queries.len(),
                self.key_dim
            )));
        }
        let n_q = queries.len() / self.key_dim;
        let n = self.n_slots();
        let mut scores = vec![0.0; n_q * n];
        for q in 0..n_q {
            let qv = &queries[q * self.key_dim..(q + 1) * self.key_dim];
            let row = &mut scores[q * n..(q + 1) * n];
            for s in 0..n {
                row[s] = cosine_sim(qv, self.key(s));
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(AffinityMatrix { scores, n_queries: n_q, n_slots: n })
    }

    /// Affinity-weighted read of the target domain's value rows.
    /// Returns the per-query enhanced vectors `[n_q, value_dim]` plus the
    /// affinities for reuse in the update and for visualization export.
    pub fn read(&self, queries: &[f64], target_domain: usize) -> Result<(Vec<f64>, AffinityMatrix)> {
        if target_domain >= self.n_domains() {
            return Err(HgdError::Argument(format!(
                "unknown domain index {target_domain} (bank has {})",
                self.n_domains()
            )));
        }
        let aff = self.affinities(queries)?;
        let enhanced = self.read_with_affinities(&aff, target_domain);
        Ok((enhanced, aff))
    }

    pub fn read_with_affinities(&self, aff: &AffinityMatrix, target_domain: usize) -> Vec<f64> {
        let mut out = vec![0.0; aff.n_queries * self.value_dim];
        for q in 0..aff.n_queries {
            let row = aff.row(q);
            let dst = &mut out[q * self.value_dim..(q + 1) * self.value_dim];
            for s in 0..self.n_slots() {
                let w = row[s];
                for (d, v) in dst.iter_mut().zip(self.value(target_domain, s)) {
                    *d += w * v;
                }
            }
        }
        out
    }

    /// Literal reading of the retrieval equation: the affinity-weighted sum
    /// of the input attribute features, which collapses to the attribute
    /// vector itself at every query (affinity rows sum to 1).
    pub fn read_literal_eq3(&self, n_queries: usize, z_a: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(n_queries * z_a.len());
        for _ in 0..n_queries {
            out.extend_from_slice(z_a);
        }
        out
    }

    /// Momentum update of keys and per-domain values.
    ///
    /// Queries are assigned to their argmax-affinity slot; when labels are
    /// present, a structural slot additionally requires the pixel label to
    /// match its category. Per slot, update weights are a softmax over the
    /// assigned queries' cosine similarities (or, in the literal variant,
    /// the raw affinity scores). Slots with no assigned queries keep their
    /// rows. `alpha_p == 1` is the identity.
    pub fn update(
        &mut self,
        queries_i: &[f64],
        queries_j: &[f64],
        enhanced_i: &[f64],
        enhanced_j: &[f64],
        labels: Option<&LabelMap>,
    ) -> Result<()> {
        if self.alpha_p == 1.0 {
            return Ok(());
        }
        if queries_i.len() != queries_j.len() {
            return Err(HgdError::Shape("update: query sets differ in size".into()));
        }
        let n_q = queries_i.len() / self.key_dim;
        if enhanced_i.len() != n_q * self.value_dim || enhanced_j.len() != n_q * self.value_dim {
            return Err(HgdError::Shape("update: enhanced feature size mismatch".into()));
        }
        if let Some(l) = labels {
            if l.classes.len() != n_q {
                return Err(HgdError::Shape(format!(
                    "update: {} labels for {n_q} queries",
                    l.classes.len()
                )));
            }
        }
        if self.n_domains() < 2 {
            return Err(HgdError::Config("update needs at least 2 domains".into()));
        }

        let aff = self.affinities(queries_i)?;
        let n = self.n_slots();
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n];
        for q in 0..n_q {
            let slot = aff.argmax_row(q);
            if let (Some(l), SlotCategory::Structure(c)) = (labels, self.slot_categories[slot]) {
                if l.classes[q] != c {
                    continue;
                }
            }
            assigned[slot].push(q);
        }

        let alpha = self.alpha_p;
        for slot in 0..n {
            if assigned[slot].is_empty() {
                continue;
            }
            let weights: Vec<f64> = if self.literal_eq6_weights {
                assigned[slot].iter().map(|&q| aff.row(q)[slot]).collect()
            } else {
                let sims: Vec<f64> = assigned[slot]
                    .iter()
                    .map(|&q| {
                        cosine_sim(
                            &queries_i[q * self.key_dim..(q + 1) * self.key_dim],
                            self.key(slot),
                        )
                    })
                    .collect();
                let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = sims.iter().map(|&s| (s - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / sum).collect()
            };

            // key <- normalize(alpha*key + (1-alpha)*sum u*(q_i + q_j))
            let mut new_key: Vec<f64> =
                self.key(slot).iter().map(|&v| alpha * v).collect();
            for (&q, &u) in assigned[slot].iter().zip(&weights) {
                let qi = &queries_i[q * self.key_dim..(q + 1) * self.key_dim];
                let qj = &queries_j[q * self.key_dim..(q + 1) * self.key_dim];
                for (d, (a, b)) in new_key.iter_mut().zip(qi.iter().zip(qj)) {
                    *d += (1.0 - alpha) * u * (a + b);
                }
            }
            normalize_rows(&mut new_key, 1, self.key_dim);
            self.keys[slot * self.key_dim..(slot + 1) * self.key_dim]
                .copy_from_slice(&new_key);

            for (domain, enhanced) in [(0usize, enhanced_i), (1usize, enhanced_j)] {
                let mut new_val: Vec<f64> =
                    self.value(domain, slot).iter().map(|&v| alpha * v).collect();
                for (&q, &u) in assigned[slot].iter().zip(&weights) {
                    let e = &enhanced[q * self.value_dim..(q + 1) * self.value_dim];
                    for (d, a) in new_val.iter_mut().zip(e) {
                        *d += (1.0 - alpha) * u * a;
                    }
                }
                normalize_rows(&mut new_val, 1, self.value_dim);
                self.values[domain][slot * self.value_dim..(slot + 1) * self.value_dim]
                    .copy_from_slice(&new_val);
            }
        }
        Ok(())
    }

    /// Writes one CSV row per query: id, label class, per-slot scores.
    /// Slot columns are named by category tag.
    pub fn export_affinity_csv(
        &self,
        aff: &AffinityMatrix,
        labels: Option<&LabelMap>,
        class_names: &[String],
        path: &Path,
    ) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let mut counts: std::collections::BTreeMap<String, usize> = Default::default();
        let mut header = vec!["query_id".to_string(), "label_class".to_string()];
        for cat in &self.slot_categories {
            let tag = cat.tag(class_names);
            let k = counts.entry(tag.clone()).or_insert(0);
            header.push(format!("{tag}_{k}"));
            *k += 1;
        }
        writeln!(f, "{}", header.join(","))?;
        for q in 0..aff.n_queries {
            let label = labels
                .map(|l| l.classes[q].to_string())
                .unwrap_or_else(|| "-".to_string());
            let scores: Vec<String> =
                aff.row(q).iter().map(|v| format!("{v:.9}")).collect();
            writeln!(f, "{q},{label},{}", scores.join(","))?;
        }
        Ok(())
    }
}

/// Channel-wise combination of the encoded attribute vector with the
/// retrieved enhanced attribute map: `z_a` first, then `z_tilde`.
pub fn combine(z_a: &TensorData, z_tilde: &TensorData) -> Result<TensorData> {
    if z_a.shape.len() != 1 {
        return Err(HgdError::Shape("combine: z_a must be a vector".into()));
    }
    let ca = z_a.shape[0];
    match z_tilde.shape.len() {
        1 => {
            let mut data = z_a.data.clone();
            data.extend_from_slice(&z_tilde.data);
            Ok(TensorData::new(vec![ca + z_tilde.shape[0]], data))
        }
        3 => {
            let (ct, h, w) = (z_tilde.shape[0], z_tilde.shape[1], z_tilde.shape[2]);
            let hw = h * w;
            let mut data = Vec::with_capacity((ca + ct) * hw);
            for c in 0..ca {
                data.extend(std::iter::repeat(z_a.data[c]).take(hw));
            }
            data.extend_from_slice(&z_tilde.data);
            Ok(TensorData::new(vec![ca + ct, h, w], data))
        }
        _ => Err(HgdError::Shape("combine: z_tilde must be a vector or CHW map".into())),
    }
}
