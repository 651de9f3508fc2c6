//! Two-stage translation training loop: forward both directions, compute
//! the weighted objective, alternate generator/encoder and discriminator
//! updates, then write the memory bank.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{downsample_labels, ImageSlice, LabelMap};
use crate::error::{HgdError, Result};
use crate::losses::{self, LossConfig, TermIds, TERM_NAMES};
use crate::memory::{build_bank, BankLayout, MemoryBank};
use crate::networks::{is_discriminator_param, ModelBundle, NetConfig};
use crate::nn::{Adam, Binding};
use crate::tape::{Gradients, Id, Tape, TensorData};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub use_pgd: bool,
    pub use_sgd: bool,
    pub use_ggd: bool,
    /// label-gated structural slot updates; off means the bank updates
    /// without category gating
    pub structural_slots: bool,
    /// literal per-pixel retrieval variant that returns the attribute code
    /// itself, kept for ablation
    pub literal_eq3_read: bool,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 2,
            steps: 3000,
            seed: 0,
            use_pgd: true,
            use_sgd: true,
            use_ggd: true,
            structural_slots: true,
            literal_eq3_read: false,
            checkpoint_every: 1000,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(HgdError::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(HgdError::Config("betas must be in [0, 1)".into()));
        }
        if self.batch_size != 2 {
            return Err(HgdError::Config(
                "batch pairs one sample from each of two modalities; batch_size must be 2".into(),
            ));
        }
        if self.steps == 0 {
            return Err(HgdError::Config("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training pair: one subject per modality with aligned labels.
pub struct Batch<'a> {
    pub img_i: &'a ImageSlice,
    pub labels_i: &'a LabelMap,
    pub img_j: &'a ImageSlice,
    pub labels_j: &'a LabelMap,
}

pub struct TrainState {
    pub models: ModelBundle,
    pub bank: MemoryBank,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub rng: ChaCha8Rng,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub step: usize,
    /// event trace of the most recent step, in execution order
    pub last_events: Vec<&'static str>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepBreakdown {
    pub step: usize,
    /// weighted generator/encoder terms, `TERM_NAMES` order
    pub terms: [f64; 7],
    pub total: f64,
    pub disc_total: f64,
}

impl TrainState {
    pub fn new(
        net_cfg: NetConfig,
        train_cfg: TrainConfig,
        loss_cfg: LossConfig,
        layout: &BankLayout,
    ) -> Result<Self> {
        train_cfg.validate()?;
        loss_cfg.validate()?;
        let models = ModelBundle::new(net_cfg, train_cfg.seed)?;
        let bank = build_bank(
            layout,
            models.cfg.content_channels,
            models.cfg.attr_dim,
            models.cfg.n_modalities,
            loss_cfg.alpha_p,
            train_cfg.seed ^ 0xb4c0ffee,
        )?;
        Ok(TrainState {
            opt_g: Adam::new(train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2),
            opt_d: Adam::new(train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2),
            rng: ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_mul(0x9e3779b97f4a7c15)),
            models,
            bank,
            train_cfg,
            loss_cfg,
            step: 0,
            last_events: Vec::new(),
        })
    }
}

/// Pixel-major `[n_q, C]` query matrix from a CHW content map's values.
fn queries_from(map: &TensorData) -> Vec<f64> {
    let (c, h, w) = (map.shape[0], map.shape[1], map.shape[2]);
    let hw = h * w;
    let mut q = vec![0.0; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            q[p * c + ch] = map.data[ch * hw + p];
        }
    }
    q
}

/// `[n_q, C_a]` rows into a CHW attribute map tensor.
fn enhanced_to_chw(enhanced: &[f64], c: usize, hw_side: usize) -> TensorData {
    let hw = hw_side * hw_side;
    let mut data = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            data[ch * hw + p] = enhanced[p * c + ch];
        }
    }
    TensorData::new(vec![c, hw_side, hw_side], data)
}

/// Per-channel spatial mean of a retrieved attribute map in query-major
/// layout.
fn mean_attr_code(enhanced: &[f64], attr_dim: usize) -> TensorData {
    let n_q = enhanced.len() / attr_dim;
    let mut mean = vec![0.0; attr_dim];
    for q in 0..n_q {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += enhanced[q * attr_dim + c] / n_q as f64;
        }
    }
    TensorData::new(vec![attr_dim], mean)
}

struct StepCtx<'a> {
    t: Tape,
    bind: Binding,
    state: &'a mut TrainState,
}

impl StepCtx<'_> {
    fn encode_content(&mut self, modality: usize, image: Id) -> Result<Id> {
        let s = &mut *self.state;
        s.models.content_encoder(modality).forward(
            &mut self.t,
            &s.models.store,
            &mut self.bind,
            &s.models.cfg,
            image,
        )
    }

    fn encode_attr(&mut self, modality: usize, image: Id) -> Result<Id> {
        let s = &mut *self.state;
        s.models.attr_encoders[modality].forward(
            &mut self.t,
            &s.models.store,
            &mut self.bind,
            &s.models.cfg,
            image,
        )
    }

    /// Bank read for the target domain from a content map's detached
    /// values, returned as raw rows plus a tape leaf in CHW layout.
    fn bank_read(&mut self, content: Id, target_domain: usize, z_a: Id) -> Result<(Vec<f64>, Id)> {
        let s = &mut *self.state;
        let cfg = &s.models.cfg;
        let queries = queries_from(self.t.value(content));
        let enhanced = if s.train_cfg.literal_eq3_read {
            let z = self.t.value(z_a).data.clone();
            s.bank.read_literal_eq3(cfg.content_hw * cfg.content_hw, &z)
        } else {
            s.bank.read(&queries, target_domain)?.0
        };
        let map = enhanced_to_chw(&enhanced, cfg.attr_dim, cfg.content_hw);
        let leaf = self.t.leaf(map, false);
        Ok((enhanced, leaf))
    }

    /// Broadcasts the attribute code and stacks it with the retrieved map.
    fn combine(&mut self, z_a: Id, enhanced_map: Id) -> Id {
        let hw = self.state.models.cfg.content_hw;
        let b = self.t.broadcast_hw(z_a, hw, hw);
        self.t.concat_channels(b, enhanced_map)
    }

    fn generate(&mut self, modality: usize, content: Id, attr_combined: Id) -> Result<Id> {
        let s = &mut *self.state;
        s.models.generators[modality].forward(
            &mut self.t,
            &s.models.store,
            &mut self.bind,
            &s.models.cfg,
            content,
            attr_combined,
        )
    }

    fn disc_domain(&mut self, modality: usize, image: Id) -> Result<Vec<Id>> {
        let s = &mut *self.state;
        s.models.domain_discriminators[modality].forward(
            &mut self.t,
            &s.models.store,
            &mut self.bind,
            &s.models.cfg,
            image,
        )
    }

    fn disc_content(&mut self, content: Id) -> Result<Id> {
        let s = &mut *self.state;
        s.models.content_discriminator.forward(
            &mut self.t,
            &s.models.store,
            &mut self.bind,
            &s.models.cfg,
            content,
        )
    }

    /// Mean of per-scale generator adversarial terms.
    fn adv_g(&mut self, scores: &[Id]) -> Id {
        let parts: Vec<(Id, f64)> = scores
            .iter()
            .map(|&s| (losses::lsgan_g_loss(&mut self.t, s), 1.0 / scores.len() as f64))
            .collect();
        self.t.add_scalars(&parts)
    }

    fn adv_d(&mut self, real: &[Id], fake: &[Id]) -> Id {
        let n = real.len() as f64;
        let parts: Vec<(Id, f64)> = real
            .iter()
            .zip(fake)
            .map(|(&r, &f)| (losses::lsgan_d_loss(&mut self.t, r, f), 1.0 / n))
            .collect();
        self.t.add_scalars(&parts)
    }
}

fn apply_group(
    opt: &mut Adam,
    state_models: &mut ModelBundle,
    bind: &Binding,
    grads: &Gradients,
    discriminator_group: bool,
) {
    let mut updates = Vec::new();
    for (pid, tape_id) in bind.bound() {
        if is_discriminator_param(state_models.store.name(pid)) != discriminator_group {
            continue;
        }
        if let Some(g) = grads.get(tape_id) {
            updates.push((pid, g.clone()));
        }
    }
    let refs: Vec<(usize, &TensorData)> = updates.iter().map(|(p, g)| (*p, g)).collect();
    opt.step(&mut state_models.store, &refs);
}

/// One optimization step over a two-modality batch. Runs the two-stage
/// translation protocol, updates both optimizer groups, then the bank.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepBreakdown> {
    let cfg = state.models.cfg.clone();
    let (dom_i, dom_j) = (batch.img_i.modality_id, batch.img_j.modality_id);
    state.models.check_modality(dom_i)?;
    state.models.check_modality(dom_j)?;
    if dom_i == dom_j {
        return Err(HgdError::Argument("train_step: batch must span two modalities".into()));
    }
    batch.img_i.validate(cfg.resolution)?;
    batch.img_j.validate(cfg.resolution)?;
    let hw = cfg.content_hw;
    let labels_i = downsample_labels(batch.labels_i, hw, hw)?;
    let labels_j = downsample_labels(batch.labels_j, hw, hw)?;

    // anchor subsampling is drawn every step so ablation flags do not
    // shift the rng stream
    let n_pix = hw * hw;
    let max_anchors = state.loss_cfg.pgd_max_anchors.min(n_pix);
    let anchors: Vec<usize> = if max_anchors == n_pix {
        (0..n_pix).collect()
    } else {
        let mut chosen: Vec<usize> = (0..n_pix).collect();
        for k in 0..max_anchors {
            let r = state.rng.gen_range(k..n_pix);
            chosen.swap(k, r);
        }
        chosen.truncate(max_anchors);
        chosen.sort_unstable();
        chosen
    };

    let mut ctx = StepCtx { t: Tape::new(), bind: Binding::new(&state.models.store, true), state };
    let img_i = ctx.t.leaf(to_chw(&batch.img_i.pixels), false);
    let img_j = ctx.t.leaf(to_chw(&batch.img_j.pixels), false);

    // stage 1: encode, read, translate, self-reconstruct
    let z_c_i = ctx.encode_content(dom_i, img_i)?;
    let z_c_j = ctx.encode_content(dom_j, img_j)?;
    let z_a_i = ctx.encode_attr(dom_i, img_i)?;
    let z_a_j = ctx.encode_attr(dom_j, img_j)?;

    let (_, enh_ii_map) = ctx.bank_read(z_c_i, dom_i, z_a_i)?;
    let (_, enh_ij_map) = ctx.bank_read(z_c_i, dom_j, z_a_j)?;
    let (_, enh_jj_map) = ctx.bank_read(z_c_j, dom_j, z_a_j)?;
    let (_, enh_ji_map) = ctx.bank_read(z_c_j, dom_i, z_a_i)?;

    // cross-domain branches are conditioned on the encoded attribute of the
    // target-modality batch image; the bank's momentum values converge to
    // the running mean of these same codes, so the population-mean code the
    // bank supplies at inference stays on the training manifold while the
    // training-time input remains stationary
    let comb_ij = ctx.combine(z_a_j, enh_ij_map);
    let comb_ji = ctx.combine(z_a_i, enh_ji_map);
    let comb_ii = ctx.combine(z_a_i, enh_ii_map);
    let comb_jj = ctx.combine(z_a_j, enh_jj_map);

    let m_ij = ctx.generate(dom_j, z_c_i, comb_ij)?;
    let m_ji = ctx.generate(dom_i, z_c_j, comb_ji)?;
    let m_ii = ctx.generate(dom_i, z_c_i, comb_ii)?;
    let m_jj = ctx.generate(dom_j, z_c_j, comb_jj)?;

    // stage 2: re-encode the translations and map back
    let z_c_ij = ctx.encode_content(dom_j, m_ij)?;
    let z_c_ji = ctx.encode_content(dom_i, m_ji)?;
    let z_a_ij = ctx.encode_attr(dom_j, m_ij)?;
    let z_a_ji = ctx.encode_attr(dom_i, m_ji)?;

    let (_, enh_back_i) = ctx.bank_read(z_c_ij, dom_i, z_a_ji)?;
    let (_, enh_back_j) = ctx.bank_read(z_c_ji, dom_j, z_a_ij)?;
    let comb_back_i = ctx.combine(z_a_ji, enh_back_i);
    let comb_back_j = ctx.combine(z_a_ij, enh_back_j);
    let m_hat_i = ctx.generate(dom_i, z_c_ij, comb_back_i)?;
    let m_hat_j = ctx.generate(dom_j, z_c_ji, comb_back_j)?;

    // generator/encoder objective
    let dci = ctx.disc_content(z_c_i)?;
    let dcj = ctx.disc_content(z_c_j)?;
    let adv_content = losses::content_e_loss(&mut ctx.t, dci, dcj);

    let fake_j_scores = ctx.disc_domain(dom_j, m_ij)?;
    let fake_i_scores = ctx.disc_domain(dom_i, m_ji)?;
    let g_j = ctx.adv_g(&fake_j_scores);
    let g_i = ctx.adv_g(&fake_i_scores);
    let adv_domain = ctx.t.add_scalars(&[(g_j, 0.5), (g_i, 0.5)]);

    let cyc_i = losses::cycle_loss(&mut ctx.t, img_i, m_hat_i);
    let cyc_j = losses::cycle_loss(&mut ctx.t, img_j, m_hat_j);
    let cycle = ctx.t.add_scalars(&[(cyc_i, 0.5), (cyc_j, 0.5)]);
    let self_i = losses::self_recon_loss(&mut ctx.t, img_i, m_ii);
    let self_j = losses::self_recon_loss(&mut ctx.t, img_j, m_jj);
    let self_recon = ctx.t.add_scalars(&[(self_i, 0.5), (self_j, 0.5)]);

    let tc = ctx.state.train_cfg.clone();
    let lc = ctx.state.loss_cfg.clone();
    // the structure and global losses supervise the content encoder on
    // detached translations; backpropagated through the generator, their
    // map-level similarities let it inscribe encoder-readable identity
    // watermarks that distort the images (training losses stay low while
    // held-out translations degrade). The pixel-level term stays attached:
    // per-pixel feature matching regularizes the generator directly.
    let (z_d_ij, z_d_ji) = if tc.use_sgd || tc.use_ggd {
        let det_ij = ctx.t.detach(m_ij);
        let det_ji = ctx.t.detach(m_ji);
        (ctx.encode_content(dom_j, det_ij)?, ctx.encode_content(dom_i, det_ji)?)
    } else {
        (z_c_ij, z_c_ji)
    };
    let pgd = if tc.use_pgd {
        let a = losses::pgd_loss(&mut ctx.t, z_c_i, z_c_ij, &[z_c_j], lc.tau1, Some(&anchors))?;
        let b = losses::pgd_loss(&mut ctx.t, z_c_j, z_c_ji, &[z_c_i], lc.tau1, Some(&anchors))?;
        Some(ctx.t.add_scalars(&[(a, 0.5), (b, 0.5)]))
    } else {
        None
    };
    let sgd = if tc.use_sgd {
        let (a, _) = losses::sgd_loss(
            &mut ctx.t,
            z_c_i,
            z_d_ij,
            &labels_i,
            &[(z_c_j, &labels_j)],
            lc.tau2,
            lc.alpha_s,
            lc.sgd_mean_pool,
        )?;
        let (b, _) = losses::sgd_loss(
            &mut ctx.t,
            z_c_j,
            z_d_ji,
            &labels_j,
            &[(z_c_i, &labels_i)],
            lc.tau2,
            lc.alpha_s,
            lc.sgd_mean_pool,
        )?;
        Some(ctx.t.add_scalars(&[(a, 0.5), (b, 0.5)]))
    } else {
        None
    };
    let ggd = if tc.use_ggd {
        let a = losses::ggd_loss(&mut ctx.t, z_c_i, z_d_ij, &[z_c_j], lc.tau2)?;
        let b = losses::ggd_loss(&mut ctx.t, z_c_j, z_d_ji, &[z_c_i], lc.tau2)?;
        Some(ctx.t.add_scalars(&[(a, 0.5), (b, 0.5)]))
    } else {
        None
    };

    let terms = TermIds {
        adv_content: Some(adv_content),
        adv_domain: Some(adv_domain),
        cycle: Some(cycle),
        self_recon: Some(self_recon),
        pgd,
        sgd,
        ggd,
    };
    let (g_total, breakdown) = losses::total_loss(&mut ctx.t, &terms, &lc);

    // discriminator objective on detached fakes and contents
    let det_ij = ctx.t.detach(m_ij);
    let det_ji = ctx.t.detach(m_ji);
    let real_j_scores = ctx.disc_domain(dom_j, img_j)?;
    let dfake_j_scores = ctx.disc_domain(dom_j, det_ij)?;
    let real_i_scores = ctx.disc_domain(dom_i, img_i)?;
    let dfake_i_scores = ctx.disc_domain(dom_i, det_ji)?;
    let d_dom_j = ctx.adv_d(&real_j_scores, &dfake_j_scores);
    let d_dom_i = ctx.adv_d(&real_i_scores, &dfake_i_scores);
    let det_zci = ctx.t.detach(z_c_i);
    let det_zcj = ctx.t.detach(z_c_j);
    let dc_i = ctx.disc_content(det_zci)?;
    let dc_j = ctx.disc_content(det_zcj)?;
    let d_content = losses::content_d_loss(&mut ctx.t, dc_i, dc_j);
    let d_total =
        ctx.t.add_scalars(&[(d_dom_j, 0.5), (d_dom_i, 0.5), (d_content, 1.0)]);

    let g_val = ctx.t.value(g_total).data[0];
    let d_val = ctx.t.value(d_total).data[0];
    if !g_val.is_finite() || !d_val.is_finite() {
        return Err(HgdError::NonFinite(format!(
            "step {}: non-finite loss (g={g_val}, d={d_val}); weighted terms {:?} = {:?}",
            ctx.state.step, TERM_NAMES, breakdown
        )));
    }

    let StepCtx { t, bind, state } = ctx;
    state.last_events = vec!["forward"];
    let g_grads = t.backward(g_total);
    apply_group(&mut state.opt_g, &mut state.models, &bind, &g_grads, false);
    state.last_events.push("optimizer_g");
    let d_grads = t.backward(d_total);
    apply_group(&mut state.opt_d, &mut state.models, &bind, &d_grads, true);
    state.last_events.push("optimizer_d");

    if !state.models.store.all_finite() {
        return Err(HgdError::NonFinite(format!(
            "step {}: parameters became non-finite after the optimizer step",
            state.step
        )));
    }

    // bank write from first-stage queries, once, after the optimizer step;
    // values move toward the images' own attribute codes so each domain's
    // slots accumulate real appearance statistics
    let q_i = queries_from(t.value(z_c_i));
    let q_j = queries_from(t.value(z_c_j));
    let n_q = state.models.cfg.content_hw * state.models.cfg.content_hw;
    let ground_i = state.bank.read_literal_eq3(n_q, &t.value(z_a_i).data);
    let ground_j = state.bank.read_literal_eq3(n_q, &t.value(z_a_j).data);
    let gating = state.train_cfg.structural_slots.then_some(&labels_i);
    state.bank.update(&q_i, &q_j, &ground_i, &ground_j, gating)?;
    state.last_events.push("bank_update");

    state.step += 1;
    Ok(StepBreakdown {
        step: state.step - 1,
        terms: breakdown,
        total: g_val,
        disc_total: d_val,
    })
}

fn to_chw(pixels: &TensorData) -> TensorData {
    TensorData::new(vec![1, pixels.shape[0], pixels.shape[1]], pixels.data.clone())
}

/// Test-time translation: content from the input, target-domain appearance
/// from a pure-affinity bank read; the attribute code is the spatial mean
/// of the retrieved map, standing in for the unavailable reference image.
pub fn translate(
    state: &TrainState,
    m: &ImageSlice,
    source_modality: usize,
    target_modality: usize,
) -> Result<ImageSlice> {
    state.models.check_modality(source_modality)?;
    state.models.check_modality(target_modality)?;
    let cfg = &state.models.cfg;
    m.validate(cfg.resolution)?;

    let mut t = Tape::new();
    let mut bind = Binding::new(&state.models.store, false);
    let img = t.leaf(to_chw(&m.pixels), false);
    let z_c = state.models.content_encoder(source_modality).forward(
        &mut t,
        &state.models.store,
        &mut bind,
        cfg,
        img,
    )?;
    let queries = queries_from(t.value(z_c));
    let (enhanced, _) = state.bank.read(&queries, target_modality)?;
    let enh_map = t.leaf(enhanced_to_chw(&enhanced, cfg.attr_dim, cfg.content_hw), false);
    let attr_code = t.leaf(mean_attr_code(&enhanced, cfg.attr_dim), false);
    let b = t.broadcast_hw(attr_code, cfg.content_hw, cfg.content_hw);
    let comb = t.concat_channels(b, enh_map);
    let out = state.models.generators[target_modality].forward(
        &mut t,
        &state.models.store,
        &mut bind,
        cfg,
        z_c,
        comb,
    )?;
    let v = t.value(out);
    Ok(ImageSlice {
        pixels: TensorData::new(vec![cfg.resolution, cfg.resolution], v.data.clone()),
        subject_id: m.subject_id.clone(),
        modality_id: target_modality,
        slice_index: m.slice_index,
    })
}

/// Groups a corpus by subject; each subject must carry both modalities.
fn by_subject(corpus: &[(ImageSlice, LabelMap)]) -> Result<Vec<[usize; 2]>> {
    use std::collections::BTreeMap;
    let mut subjects: BTreeMap<&str, [Option<usize>; 2]> = BTreeMap::new();
    for (k, (img, _)) in corpus.iter().enumerate() {
        if img.modality_id > 1 {
            return Err(HgdError::Validation("fit: only modalities 0 and 1 supported".into()));
        }
        subjects.entry(&img.subject_id).or_default()[img.modality_id] = Some(k);
    }
    let mut out = Vec::with_capacity(subjects.len());
    for (sid, pair) in subjects {
        match pair {
            [Some(a), Some(b)] => out.push([a, b]),
            _ => {
                return Err(HgdError::Validation(format!(
                    "fit: subject {sid} is missing a modality"
                )))
            }
        }
    }
    Ok(out)
}

/// Runs the configured number of steps over shuffled cross-subject
/// pairings, logging one CSV row per step and checkpointing periodically.
pub fn fit(
    state: &mut TrainState,
    corpus: &[(ImageSlice, LabelMap)],
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let subjects = by_subject(corpus)?;
    if subjects.len() < 2 {
        return Err(HgdError::Validation(
            "fit: need at least 2 subjects for cross-subject negatives".into(),
        ));
    }

    let log_path = out_dir.join("train_log.csv");
    let fresh = state.step == 0 || !log_path.exists();
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(fresh)
        .append(!fresh)
        .open(&log_path)?;
    if fresh {
        writeln!(log, "step,{},total", TERM_NAMES.join(","))?;
    }

    let mut order_i: Vec<usize> = Vec::new();
    let mut order_j: Vec<usize> = Vec::new();
    while state.step < state.train_cfg.steps {
        if order_i.is_empty() {
            order_i = shuffled(&mut state.rng, subjects.len());
            order_j = shuffled(&mut state.rng, subjects.len());
            // keep the two modalities on different subjects
            for k in 0..order_j.len() {
                if order_j[k] == order_i[k] {
                    let swap = (k + 1) % order_j.len();
                    order_j.swap(k, swap);
                }
            }
        }
        let si = order_i.pop().unwrap();
        let mut sj = order_j.pop().unwrap();
        if si == sj {
            sj = (sj + 1) % subjects.len();
        }
        let [ia, _] = subjects[si];
        let [_, jb] = subjects[sj];
        let batch = Batch {
            img_i: &corpus[ia].0,
            labels_i: &corpus[ia].1,
            img_j: &corpus[jb].0,
            labels_j: &corpus[jb].1,
        };
        let b = train_step(state, &batch)?;
        let terms: Vec<String> = b.terms.iter().map(|v| format!("{v:.9}")).collect();
        writeln!(log, "{},{},{:.9}", b.step, terms.join(","), b.total)?;

        let every = state.train_cfg.checkpoint_every;
        if every > 0 && state.step % every == 0 && state.step < state.train_cfg.steps {
            save_checkpoint(state, &out_dir.join("checkpoint.bin"))?;
        }
    }
    save_checkpoint(state, &out_dir.join("checkpoint.bin"))?;
    Ok(())
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for k in (1..n).rev() {
        let r = rng.gen_range(0..=k);
        v.swap(k, r);
    }
    v
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    step: usize,
    bank: MemoryBank,
    opt_g_t: u64,
    opt_d_t: u64,
    rng_seed: [u8; 32],
    rng_word_pos: (u64, u64),
    param_names: Vec<String>,
}

const CKPT_MAGIC: &[u8; 8] = b"HGDCKPT1";

/// Single-archive checkpoint: JSON header plus raw little-endian f64
/// parameter and moment arrays in header order.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut names = Vec::new();
    for (_, p) in state.models.store.iter() {
        names.push(p.name.clone());
    }
    let pos = state.rng.get_word_pos();
    let header = CheckpointHeader {
        net_cfg: state.models.cfg.clone(),
        train_cfg: state.train_cfg.clone(),
        loss_cfg: state.loss_cfg.clone(),
        step: state.step,
        bank: state.bank.clone(),
        opt_g_t: state.opt_g.t,
        opt_d_t: state.opt_d.t,
        rng_seed: state.rng.get_seed(),
        rng_word_pos: ((pos >> 64) as u64, pos as u64),
        param_names: names,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, p) in state.models.store.iter() {
        out.extend_from_slice(&(p.value.shape.len() as u64).to_le_bytes());
        for &d in &p.value.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &p.m {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &p.v {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)
        .map_err(|e| HgdError::Load(format!("{}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(HgdError::Load(format!("{}: not a checkpoint archive", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(HgdError::Load(format!("{}: truncated header", path.display())));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen])?;

    let models = ModelBundle::new(header.net_cfg, header.train_cfg.seed)?;
    let mut state = TrainState {
        opt_g: Adam::new(header.train_cfg.learning_rate, header.train_cfg.beta1, header.train_cfg.beta2),
        opt_d: Adam::new(header.train_cfg.learning_rate, header.train_cfg.beta1, header.train_cfg.beta2),
        rng: ChaCha8Rng::from_seed(header.rng_seed),
        models,
        bank: header.bank,
        train_cfg: header.train_cfg,
        loss_cfg: header.loss_cfg,
        step: header.step,
        last_events: Vec::new(),
    };
    state.opt_g.t = header.opt_g_t;
    state.opt_d.t = header.opt_d_t;
    state
        .rng
        .set_word_pos(((header.rng_word_pos.0 as u128) << 64) | header.rng_word_pos.1 as u128);

    let mut off = 16 + hlen;
    let read_u64 = |off: &mut usize| -> Result<u64> {
        if *off + 8 > bytes.len() {
            return Err(HgdError::Load(format!("{}: truncated payload", path.display())));
        }
        let v = u64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
        *off += 8;
        Ok(v)
    };
    for name in &header.param_names {
        let pid = state
            .models
            .store
            .lookup(name)
            .ok_or_else(|| HgdError::Load(format!("{}: unknown parameter {name}", path.display())))?;
        let ndim = read_u64(&mut off)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut off)? as usize);
        }
        let p = state.models.store.get_mut(pid);
        if p.value.shape != shape {
            return Err(HgdError::Load(format!(
                "{}: shape mismatch for {name}: stored {:?}, model {:?}",
                path.display(),
                shape,
                p.value.shape
            )));
        }
        let n = p.value.numel();
        if off + 24 * n > bytes.len() {
            return Err(HgdError::Load(format!("{}: truncated payload", path.display())));
        }
        for dst in [&mut p.value.data, &mut p.m, &mut p.v] {
            for v in dst.iter_mut() {
                *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
    }
    if off != bytes.len() {
        return Err(HgdError::Load(format!("{}: trailing bytes", path.display())));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_corpus, make_phantom_corpus};

    fn small_net() -> NetConfig {
        let mut cfg = NetConfig::toy();
        cfg.resolution = 32;
        cfg.content_hw = 8;
        cfg.content_channels = 16;
        cfg.base_channels = 4;
        cfg.content_res_blocks = 2;
        cfg.gen_res_blocks = 1;
        cfg
    }

    fn small_layout() -> BankLayout {
        BankLayout { structure_slots: vec![(0, 1), (1, 1), (2, 1), (3, 1)], global_slots: 4 }
    }

    fn small_state(seed: u64) -> TrainState {
        let mut tc = TrainConfig { seed, steps: 10, ..Default::default() };
        tc.checkpoint_every = 0;
        TrainState::new(small_net(), tc, LossConfig::default(), &small_layout()).unwrap()
    }

    fn small_corpus(dir: &Path, seed: u64) -> Vec<(ImageSlice, LabelMap)> {
        let corpus = make_phantom_corpus(seed, 4, 32, dir).unwrap();
        load_corpus(&corpus.train).unwrap()
    }

    fn first_batch(corpus: &[(ImageSlice, LabelMap)]) -> Batch<'_> {
        let i = corpus
            .iter()
            .position(|(img, _)| img.modality_id == 0)
            .unwrap();
        let j = corpus
            .iter()
            .position(|(img, _)| img.modality_id == 1 && img.subject_id != corpus[i].0.subject_id)
            .unwrap();
        Batch {
            img_i: &corpus[i].0,
            labels_i: &corpus[i].1,
            img_j: &corpus[j].0,
            labels_j: &corpus[j].1,
        }
    }

    #[test]
    fn step_runs_and_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus(dir.path(), 5);
        let b1 = {
            let mut s = small_state(7);
            train_step(&mut s, &first_batch(&corpus)).unwrap()
        };
        let b2 = {
            let mut s = small_state(7);
            train_step(&mut s, &first_batch(&corpus)).unwrap()
        };
        assert_eq!(b1.terms, b2.terms);
        assert_eq!(b1.total, b2.total);
        assert!(b1.total.is_finite());
        assert!(b1.terms.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn baseline_ablation_drops_granularity_terms() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus(dir.path(), 5);
        let mut s = small_state(3);
        s.train_cfg.use_pgd = false;
        s.train_cfg.use_sgd = false;
        s.train_cfg.use_ggd = false;
        let b = train_step(&mut s, &first_batch(&corpus)).unwrap();
        assert_eq!(b.terms[4], 0.0);
        assert_eq!(b.terms[5], 0.0);
        assert_eq!(b.terms[6], 0.0);
        let partial: f64 = b.terms[..4].iter().sum();
        assert!((b.total - partial).abs() < 1e-12);
    }

    #[test]
    fn disabled_flag_matches_zero_weight_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus(dir.path(), 5);
        let batch = first_batch(&corpus);

        let mut zero_weight = small_state(9);
        zero_weight.loss_cfg.lambda5 = 0.0;
        train_step(&mut zero_weight, &batch).unwrap();

        let mut disabled = small_state(9);
        disabled.train_cfg.use_pgd = false;
        train_step(&mut disabled, &batch).unwrap();

        for ((_, a), (_, b)) in zero_weight.models.store.iter().zip(disabled.models.store.iter()) {
            assert_eq!(a.value.data, b.value.data, "parameter {} diverged", a.name);
        }
    }

    #[test]
    fn step_event_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus(dir.path(), 5);
        let mut s = small_state(1);
        train_step(&mut s, &first_batch(&corpus)).unwrap();
        assert_eq!(s.last_events, vec!["forward", "optimizer_g", "optimizer_d", "bank_update"]);
        assert!(s.bank.max_row_norm_error() < 1e-6);
    }

    #[test]
    fn self_reconstruction_improves() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus(dir.path(), 5);
        let mut improvements = Vec::new();
        for seed in [1u64, 2, 3] {
            let mut s = small_state(seed);
            s.train_cfg.steps = 200;
            let out = dir.path().join(format!("run{seed}"));
            let batch = first_batch(&corpus);
            let first = train_step(&mut s, &batch).unwrap();
            fit(&mut s, &corpus, &out).unwrap();
            let last = train_step(&mut s, &batch).unwrap();
            improvements.push(last.terms[3] < first.terms[3]);
        }
        improvements.sort();
        assert!(improvements[1], "median seed did not improve self-reconstruction");
    }

    #[test]
    fn fit_logs_and_honors_budget() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus(dir.path(), 5);
        let mut s = small_state(4);
        s.train_cfg.steps = 5;
        let out = dir.path().join("fit");
        fit(&mut s, &corpus, &out).unwrap();
        assert_eq!(s.step, 5);
        let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "step,adv_content,adv_domain,cycle,self_recon,pgd,sgd,ggd,total");
        assert!(out.join("checkpoint.bin").exists());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus(dir.path(), 5);
        let mut s = small_state(6);
        s.train_cfg.steps = 3;
        let out = dir.path().join("ckpt");
        fit(&mut s, &corpus, &out).unwrap();

        let path = out.join("checkpoint.bin");
        let mut restored = load_checkpoint(&path).unwrap();
        assert_eq!(restored.step, 3);

        // identical forward output
        let src = &corpus.iter().find(|(i, _)| i.modality_id == 0).unwrap().0;
        let a = translate(&s, src, 0, 1).unwrap();
        let b = translate(&restored, src, 0, 1).unwrap();
        assert_eq!(a.pixels.data, b.pixels.data);

        // identical continued trajectories
        s.train_cfg.steps = 5;
        restored.train_cfg.steps = 5;
        let out2 = dir.path().join("cont_a");
        let out3 = dir.path().join("cont_b");
        fit(&mut s, &corpus, &out2).unwrap();
        fit(&mut restored, &corpus, &out3).unwrap();
        let la = std::fs::read_to_string(out2.join("train_log.csv")).unwrap();
        let lb = std::fs::read_to_string(out3.join("train_log.csv")).unwrap();
        let tail = |s: &str| s.lines().skip(1).map(String::from).collect::<Vec<_>>();
        assert_eq!(tail(&la), tail(&lb));
    }

    #[test]
    fn translate_contract() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus(dir.path(), 5);
        let s = small_state(2);
        let src = &corpus.iter().find(|(i, _)| i.modality_id == 0).unwrap().0;
        let out = translate(&s, src, 0, 1).unwrap();
        assert_eq!(out.pixels.shape, vec![32, 32]);
        assert!(out.pixels.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(out.modality_id, 1);
        let again = translate(&s, src, 0, 1).unwrap();
        assert_eq!(out.pixels.data, again.pixels.data);
        assert!(translate(&s, src, 0, 5).is_err());
    }
}
