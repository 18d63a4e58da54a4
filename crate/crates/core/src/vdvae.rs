//! Vision-dynamics VQ-VAE: an inverse-dynamics encoder decomposes a feature
//! transition (f_t, f_{t+H}) into an action-relevant latent quantized against
//! the frozen action codebook and an action-irrelevant latent with its own
//! small codebook; a forward decoder reconstructs f_{t+H}. A pairwise sigmoid
//! contrastive loss aligns pooled visual latents with pooled trajectory
//! latents, which is what lets unlabeled (human) transitions share the action
//! vocabulary.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actvae::ActVae;
use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint;
use crate::data::{sample_batch, Batch, DatasetReader};
use crate::error::{CoreError, Result};
use crate::nn::{
    Adam, Block, FactorizedAttention, FactorizedMode, LayerNorm, Linear, LrSchedule, Mlp,
    ParamId, ParamSet, PositionEmbedding,
};
use crate::quantize::{nearest_tokens, vector_quantize, Codebook, LatentTokens};
use crate::rngs;

const SET: usize = 0;
const CODEBOOK_LR_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VdVaeConfig {
    pub patches: usize,
    pub feature_dim: usize,
    /// Action-relevant latent token count; equals the action codebook's Nq.
    pub nq: usize,
    /// Action-irrelevant latent token count.
    pub ni: usize,
    pub d_lat: usize,
    pub env_codebook_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub lambda_vq: f64,
    pub lambda_con: f64,
    pub lambda_reg: f64,
}

impl Default for VdVaeConfig {
    fn default() -> Self {
        VdVaeConfig {
            patches: 16,
            feature_dim: 32,
            nq: 8,
            ni: 2,
            d_lat: 64,
            env_codebook_size: 16,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            lambda_vq: 1.0,
            lambda_con: 0.1,
            lambda_reg: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VdVaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    /// Fraction of robot windows per batch.
    pub mix_ratio: f64,
}

impl Default for VdVaeTrainConfig {
    fn default() -> Self {
        VdVaeTrainConfig { steps: 4000, batch: 16, lr: 6e-4, warmup: 200, seed: 0, mix_ratio: 0.5 }
    }
}

/// Factorized-attention encoder block: spatiotemporal attention plus a
/// pre-norm MLP.
struct FactorBlock {
    fa: FactorizedAttention,
    ln: LayerNorm,
    mlp: Mlp,
}

impl FactorBlock {
    fn new(ps: &mut ParamSet, name: &str, width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        FactorBlock {
            fa: FactorizedAttention::new(ps, &format!("{name}.fa"), width, heads, rng),
            ln: LayerNorm::new(ps, &format!("{name}.ln"), width),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), width, 2 * width, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var, t: usize, p: usize) -> Var {
        let x = self.fa.forward(tape, ps, SET, x, t, p, FactorizedMode::Spatiotemporal);
        let h = self.ln.forward(tape, ps, SET, x);
        let m = self.mlp.forward(tape, ps, SET, h);
        tape.add(x, m)
    }
}

pub struct VdVae {
    pub cfg: VdVaeConfig,
    pub params: ParamSet,
    /// Frozen copy of the trajectory codebook.
    pub action_codebook: Codebook,
    pub env_codebook: Codebook,
    pub log_tau: ParamId,
    pub bias: ParamId,
    patch_embed: Linear,
    grid_pos: PositionEmbedding,
    enc_blocks: Vec<FactorBlock>,
    queries: ParamId,
    readout: Block,
    proj_va: Linear,
    proj_vi: Linear,
    dec_embed: Linear,
    dec_lat_a: Linear,
    dec_lat_i: Linear,
    dec_pos: PositionEmbedding,
    dec_blocks: Vec<Block>,
    dec_out: Linear,
}

impl VdVae {
    /// Build against a trained trajectory VQ-VAE whose codebook must already
    /// be frozen; its rows are copied in as an untrainable parameter.
    pub fn new(cfg: VdVaeConfig, act_vae: &ActVae, rng: &mut ChaCha8Rng) -> Result<VdVae> {
        if !act_vae.codebook.frozen {
            return Err(CoreError::Config(
                "action codebook must be frozen before dynamics training".into(),
            ));
        }
        if cfg.nq != act_vae.cfg.nq || cfg.d_lat != act_vae.cfg.d_lat {
            return Err(CoreError::Config(format!(
                "latent layout mismatch: ({}, {}) vs trajectory model ({}, {})",
                cfg.nq, cfg.d_lat, act_vae.cfg.nq, act_vae.cfg.d_lat
            )));
        }
        let mut ps = ParamSet::new();
        let w = cfg.d_model;
        let patch_embed = Linear::new(&mut ps, "enc.embed", cfg.feature_dim, w, rng);
        let grid_pos = PositionEmbedding::new(&mut ps, "enc.pos", 2 * cfg.patches, w, rng);
        let enc_blocks = (0..cfg.enc_layers)
            .map(|i| FactorBlock::new(&mut ps, &format!("enc.block{i}"), w, cfg.heads, rng))
            .collect();
        let queries = ps.normal("enc.queries", vec![cfg.nq + cfg.ni, w], 0.02, rng);
        let readout = Block::with_cross(&mut ps, "enc.readout", w, cfg.heads, rng);
        let proj_va = Linear::new(&mut ps, "enc.va", w, cfg.d_lat, rng);
        let proj_vi = Linear::new(&mut ps, "enc.vi", w, cfg.d_lat, rng);

        let dec_embed = Linear::new(&mut ps, "dec.embed", cfg.feature_dim, w, rng);
        let dec_lat_a = Linear::new(&mut ps, "dec.lat_a", cfg.d_lat, w, rng);
        let dec_lat_i = Linear::new(&mut ps, "dec.lat_i", cfg.d_lat, w, rng);
        let dec_pos =
            PositionEmbedding::new(&mut ps, "dec.pos", cfg.patches + cfg.nq + cfg.ni, w, rng);
        let dec_blocks = (0..cfg.dec_layers)
            .map(|i| Block::new(&mut ps, &format!("dec.block{i}"), w, cfg.heads, rng))
            .collect();
        let dec_out = Linear::new(&mut ps, "dec.out", w, cfg.feature_dim, rng);

        let act_rows = act_vae.params.value(act_vae.codebook.embeddings).clone();
        let k_act = act_vae.cfg.codebook_size;
        let act_id = ps.add_with("action_codebook", act_rows, false, 1.0);
        let mut action_codebook = Codebook::new(act_id, k_act, cfg.d_lat);
        action_codebook.frozen = true;

        let env_id = {
            let bound = 1.0 / (cfg.d_lat as f64).sqrt();
            let data = (0..cfg.env_codebook_size * cfg.d_lat)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            ps.add_with(
                "env_codebook",
                Tensor::new(vec![cfg.env_codebook_size, cfg.d_lat], data),
                true,
                CODEBOOK_LR_SCALE,
            )
        };
        let env_codebook = Codebook::new(env_id, cfg.env_codebook_size, cfg.d_lat);

        // Sigmoid-contrastive scalars: tau = 0.1 stored as log, bias = -10.
        let log_tau = ps.add("contrastive.log_tau", Tensor::scalar((0.1f64).ln()));
        let bias = ps.add("contrastive.bias", Tensor::scalar(-10.0));

        Ok(VdVae {
            cfg,
            params: ps,
            action_codebook,
            env_codebook,
            log_tau,
            bias,
            patch_embed,
            grid_pos,
            enc_blocks,
            queries,
            readout,
            proj_va,
            proj_vi,
            dec_embed,
            dec_lat_a,
            dec_lat_i,
            dec_pos,
            dec_blocks,
            dec_out,
        })
    }

    /// Inverse dynamics: two `[B, P, d]` frames to `([B, Nq, d_lat],
    /// [B, Ni, d_lat])` read off dedicated query slots.
    pub fn encode_transition(&self, tape: &mut Tape, f_t: Var, f_th: Var) -> (Var, Var) {
        let s = tape.shape(f_t).to_vec();
        assert_eq!(s, tape.shape(f_th).to_vec(), "frame shape mismatch");
        assert!(
            s.len() == 3 && s[1] == self.cfg.patches && s[2] == self.cfg.feature_dim,
            "expected [B, {}, {}], got {s:?}",
            self.cfg.patches,
            self.cfg.feature_dim
        );
        let b = s[0];
        let p = self.cfg.patches;
        let w = self.cfg.d_model;

        let x_t = self.patch_embed.forward(tape, &self.params, SET, f_t);
        let x_th = self.patch_embed.forward(tape, &self.params, SET, f_th);
        let mut grid = tape.concat_mid(&[x_t, x_th]);
        grid = self.grid_pos.forward(tape, &self.params, SET, grid);
        for block in &self.enc_blocks {
            grid = block.forward(tape, &self.params, grid, 2, p);
        }

        let n_queries = self.cfg.nq + self.cfg.ni;
        let qtable = self.params.bind(tape, SET, self.queries);
        let ids: Vec<usize> = (0..b).flat_map(|_| 0..n_queries).collect();
        let q = tape.embedding(qtable, &ids);
        let q = tape.reshape(q, vec![b, n_queries, w]);
        let read = self.readout.forward(tape, &self.params, SET, q, false, Some(grid));

        let va = tape.slice_mid(read, 0, self.cfg.nq);
        let vi = tape.slice_mid(read, self.cfg.nq, self.cfg.ni);
        (
            self.proj_va.forward(tape, &self.params, SET, va),
            self.proj_vi.forward(tape, &self.params, SET, vi),
        )
    }

    /// Forward dynamics: reconstruct f_{t+H} from f_t and both quantized
    /// latent streams, with plain (spatial) attention.
    pub fn decode_transition(&self, tape: &mut Tape, f_t: Var, z_qa: Var, z_qi: Var) -> Var {
        let x = self.dec_embed.forward(tape, &self.params, SET, f_t);
        let a = self.dec_lat_a.forward(tape, &self.params, SET, z_qa);
        let i = self.dec_lat_i.forward(tape, &self.params, SET, z_qi);
        let mut seq = tape.concat_mid(&[x, a, i]);
        seq = self.dec_pos.forward(tape, &self.params, SET, seq);
        for block in &self.dec_blocks {
            seq = block.forward(tape, &self.params, SET, seq, false, None);
        }
        let out = tape.slice_mid(seq, 0, self.cfg.patches);
        self.dec_out.forward(tape, &self.params, SET, out)
    }

    /// Value-only pooled action-relevant latent for one transition.
    pub fn pooled_visual_latent(&self, f_t: &[f64], f_th: &[f64]) -> Vec<f64> {
        let (p, d) = (self.cfg.patches, self.cfg.feature_dim);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, p, d], f_t.to_vec()));
        let b = tape.leaf(Tensor::new(vec![1, p, d], f_th.to_vec()));
        let (z_va, _) = self.encode_transition(&mut tape, a, b);
        let pooled = tape.mean_mid(z_va);
        tape.value(pooled).data().to_vec()
    }

    /// Value-only action tokens for one transition.
    pub fn tokens_for_transition(&self, f_t: &[f64], f_th: &[f64]) -> LatentTokens {
        let (p, d) = (self.cfg.patches, self.cfg.feature_dim);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, p, d], f_t.to_vec()));
        let b = tape.leaf(Tensor::new(vec![1, p, d], f_th.to_vec()));
        let (z_va, _) = self.encode_transition(&mut tape, a, b);
        LatentTokens(nearest_tokens(
            tape.value(z_va).data(),
            self.cfg.d_lat,
            self.params.value(self.action_codebook.embeddings).data(),
            self.action_codebook.k,
        ))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let hyper = VdVaeCheckpointHyper { cfg: self.cfg.clone() };
        checkpoint::save_params(path, "vdvae", &hyper, &self.params)
    }

    pub fn load(path: &std::path::Path, act_vae: &ActVae) -> Result<VdVae> {
        let (hyper, loaded): (VdVaeCheckpointHyper, ParamSet) =
            checkpoint::load_params(path, "vdvae")?;
        let mut model = VdVae::new(hyper.cfg, act_vae, &mut rngs::seeded(0))?;
        checkpoint::adopt_values(&mut model.params, &loaded)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct VdVaeCheckpointHyper {
    cfg: VdVaeConfig,
}

// ── sigmoid pairwise contrastive loss ───────────────────────────────────

/// Pairwise sigmoid contrastive loss over pooled latents.
///
/// Row i of the target side is the trajectory latent when `labeled[i]`,
/// otherwise a detached copy of the anchor itself (self-supervised rows get
/// their learning signal from the negatives). For each anchor the positive is
/// the same-index target and the negatives are all other target rows:
/// `softplus(-(s_p - b)/tau) + sum_j softplus((s_nj - b)/tau)`, averaged over
/// anchors.
pub fn siglip_contrastive(
    tape: &mut Tape,
    ps: &ParamSet,
    anchors: Var,
    targets: Var,
    labeled: &[bool],
    log_tau: ParamId,
    bias: ParamId,
) -> Result<Var> {
    let s = tape.shape(anchors).to_vec();
    if s.len() != 2 || tape.shape(targets) != s.as_slice() {
        return Err(CoreError::Shape(format!(
            "contrastive expects matching [B, d] inputs, got {s:?} vs {:?}",
            tape.shape(targets)
        )));
    }
    let b = s[0];
    if b == 0 || labeled.len() != b {
        return Err(CoreError::Shape("contrastive selector length mismatch".into()));
    }
    let d = s[1];
    for (name, v) in [("anchor", anchors), ("target", targets)] {
        for (r, row) in tape.value(v).data().chunks(d).enumerate() {
            let sq: f64 = row.iter().map(|x| x * x).sum();
            if sq == 0.0 {
                return Err(CoreError::NonFinite(format!("zero-norm {name} row {r}")));
            }
        }
    }

    let detached = tape.stop_gradient(anchors);
    let target_rows = tape.select_rows(targets, detached, labeled);
    let a_hat = tape.normalize_rows(anchors);
    let t_hat = tape.normalize_rows(target_rows);
    let sims = tape.matmul_nt(a_hat, t_hat);

    let bias_v = ps.bind(tape, SET, bias);
    let log_tau_v = ps.bind(tape, SET, log_tau);
    let neg_log_tau = tape.scale(log_tau_v, -1.0);
    let inv_tau = tape.exp(neg_log_tau);
    let shifted = tape.sub_scalar_var(sims, bias_v);
    let z = tape.mul_scalar_var(shifted, inv_tau);

    let z_diag = tape.diag(z);
    let neg_z_diag = tape.scale(z_diag, -1.0);
    let pos_terms = tape.softplus(neg_z_diag);
    let neg_terms = tape.softplus(z);
    let diag_neg_terms = tape.softplus(z_diag);

    let pos_sum = tape.sum_all(pos_terms);
    let all_neg = tape.sum_all(neg_terms);
    let diag_sum = tape.sum_all(diag_neg_terms);
    let off_diag = tape.sub(all_neg, diag_sum);
    let total = tape.add(pos_sum, off_diag);
    Ok(tape.scale(total, 1.0 / b as f64))
}

pub struct VdLosses {
    pub total: Var,
    pub rec: Var,
    pub vq: Var,
    pub con: Var,
    pub reg: Var,
    pub action_tokens: LatentTokens,
}

/// Assemble the full dynamics objective for one batch of transitions.
///
/// `contrastive_targets` are pooled trajectory latents per row (ignored
/// where the row is unlabeled); they enter the graph as constants so the
/// trajectory model is never updated from here.
#[allow(clippy::too_many_arguments)]
pub fn vd_loss(
    model: &mut VdVae,
    tape: &mut Tape,
    f_t: Var,
    f_th: Var,
    contrastive_targets: &Tensor,
    labeled: &[bool],
    with_contrastive: bool,
) -> Result<VdLosses> {
    if !model.action_codebook.frozen {
        return Err(CoreError::Config("action codebook must be frozen".into()));
    }
    let (z_va, z_vi) = model.encode_transition(tape, f_t, f_th);

    let qa = vector_quantize(tape, &model.params, SET, z_va, &mut model.action_codebook)?;
    let qi = vector_quantize(tape, &model.params, SET, z_vi, &mut model.env_codebook)?;

    let recon = model.decode_transition(tape, f_t, qa.z_q, qi.z_q);
    let diff = tape.sub(f_th, recon);
    let sq = tape.mul(diff, diff);
    let rec = tape.mean_all(sq);

    // Frozen action book: commitment only. Env book: commitment + codebook.
    let env_full = tape.add(qi.commit, qi.codebook_loss);
    let vq = tape.add(qa.commit, env_full);

    let abs_vi = tape.abs(z_vi);
    let reg = tape.mean_all(abs_vi);

    let con = if with_contrastive {
        let pooled = tape.mean_mid(z_va);
        let targets = tape.leaf(contrastive_targets.clone());
        siglip_contrastive(tape, &model.params, pooled, targets, labeled, model.log_tau, model.bias)?
    } else {
        tape.leaf(Tensor::scalar(0.0))
    };

    let vq_term = tape.scale(vq, model.cfg.lambda_vq);
    let con_term = tape.scale(con, model.cfg.lambda_con);
    let reg_term = tape.scale(reg, model.cfg.lambda_reg);
    let mut total = tape.add(rec, vq_term);
    total = tape.add(total, con_term);
    total = tape.add(total, reg_term);
    if !tape.value(total).is_finite() {
        return Err(CoreError::NonFinite("dynamics loss".into()));
    }
    Ok(VdLosses { total, rec, vq, con, reg, action_tokens: qa.tokens })
}

/// Pooled trajectory latents for the robot rows of a batch (zeros elsewhere),
/// used as contrastive targets.
pub fn contrastive_targets_for(act_vae: &ActVae, batch: &Batch) -> Tensor {
    let b = batch.rows();
    let d = act_vae.cfg.d_lat;
    let mut out = vec![0.0; b * d];
    if let Some(chunks) = &batch.action_chunks {
        let hw = act_vae.cfg.chunk_len * act_vae.cfg.action_dim;
        for (row, &robot) in batch.domain_mask.iter().enumerate() {
            if robot {
                let chunk = &chunks.data()[row * hw..(row + 1) * hw];
                let pooled = act_vae.pooled_latent(chunk);
                out[row * d..(row + 1) * d].copy_from_slice(&pooled);
            }
        }
    }
    Tensor::new(vec![b, d], out)
}

#[derive(Debug, Clone, Default)]
pub struct VdCurve {
    pub total: Vec<f64>,
    pub rec: Vec<f64>,
    pub vq: Vec<f64>,
    pub con: Vec<f64>,
    pub reg: Vec<f64>,
}

/// Algorithm: sample mixed robot/human windows; robot rows take trajectory
/// latents as contrastive targets, human rows self-anchor. The action
/// codebook is bit-identical before and after.
pub fn train_vdvae(
    reader: &DatasetReader,
    act_vae: &ActVae,
    cfg: VdVaeConfig,
    tc: &VdVaeTrainConfig,
    with_contrastive: bool,
) -> Result<(VdVae, VdCurve)> {
    let mut rng = rngs::derived(tc.seed, 200);
    let mut model = VdVae::new(cfg, act_vae, &mut rng)?;
    let frozen_before = model.params.value(model.action_codebook.embeddings).data().to_vec();
    let mut seed_rng = rngs::derived(tc.seed, 201);

    let mut adam = Adam::new(&model.params);
    let sched = LrSchedule::new(tc.lr, tc.warmup, tc.steps);
    let mut curve = VdCurve::default();

    for step in 0..tc.steps {
        let batch = sample_batch(reader, tc.mix_ratio, tc.batch, seed_rng.gen())?;
        let targets = contrastive_targets_for(act_vae, &batch);
        let mut tape = Tape::new();
        let f_t = tape.leaf(batch.features_t.clone());
        let f_th = tape.leaf(batch.features_th.clone());
        let losses = vd_loss(
            &mut model,
            &mut tape,
            f_t,
            f_th,
            &targets,
            &batch.domain_mask,
            with_contrastive,
        )?;
        let total = tape.value(losses.total).item();
        if !total.is_finite() {
            return Err(CoreError::Diverged { step, what: format!("loss {total}") });
        }
        curve.total.push(total);
        curve.rec.push(tape.value(losses.rec).item());
        curve.vq.push(tape.value(losses.vq).item());
        curve.con.push(tape.value(losses.con).item());
        curve.reg.push(tape.value(losses.reg).item());

        let grads = tape.backward(losses.total);
        model.params.accumulate_grads(&tape, &grads, SET);
        model.params.clip_grad_norm(1.0);
        adam.step(&mut model.params, sched.at(step));
    }

    let frozen_after = model.params.value(model.action_codebook.embeddings).data();
    if frozen_after != frozen_before.as_slice() {
        return Err(CoreError::Config(
            "frozen action codebook moved during dynamics training".into(),
        ));
    }
    Ok((model, curve))
}

/// Discrete action tokens for every window (t, t+H) of an episode's feature
/// track. Errors if the episode is shorter than H+1 frames.
pub fn pseudo_label(
    model: &VdVae,
    features: &[f64],
    t_len: usize,
    chunk_len: usize,
) -> Result<Vec<LatentTokens>> {
    let pd = model.cfg.patches * model.cfg.feature_dim;
    if t_len < chunk_len + 1 {
        return Err(CoreError::Shape(format!(
            "episode length {t_len} too short for window {chunk_len}"
        )));
    }
    if features.len() != t_len * pd {
        return Err(CoreError::Shape("feature buffer does not match episode length".into()));
    }
    let windows = t_len - chunk_len;
    let out: Vec<LatentTokens> = (0..windows)
        .into_par_iter()
        .map(|t| {
            model.tokens_for_transition(
                &features[t * pd..(t + 1) * pd],
                &features[(t + chunk_len) * pd..(t + chunk_len + 1) * pd],
            )
        })
        .collect();
    Ok(out)
}
