//! Rectified-flow action expert: a shallow denoising transformer over the
//! action chunk plus one time token, cross-attending to multi-scale context
//! extracted from the token policy's hidden layers. During joint training the
//! context is stop-gradient insulated so the backbone cannot be disturbed;
//! Knowledge-Matching fine-tuning lifts the insulation and anchors the
//! backbone's token distributions to a frozen reference with a KL penalty.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actvae::ActVae;
use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint;
use crate::data::{sample_batch, DatasetReader};
use crate::error::{CoreError, Result};
use crate::nn::{Adam, Block, LayerNorm, Linear, LrSchedule, ParamSet, PositionEmbedding};
use crate::ntp::{sequences_for_batch, NtpModel};
use crate::rngs;

pub const SET_BACKBONE: usize = 0;
pub const SET_EXPERT: usize = 1;
pub const SET_REFERENCE: usize = 2;

// ── flow primitives ─────────────────────────────────────────────────────

/// tau * a + (1 - tau) * eps, exactly.
pub fn flow_interpolate(a: &Tensor, eps: &Tensor, tau: f64) -> Tensor {
    assert_eq!(a.shape(), eps.shape(), "flow_interpolate: shape mismatch");
    let data = a
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&av, &ev)| tau * av + (1.0 - tau) * ev)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// The straight-path velocity target a - eps.
pub fn flow_target(a: &Tensor, eps: &Tensor) -> Tensor {
    assert_eq!(a.shape(), eps.shape(), "flow_target: shape mismatch");
    let data = a.data().iter().zip(eps.data()).map(|(&av, &ev)| av - ev).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Draw the flow time: u ~ Beta(1.5, 1) via inverse transform, t = s(1 - u),
/// support (0, s).
pub fn sample_flow_time<R: Rng>(s: f64, rng: &mut R) -> Result<f64> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(CoreError::Config(format!("flow time scale {s} outside (0, 1]")));
    }
    loop {
        let v = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u = v.powf(2.0 / 3.0);
        let t = s * (1.0 - u);
        if t > 0.0 && t < s {
            return Ok(t);
        }
    }
}

// ── expert ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfConfig {
    pub chunk_len: usize,
    pub action_dim: usize,
    pub width: usize,
    pub heads: usize,
    /// Denoiser depth; kept shallower than the backbone.
    pub depth: usize,
    /// 1-indexed backbone layers whose hidden states form the context.
    pub layer_set: Vec<usize>,
    pub backbone_width: usize,
    pub time_features: usize,
    pub euler_steps: usize,
    /// Support scale for flow-time sampling.
    pub beta_s: f64,
}

impl RfConfig {
    pub fn desk(chunk_len: usize, action_dim: usize, backbone_layers: usize) -> RfConfig {
        assert!(backbone_layers >= 6, "desk layer set expects a 6-layer backbone");
        RfConfig {
            chunk_len,
            action_dim,
            width: 64,
            heads: 4,
            depth: 4,
            layer_set: vec![1, 2, 3, 4, 6],
            backbone_width: 128,
            time_features: 16,
            euler_steps: 10,
            beta_s: 0.999,
        }
    }

    /// Ablation: restrict context to the shallow layers only.
    pub fn low_level_only(mut self) -> RfConfig {
        self.layer_set = vec![1, 2];
        self
    }
}

pub struct RfExpert {
    pub cfg: RfConfig,
    pub params: ParamSet,
    act_in: Linear,
    time_in: Linear,
    ctx_proj: Linear,
    pos: PositionEmbedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
}

impl RfExpert {
    pub fn new(cfg: RfConfig, rng: &mut ChaCha8Rng) -> RfExpert {
        let mut ps = ParamSet::new();
        let w = cfg.width;
        let act_in = Linear::new(&mut ps, "act_in", cfg.action_dim, w, rng);
        let time_in = Linear::new(&mut ps, "time_in", cfg.time_features, w, rng);
        let ctx_proj = Linear::new(&mut ps, "ctx_proj", cfg.backbone_width, w, rng);
        let pos = PositionEmbedding::new(&mut ps, "pos", cfg.chunk_len + 1, w, rng);
        let blocks = (0..cfg.depth)
            .map(|i| Block::with_cross(&mut ps, &format!("block{i}"), w, cfg.heads, rng))
            .collect();
        let ln_f = LayerNorm::new(&mut ps, "ln_f", w);
        let out = Linear::new(&mut ps, "out", w, cfg.action_dim, rng);
        RfExpert { cfg, params: ps, act_in, time_in, ctx_proj, pos, blocks, ln_f, out }
    }

    fn time_features_for(&self, taus: &[f64]) -> Tensor {
        let f = self.cfg.time_features;
        let mut data = Vec::with_capacity(taus.len() * f);
        for &tau in taus {
            for i in 0..f / 2 {
                let omega = (1000.0f64).powf(i as f64 / (f / 2) as f64);
                data.push((tau * omega).sin());
                data.push((tau * omega).cos());
            }
        }
        Tensor::new(vec![taus.len(), 1, f], data)
    }

    /// Predict the velocity field for noised chunks `[B, H, Da]` at per-row
    /// times `taus`, with optional cross-attention context.
    pub fn forward(
        &self,
        tape: &mut Tape,
        set: usize,
        a_tau: Var,
        taus: &[f64],
        context: Option<Var>,
    ) -> Var {
        let s = tape.shape(a_tau).to_vec();
        assert!(
            s.len() == 3 && s[1] == self.cfg.chunk_len && s[2] == self.cfg.action_dim,
            "expected [B, {}, {}], got {s:?}",
            self.cfg.chunk_len,
            self.cfg.action_dim
        );
        assert_eq!(s[0], taus.len(), "one time per batch row");

        let toks = self.act_in.forward(tape, &self.params, set, a_tau);
        let tf = tape.leaf(self.time_features_for(taus));
        let time_tok = self.time_in.forward(tape, &self.params, set, tf);
        let mut seq = tape.concat_mid(&[time_tok, toks]);
        seq = self.pos.forward(tape, &self.params, set, seq);
        for block in &self.blocks {
            seq = block.forward(tape, &self.params, set, seq, false, context);
        }
        let act = tape.slice_mid(seq, 1, self.cfg.chunk_len);
        let act = self.ln_f.forward(tape, &self.params, set, act);
        self.out.forward(tape, &self.params, set, act)
    }

    /// Project backbone hidden states onto expert width. `insulated` wraps
    /// the hidden states in stop-gradient before the projection, severing
    /// every path into the backbone while leaving the projection trainable.
    pub fn context_from_hidden(
        &self,
        tape: &mut Tape,
        set: usize,
        hidden: &[Var],
        prefix_len: usize,
        insulated: bool,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.cfg.layer_set.len());
        for &layer in &self.cfg.layer_set {
            if layer == 0 || layer > hidden.len() {
                return Err(CoreError::Config(format!(
                    "context layer {layer} outside backbone depth {}",
                    hidden.len()
                )));
            }
            parts.push(tape.slice_mid(hidden[layer - 1], 0, prefix_len));
        }
        let mut ctx = tape.concat_mid(&parts);
        if insulated {
            ctx = tape.stop_gradient(ctx);
        }
        Ok(self.ctx_proj.forward(tape, &self.params, set, ctx))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save_params(path, "rf", &self.cfg, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<RfExpert> {
        let (cfg, loaded): (RfConfig, ParamSet) = checkpoint::load_params(path, "rf")?;
        let mut model = RfExpert::new(cfg, &mut rngs::seeded(0));
        checkpoint::adopt_values(&mut model.params, &loaded)?;
        Ok(model)
    }
}

/// Backbone context for a batch of observations: a prefix-only forward over
/// `[features][instruction]`, hidden states gathered per `layer_set`.
pub fn extract_context(
    tape: &mut Tape,
    expert: &RfExpert,
    backbone: &NtpModel,
    features: Var,
    instruction_ids: &[u32],
    insulated: bool,
) -> Result<Var> {
    let prefix: Vec<Vec<usize>> = instruction_ids
        .iter()
        .map(|&id| backbone.cfg.vocab.instruction_tokens(id).to_vec())
        .collect();
    let fwd = backbone.forward(tape, SET_BACKBONE, features, &prefix);
    let prefix_len = backbone.cfg.feature_tokens + 3;
    expert.context_from_hidden(tape, SET_EXPERT, &fwd.hidden, prefix_len, insulated)
}

/// Velocity-matching loss given precomputed noise draws:
/// mean ||(a - eps) - f(a_tau, tau, ctx)||^2.
pub fn rf_loss_raw(
    tape: &mut Tape,
    expert: &RfExpert,
    set: usize,
    chunks: &Tensor,
    eps: &Tensor,
    taus: &[f64],
    context: Option<Var>,
) -> Var {
    let b = chunks.shape()[0];
    let mut a_tau_data = Vec::with_capacity(chunks.numel());
    let stride = expert.cfg.chunk_len * expert.cfg.action_dim;
    for row in 0..b {
        let a = &chunks.data()[row * stride..(row + 1) * stride];
        let e = &eps.data()[row * stride..(row + 1) * stride];
        let tau = taus[row];
        a_tau_data.extend(a.iter().zip(e).map(|(&av, &ev)| tau * av + (1.0 - tau) * ev));
    }
    let a_tau = tape.leaf(Tensor::new(chunks.shape().to_vec(), a_tau_data));
    let target = tape.leaf(flow_target(chunks, eps));
    let pred = expert.forward(tape, set, a_tau, taus, context);
    let diff = tape.sub(target, pred);
    let sq = tape.mul(diff, diff);
    tape.mean_all(sq)
}

/// Full loss against a backbone: context is insulated unless lifted for
/// Knowledge-Matching.
#[allow(clippy::too_many_arguments)]
pub fn rf_loss(
    tape: &mut Tape,
    expert: &RfExpert,
    backbone: &NtpModel,
    features: &Tensor,
    instruction_ids: &[u32],
    chunks: &Tensor,
    rng: &mut ChaCha8Rng,
    insulated: bool,
) -> Result<Var> {
    let b = chunks.shape()[0];
    let eps = Tensor::new(chunks.shape().to_vec(), rngs::normal_vec(rng, chunks.numel(), 1.0));
    let taus: Vec<f64> = (0..b)
        .map(|_| sample_flow_time(expert.cfg.beta_s, rng))
        .collect::<Result<_>>()?;
    let f = tape.leaf(features.clone());
    let ctx = extract_context(tape, expert, backbone, f, instruction_ids, insulated)?;
    Ok(rf_loss_raw(tape, expert, SET_EXPERT, chunks, &eps, &taus, Some(ctx)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for RfTrainConfig {
    fn default() -> Self {
        RfTrainConfig { steps: 2000, batch: 12, lr: 6e-4, warmup: 200, seed: 0 }
    }
}

/// Train the expert on robot chunks with the backbone fully insulated; the
/// backbone parameters are bit-identical afterwards.
pub fn train_rf(
    reader: &DatasetReader,
    backbone: &NtpModel,
    cfg: RfConfig,
    tc: &RfTrainConfig,
) -> Result<(RfExpert, Vec<f64>)> {
    let mut rng = rngs::derived(tc.seed, 400);
    let mut expert = RfExpert::new(cfg, &mut rng);
    let mut seed_rng = rngs::derived(tc.seed, 401);
    let mut adam = Adam::new(&expert.params);
    let sched = LrSchedule::new(tc.lr, tc.warmup, tc.steps);
    let mut curve = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let batch = sample_batch(reader, 1.0, tc.batch, seed_rng.gen())?;
        let chunks = batch.action_chunks.as_ref().expect("robot batch");
        let mut tape = Tape::new();
        let loss = rf_loss(
            &mut tape,
            &expert,
            backbone,
            &batch.features_t,
            &batch.instruction_ids,
            chunks,
            &mut rng,
            true,
        )?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(CoreError::Diverged { step, what: format!("loss {value}") });
        }
        curve.push(value);
        let grads = tape.backward(loss);
        expert.params.accumulate_grads(&tape, &grads, SET_EXPERT);
        expert.params.clip_grad_norm(1.0);
        adam.step(&mut expert.params, sched.at(step));
    }
    Ok((expert, curve))
}

/// Euler integration of the learned field from pure noise. The context is
/// computed once (one backbone pass) and reused across the integration; the
/// returned pass count is the number of expert evaluations.
pub fn sample_actions(
    expert: &RfExpert,
    backbone: &NtpModel,
    features: &Tensor,
    instruction_id: u32,
    steps: usize,
    seed: u64,
) -> Result<(Tensor, usize)> {
    assert!(steps >= 1, "need at least one integration step");
    let feats = Tensor::new(
        vec![1, backbone.cfg.patches, backbone.cfg.feature_dim],
        features.data().to_vec(),
    );
    let ctx_value = {
        let mut tape = Tape::new();
        let f = tape.leaf(feats);
        let ctx = extract_context(&mut tape, expert, backbone, f, &[instruction_id], true)?;
        tape.value(ctx).clone()
    };
    let chunk = sample_actions_raw(expert, Some(&ctx_value), steps, seed)?;
    Ok((chunk, steps))
}

/// Integration core; `context` rows were produced by one backbone pass.
pub fn sample_actions_raw(
    expert: &RfExpert,
    context: Option<&Tensor>,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let (h, da) = (expert.cfg.chunk_len, expert.cfg.action_dim);
    let mut rng = rngs::derived(seed, 402);
    let mut a = rngs::normal_vec(&mut rng, h * da, 1.0);
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let tau = k as f64 * dt;
        let mut tape = Tape::new();
        let a_var = tape.leaf(Tensor::new(vec![1, h, da], a.clone()));
        let ctx = context.map(|c| tape.leaf(c.clone()));
        let v = expert.forward(&mut tape, SET_EXPERT, a_var, &[tau], ctx);
        let vv = tape.value(v);
        if !vv.is_finite() {
            return Err(CoreError::NonFinite("velocity field".into()));
        }
        for (ai, &vi) in a.iter_mut().zip(vv.data()) {
            *ai += dt * vi;
        }
    }
    Ok(Tensor::new(vec![h, da], a))
}

// ── knowledge matching ──────────────────────────────────────────────────

/// Which next-token distributions the KL anchor covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlSpan {
    SubtasksAndActions,
    SubtasksOnly,
}

pub struct KmLossOut {
    pub total: Var,
    pub kl: Var,
    pub rf: Var,
}

/// alpha * KL(reference || policy) over discrete token positions, plus the
/// velocity loss with insulation lifted so the backbone adapts under the
/// anchor.
#[allow(clippy::too_many_arguments)]
pub fn km_loss(
    tape: &mut Tape,
    policy: &NtpModel,
    reference: &NtpModel,
    expert: &RfExpert,
    features: &Tensor,
    instruction_ids: &[u32],
    seqs: &[Vec<usize>],
    chunks: &Tensor,
    alpha: f64,
    span: KlSpan,
    rng: &mut ChaCha8Rng,
) -> Result<KmLossOut> {
    if policy.cfg.vocab != reference.cfg.vocab {
        return Err(CoreError::Config(
            "policy and reference vocabularies do not match".into(),
        ));
    }
    let f = tape.leaf(features.clone());
    let fwd_policy = policy.forward(tape, SET_BACKBONE, f, seqs);
    let fwd_ref = reference.forward(tape, SET_REFERENCE, f, seqs);
    let ref_logits = tape.stop_gradient(fwd_ref.logits);

    // KL rows: positions predicting a subtask (and optionally action) token.
    let vocab = &policy.cfg.vocab;
    let s_total = policy.cfg.feature_tokens + seqs[0].len();
    let mut rows = vec![false; seqs.len() * s_total];
    for (b, seq) in seqs.iter().enumerate() {
        for (j, &tok) in seq.iter().enumerate() {
            let is_subtask = vocab.decode_subtask(tok).is_some();
            let is_action = vocab.decode_action(tok).is_some();
            let include = match span {
                KlSpan::SubtasksAndActions => is_subtask || is_action,
                KlSpan::SubtasksOnly => is_subtask,
            };
            if include {
                rows[b * s_total + policy.cfg.feature_tokens + j - 1] = true;
            }
        }
    }
    let v = vocab.size();
    let flat_ref = tape.reshape(ref_logits, vec![seqs.len() * s_total, v]);
    let flat_pol = tape.reshape(fwd_policy.logits, vec![seqs.len() * s_total, v]);
    let kl = tape.kl_div(flat_ref, flat_pol, &rows);

    // Velocity loss with the insulation lifted: context gradients reach the
    // policy backbone. The prefix hidden states of the full forward equal a
    // prefix-only pass under the causal mask, so they are reused directly.
    let prefix_len = policy.cfg.feature_tokens + 3;
    let ctx = expert.context_from_hidden(tape, SET_EXPERT, &fwd_policy.hidden, prefix_len, false)?;
    let b = chunks.shape()[0];
    let eps = Tensor::new(chunks.shape().to_vec(), rngs::normal_vec(rng, chunks.numel(), 1.0));
    let taus: Vec<f64> = (0..b)
        .map(|_| sample_flow_time(expert.cfg.beta_s, rng))
        .collect::<Result<_>>()?;
    let rf = rf_loss_raw(tape, expert, SET_EXPERT, chunks, &eps, &taus, Some(ctx));

    let kl_term = tape.scale(kl, alpha);
    let total = tape.add(kl_term, rf);
    Ok(KmLossOut { total, kl, rf })
}

#[derive(Debug, Clone, Default)]
pub struct KmCurve {
    pub kl: Vec<f64>,
    pub rf: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for KmTrainConfig {
    fn default() -> Self {
        KmTrainConfig { steps: 500, batch: 8, lr: 3e-4, warmup: 50, seed: 0, alpha: 0.1 }
    }
}

/// Fine-tune (policy backbone + expert) on a new task set under the KL
/// anchor. The reference stays bit-identical: it is never given an optimizer.
pub fn finetune_km(
    reader: &DatasetReader,
    policy: &mut NtpModel,
    reference: &NtpModel,
    expert: &mut RfExpert,
    act_vae: &ActVae,
    span: KlSpan,
    tc: &KmTrainConfig,
) -> Result<KmCurve> {
    let mut rng = rngs::derived(tc.seed, 500);
    let mut seed_rng = rngs::derived(tc.seed, 501);
    let mut adam_b = Adam::new(&policy.params);
    let mut adam_e = Adam::new(&expert.params);
    let sched = LrSchedule::new(tc.lr, tc.warmup, tc.steps);
    let mut curve = KmCurve::default();

    for step in 0..tc.steps {
        let batch = sample_batch(reader, 1.0, tc.batch, seed_rng.gen())?;
        let chunks = batch.action_chunks.clone().expect("robot batch");
        let seqs = sequences_for_batch(policy, act_vae, None, reader, &batch)?;
        let mut tape = Tape::new();
        let out = km_loss(
            &mut tape,
            policy,
            reference,
            expert,
            &batch.features_t,
            &batch.instruction_ids,
            &seqs,
            &chunks,
            tc.alpha,
            span,
            &mut rng,
        )?;
        let total = tape.value(out.total).item();
        if !total.is_finite() {
            return Err(CoreError::Diverged { step, what: format!("loss {total}") });
        }
        curve.kl.push(tape.value(out.kl).item());
        curve.rf.push(tape.value(out.rf).item());
        let grads = tape.backward(out.total);
        policy.params.accumulate_grads(&tape, &grads, SET_BACKBONE);
        expert.params.accumulate_grads(&tape, &grads, SET_EXPERT);
        policy.params.clip_grad_norm(1.0);
        expert.params.clip_grad_norm(1.0);
        let lr = sched.at(step);
        adam_b.step(&mut policy.params, lr);
        adam_e.step(&mut expert.params, lr);
    }
    Ok(curve)
}

/// Mean KL(reference || policy) over evaluation batches, for reporting.
pub fn kl_to_reference(
    policy: &NtpModel,
    reference: &NtpModel,
    act_vae: &ActVae,
    reader: &DatasetReader,
    batches: usize,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut seed_rng = rngs::seeded(seed);
    let mut total = 0.0;
    for _ in 0..batches {
        let b = sample_batch(reader, 1.0, batch, seed_rng.gen())?;
        let seqs = sequences_for_batch(policy, act_vae, None, reader, &b)?;
        let mut tape = Tape::new();
        let f = tape.leaf(b.features_t.clone());
        let fwd_p = policy.forward(&mut tape, SET_BACKBONE, f, &seqs);
        let fwd_r = reference.forward(&mut tape, SET_REFERENCE, f, &seqs);
        let s_total = policy.cfg.feature_tokens + seqs[0].len();
        let vocab = &policy.cfg.vocab;
        let mut rows = vec![false; seqs.len() * s_total];
        for (bi, seq) in seqs.iter().enumerate() {
            for (j, &tok) in seq.iter().enumerate() {
                if vocab.decode_subtask(tok).is_some() || vocab.decode_action(tok).is_some() {
                    rows[bi * s_total + policy.cfg.feature_tokens + j - 1] = true;
                }
            }
        }
        let v = vocab.size();
        let fr = tape.reshape(fwd_r.logits, vec![seqs.len() * s_total, v]);
        let fp = tape.reshape(fwd_p.logits, vec![seqs.len() * s_total, v]);
        let kl = tape.kl_div(fr, fp, &rows);
        total += tape.value(kl).item();
    }
    Ok(total / batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::ntp::{build_sequence, NtpConfig, TokenVocab};
    use crate::quantize::LatentTokens;

    fn tiny_backbone() -> NtpModel {
        let vocab = TokenVocab {
            num_task_kinds: 3,
            num_object_types: 6,
            num_zones: 4,
            num_subtasks: 5,
            k: 8,
        };
        let cfg = NtpConfig {
            layers: 3,
            width: 16,
            heads: 2,
            feature_tokens: 2,
            patches: 4,
            feature_dim: 3,
            nq: 2,
            vocab,
        };
        NtpModel::new(cfg, &mut rngs::seeded(7))
    }

    fn tiny_expert(layer_set: Vec<usize>) -> RfExpert {
        let cfg = RfConfig {
            chunk_len: 4,
            action_dim: 2,
            width: 8,
            heads: 2,
            depth: 2,
            layer_set,
            backbone_width: 16,
            time_features: 4,
            euler_steps: 4,
            beta_s: 0.999,
        };
        RfExpert::new(cfg, &mut rngs::seeded(9))
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let mut rng = rngs::seeded(3);
        let a = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let e = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        assert_eq!(flow_interpolate(&a, &e, 1.0).data(), a.data());
        assert_eq!(flow_interpolate(&a, &e, 0.0).data(), e.data());
        let v = flow_target(&a, &a);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flow_sample_invariant_holds_exactly() {
        let mut rng = rngs::seeded(5);
        for _ in 0..50 {
            let a = Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let e = Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let tau: f64 = rng.gen();
            let at = flow_interpolate(&a, &e, tau);
            for i in 0..4 {
                let want = tau * a.data()[i] + (1.0 - tau) * e.data()[i];
                assert_eq!(at.data()[i].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn flow_time_support_and_mean() {
        let mut rng = rngs::seeded(7);
        let s = 0.999;
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let t = sample_flow_time(s, &mut rng).unwrap();
            assert!(t > 0.0 && t < s, "draw {t} outside (0, {s})");
            sum += t;
        }
        let mean = sum / n as f64;
        let want = s * (1.0 - 1.5 / 2.5);
        assert!((mean - want).abs() < 0.002, "mean {mean} vs {want}");
        assert!(sample_flow_time(0.0, &mut rng).is_err());
        assert!(sample_flow_time(1.5, &mut rng).is_err());
    }

    #[test]
    fn flow_time_is_reproducible() {
        let draw = || {
            let mut rng = rngs::seeded(11);
            (0..5).map(|_| sample_flow_time(0.9, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn expert_forced_output_matches_loss_limits() {
        // Zeroed output layer -> prediction 0 -> loss = mean ||a - eps||^2.
        let mut expert = tiny_expert(vec![1]);
        for id in [expert.out.w, expert.out.b] {
            for v in expert.params.value_mut(id).data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        let mut rng = rngs::seeded(13);
        let chunks = Tensor::new(vec![2, 4, 2], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let eps = Tensor::new(vec![2, 4, 2], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let taus = vec![0.3, 0.7];
        let mut tape = Tape::new();
        let loss = rf_loss_raw(&mut tape, &expert, SET_EXPERT, &chunks, &eps, &taus, None);
        let want: f64 = chunks
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&a, &e)| (a - e) * (a - e))
            .sum::<f64>()
            / 16.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn rf_loss_grad_check() {
        let expert = tiny_expert(vec![1]);
        let mut rng = rngs::seeded(17);
        let eps_vals: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![1, 4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        // Probe the noised chunk input directly.
        let rel = grad_check(
            |tape, a_tau| {
                let target = tape.leaf(Tensor::new(vec![1, 4, 2], eps_vals.clone()));
                let pred = expert.forward(tape, SET_EXPERT, a_tau, &[0.4], None);
                let diff = tape.sub(target, pred);
                let sq = tape.mul(diff, diff);
                tape.mean_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-4, "rf grad rel error {rel}");
    }

    #[test]
    fn insulated_training_step_leaves_backbone_bit_identical() {
        let backbone = tiny_backbone();
        let before: Vec<Vec<f64>> =
            backbone.params.iter().map(|(_, e)| e.value.data().to_vec()).collect();
        let expert = tiny_expert(vec![1, 3]);
        let mut rng = rngs::seeded(19);
        let features = Tensor::new(vec![2, 4, 3], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let chunks = Tensor::new(vec![2, 4, 2], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let mut tape = Tape::new();
        let loss =
            rf_loss(&mut tape, &expert, &backbone, &features, &[0, 5], &chunks, &mut rng, true)
                .unwrap();
        let grads = tape.backward(loss);

        // Full gradient w.r.t. every backbone parameter is identically zero.
        let bb_grads = tape.param_grads(&grads, SET_BACKBONE);
        for (_, g) in &bb_grads {
            assert!(g.iter().all(|&v| v == 0.0), "backbone gradient leaked: {g:?}");
        }
        // And an optimizer step cannot move it.
        let mut ps = backbone.params.clone();
        ps.accumulate_grads(&tape, &grads, SET_BACKBONE);
        let mut adam = Adam::new(&ps);
        adam.step(&mut ps, 1e-2);
        for ((_, e), b) in ps.iter().zip(&before) {
            assert_eq!(e.value.data(), &b[..]);
        }
    }

    #[test]
    fn lifting_insulation_reaches_the_backbone() {
        let backbone = tiny_backbone();
        let expert = tiny_expert(vec![1, 3]);
        let mut rng = rngs::seeded(23);
        let features = Tensor::new(vec![2, 4, 3], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let chunks = Tensor::new(vec![2, 4, 2], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut tape = Tape::new();
        let loss =
            rf_loss(&mut tape, &expert, &backbone, &features, &[0, 5], &chunks, &mut rng, false)
                .unwrap();
        let grads = tape.backward(loss);
        let bb = tape.param_grads(&grads, SET_BACKBONE);
        let nonzero = bb.iter().any(|(_, g)| g.iter().any(|&v| v != 0.0));
        assert!(nonzero, "lifted insulation must propagate gradients into the backbone");
    }

    #[test]
    fn context_layer_choice_matters_and_is_validated() {
        let backbone = tiny_backbone();
        let expert_lo = tiny_expert(vec![1]);
        let expert_hi = {
            let mut e = tiny_expert(vec![3]);
            // Same weights as expert_lo so only the layer choice differs.
            for (id, entry) in expert_lo.params.iter() {
                e.params.entry_mut(crate::nn::ParamId(id.0)).value = entry.value.clone();
            }
            e
        };
        let mut rng = rngs::seeded(29);
        let features = Tensor::new(vec![1, 4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let ctx = |expert: &RfExpert| {
            let mut tape = Tape::new();
            let f = tape.leaf(features.clone());
            let c = extract_context(&mut tape, expert, &backbone, f, &[2], true).unwrap();
            (tape.shape(c).to_vec(), tape.value(c).data().to_vec())
        };
        let (shape_lo, lo) = ctx(&expert_lo);
        let (shape_hi, hi) = ctx(&expert_hi);
        assert_eq!(shape_lo, shape_hi);
        // Context token count = |layer_set| * prefix length.
        assert_eq!(shape_lo[1], 1 * (2 + 3));
        assert_ne!(lo, hi, "different layers must give different contexts");

        let bad = tiny_expert(vec![9]);
        let mut tape = Tape::new();
        let f = tape.leaf(features.clone());
        assert!(extract_context(&mut tape, &bad, &backbone, f, &[2], true).is_err());
    }

    #[test]
    fn single_euler_step_is_one_field_evaluation_from_noise() {
        let expert = tiny_expert(vec![1]);
        let (chunk, passes) = {
            let c = sample_actions_raw(&expert, None, 1, 77).unwrap();
            (c, 1)
        };
        // Recompute manually: a = eps + f(eps, 0).
        let mut rng = rngs::derived(77, 402);
        let eps = rngs::normal_vec(&mut rng, 8, 1.0);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 4, 2], eps.clone()));
        let v = expert.forward(&mut tape, SET_EXPERT, a, &[0.0], None);
        let want: Vec<f64> =
            eps.iter().zip(tape.value(v).data()).map(|(&e, &vi)| e + vi).collect();
        assert_eq!(chunk.data(), &want[..]);
        assert_eq!(passes, 1);
    }

    #[test]
    fn sampling_is_deterministic_in_seed_and_steps() {
        let expert = tiny_expert(vec![1]);
        let a = sample_actions_raw(&expert, None, 4, 123).unwrap();
        let b = sample_actions_raw(&expert, None, 4, 123).unwrap();
        let c = sample_actions_raw(&expert, None, 4, 124).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn km_on_identical_models_is_pure_rf() {
        let backbone = tiny_backbone();
        let expert = tiny_expert(vec![1, 2]);
        let vocab = backbone.cfg.vocab.clone();
        let seq = build_sequence(&vocab, 2, 0, 1, &LatentTokens(vec![1, 0]));
        let mut rng = rngs::seeded(31);
        let features = Tensor::new(vec![1, 4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let chunks = Tensor::new(vec![1, 4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let mut tape = Tape::new();
        let out = km_loss(
            &mut tape,
            &backbone,
            &backbone,
            &expert,
            &features,
            &[2],
            std::slice::from_ref(&seq),
            &chunks,
            0.7,
            KlSpan::SubtasksAndActions,
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(out.kl).item(), 0.0, "identical models must give exactly zero KL");
        assert_eq!(tape.value(out.total).item(), tape.value(out.rf).item());
    }

    #[test]
    fn km_alpha_zero_is_exactly_rf() {
        let backbone = tiny_backbone();
        let mut other = tiny_backbone();
        // Perturb the reference so KL > 0.
        for (_, e) in other.params.iter_mut() {
            for v in e.value.data_mut().iter_mut() {
                *v += 0.01;
            }
        }
        let expert = tiny_expert(vec![1]);
        let vocab = backbone.cfg.vocab.clone();
        let seq = build_sequence(&vocab, 2, 0, 1, &LatentTokens(vec![1, 0]));
        let mut rng = rngs::seeded(37);
        let features = Tensor::new(vec![1, 4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let chunks = Tensor::new(vec![1, 4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut tape = Tape::new();
        let out = km_loss(
            &mut tape,
            &backbone,
            &other,
            &expert,
            &features,
            &[2],
            std::slice::from_ref(&seq),
            &chunks,
            0.0,
            KlSpan::SubtasksAndActions,
            &mut rng,
        )
        .unwrap();
        assert!(tape.value(out.kl).item() > 0.0);
        assert_eq!(tape.value(out.total).item(), tape.value(out.rf).item());
    }
}
