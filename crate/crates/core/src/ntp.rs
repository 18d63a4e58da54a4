//! Autoregressive token policy: a small causal transformer over a joint
//! vocabulary of instruction components, subtask labels, and discrete action
//! tokens. Robot windows supply ground-truth trajectory tokens; human windows
//! supply dynamics-model pseudo-labels. Observations enter as learned feature
//! prefix tokens, outside the vocabulary.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actvae::ActVae;
use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint;
use crate::data::{sample_batch, DatasetManifest, DatasetReader};
use crate::error::{CoreError, Result};
use crate::nn::{Adam, Block, LayerNorm, Linear, LrSchedule, ParamId, ParamSet, PositionEmbedding};
use crate::quantize::{nearest_tokens, LatentTokens};
use crate::rngs;
use crate::sim::Task;
use crate::vdvae::VdVae;

const SET: usize = 0;

/// Joint vocabulary layout:
/// `[task kinds][object types][zones][subtasks][BOA][EOS][PAD][K action tokens]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TokenVocab {
    pub num_task_kinds: usize,
    pub num_object_types: usize,
    pub num_zones: usize,
    pub num_subtasks: usize,
    /// Action codebook size.
    pub k: usize,
}

impl TokenVocab {
    pub fn from_manifest(m: &DatasetManifest, k: usize) -> TokenVocab {
        TokenVocab {
            num_task_kinds: m.num_task_kinds,
            num_object_types: m.num_object_types,
            num_zones: m.num_zones,
            num_subtasks: m.num_subtasks,
            k,
        }
    }

    pub fn task_tok(&self, kind: usize) -> usize {
        assert!(kind < self.num_task_kinds);
        kind
    }

    pub fn obj_tok(&self, ty: usize) -> usize {
        assert!(ty < self.num_object_types);
        self.num_task_kinds + ty
    }

    pub fn zone_tok(&self, zone: usize) -> usize {
        assert!(zone < self.num_zones);
        self.num_task_kinds + self.num_object_types + zone
    }

    pub fn subtask_base(&self) -> usize {
        self.num_task_kinds + self.num_object_types + self.num_zones
    }

    pub fn subtask_tok(&self, s: usize) -> usize {
        assert!(s < self.num_subtasks, "unknown subtask id {s}");
        self.subtask_base() + s
    }

    pub fn boa(&self) -> usize {
        self.subtask_base() + self.num_subtasks
    }

    pub fn eos(&self) -> usize {
        self.boa() + 1
    }

    pub fn pad(&self) -> usize {
        self.boa() + 2
    }

    pub fn text_size(&self) -> usize {
        self.boa() + 3
    }

    pub fn action_tok(&self, code: usize) -> usize {
        assert!(code < self.k);
        self.text_size() + code
    }

    pub fn decode_action(&self, tok: usize) -> Option<usize> {
        (tok >= self.text_size() && tok < self.size()).then(|| tok - self.text_size())
    }

    pub fn decode_subtask(&self, tok: usize) -> Option<usize> {
        let base = self.subtask_base();
        (tok >= base && tok < base + self.num_subtasks).then(|| tok - base)
    }

    pub fn size(&self) -> usize {
        self.text_size() + self.k
    }

    pub fn instruction_tokens(&self, instruction_id: u32) -> [usize; 3] {
        let task = Task::from_instruction_id(instruction_id, self.num_object_types)
            .expect("valid instruction id");
        [self.task_tok(task.kind.index()), self.obj_tok(task.target_type), self.zone_tok(task.zone)]
    }
}

/// `[instruction x3][subtask x2][BOA][action x Nq][EOS]`.
pub fn build_sequence(
    vocab: &TokenVocab,
    instruction_id: u32,
    subtask_now: u16,
    subtask_next: u16,
    tokens: &LatentTokens,
) -> Vec<usize> {
    let mut seq = Vec::with_capacity(3 + 2 + 1 + tokens.len() + 1);
    seq.extend_from_slice(&vocab.instruction_tokens(instruction_id));
    seq.push(vocab.subtask_tok(subtask_now as usize));
    seq.push(vocab.subtask_tok(subtask_next as usize));
    seq.push(vocab.boa());
    for &t in &tokens.0 {
        seq.push(vocab.action_tok(t));
    }
    seq.push(vocab.eos());
    seq
}

/// Invert [`build_sequence`]: the action tokens between BOA and the end.
pub fn extract_action_tokens(vocab: &TokenVocab, seq: &[usize]) -> Result<LatentTokens> {
    let boa_at = seq
        .iter()
        .position(|&t| t == vocab.boa())
        .ok_or_else(|| CoreError::MalformedPlan("missing begin-of-action token".into()))?;
    let mut out = Vec::new();
    for &t in &seq[boa_at + 1..] {
        if t == vocab.eos() {
            break;
        }
        match vocab.decode_action(t) {
            Some(code) => out.push(code),
            None => {
                return Err(CoreError::MalformedPlan(format!(
                    "non-action token {t} inside the action span"
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(CoreError::MalformedPlan("empty action span".into()));
    }
    Ok(LatentTokens(out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NtpConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Number of learned observation prefix tokens.
    pub feature_tokens: usize,
    pub patches: usize,
    pub feature_dim: usize,
    pub nq: usize,
    pub vocab: TokenVocab,
}

impl NtpConfig {
    pub fn desk(manifest: &DatasetManifest, k: usize, nq: usize) -> NtpConfig {
        NtpConfig {
            layers: 6,
            width: 128,
            heads: 4,
            feature_tokens: 4,
            patches: manifest.patches,
            feature_dim: manifest.feature_dim,
            nq,
            vocab: TokenVocab::from_manifest(manifest, k),
        }
    }

    pub fn plan_len(&self) -> usize {
        3 + 2 + 1 + self.nq + 1
    }

    fn max_seq(&self) -> usize {
        self.feature_tokens + self.plan_len()
    }
}

pub struct NtpModel {
    pub cfg: NtpConfig,
    pub params: ParamSet,
    feat_proj: Linear,
    tok_embed: ParamId,
    pos: PositionEmbedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

pub struct NtpForward {
    pub logits: Var,
    /// Output of every block, `[B, S, W]`, index 0 = layer 1.
    pub hidden: Vec<Var>,
    /// Sequence offset of the first text token (after the feature prefix).
    pub text_start: usize,
}

impl NtpModel {
    pub fn new(cfg: NtpConfig, rng: &mut ChaCha8Rng) -> NtpModel {
        let mut ps = ParamSet::new();
        let w = cfg.width;
        let feat_proj = Linear::new(
            &mut ps,
            "feat_proj",
            cfg.patches * cfg.feature_dim,
            cfg.feature_tokens * w,
            rng,
        );
        let tok_embed = ps.normal("tok_embed", vec![cfg.vocab.size(), w], 0.02, rng);
        let pos = PositionEmbedding::new(&mut ps, "pos", cfg.max_seq(), w, rng);
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut ps, &format!("block{i}"), w, cfg.heads, rng))
            .collect();
        let ln_f = LayerNorm::new(&mut ps, "ln_f", w);
        let head = Linear::new(&mut ps, "head", w, cfg.vocab.size(), rng);
        NtpModel { cfg, params: ps, feat_proj, tok_embed, pos, blocks, ln_f, head }
    }

    /// Causal forward over `[feature prefix][tokens]`; every row must carry
    /// the same number of tokens (pad with `vocab.pad()`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        set: usize,
        features: Var,
        token_ids: &[Vec<usize>],
    ) -> NtpForward {
        let s = tape.shape(features).to_vec();
        assert!(
            s.len() == 3 && s[1] == self.cfg.patches && s[2] == self.cfg.feature_dim,
            "features must be [B, P, d], got {s:?}"
        );
        let b = s[0];
        assert_eq!(token_ids.len(), b, "one token row per batch row");
        let s_tok = token_ids.first().map_or(0, Vec::len);
        assert!(token_ids.iter().all(|r| r.len() == s_tok), "ragged token rows");
        let w = self.cfg.width;

        let flat = tape.reshape(features, vec![b, self.cfg.patches * self.cfg.feature_dim]);
        let feat = self.feat_proj.forward(tape, &self.params, set, flat);
        let feat = tape.reshape(feat, vec![b, self.cfg.feature_tokens, w]);

        let mut seq = if s_tok > 0 {
            let flat_ids: Vec<usize> = token_ids.iter().flatten().copied().collect();
            let table = self.params.bind(tape, set, self.tok_embed);
            let emb = tape.embedding(table, &flat_ids);
            let emb = tape.reshape(emb, vec![b, s_tok, w]);
            tape.concat_mid(&[feat, emb])
        } else {
            feat
        };
        seq = self.pos.forward(tape, &self.params, set, seq);

        let mut hidden = Vec::with_capacity(self.cfg.layers);
        for block in &self.blocks {
            seq = block.forward(tape, &self.params, set, seq, true, None);
            hidden.push(seq);
        }
        let normed = self.ln_f.forward(tape, &self.params, set, seq);
        let logits = self.head.forward(tape, &self.params, set, normed);
        NtpForward { logits, hidden, text_start: self.cfg.feature_tokens }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save_params(path, "ntp", &self.cfg, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<NtpModel> {
        let (cfg, loaded): (NtpConfig, ParamSet) = checkpoint::load_params(path, "ntp")?;
        let mut model = NtpModel::new(cfg, &mut rngs::seeded(0));
        checkpoint::adopt_values(&mut model.params, &loaded)?;
        Ok(model)
    }
}

/// Mean next-token cross-entropy with pad positions masked out. The feature
/// prefix predicts the first token from its last slot.
pub fn ntp_loss(
    tape: &mut Tape,
    model: &NtpModel,
    set: usize,
    features: Var,
    token_ids: &[Vec<usize>],
) -> Var {
    let fwd = model.forward(tape, set, features, token_ids);
    let targets = next_token_targets(model, token_ids);
    let shape = tape.shape(fwd.logits).to_vec();
    let flat = tape.reshape(fwd.logits, vec![shape[0] * shape[1], shape[2]]);
    tape.cross_entropy(flat, &targets)
}

fn next_token_targets(model: &NtpModel, token_ids: &[Vec<usize>]) -> Vec<isize> {
    let pad = model.cfg.vocab.pad();
    let f = model.cfg.feature_tokens;
    let s_tok = token_ids.first().map_or(0, Vec::len);
    let s_total = f + s_tok;
    let mut targets = vec![-1isize; token_ids.len() * s_total];
    for (row, ids) in token_ids.iter().enumerate() {
        for (j, &tok) in ids.iter().enumerate() {
            if tok == pad {
                continue;
            }
            // Position predicting this token: previous text slot, or the last
            // feature slot for the first token.
            let predictor = row * s_total + f + j - 1;
            targets[predictor] = tok as isize;
        }
    }
    targets
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtpTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub mix_ratio: f64,
}

impl Default for NtpTrainConfig {
    fn default() -> Self {
        NtpTrainConfig { steps: 3000, batch: 12, lr: 6e-4, warmup: 200, seed: 0, mix_ratio: 0.7 }
    }
}

/// Mix robot windows (trajectory-encoder tokens) and human windows
/// (dynamics-model pseudo-labels) per `mix_ratio`. `vd_vae` may be `None`
/// only for pure robot training.
pub fn train_ntp(
    reader: &DatasetReader,
    act_vae: &ActVae,
    vd_vae: Option<&VdVae>,
    cfg: NtpConfig,
    tc: &NtpTrainConfig,
) -> Result<(NtpModel, Vec<f64>)> {
    if tc.mix_ratio < 1.0 && vd_vae.is_none() {
        return Err(CoreError::Config(
            "human windows need a trained dynamics model for pseudo-labels".into(),
        ));
    }
    let mut rng = rngs::derived(tc.seed, 300);
    let model = NtpModel::new(cfg, &mut rng);
    let mut seed_rng = rngs::derived(tc.seed, 301);
    let mut adam = Adam::new(&model.params);
    let sched = LrSchedule::new(tc.lr, tc.warmup, tc.steps);
    let mut curve = Vec::with_capacity(tc.steps);
    let mut model = model;

    for step in 0..tc.steps {
        let batch = sample_batch(reader, tc.mix_ratio, tc.batch, seed_rng.gen())?;
        let seqs = sequences_for_batch(&model, act_vae, vd_vae, reader, &batch)?;
        let mut tape = Tape::new();
        let features = tape.leaf(batch.features_t.clone());
        let loss = ntp_loss(&mut tape, &model, SET, features, &seqs);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(CoreError::Diverged { step, what: format!("loss {value}") });
        }
        curve.push(value);
        let grads = tape.backward(loss);
        model.params.accumulate_grads(&tape, &grads, SET);
        model.params.clip_grad_norm(1.0);
        adam.step(&mut model.params, sched.at(step));
    }
    Ok((model, curve))
}

/// Token sequences for each batch row, routing by domain.
pub fn sequences_for_batch(
    model: &NtpModel,
    act_vae: &ActVae,
    vd_vae: Option<&VdVae>,
    reader: &DatasetReader,
    batch: &crate::data::Batch,
) -> Result<Vec<Vec<usize>>> {
    let vocab = &model.cfg.vocab;
    let h = reader.manifest.chunk_len;
    let da = reader.manifest.action_dim;
    let pd = reader.manifest.patches * reader.manifest.feature_dim;
    let mut seqs = Vec::with_capacity(batch.rows());
    for row in 0..batch.rows() {
        let tokens = if batch.domain_mask[row] {
            let chunks = batch.action_chunks.as_ref().expect("robot rows have chunks");
            let chunk = &chunks.data()[row * h * da..(row + 1) * h * da];
            act_vae.tokens_for(chunk)
        } else {
            let vd = vd_vae.expect("human rows need the dynamics model");
            let f_t = &batch.features_t.data()[row * pd..(row + 1) * pd];
            let f_th = &batch.features_th.data()[row * pd..(row + 1) * pd];
            vd.tokens_for_transition(f_t, f_th)
        };
        seqs.push(build_sequence(
            vocab,
            batch.instruction_ids[row],
            batch.subtask_now[row],
            batch.subtask_next[row],
            &tokens,
        ));
    }
    Ok(seqs)
}

/// A decoded plan: subtask pair, action tokens, and the chunk they decode to.
pub struct Plan {
    pub subtasks: Vec<u16>,
    pub tokens: LatentTokens,
    /// `[H, Da]`, normalized action space.
    pub chunk: Tensor,
    pub forward_passes: usize,
}

/// Greedy decoding with per-position vocabulary masks (subtask slots, then
/// BOA, then action slots, then EOS), one forward pass per emitted token.
pub fn generate(
    model: &NtpModel,
    act_vae: &ActVae,
    features: &Tensor,
    instruction_id: u32,
) -> Result<Plan> {
    let vocab = model.cfg.vocab.clone();
    let nq = model.cfg.nq;
    let prefix: Vec<usize> = vocab.instruction_tokens(instruction_id).to_vec();
    let mut emitted: Vec<usize> = Vec::new();
    let mut passes = 0usize;
    let plan_tokens = 2 + 1 + nq + 1; // subtasks, BOA, actions, EOS

    let feats = Tensor::new(
        vec![1, model.cfg.patches, model.cfg.feature_dim],
        features.data().to_vec(),
    );
    while emitted.len() < plan_tokens {
        let mut tape = Tape::new();
        let f = tape.leaf(feats.clone());
        let mut ids = prefix.clone();
        ids.extend_from_slice(&emitted);
        let fwd = model.forward(&mut tape, SET, f, &[ids.clone()]);
        passes += 1;
        let logits = tape.value(fwd.logits);
        let s_total = model.cfg.feature_tokens + ids.len();
        let v = vocab.size();
        let row = &logits.data()[(s_total - 1) * v..s_total * v];

        let slot = emitted.len();
        let allowed: Box<dyn Fn(usize) -> bool> = if slot < 2 {
            let base = vocab.subtask_base();
            let n = vocab.num_subtasks;
            Box::new(move |t| t >= base && t < base + n)
        } else if slot == 2 {
            let boa = vocab.boa();
            Box::new(move |t| t == boa)
        } else if slot < 3 + nq {
            let lo = vocab.text_size();
            let hi = vocab.size();
            Box::new(move |t| t >= lo && t < hi)
        } else {
            let eos = vocab.eos();
            Box::new(move |t| t == eos)
        };
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for t in 0..v {
            if allowed(t) && row[t] > best_v {
                best_v = row[t];
                best = t;
            }
        }
        emitted.push(best);
    }

    let full: Vec<usize> = prefix.iter().chain(emitted.iter()).copied().collect();
    let plan = parse_plan(&vocab, &full, nq)?;
    let chunk = act_vae.decode_tokens(&plan.1)?;
    Ok(Plan { subtasks: plan.0, tokens: plan.1, chunk, forward_passes: passes })
}

/// Validate a full token sequence into (subtasks, action tokens).
pub fn parse_plan(vocab: &TokenVocab, seq: &[usize], nq: usize) -> Result<(Vec<u16>, LatentTokens)> {
    let tokens = extract_action_tokens(vocab, seq)?;
    if tokens.len() != nq {
        return Err(CoreError::MalformedPlan(format!(
            "expected {nq} action tokens, got {}",
            tokens.len()
        )));
    }
    let boa_at = seq.iter().position(|&t| t == vocab.boa()).unwrap();
    let subtasks: Vec<u16> = seq[..boa_at]
        .iter()
        .filter_map(|&t| vocab.decode_subtask(t).map(|s| s as u16))
        .collect();
    Ok((subtasks, tokens))
}

/// Batch variants of the token encoders, used by training loops.
impl ActVae {
    pub fn tokens_for_batch(&self, chunks: &Tensor) -> Vec<LatentTokens> {
        let b = chunks.shape()[0];
        let mut tape = Tape::new();
        let c = tape.leaf(chunks.clone());
        let z_e = self.encode(&mut tape, c);
        let flat = nearest_tokens(
            tape.value(z_e).data(),
            self.cfg.d_lat,
            self.params.value(self.codebook.embeddings).data(),
            self.cfg.codebook_size,
        );
        (0..b).map(|i| LatentTokens(flat[i * self.cfg.nq..(i + 1) * self.cfg.nq].to_vec())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn vocab() -> TokenVocab {
        TokenVocab {
            num_task_kinds: 3,
            num_object_types: 6,
            num_zones: 4,
            num_subtasks: 5,
            k: 16,
        }
    }

    fn tiny_model() -> NtpModel {
        let cfg = NtpConfig {
            layers: 2,
            width: 16,
            heads: 2,
            feature_tokens: 2,
            patches: 4,
            feature_dim: 3,
            nq: 4,
            vocab: vocab(),
        };
        NtpModel::new(cfg, &mut rngs::seeded(5))
    }

    #[test]
    fn vocabulary_ranges_are_disjoint_and_cover() {
        let v = vocab();
        let mut seen = vec![false; v.size()];
        let mut mark = |t: usize| {
            assert!(!seen[t], "token {t} assigned twice");
            seen[t] = true;
        };
        for k in 0..3 {
            mark(v.task_tok(k));
        }
        for t in 0..6 {
            mark(v.obj_tok(t));
        }
        for z in 0..4 {
            mark(v.zone_tok(z));
        }
        for s in 0..5 {
            mark(v.subtask_tok(s));
        }
        mark(v.boa());
        mark(v.eos());
        mark(v.pad());
        for c in 0..16 {
            mark(v.action_tok(c));
        }
        assert!(seen.iter().all(|&b| b), "vocabulary has holes");
    }

    #[test]
    fn sequence_layout_arithmetic() {
        let v = TokenVocab { k: 64, ..vocab() };
        let tokens = LatentTokens(vec![0; 8]);
        let seq = build_sequence(&v, 5, 0, 2, &tokens);
        assert_eq!(seq.len(), 3 + 2 + 1 + 8 + 1);
    }

    #[test]
    fn action_tokens_round_trip() {
        let v = vocab();
        let tokens = LatentTokens(vec![3, 0, 15, 7]);
        let seq = build_sequence(&v, 9, 1, 3, &tokens);
        let back = extract_action_tokens(&v, &seq).unwrap();
        assert_eq!(back, tokens);
    }

    #[test]
    fn missing_boa_is_malformed_plan() {
        let v = vocab();
        let seq = vec![v.task_tok(0), v.subtask_tok(1), v.action_tok(3), v.eos()];
        match extract_action_tokens(&v, &seq) {
            Err(CoreError::MalformedPlan(_)) => {}
            other => panic!("expected malformed-plan error, got {:?}", other.map(|t| t.0)),
        }
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let mut model = tiny_model();
        // Zero the head so logits are uniform across the vocabulary.
        let ids = [model.head.w, model.head.b];
        for id in ids {
            for v in model.params.value_mut(id).data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::new(vec![1, 4, 3], vec![0.1; 12]));
        let tokens = LatentTokens(vec![1, 2, 3, 4]);
        let seq = build_sequence(&model.cfg.vocab, 2, 0, 1, &tokens);
        let loss = ntp_loss(&mut tape, &model, SET, feats, &[seq]);
        let want = (model.cfg.vocab.size() as f64).ln();
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn pad_positions_are_masked() {
        let model = tiny_model();
        let v = &model.cfg.vocab;
        let mut seq = build_sequence(v, 2, 0, 1, &LatentTokens(vec![1, 2, 3, 4]));
        let full_len = seq.len();
        seq.push(v.pad());
        seq.push(v.pad());
        let targets = next_token_targets(&model, &[seq]);
        let s_total = model.cfg.feature_tokens + full_len + 2;
        assert_eq!(targets.len(), s_total);
        // Positions after the EOS predictor must be ignored.
        let ignored = targets.iter().rev().take(3).all(|&t| t == -1);
        assert!(ignored, "pad targets must be -1: {targets:?}");
    }

    #[test]
    fn ntp_loss_grad_check() {
        let model = tiny_model();
        let seq = build_sequence(&model.cfg.vocab, 2, 0, 1, &LatentTokens(vec![1, 2, 3, 4]));
        let mut rng = rngs::seeded(11);
        let x = Tensor::new(vec![1, 4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let rel = grad_check(
            |tape, feats| ntp_loss(tape, &model, SET, feats, std::slice::from_ref(&seq)),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-4, "ntp loss grad rel error {rel}");
    }

    #[test]
    fn logits_are_causal() {
        let model = tiny_model();
        let feats = Tensor::new(vec![1, 4, 3], vec![0.25; 12]);
        let base = build_sequence(&model.cfg.vocab, 2, 0, 1, &LatentTokens(vec![1, 2, 3, 4]));
        let mut perturbed = base.clone();
        let last = perturbed.len() - 1;
        perturbed[last] = model.cfg.vocab.action_tok(9);

        let run = |seq: &Vec<usize>| {
            let mut tape = Tape::new();
            let f = tape.leaf(feats.clone());
            let fwd = model.forward(&mut tape, SET, f, std::slice::from_ref(seq));
            tape.value(fwd.logits).data().to_vec()
        };
        let a = run(&base);
        let b = run(&perturbed);
        let v = model.cfg.vocab.size();
        let s_total = model.cfg.feature_tokens + base.len();
        for pos in 0..s_total - 1 {
            for c in 0..v {
                assert_eq!(
                    a[pos * v + c].to_bits(),
                    b[pos * v + c].to_bits(),
                    "logits at position {pos} changed with a future token"
                );
            }
        }
    }

    #[test]
    fn generate_is_deterministic_and_well_formed() {
        let mut rng = rngs::seeded(13);
        let act = {
            let cfg = crate::actvae::ActVaeConfig {
                action_dim: 2,
                chunk_len: 4,
                patch: 2,
                delta_coding: true,
                nq: 4,
                codebook_size: 16,
                d_lat: 4,
                d_model: 8,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                beta: 1.0,
            };
            ActVae::new(cfg, &mut rng)
        };
        let model = tiny_model();
        let feats = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let a = generate(&model, &act, &feats, 2).unwrap();
        let b = generate(&model, &act, &feats, 2).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.subtasks, b.subtasks);
        assert_eq!(a.subtasks.len(), 2);
        assert_eq!(a.tokens.len(), model.cfg.nq);
        assert_eq!(a.chunk.shape(), &[4, 2]);
        // One forward pass per emitted token.
        assert_eq!(a.forward_passes, 2 + 1 + model.cfg.nq + 1);
    }
}
