//! Trajectory VQ-VAE: encodes normalized action chunks into a short sequence
//! of discrete codebook tokens and decodes them back, establishing the
//! quantized action vocabulary every policy consumes. Also carries the
//! rate-distortion analytics (PSNR, compression rate).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint;
use crate::data::{sample_batch, DatasetReader};
use crate::error::{CoreError, Result};
use crate::nn::{Adam, Block, Linear, LrSchedule, ParamId, ParamSet, PositionEmbedding};
use crate::quantize::{nearest_tokens, vector_quantize, Codebook, LatentTokens, Quantized};
use crate::rngs;

const SET: usize = 0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActVaeConfig {
    pub action_dim: usize,
    pub chunk_len: usize,
    /// Consecutive action steps folded into one encoder/decoder token.
    pub patch: usize,
    /// Encode per-step differences alongside values and let the decoder emit
    /// deltas that are integrated back to actions; ramp-like chunks then map
    /// to near-constant token content.
    pub delta_coding: bool,
    /// Latent token count Nq.
    pub nq: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    pub d_lat: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for ActVaeConfig {
    fn default() -> Self {
        ActVaeConfig {
            action_dim: 4,
            chunk_len: 32,
            patch: 4,
            delta_coding: true,
            nq: 8,
            codebook_size: 64,
            d_lat: 64,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActVaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    /// Window for re-seeding codes with zero usage.
    pub revival_interval: usize,
    /// Batch used for the data-dependent codebook init.
    pub init_batch: usize,
}

impl Default for ActVaeTrainConfig {
    fn default() -> Self {
        ActVaeTrainConfig {
            steps: 5000,
            batch: 16,
            lr: 2e-4,
            warmup: 1000,
            seed: 0,
            revival_interval: 1000,
            init_batch: 32,
        }
    }
}

/// Codebook rows get a faster learning rate than the transformer weights.
const CODEBOOK_LR_SCALE: f64 = 10.0;

pub struct ActVae {
    pub cfg: ActVaeConfig,
    pub params: ParamSet,
    pub codebook: Codebook,
    enc_in: Linear,
    enc_queries: ParamId,
    enc_pos: PositionEmbedding,
    enc_blocks: Vec<Block>,
    enc_out: Linear,
    dec_in: Linear,
    dec_queries: ParamId,
    dec_pos: PositionEmbedding,
    dec_blocks: Vec<Block>,
    dec_out: Linear,
}

impl ActVae {
    pub fn new(cfg: ActVaeConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.patch >= 1 && cfg.chunk_len % cfg.patch == 0, "patch must divide chunk length");
        let mut ps = ParamSet::new();
        let w = cfg.d_model;
        let tokens = cfg.chunk_len / cfg.patch;
        let enc_feat = if cfg.delta_coding { 2 * cfg.action_dim } else { cfg.action_dim };
        let enc_in = Linear::new(&mut ps, "enc.in", enc_feat * cfg.patch, w, rng);
        let enc_queries = ps.normal("enc.queries", vec![cfg.nq, w], 0.02, rng);
        let enc_pos = PositionEmbedding::new(&mut ps, "enc.pos", tokens + cfg.nq, w, rng);
        let enc_blocks = (0..cfg.enc_layers)
            .map(|i| Block::new(&mut ps, &format!("enc.block{i}"), w, cfg.heads, rng))
            .collect();
        let enc_out = Linear::new(&mut ps, "enc.out", w, cfg.d_lat, rng);

        let dec_in = Linear::new(&mut ps, "dec.in", cfg.d_lat, w, rng);
        let dec_queries = ps.normal("dec.queries", vec![tokens, w], 0.02, rng);
        let dec_pos = PositionEmbedding::new(&mut ps, "dec.pos", cfg.nq + tokens, w, rng);
        let dec_blocks = (0..cfg.dec_layers)
            .map(|i| Block::new(&mut ps, &format!("dec.block{i}"), w, cfg.heads, rng))
            .collect();
        let dec_out = Linear::new(&mut ps, "dec.out", w, cfg.action_dim * cfg.patch, rng);

        let cb_id = {
            let bound = 1.0 / (cfg.d_lat as f64).sqrt();
            let data = (0..cfg.codebook_size * cfg.d_lat)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            ps.add_with(
                "codebook",
                Tensor::new(vec![cfg.codebook_size, cfg.d_lat], data),
                true,
                CODEBOOK_LR_SCALE,
            )
        };
        let codebook = Codebook::new(cb_id, cfg.codebook_size, cfg.d_lat);

        ActVae {
            cfg,
            params: ps,
            codebook,
            enc_in,
            enc_queries,
            enc_pos,
            enc_blocks,
            enc_out,
            dec_in,
            dec_queries,
            dec_pos,
            dec_blocks,
            dec_out,
        }
    }

    /// Map normalized chunks `[B, H, Da]` to continuous latents
    /// `[B, Nq, d_lat]` read off dedicated query slots.
    pub fn encode(&self, tape: &mut Tape, chunks: Var) -> Var {
        let s = tape.shape(chunks).to_vec();
        assert_eq!(s[1], self.cfg.chunk_len, "chunk length mismatch");
        assert_eq!(s[2], self.cfg.action_dim, "action dim mismatch");
        let b = s[0];
        let tokens = self.cfg.chunk_len / self.cfg.patch;
        let h = self.cfg.chunk_len;
        let da = self.cfg.action_dim;
        let enc_input = if self.cfg.delta_coding {
            // Per-step differences with a zero row in front, concatenated to
            // the values along the feature axis.
            let shifted = {
                let zero = tape.leaf(Tensor::zeros(vec![b, 1, da]));
                let head = tape.slice_mid(chunks, 0, h - 1);
                tape.concat_mid(&[zero, head])
            };
            let delta = tape.sub(chunks, shifted);
            // Interleave (a_t, delta_t) per step: reshape both to rows and
            // concat along the middle axis of a [B, H, 2, Da] layout.
            let a_rows = tape.reshape(chunks, vec![b * h, 1, da]);
            let d_rows = tape.reshape(delta, vec![b * h, 1, da]);
            let paired = tape.concat_mid(&[a_rows, d_rows]);
            tape.reshape(paired, vec![b, tokens, self.cfg.patch * 2 * da])
        } else {
            tape.reshape(chunks, vec![b, tokens, self.cfg.patch * da])
        };
        let x = self.enc_in.forward(tape, &self.params, SET, enc_input);
        let qtable = self.params.bind(tape, SET, self.enc_queries);
        let ids: Vec<usize> = (0..b).flat_map(|_| 0..self.cfg.nq).collect();
        let queries = tape.embedding(qtable, &ids);
        let queries = tape.reshape(queries, vec![b, self.cfg.nq, self.cfg.d_model]);
        let mut seq = tape.concat_mid(&[x, queries]);
        seq = self.enc_pos.forward(tape, &self.params, SET, seq);
        for block in &self.enc_blocks {
            seq = block.forward(tape, &self.params, SET, seq, false, None);
        }
        let lat = tape.slice_mid(seq, tokens, self.cfg.nq);
        self.enc_out.forward(tape, &self.params, SET, lat)
    }

    /// Map latents `[B, Nq, d_lat]` back to chunks `[B, H, Da]`.
    pub fn decode(&self, tape: &mut Tape, z: Var) -> Var {
        let s = tape.shape(z).to_vec();
        assert_eq!(s[1], self.cfg.nq, "latent token count mismatch");
        let b = s[0];
        let x = self.dec_in.forward(tape, &self.params, SET, z);
        let tokens = self.cfg.chunk_len / self.cfg.patch;
        let qtable = self.params.bind(tape, SET, self.dec_queries);
        let ids: Vec<usize> = (0..b).flat_map(|_| 0..tokens).collect();
        let queries = tape.embedding(qtable, &ids);
        let queries = tape.reshape(queries, vec![b, tokens, self.cfg.d_model]);
        let mut seq = tape.concat_mid(&[x, queries]);
        seq = self.dec_pos.forward(tape, &self.params, SET, seq);
        for block in &self.dec_blocks {
            seq = block.forward(tape, &self.params, SET, seq, false, None);
        }
        let out = tape.slice_mid(seq, self.cfg.nq, tokens);
        let out = self.dec_out.forward(tape, &self.params, SET, out);
        let out = tape.reshape(out, vec![b, self.cfg.chunk_len, self.cfg.action_dim]);
        if self.cfg.delta_coding {
            tape.cumsum_mid(out)
        } else {
            out
        }
    }

    /// Full training objective on a chunk batch.
    pub fn loss(&mut self, tape: &mut Tape, chunks: Var) -> Result<ActVaeLosses> {
        let z_e = self.encode(tape, chunks);
        let q = vector_quantize(tape, &self.params, SET, z_e, &mut self.codebook)?;
        let recon = self.decode(tape, q.z_q);
        let losses = assemble_losses(tape, chunks, recon, &q, self.cfg.beta, true);
        if !tape.value(losses.total).is_finite() {
            return Err(CoreError::NonFinite("act-vae loss".into()));
        }
        Ok(losses)
    }

    /// Value-only reconstruction (no usage counting, no gradients).
    pub fn reconstruct(&self, chunks: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let c = tape.leaf(chunks.clone());
        let z_e = self.encode(&mut tape, c);
        let tokens = nearest_tokens(
            tape.value(z_e).data(),
            self.cfg.d_lat,
            self.params.value(self.codebook.embeddings).data(),
            self.cfg.codebook_size,
        );
        let z_q = self.gather_rows(&tokens);
        let zv = tape.leaf(Tensor::new(
            vec![chunks.shape()[0], self.cfg.nq, self.cfg.d_lat],
            z_q,
        ));
        let out = self.decode(&mut tape, zv);
        tape.value(out).clone()
    }

    /// Tokens for one normalized chunk `[H, Da]`.
    pub fn tokens_for(&self, chunk: &[f64]) -> LatentTokens {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::new(
            vec![1, self.cfg.chunk_len, self.cfg.action_dim],
            chunk.to_vec(),
        ));
        let z_e = self.encode(&mut tape, c);
        LatentTokens(nearest_tokens(
            tape.value(z_e).data(),
            self.cfg.d_lat,
            self.params.value(self.codebook.embeddings).data(),
            self.cfg.codebook_size,
        ))
    }

    /// Pooled pre-quantization encoder latent for one chunk (the contrastive
    /// target space).
    pub fn pooled_latent(&self, chunk: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::new(
            vec![1, self.cfg.chunk_len, self.cfg.action_dim],
            chunk.to_vec(),
        ));
        let z_e = self.encode(&mut tape, c);
        let pooled = tape.mean_mid(z_e);
        tape.value(pooled).data().to_vec()
    }

    /// Decode a token sequence to one normalized chunk `[H, Da]`.
    pub fn decode_tokens(&self, tokens: &LatentTokens) -> Result<Tensor> {
        if tokens.len() != self.cfg.nq {
            return Err(CoreError::Shape(format!(
                "expected {} tokens, got {}",
                self.cfg.nq,
                tokens.len()
            )));
        }
        for &t in &tokens.0 {
            if t >= self.cfg.codebook_size {
                return Err(CoreError::Config(format!("token {t} outside codebook")));
            }
        }
        let z = self.gather_rows(&tokens.0);
        let mut tape = Tape::new();
        let zv = tape.leaf(Tensor::new(vec![1, self.cfg.nq, self.cfg.d_lat], z));
        let out = self.decode(&mut tape, zv);
        let val = tape.value(out);
        if !val.is_finite() {
            return Err(CoreError::NonFinite("decoded chunk".into()));
        }
        Ok(Tensor::new(
            vec![self.cfg.chunk_len, self.cfg.action_dim],
            val.data().to_vec(),
        ))
    }

    fn gather_rows(&self, tokens: &[usize]) -> Vec<f64> {
        let cb = self.params.value(self.codebook.embeddings).data();
        let d = self.cfg.d_lat;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            out.extend_from_slice(&cb[t * d..(t + 1) * d]);
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let hyper = ActVaeCheckpointHyper {
            cfg: self.cfg.clone(),
            codebook_frozen: self.codebook.frozen,
        };
        checkpoint::save_params(path, "actvae", &hyper, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<ActVae> {
        let (hyper, loaded): (ActVaeCheckpointHyper, ParamSet) =
            checkpoint::load_params(path, "actvae")?;
        let mut model = ActVae::new(hyper.cfg, &mut rngs::seeded(0));
        checkpoint::adopt_values(&mut model.params, &loaded)?;
        model.codebook.frozen = hyper.codebook_frozen;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ActVaeCheckpointHyper {
    cfg: ActVaeConfig,
    codebook_frozen: bool,
}

pub struct ActVaeLosses {
    pub total: Var,
    pub rec: Var,
    pub commit: Var,
    pub codebook: Var,
    pub tokens: LatentTokens,
}

/// rec + codebook + beta * commit, each mean-reduced. `include_codebook`
/// drops the codebook term from the total (quantizing against a frozen book).
pub fn assemble_losses(
    tape: &mut Tape,
    target: Var,
    recon: Var,
    q: &Quantized,
    beta: f64,
    include_codebook: bool,
) -> ActVaeLosses {
    let d = tape.sub(target, recon);
    let sq = tape.mul(d, d);
    let rec = tape.mean_all(sq);
    let scaled_commit = tape.scale(q.commit, beta);
    let mut total = tape.add(rec, scaled_commit);
    if include_codebook {
        total = tape.add(total, q.codebook_loss);
    }
    ActVaeLosses { total, rec, commit: q.commit, codebook: q.codebook_loss, tokens: q.tokens.clone() }
}

/// Re-seed codes with zero usage from random encoder outputs and clear their
/// optimizer moments.
fn revive_dead_codes(
    model: &mut ActVae,
    encoder_rows: &[f64],
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> usize {
    let dead = model.codebook.dead_codes();
    if dead.is_empty() || encoder_rows.is_empty() {
        return 0;
    }
    let d = model.cfg.d_lat;
    let rows = encoder_rows.len() / d;
    let cb = model.params.value_mut(model.codebook.embeddings);
    for &code in &dead {
        let r = rng.gen_range(0..rows);
        cb.data_mut()[code * d..(code + 1) * d]
            .copy_from_slice(&encoder_rows[r * d..(r + 1) * d]);
    }
    adam.reset_rows(model.codebook.embeddings, &dead, d);
    dead.len()
}

/// Train on robot chunks with Adam, warmup + cosine decay, and periodic
/// dead-code revival. Returns the model and the per-step total loss curve.
pub fn train_actvae(
    reader: &DatasetReader,
    cfg: ActVaeConfig,
    tc: &ActVaeTrainConfig,
) -> Result<(ActVae, Vec<f64>)> {
    let mut rng = rngs::derived(tc.seed, 100);
    let mut model = ActVae::new(cfg, &mut rng);
    let mut seed_rng = rngs::derived(tc.seed, 101);

    // Data-dependent codebook init from a warmup batch of encoder outputs.
    {
        let batch = sample_batch(reader, 1.0, tc.init_batch, seed_rng.gen())?;
        let chunks = batch.action_chunks.expect("robot batch has chunks");
        let mut tape = Tape::new();
        let c = tape.leaf(chunks);
        let z_e = model.encode(&mut tape, c);
        let rows_data = tape.value(z_e).data().to_vec();
        let d = model.cfg.d_lat;
        let rows = rows_data.len() / d;
        let k = model.cfg.codebook_size;
        let mut order: Vec<usize> = (0..rows).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let cb = model.params.value_mut(model.codebook.embeddings);
        for code in 0..k {
            let src = order[code % rows];
            for c in 0..d {
                let jitter = if code < rows { 0.0 } else { 0.01 * rngs::normal(&mut rng) };
                cb.data_mut()[code * d + c] = rows_data[src * d + c] + jitter;
            }
        }
    }

    let mut adam = Adam::new(&model.params);
    let sched = LrSchedule::new(tc.lr, tc.warmup, tc.steps);
    let mut curve = Vec::with_capacity(tc.steps);
    model.codebook.reset_usage();

    for step in 0..tc.steps {
        let batch = sample_batch(reader, 1.0, tc.batch, seed_rng.gen())?;
        let chunks = batch.action_chunks.expect("robot batch has chunks");
        let mut tape = Tape::new();
        let c = tape.leaf(chunks);
        let z_e = model.encode(&mut tape, c);
        let q = vector_quantize(&mut tape, &model.params, SET, z_e, &mut model.codebook)?;
        let recon = model.decode(&mut tape, q.z_q);
        let losses = assemble_losses(&mut tape, c, recon, &q, model.cfg.beta, true);
        let total = tape.value(losses.total).item();
        if !total.is_finite() {
            return Err(CoreError::Diverged { step, what: format!("loss {total}") });
        }
        curve.push(total);
        let grads = tape.backward(losses.total);
        model.params.accumulate_grads(&tape, &grads, SET);
        model.params.clip_grad_norm(1.0);
        adam.step(&mut model.params, sched.at(step));

        if tc.revival_interval > 0 && (step + 1) % tc.revival_interval == 0 {
            let encoder_rows = tape.value(z_e).data().to_vec();
            revive_dead_codes(&mut model, &encoder_rows, &mut adam, &mut rng);
            model.codebook.reset_usage();
        }
    }
    Ok((model, curve))
}

/// Mean squared reconstruction error over sampled held-out windows.
pub fn eval_mse(model: &ActVae, reader: &DatasetReader, windows: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut remaining = windows;
    let mut chunk_seed = rngs::seeded(seed);
    while remaining > 0 {
        let b = remaining.min(64);
        let batch = sample_batch(reader, 1.0, b, chunk_seed.gen())?;
        let chunks = batch.action_chunks.expect("robot batch");
        let recon = model.reconstruct(&chunks);
        for (a, r) in chunks.data().iter().zip(recon.data()) {
            total += (a - r) * (a - r);
        }
        count += chunks.numel();
        remaining -= b;
    }
    Ok(total / count as f64)
}

// ── rate-distortion analytics ───────────────────────────────────────────

/// 10 * log10(R^2 / mse).
pub fn psnr(mse: f64, range: f64) -> Result<f64> {
    if mse <= 0.0 {
        return Err(CoreError::Config(format!("psnr needs mse > 0, got {mse}")));
    }
    if range <= 0.0 {
        return Err(CoreError::Config(format!("psnr needs range > 0, got {range}")));
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Latent information content over distortion-adjusted raw information:
/// (Nq log K) / (Na Da log(R / sqrt(mse))). Any log base cancels.
pub fn compression_rate(
    nq: usize,
    k: usize,
    na: usize,
    da: usize,
    mse: f64,
    range: f64,
) -> Result<f64> {
    if mse <= 0.0 || mse >= range * range {
        return Err(CoreError::Config(format!(
            "compression rate needs 0 < mse < R^2, got mse {mse} with R {range}"
        )));
    }
    let denom = (na * da) as f64 * (range / mse.sqrt()).ln();
    Ok((nq as f64 * (k as f64).ln()) / denom)
}

/// Reference (Nq, K, MSE, PSNR dB, r) rows used by the analytic consistency
/// check; chunk length 32, 7 action dims, dynamic range 2.
pub const REFERENCE_RATE_DISTORTION: [(usize, usize, f64, f64, f64); 8] = [
    (12, 128, 0.0023, 32.40, 0.070),
    (12, 256, 0.0010, 36.02, 0.072),
    (12, 512, 0.0007, 37.57, 0.077),
    (35, 256, 0.0002, 43.01, 0.175),
    (20, 256, 0.0003, 41.25, 0.104),
    (16, 256, 0.0004, 40.00, 0.086),
    (8, 256, 0.0041, 29.89, 0.058),
    (4, 256, 0.1022, 15.93, 0.054),
];
pub const REFERENCE_NA: usize = 32;
pub const REFERENCE_DA: usize = 7;
pub const REFERENCE_RANGE: f64 = 2.0;

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub nq: usize,
    pub k: usize,
    pub mse: f64,
    pub psnr_db: f64,
    pub compression: f64,
}

/// Train one model per (Nq, K) configuration with a shared seed and schedule
/// and measure held-out PSNR.
pub fn rate_distortion_sweep(
    train: &DatasetReader,
    holdout: &DatasetReader,
    configs: &[(usize, usize)],
    base: &ActVaeConfig,
    tc: &ActVaeTrainConfig,
) -> Result<Vec<SweepRow>> {
    if configs.len() < 2 {
        return Err(CoreError::Config("sweep needs at least two configurations".into()));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for &(nq, k) in configs {
        let cfg = ActVaeConfig { nq, codebook_size: k, ..base.clone() };
        let (model, _) = train_actvae(train, cfg, tc)?;
        let mse = eval_mse(&model, holdout, 512, 0xE7A1)?;
        let range = 2.0; // normalized actions span [-1, 1]
        rows.push(SweepRow {
            nq,
            k,
            mse,
            psnr_db: psnr(mse, range)?,
            compression: compression_rate(nq, k, base.chunk_len, base.action_dim, mse, range)?,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("nq,k,mse,psnr_db,compression_rate\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.3},{:.4}\n",
            r.nq, r.k, r.mse, r.psnr_db, r.compression
        ));
    }
    out
}
