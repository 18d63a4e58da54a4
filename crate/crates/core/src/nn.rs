//! Transformer building blocks, parameter storage, and the Adam optimizer.
//!
//! All models keep their weights in a [`ParamSet`]; a training step binds the
//! current values onto a fresh [`Tape`], runs backward, copies gradients back
//! into the set, and lets [`Adam`] apply the update. Set indices distinguish
//! multiple models on one tape (e.g. backbone vs action expert).

use rand::Rng;

use crate::autodiff::{Grads, Tape, Tensor, Var};

// ── parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Per-parameter learning-rate multiplier (codebooks train faster).
    pub lr_scale: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add_with(name, value, true, 1.0)
    }

    pub fn add_with(
        &mut self,
        name: &str,
        value: Tensor,
        trainable: bool,
        lr_scale: f64,
    ) -> ParamId {
        let mut value = value;
        value.requires_grad = trainable;
        self.entries.push(ParamEntry { name: name.to_string(), value, trainable, lr_scale });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data))
    }

    /// Gaussian init, used for embedding tables.
    pub fn normal<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = crate::rngs::normal_vec(rng, n, std);
        self.add(name, Tensor::new(shape, data))
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![1.0; n]))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry)> {
        self.entries.iter_mut().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Bind the current value of a parameter onto the tape as set `set`.
    pub fn bind(&self, tape: &mut Tape, set: usize, id: ParamId) -> Var {
        tape.param_leaf(&self.entries[id.0].value, set, id.0)
    }

    /// Copy gradients for set `set` out of a backward sweep into the grad
    /// slots of trainable entries (accumulating).
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Grads, set: usize) {
        for (idx, g) in tape.param_grads(grads, set) {
            let entry = &mut self.entries[idx];
            if !entry.trainable {
                continue;
            }
            if entry.value.grad.is_none() {
                entry.value.alloc_grad();
            }
            let slot = entry.value.grad.as_mut().unwrap();
            for (o, gv) in slot.iter_mut().zip(&g) {
                *o += gv;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            if let Some(g) = &mut e.value.grad {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Global-norm gradient clip; returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let mut sq = 0.0;
        for e in &self.entries {
            if let Some(g) = &e.value.grad {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for e in &mut self.entries {
                if let Some(g) = &mut e.value.grad {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        norm
    }
}

// ── optimizer & schedule ────────────────────────────────────────────────

pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(ps: &ParamSet) -> Self {
        let m = ps.entries.iter().map(|e| vec![0.0; e.value.numel()]).collect();
        let v = ps.entries.iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Adam { m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update from the grad slots; grads are consumed (zeroed).
    pub fn step(&mut self, ps: &mut ParamSet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, e) in ps.entries.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let Some(mut g) = e.value.grad.take() else { continue };
            let rate = lr * e.lr_scale;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = e.value.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= rate * mhat / (vhat.sqrt() + self.eps);
                g[j] = 0.0;
            }
            e.value.grad = Some(g);
        }
    }

    /// Forget optimizer state for `rows` of a `[K, D]` parameter (codebook
    /// revival re-seeds rows; stale moments would drag them back).
    pub fn reset_rows(&mut self, id: ParamId, rows: &[usize], width: usize) {
        for &r in rows {
            for j in r * width..(r + 1) * width {
                self.m[id.0][j] = 0.0;
                self.v[id.0][j] = 0.0;
            }
        }
    }
}

/// Linear warmup to `base`, then cosine decay to `base * min_frac`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_frac: f64,
}

impl LrSchedule {
    pub fn new(base: f64, warmup: usize, total: usize) -> Self {
        LrSchedule { base, warmup, total, min_frac: 0.1 }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return self.base;
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        let progress = progress.min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.base * (self.min_frac + (1.0 - self.min_frac) * cos)
    }
}

// ── attention ───────────────────────────────────────────────────────────

/// Head layout plus the two gradient-shaping switches.
#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
    /// Wrap keys and values in stop-gradient so their producers get nothing.
    pub insulated: bool,
}

/// Scaled dot-product attention over `[B, S, W]` (or `[S, W]`) inputs whose
/// width `W` is `num_heads * head_dim`. Keys and values must share sequence
/// length; with `causal`, query position i attends to positions <= i.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, cfg: AttentionConfig) -> Var {
    let width = cfg.num_heads * cfg.head_dim;
    let two_d = tape.shape(q).len() == 2;
    let (q, k, v) = if two_d {
        let qs = tape.shape(q).to_vec();
        let ks = tape.shape(k).to_vec();
        let vs = tape.shape(v).to_vec();
        (
            tape.reshape(q, vec![1, qs[0], qs[1]]),
            tape.reshape(k, vec![1, ks[0], ks[1]]),
            tape.reshape(v, vec![1, vs[0], vs[1]]),
        )
    } else {
        (q, k, v)
    };
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    assert!(
        qs[2] == width && ks[2] == width && vs[2] == width,
        "attention: widths {qs:?}/{ks:?}/{vs:?} vs {} heads x {} dims",
        cfg.num_heads,
        cfg.head_dim
    );
    assert_eq!(ks[1], vs[1], "attention: key/value sequence length mismatch");
    assert!(qs[0] == ks[0] && qs[0] == vs[0], "attention: batch mismatch");

    let (k, v) =
        if cfg.insulated { (tape.stop_gradient(k), tape.stop_gradient(v)) } else { (k, v) };
    let qh = tape.split_heads(q, cfg.num_heads);
    let kh = tape.split_heads(k, cfg.num_heads);
    let vh = tape.split_heads(v, cfg.num_heads);
    let scores = tape.bmm_nt(qh, kh);
    let scaled = tape.scale(scores, 1.0 / (cfg.head_dim as f64).sqrt());
    let probs = tape.softmax(scaled, cfg.causal);
    let ctx = tape.bmm(probs, vh);
    let merged = tape.merge_heads(ctx, cfg.num_heads);
    if two_d {
        let s = tape.shape(merged).to_vec();
        tape.reshape(merged, vec![s[1], s[2]])
    } else {
        merged
    }
}

// ── layers ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let w = ps.uniform(&format!("{name}.w"), vec![din, dout], din, rng);
        let b = ps.uniform(&format!("{name}.b"), vec![dout], din, rng);
        Linear { w, b, din, dout }
    }

    /// Applies to the last dim of `x`.
    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, set: usize, x: Var) -> Var {
        let d = *tape.shape(x).last().expect("linear input");
        assert_eq!(d, self.din, "linear: input dim {d} != {}", self.din);
        let w = ps.bind(tape, set, self.w);
        let b = ps.bind(tape, set, self.b);
        let h = tape.matmul(x, w);
        tape.add_bias(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = ps.ones(&format!("{name}.g"), vec![dim]);
        let beta = ps.zeros(&format!("{name}.b"), vec![dim]);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, set: usize, x: Var) -> Var {
        let g = ps.bind(tape, set, self.gamma);
        let b = ps.bind(tape, set, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHead {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHead {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(width % heads, 0, "width {width} not divisible by heads {heads}");
        MultiHead {
            wq: Linear::new(ps, &format!("{name}.wq"), width, width, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), width, width, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), width, width, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), width, width, rng),
            heads,
        }
    }

    /// Self- or cross-attention depending on whether `kv_in` differs from
    /// `q_in`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        set: usize,
        q_in: Var,
        kv_in: Var,
        causal: bool,
        insulated: bool,
    ) -> Var {
        let width = self.wq.dout;
        let q = self.wq.forward(tape, ps, set, q_in);
        let k = self.wk.forward(tape, ps, set, kv_in);
        let v = self.wv.forward(tape, ps, set, kv_in);
        let cfg = AttentionConfig {
            num_heads: self.heads,
            head_dim: width / self.heads,
            causal,
            insulated,
        };
        let a = attention(tape, q, k, v, cfg);
        self.wo.forward(tape, ps, set, a)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), width, hidden, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, set: usize, x: Var) -> Var {
        let h = self.fc1.forward(tape, ps, set, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, ps, set, h)
    }
}

/// Pre-norm residual transformer block, optionally with a cross-attention
/// sublayer between self-attention and the MLP.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHead,
    pub cross: Option<(LayerNorm, MultiHead)>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    /// Desk-scale blocks use a 2x MLP expansion.
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Block::with_hidden(ps, name, width, heads, 2 * width, rng)
    }

    pub fn with_hidden<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), width),
            attn: MultiHead::new(ps, &format!("{name}.attn"), width, heads, rng),
            cross: None,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), width),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), width, hidden, rng),
        }
    }

    pub fn with_cross<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let mut b = Block::new(ps, name, width, heads, rng);
        b.cross = Some((
            LayerNorm::new(ps, &format!("{name}.lnc"), width),
            MultiHead::new(ps, &format!("{name}.xattn"), width, heads, rng),
        ));
        b
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        set: usize,
        x: Var,
        causal: bool,
        context: Option<Var>,
    ) -> Var {
        let h = self.ln1.forward(tape, ps, set, x);
        let a = self.attn.forward(tape, ps, set, h, h, causal, false);
        let mut x = tape.add(x, a);
        if let (Some((lnc, xattn)), Some(ctx)) = (&self.cross, context) {
            let h = lnc.forward(tape, ps, set, x);
            let a = xattn.forward(tape, ps, set, h, ctx, false, false);
            x = tape.add(x, a);
        }
        let h = self.ln2.forward(tape, ps, set, x);
        let m = self.mlp.forward(tape, ps, set, h);
        tape.add(x, m)
    }
}

// ── factorized attention ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorizedMode {
    Spatial,
    Spatiotemporal,
}

/// Attention over a (T, P) token grid: a spatial pass within each time slot,
/// and for `Spatiotemporal` a temporal pass across T per patch index. Each
/// pass is a pre-norm residual sublayer. A single time slot has no temporal
/// relations, so the temporal pass is skipped when T == 1.
#[derive(Debug, Clone)]
pub struct FactorizedAttention {
    pub ln_s: LayerNorm,
    pub attn_s: MultiHead,
    pub ln_t: LayerNorm,
    pub attn_t: MultiHead,
}

impl FactorizedAttention {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        FactorizedAttention {
            ln_s: LayerNorm::new(ps, &format!("{name}.ln_s"), width),
            attn_s: MultiHead::new(ps, &format!("{name}.attn_s"), width, heads, rng),
            ln_t: LayerNorm::new(ps, &format!("{name}.ln_t"), width),
            attn_t: MultiHead::new(ps, &format!("{name}.attn_t"), width, heads, rng),
        }
    }

    /// `x` is `[B, T*P, d]` with the middle axis in (time, patch) row-major
    /// order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        set: usize,
        x: Var,
        t: usize,
        p: usize,
        mode: FactorizedMode,
    ) -> Var {
        assert!(t >= 1 && p >= 1, "factorized attention needs T >= 1 and P >= 1");
        let s = tape.shape(x).to_vec();
        assert!(s.len() == 3 && s[1] == t * p, "factorized attention: {s:?} as ({t},{p})");
        let (b, d) = (s[0], s[2]);

        // Spatial pass: attend over P within each of the B*T time slots.
        let grouped = tape.reshape(x, vec![b * t, p, d]);
        let h = self.ln_s.forward(tape, ps, set, grouped);
        let a = self.attn_s.forward(tape, ps, set, h, h, false, false);
        let spatial = tape.add(grouped, a);
        let spatial = tape.reshape(spatial, vec![b, t * p, d]);

        if mode == FactorizedMode::Spatial || t == 1 {
            return spatial;
        }

        // Temporal pass: attend over T per patch index.
        let swapped = tape.transpose_grid(spatial, t, p);
        let grouped = tape.reshape(swapped, vec![b * p, t, d]);
        let h = self.ln_t.forward(tape, ps, set, grouped);
        let a = self.attn_t.forward(tape, ps, set, h, h, false, false);
        let out = tape.add(grouped, a);
        let out = tape.reshape(out, vec![b, p * t, d]);
        tape.transpose_grid(out, p, t)
    }
}

/// Learned absolute position embeddings added to a `[B, S, d]` sequence.
#[derive(Debug, Clone)]
pub struct PositionEmbedding {
    pub table: ParamId,
    pub max_len: usize,
}

impl PositionEmbedding {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        max_len: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = ps.normal(name, vec![max_len, dim], 0.02, rng);
        PositionEmbedding { table, max_len }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, set: usize, x: Var) -> Var {
        let s = tape.shape(x).to_vec();
        assert!(s.len() == 3 && s[1] <= self.max_len, "position embedding: {s:?}");
        let table = ps.bind(tape, set, self.table);
        let rows = tape.embedding(table, &(0..s[1]).collect::<Vec<_>>());
        tape.add_row_broadcast(x, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rngs;

    #[test]
    fn attention_single_key_value_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::new(vec![3, 4], vec![0.3; 12]));
        let k = tape.leaf(Tensor::new(vec![1, 4], vec![1.0, -1.0, 0.5, 2.0]));
        let v = tape.leaf(Tensor::new(vec![1, 4], vec![7.0, 8.0, 9.0, 10.0]));
        let cfg = AttentionConfig { num_heads: 2, head_dim: 2, causal: false, insulated: false };
        let out = attention(&mut tape, q, k, v, cfg);
        for row in tape.value(out).data().chunks(4) {
            assert_eq!(row, &[7.0, 8.0, 9.0, 10.0]);
        }
    }

    #[test]
    fn causal_query_zero_sees_only_first_kv() {
        let mut rng = rngs::seeded(3);
        let data: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |kv: &[f64]| {
            let mut tape = Tape::new();
            let q = tape.leaf(Tensor::new(vec![5, 4], data.clone()));
            let k = tape.leaf(Tensor::new(vec![5, 4], kv.to_vec()));
            let v = tape.leaf(Tensor::new(vec![5, 4], kv.to_vec()));
            let cfg = AttentionConfig { num_heads: 1, head_dim: 4, causal: true, insulated: false };
            let out = attention(&mut tape, q, k, v, cfg);
            tape.value(out).data()[0..4].to_vec()
        };
        let base: Vec<f64> = (0..20).map(|i| (i as f64 * 0.17).sin()).collect();
        let mut perturbed = base.clone();
        for x in &mut perturbed[4..] {
            *x += 100.0;
        }
        assert_eq!(run(&base), run(&perturbed), "position 0 must ignore later keys/values");
    }

    #[test]
    fn insulated_attention_leaves_kv_producers_untouched() {
        let mut rng = rngs::seeded(5);
        let mut ps = ParamSet::new();
        let proj = Linear::new(&mut ps, "kv_proj", 4, 4, &mut rng);
        let before = ps.value(proj.w).clone();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 4], vec![0.2, -0.4, 0.8, 0.1, 0.9, 0.3, -0.2, 0.5]));
        let kv = proj.forward(&mut tape, &ps, 0, x);
        let q = tape.leaf(Tensor::new(vec![2, 4], vec![0.5; 8]));
        let cfg = AttentionConfig { num_heads: 2, head_dim: 2, causal: false, insulated: true };
        let out = attention(&mut tape, q, kv, kv, cfg);
        let loss = tape.mean_all(out);
        let grads = tape.backward(loss);
        ps.accumulate_grads(&tape, &grads, 0);
        let mut adam = Adam::new(&ps);
        adam.step(&mut ps, 1e-2);

        assert_eq!(ps.value(proj.w).data(), before.data(), "producer params must be bit-identical");
    }

    #[test]
    fn attention_grad_check() {
        let mut rng = rngs::seeded(7);
        let kv: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let rel = grad_check(
            |tape, q| {
                let k = tape.leaf(Tensor::new(vec![3, 4], kv.clone()));
                let v = tape.leaf(Tensor::new(vec![3, 4], kv.clone()));
                let cfg =
                    AttentionConfig { num_heads: 2, head_dim: 2, causal: true, insulated: false };
                let out = attention(tape, q, k, v, cfg);
                let sq = tape.mul(out, out);
                tape.mean_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-4, "attention grad rel error {rel}");
    }

    #[test]
    fn factorized_single_time_slot_equals_spatial() {
        let mut rng = rngs::seeded(11);
        let mut ps = ParamSet::new();
        let fa = FactorizedAttention::new(&mut ps, "fa", 8, 2, &mut rng);
        let x = Tensor::new(vec![2, 4, 8], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let spatial = fa.forward(&mut tape, &ps, 0, xv, 1, 4, FactorizedMode::Spatial);
        let st = fa.forward(&mut tape, &ps, 0, xv, 1, 4, FactorizedMode::Spatiotemporal);
        assert_eq!(tape.value(spatial).data(), tape.value(st).data());
    }

    #[test]
    fn factorized_single_patch_spatial_is_projection_only() {
        // With one token per slot the softmax has a single logit, so the
        // spatial pass reduces to x + wo(wv(ln(x))): no cross-token mixing.
        let mut rng = rngs::seeded(13);
        let mut ps = ParamSet::new();
        let fa = FactorizedAttention::new(&mut ps, "fa", 8, 2, &mut rng);
        let x = Tensor::new(vec![1, 3, 8], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = fa.forward(&mut tape, &ps, 0, xv, 3, 1, FactorizedMode::Spatial);

        let grouped = tape.reshape(xv, vec![3, 1, 8]);
        let h = fa.ln_s.forward(&mut tape, &ps, 0, grouped);
        let v = fa.attn_s.wv.forward(&mut tape, &ps, 0, h);
        let proj = fa.attn_s.wo.forward(&mut tape, &ps, 0, v);
        let want = tape.add(grouped, proj);
        let want = tape.reshape(want, vec![1, 3, 8]);
        let got = tape.value(out).data();
        let expect = tape.value(want).data();
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn factorized_spatiotemporal_differs_in_general() {
        let mut rng = rngs::seeded(17);
        let mut ps = ParamSet::new();
        let fa = FactorizedAttention::new(&mut ps, "fa", 8, 2, &mut rng);
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let spatial = fa.forward(&mut tape, &ps, 0, xv, 2, 4, FactorizedMode::Spatial);
        let st = fa.forward(&mut tape, &ps, 0, xv, 2, 4, FactorizedMode::Spatiotemporal);
        let diff: f64 = tape
            .value(spatial)
            .data()
            .iter()
            .zip(tape.value(st).data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "temporal pass should change the output");
    }

    #[test]
    fn factorized_grad_check() {
        let mut rng = rngs::seeded(19);
        let mut ps = ParamSet::new();
        let fa = FactorizedAttention::new(&mut ps, "fa", 4, 2, &mut rng);
        let x = Tensor::new(vec![1, 6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let rel = grad_check(
            |tape, xv| {
                let out = fa.forward(tape, &ps, 0, xv, 2, 3, FactorizedMode::Spatiotemporal);
                let sq = tape.mul(out, out);
                tape.mean_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-4, "factorized grad rel error {rel}");
    }

    #[test]
    #[should_panic(expected = "T >= 1 and P >= 1")]
    fn factorized_zero_patches_panics() {
        let mut rng = rngs::seeded(23);
        let mut ps = ParamSet::new();
        let fa = FactorizedAttention::new(&mut ps, "fa", 4, 2, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 0, 4], vec![]));
        fa.forward(&mut tape, &ps, 0, x, 0, 0, FactorizedMode::Spatial);
    }

    #[test]
    fn block_grad_check() {
        let mut rng = rngs::seeded(29);
        let mut ps = ParamSet::new();
        let block = Block::new(&mut ps, "b", 4, 2, &mut rng);
        let x = Tensor::new(vec![1, 3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let rel = grad_check(
            |tape, xv| {
                let out = block.forward(tape, &ps, 0, xv, true, None);
                let sq = tape.mul(out, out);
                tape.mean_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-4, "block grad rel error {rel}");
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut rng = rngs::seeded(31);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "l", 3, 2, &mut rng);
        let before = ps.value(lin.w).clone();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let y = lin.forward(&mut tape, &ps, 0, x);
        let sq = tape.mul(y, y);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        ps.accumulate_grads(&tape, &grads, 0);
        let mut adam = Adam::new(&ps);
        adam.step(&mut ps, 0.0);
        assert_eq!(ps.value(lin.w).data(), before.data());
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let mut ps = ParamSet::new();
        let p = ps.add("x", Tensor::new(vec![2], vec![5.0, -3.0]));
        let mut adam = Adam::new(&ps);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = ps.bind(&mut tape, 0, p);
            let sq = tape.mul(x, x);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            ps.accumulate_grads(&tape, &grads, 0);
            adam.step(&mut ps, 0.05);
        }
        for &v in ps.value(p).data() {
            assert!(v.abs() < 1e-2, "should approach 0, got {v}");
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule::new(1e-3, 100, 1000);
        assert!(s.at(0) < s.at(50));
        assert!((s.at(99) - 1e-3).abs() < 2e-5);
        assert!(s.at(500) < 1e-3);
        assert!(s.at(999) >= 1e-4 - 1e-12);
        assert!(s.at(2000) >= 1e-4 - 1e-12);
    }

    #[test]
    fn untrainable_params_never_move() {
        let mut ps = ParamSet::new();
        let frozen = ps.add_with("frozen", Tensor::new(vec![2], vec![1.0, 2.0]), false, 1.0);
        let live = ps.add("live", Tensor::new(vec![2], vec![1.0, 2.0]));
        let mut adam = Adam::new(&ps);
        let mut tape = Tape::new();
        let f = ps.bind(&mut tape, 0, frozen);
        let l = ps.bind(&mut tape, 0, live);
        let s = tape.add(f, l);
        let sq = tape.mul(s, s);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        ps.accumulate_grads(&tape, &grads, 0);
        adam.step(&mut ps, 0.1);
        assert_eq!(ps.value(frozen).data(), &[1.0, 2.0]);
        assert_ne!(ps.value(live).data(), &[1.0, 2.0]);
    }
}
