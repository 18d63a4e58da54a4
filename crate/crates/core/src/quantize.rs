//! Codebooks and nearest-neighbor vector quantization with the
//! straight-through estimator.

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::nn::{ParamId, ParamSet};

/// Discrete action representation: indices into a codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentTokens(pub Vec<usize>);

impl LatentTokens {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A `[K, d]` embedding table with usage counters. The embedding rows live in
/// the owning model's [`ParamSet`]; `frozen` mirrors the entry's trainable
/// flag and is irreversible for the rest of the run.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub embeddings: ParamId,
    pub usage_counts: Vec<u64>,
    pub k: usize,
    pub dim: usize,
    pub frozen: bool,
}

impl Codebook {
    pub fn new(embeddings: ParamId, k: usize, dim: usize) -> Self {
        Codebook { embeddings, usage_counts: vec![0; k], k, dim, frozen: false }
    }

    pub fn freeze(&mut self, ps: &mut ParamSet) {
        self.frozen = true;
        ps.entry_mut(self.embeddings).trainable = false;
        ps.value_mut(self.embeddings).requires_grad = false;
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn dead_codes(&self) -> Vec<usize> {
        self.usage_counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Indices of the L2-nearest codebook row for each `dim`-sized row of `z`.
/// Ties break to the lowest index.
pub fn nearest_tokens(z: &[f64], dim: usize, codebook: &[f64], k: usize) -> Vec<usize> {
    assert!(k > 0 && dim > 0);
    assert_eq!(z.len() % dim, 0);
    assert_eq!(codebook.len(), k * dim);
    let rows = z.len() / dim;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let zr = &z[r * dim..(r + 1) * dim];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let cr = &codebook[c * dim..(c + 1) * dim];
            let mut d = 0.0;
            for (a, b) in zr.iter().zip(cr) {
                let t = a - b;
                d += t * t;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out.push(best);
    }
    out
}

/// Outputs of one quantization pass.
pub struct Quantized {
    /// Same value as the gathered codebook rows; gradient flows to the
    /// encoder via the straight-through identity.
    pub z_q: Var,
    /// The gathered rows on the codebook-gradient path.
    pub z_q_rows: Var,
    pub tokens: LatentTokens,
    /// Mean-reduced ||z_e - sg(z_q)||^2.
    pub commit: Var,
    /// Mean-reduced ||sg(z_e) - z_q||^2. Zero gradient reaches a frozen
    /// codebook because its parameter entry is untrainable.
    pub codebook_loss: Var,
}

/// Quantize each row of `z_e` (shape `[..., dim]`) against the codebook,
/// recording usage. The straight-through estimator passes the encoder
/// gradient through unchanged: z_q = z_e + sg(rows - z_e).
pub fn vector_quantize(
    tape: &mut Tape,
    ps: &ParamSet,
    set: usize,
    z_e: Var,
    codebook: &mut Codebook,
) -> Result<Quantized> {
    if codebook.k == 0 {
        return Err(CoreError::Config("empty codebook".into()));
    }
    let shape = tape.shape(z_e).to_vec();
    let dim = *shape.last().unwrap();
    if dim != codebook.dim {
        return Err(CoreError::Shape(format!(
            "latent dim {dim} vs codebook dim {}",
            codebook.dim
        )));
    }
    let cb_values = ps.value(codebook.embeddings).data().to_vec();
    let tokens = nearest_tokens(tape.value(z_e).data(), dim, &cb_values, codebook.k);
    for &t in &tokens {
        codebook.usage_counts[t] += 1;
    }

    let table = ps.bind(tape, set, codebook.embeddings);
    let rows = tape.embedding(table, &tokens);
    let z_q_rows = tape.reshape(rows, shape);

    let sg_rows = tape.stop_gradient(z_q_rows);
    let sg_ze = tape.stop_gradient(z_e);

    let d_commit = tape.sub(z_e, sg_rows);
    let sq_commit = tape.mul(d_commit, d_commit);
    let commit = tape.mean_all(sq_commit);

    let d_code = tape.sub(sg_ze, z_q_rows);
    let sq_code = tape.mul(d_code, d_code);
    let codebook_loss = tape.mean_all(sq_code);

    let delta = tape.sub(z_q_rows, z_e);
    let sg_delta = tape.stop_gradient(delta);
    let z_q = tape.add(z_e, sg_delta);

    Ok(Quantized { z_q, z_q_rows, tokens: LatentTokens(tokens), commit, codebook_loss })
}
