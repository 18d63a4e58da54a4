//! Latent-space analytics: k-means over pooled window latents, cross-domain
//! retrieval scoring, decoded-trajectory overlays, and the sequential
//! pass-count latency model.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::actvae::ActVae;
use crate::autodiff::Tensor;
use crate::data::{sample_batch, DatasetManifest, DatasetReader};
use crate::error::{CoreError, Result};
use crate::ntp::{generate, NtpModel};
use crate::quantize::LatentTokens;
use crate::rf::{sample_actions, RfExpert};
use crate::rngs;
use crate::sim::Domain;
use crate::vdvae::VdVae;

// ── k-means ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ClusterExemplar {
    pub cluster: usize,
    pub robot: Option<usize>,
    pub human: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterReport {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Nearest window per centroid and domain.
    pub exemplars: Vec<ClusterExemplar>,
    #[serde(skip)]
    pub centroids: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding, 100-iteration cap, deterministic
/// under `seed`. `domains` labels each sample for exemplar lookup.
pub fn cluster_latents(
    samples: &[Vec<f64>],
    domains: &[Domain],
    k: usize,
    seed: u64,
) -> Result<ClusterReport> {
    let n = samples.len();
    if k == 0 || k > n {
        return Err(CoreError::Config(format!("k = {k} with {n} samples")));
    }
    if domains.len() != n {
        return Err(CoreError::Config("domain labels must match sample count".into()));
    }
    let d = samples[0].len();
    let mut rng = rngs::seeded(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(samples[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                r -= w;
                if r <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.push(samples[next].clone());
        for (i, s) in samples.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(s, centroids.last().unwrap()));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let mut new_inertia = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let dist = sq_dist(s, cen);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assignments[i] = best;
            new_inertia += best_d;
        }
        debug_assert!(
            new_inertia <= inertia + 1e-9,
            "inertia increased: {inertia} -> {new_inertia}"
        );
        let converged = (inertia - new_inertia).abs() < 1e-12;
        inertia = new_inertia;
        if converged {
            break;
        }
        // Recompute centroids; empty clusters keep their previous position.
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, s) in samples.iter().enumerate() {
            counts[assignments[i]] += 1;
            for (acc, &v) in sums[assignments[i]].iter_mut().zip(s) {
                *acc += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (cen, acc) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cen = acc / counts[c] as f64;
                }
            }
        }
    }

    let mut exemplars = Vec::with_capacity(k);
    for c in 0..k {
        let mut best: [Option<(usize, f64)>; 2] = [None, None];
        for (i, s) in samples.iter().enumerate() {
            if assignments[i] != c {
                continue;
            }
            let slot = match domains[i] {
                Domain::Robot => 0,
                Domain::Human => 1,
            };
            let dist = sq_dist(s, &centroids[c]);
            if best[slot].map_or(true, |(_, bd)| dist < bd) {
                best[slot] = Some((i, dist));
            }
        }
        exemplars.push(ClusterExemplar {
            cluster: c,
            robot: best[0].map(|(i, _)| i),
            human: best[1].map(|(i, _)| i),
        });
    }

    Ok(ClusterReport {
        k,
        assignments,
        inertia,
        iterations,
        exemplars,
        centroids: centroids.into_iter().flatten().collect(),
    })
}

// ── retrieval ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub candidates: usize,
    pub top1: f64,
    pub top5: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// For each visual latent, rank all action latents by cosine similarity and
/// score whether the matching index lands in the top-1 / top-5.
pub fn retrieval_top_k(visual: &[Vec<f64>], action: &[Vec<f64>]) -> RetrievalReport {
    assert_eq!(visual.len(), action.len());
    let n = visual.len();
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (i, v) in visual.iter().enumerate() {
        let own = cosine(v, &action[i]);
        let better = action
            .iter()
            .enumerate()
            .filter(|(j, a)| *j != i && cosine(v, a) > own)
            .count();
        if better == 0 {
            top1 += 1;
        }
        if better < 5 {
            top5 += 1;
        }
    }
    RetrievalReport {
        candidates: n,
        top1: top1 as f64 / n as f64,
        top5: top5 as f64 / n as f64,
    }
}

/// Pooled latents of `n` held-out robot windows, paired visual/action.
pub fn paired_window_latents(
    vd: &VdVae,
    act: &ActVae,
    reader: &DatasetReader,
    n: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let batch = sample_batch(reader, 1.0, n, seed)?;
    let chunks = batch.action_chunks.as_ref().expect("robot batch");
    let pd = reader.manifest.patches * reader.manifest.feature_dim;
    let hw = reader.manifest.chunk_len * reader.manifest.action_dim;
    let mut visual = Vec::with_capacity(n);
    let mut action = Vec::with_capacity(n);
    for row in 0..n {
        let f_t = &batch.features_t.data()[row * pd..(row + 1) * pd];
        let f_th = &batch.features_th.data()[row * pd..(row + 1) * pd];
        visual.push(vd.pooled_visual_latent(f_t, f_th));
        action.push(act.pooled_latent(&chunks.data()[row * hw..(row + 1) * hw]));
    }
    Ok((visual, action))
}

pub fn retrieval_eval(
    vd: &VdVae,
    act: &ActVae,
    reader: &DatasetReader,
    n: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let (visual, action) = paired_window_latents(vd, act, reader, n, seed)?;
    Ok(retrieval_top_k(&visual, &action))
}

// ── decoded-trajectory overlay ──────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Overlay {
    /// De-normalized (px, py) per chunk step.
    pub polyline: Vec<[f64; 2]>,
    pub csv: String,
    pub svg: String,
}

/// Decode tokens to a chunk, undo normalization, and emit the planar path as
/// CSV rows plus an SVG arrow overlay in table coordinates.
pub fn decode_overlay(
    tokens: &LatentTokens,
    act: &ActVae,
    manifest: &DatasetManifest,
    table_extent: f64,
) -> Result<Overlay> {
    let chunk = act.decode_tokens(tokens)?;
    let raw = manifest.denormalize(chunk.data());
    let da = manifest.action_dim;
    let h = manifest.chunk_len;
    let polyline: Vec<[f64; 2]> = (0..h).map(|t| [raw[t * da], raw[t * da + 1]]).collect();

    let mut csv = String::from("step,px,py,theta,grip\n");
    for t in 0..h {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            t,
            raw[t * da],
            raw[t * da + 1],
            raw[t * da + 2],
            raw[t * da + 3]
        ));
    }

    let e = table_extent;
    let mut svg = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{} {} {} {}">"##,
        -e,
        -e,
        2.0 * e,
        2.0 * e
    );
    svg.push_str(&format!(
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#999" stroke-width="{}"/>"##,
        -e,
        -e,
        2.0 * e,
        2.0 * e,
        e * 0.005
    ));
    let pts: Vec<String> = polyline.iter().map(|p| format!("{:.4},{:.4}", p[0], p[1])).collect();
    svg.push_str(&format!(
        r##"<polyline points="{}" fill="none" stroke="#d62728" stroke-width="{}"/>"##,
        pts.join(" "),
        e * 0.01
    ));
    // Arrowhead at the final segment.
    if h >= 2 {
        let a = polyline[h - 2];
        let b = polyline[h - 1];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = (dx * dx + dy * dy).sqrt().max(1e-12);
        let (ux, uy) = (dx / len, dy / len);
        let s = e * 0.04;
        let left = [b[0] - s * (ux + 0.5 * uy), b[1] - s * (uy - 0.5 * ux)];
        let right = [b[0] - s * (ux - 0.5 * uy), b[1] - s * (uy + 0.5 * ux)];
        svg.push_str(&format!(
            r##"<polygon points="{:.4},{:.4} {:.4},{:.4} {:.4},{:.4}" fill="#d62728"/>"##,
            b[0], b[1], left[0], left[1], right[0], right[1]
        ));
    }
    svg.push_str(&format!(
        r##"<circle cx="{:.4}" cy="{:.4}" r="{}" fill="#1f77b4"/>"##,
        polyline[0][0],
        polyline[0][1],
        e * 0.02
    ));
    svg.push_str("</svg>");

    Ok(Overlay { polyline, csv, svg })
}

// ── latency model ───────────────────────────────────────────────────────

/// Sequential decode passes of the token policy: one per emitted token.
pub fn ntp_pass_count(nq: usize, subtask_tokens: usize, special_tokens: usize) -> usize {
    nq + subtask_tokens + special_tokens
}

/// Sequential passes of the flow policy: the integration steps plus the one
/// backbone pass that builds the context.
pub fn rf_pass_count(steps: usize) -> usize {
    steps + 1
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyRow {
    pub policy: String,
    pub sequential_passes: usize,
    pub wall_ms: f64,
}

/// Measured pass counts and wall clock for both policies on one observation.
/// Wall clock is informational only; pass counts are the model.
pub fn latency_model(
    ntp: &NtpModel,
    act: &ActVae,
    expert: &RfExpert,
    features: &Tensor,
    instruction_id: u32,
) -> Result<Vec<LatencyRow>> {
    let t0 = Instant::now();
    let plan = generate(ntp, act, features, instruction_id)?;
    let ntp_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t0 = Instant::now();
    let (_, rf_expert_passes) =
        sample_actions(expert, ntp, features, instruction_id, expert.cfg.euler_steps, 7)?;
    let rf_ms = t0.elapsed().as_secs_f64() * 1e3;

    Ok(vec![
        LatencyRow {
            policy: "token".into(),
            sequential_passes: plan.forward_passes,
            wall_ms: ntp_ms,
        },
        LatencyRow {
            policy: "flow".into(),
            sequential_passes: rf_pass_count(rf_expert_passes),
            wall_ms: rf_ms,
        },
    ])
}

pub fn pass_count_csv(rows: &[LatencyRow]) -> String {
    let mut out = String::from("policy,sequential_passes\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.policy, r.sequential_passes));
    }
    out
}

pub fn wall_clock_csv(rows: &[LatencyRow]) -> String {
    let mut out = String::from("policy,wall_ms\n");
    for r in rows {
        out.push_str(&format!("{},{:.3}\n", r.policy, r.wall_ms));
    }
    out
}
