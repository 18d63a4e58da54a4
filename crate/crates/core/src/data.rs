//! On-disk episode format, manifests, and the mixed-domain batch sampler.
//!
//! A dataset is a directory holding `manifest.json` (UTF-8 JSON) and
//! `episodes.bin`: an 8-byte magic header `CLAPDS1\0` followed by one
//! length-prefixed blob of little-endian f32 values per episode. Storage is
//! 32-bit, in-memory math is 64-bit; the generator rounds through f32 so
//! round trips are exact.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};
use crate::rngs;
use crate::sim::{Domain, Episode, WorldConfig, NUM_PHASES, NUM_ZONES};

pub const MAGIC: &[u8; 8] = b"CLAPDS1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Robot,
    Human,
}

impl From<Domain> for DomainTag {
    fn from(d: Domain) -> Self {
        match d {
            Domain::Robot => DomainTag::Robot,
            Domain::Human => DomainTag::Human,
        }
    }
}

impl From<&DomainTag> for Domain {
    fn from(d: &DomainTag) -> Self {
        match d {
            DomainTag::Robot => Domain::Robot,
            DomainTag::Human => Domain::Human,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub instruction_id: u32,
    pub domain: DomainTag,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub robot_episodes: usize,
    pub human_episodes: usize,
    pub t_len: usize,
    pub patches: usize,
    pub feature_dim: usize,
    pub action_dim: usize,
    /// Action-chunk window length H used by every training consumer.
    pub chunk_len: usize,
    /// Per-dimension affine map to [-1, 1]: x_norm = (x - offset) / scale.
    pub norm_offset: Vec<f64>,
    pub norm_scale: Vec<f64>,
    pub num_object_types: usize,
    pub num_zones: usize,
    pub num_task_kinds: usize,
    pub num_subtasks: usize,
    pub creation_seed: u64,
    pub episodes: Vec<EpisodeMeta>,
}

impl DatasetManifest {
    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(i, &v)| {
                let d = i % self.action_dim;
                ((v - self.norm_offset[d]) / self.norm_scale[d]).clamp(-1.0, 1.0)
            })
            .collect()
    }

    pub fn denormalize(&self, norm: &[f64]) -> Vec<f64> {
        norm.iter()
            .enumerate()
            .map(|(i, &v)| {
                let d = i % self.action_dim;
                v * self.norm_scale[d] + self.norm_offset[d]
            })
            .collect()
    }

    pub fn windows_per_episode(&self) -> usize {
        self.t_len - self.chunk_len
    }
}

struct StoredEpisode {
    features: Vec<f64>,
    actions: Option<Vec<f64>>,
    hidden: Option<Vec<f64>>,
    subtasks: Vec<u16>,
    instruction_id: u32,
    domain: Domain,
}

/// Training-facing view of one episode; human ground-truth actions are not
/// reachable through this type.
pub struct EpisodeView<'a> {
    pub features: &'a [f64],
    /// Raw (unnormalized) actions; present exactly for robot episodes.
    pub actions: Option<&'a [f64]>,
    pub subtask_ids: &'a [u16],
    pub instruction_id: u32,
    pub domain: Domain,
}

/// Immutable in-memory dataset. Shareable across threads after opening.
pub struct DatasetReader {
    pub manifest: DatasetManifest,
    episodes: Vec<StoredEpisode>,
    robot_idx: Vec<usize>,
    human_idx: Vec<usize>,
}

fn f32s_to_bytes(vals: impl Iterator<Item = f64>, out: &mut Vec<u8>) {
    for v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Write episodes plus a manifest whose normalization is fit on the robot
/// (training) actions. All episodes must share shapes.
pub fn write_dataset(
    episodes: &[Episode],
    path: &Path,
    cfg: &WorldConfig,
    chunk_len: usize,
    creation_seed: u64,
) -> Result<DatasetManifest> {
    if episodes.is_empty() {
        return Err(CoreError::Format("cannot write an empty dataset".into()));
    }
    let t_len = episodes[0].t_len;
    let da = cfg.action_dim();
    let pd = cfg.patches * cfg.feature_dim;
    if t_len < chunk_len + 1 {
        return Err(CoreError::Format(format!(
            "episode length {t_len} too short for chunk window {chunk_len}"
        )));
    }
    for (i, e) in episodes.iter().enumerate() {
        if e.t_len != t_len || e.features.len() != t_len * pd {
            return Err(CoreError::Format(format!("episode {i} has inconsistent shapes")));
        }
    }

    // Per-dimension normalization from the robot split.
    let mut lo = vec![f64::INFINITY; da];
    let mut hi = vec![f64::NEG_INFINITY; da];
    let mut have_robot = false;
    for e in episodes {
        if let Some(actions) = &e.actions {
            have_robot = true;
            for (i, &v) in actions.iter().enumerate() {
                let d = i % da;
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
    }
    if !have_robot {
        return Err(CoreError::Format("dataset needs at least one robot episode".into()));
    }
    let mut norm_offset = vec![0.0; da];
    let mut norm_scale = vec![1.0; da];
    for d in 0..da {
        norm_offset[d] = 0.5 * (hi[d] + lo[d]);
        norm_scale[d] = (0.5 * (hi[d] - lo[d])).max(1e-6);
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        robot_episodes: episodes.iter().filter(|e| e.domain == Domain::Robot).count(),
        human_episodes: episodes.iter().filter(|e| e.domain == Domain::Human).count(),
        t_len,
        patches: cfg.patches,
        feature_dim: cfg.feature_dim,
        action_dim: da,
        chunk_len,
        norm_offset,
        norm_scale,
        num_object_types: cfg.num_object_types,
        num_zones: NUM_ZONES,
        num_task_kinds: 3,
        num_subtasks: NUM_PHASES,
        creation_seed,
        episodes: episodes
            .iter()
            .map(|e| EpisodeMeta { instruction_id: e.instruction_id, domain: e.domain.into() })
            .collect(),
    };

    std::fs::create_dir_all(path)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path.join("manifest.json"), json)?;

    let mut file = std::fs::File::create(path.join("episodes.bin"))?;
    file.write_all(MAGIC)?;
    for e in episodes {
        let acts = e.actions.as_deref().or(e.eval_hidden_actions()).ok_or_else(|| {
            CoreError::Format("episode has neither actions nor hidden actions".into())
        })?;
        let mut payload = Vec::with_capacity(4 * (e.features.len() + acts.len() + t_len));
        f32s_to_bytes(e.features.iter().copied(), &mut payload);
        f32s_to_bytes(acts.iter().copied(), &mut payload);
        f32s_to_bytes(e.subtask_ids.iter().map(|&s| s as f64), &mut payload);
        file.write_all(&(payload.len() as u64).to_le_bytes())?;
        file.write_all(&payload)?;
    }
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<DatasetReader> {
    let json = std::fs::read_to_string(path.join("manifest.json")).map_err(|e| {
        CoreError::MissingArtifact(format!("{}: {e}", path.join("manifest.json").display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }

    let mut file = std::fs::File::open(path.join("episodes.bin"))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|_| CoreError::Format("missing magic header".into()))?;
    if &magic != MAGIC {
        return Err(CoreError::Format(format!("bad magic {magic:?}")));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;

    let pd = manifest.patches * manifest.feature_dim;
    let t_len = manifest.t_len;
    let da = manifest.action_dim;
    let expect_floats = t_len * pd + t_len * da + t_len;

    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    let mut cursor = 0usize;
    for (i, meta) in manifest.episodes.iter().enumerate() {
        if cursor + 8 > rest.len() {
            return Err(CoreError::Format(format!("truncated length prefix at episode {i}")));
        }
        let len = u64::from_le_bytes(rest[cursor..cursor + 8].try_into().unwrap()) as usize;
        cursor += 8;
        if cursor + len > rest.len() {
            return Err(CoreError::Format(format!("truncated blob at episode {i}")));
        }
        if len != expect_floats * 4 {
            return Err(CoreError::Format(format!(
                "episode {i} blob has {len} bytes, expected {}",
                expect_floats * 4
            )));
        }
        let vals = bytes_to_f64s(&rest[cursor..cursor + len]);
        cursor += len;
        let features = vals[..t_len * pd].to_vec();
        let acts = vals[t_len * pd..t_len * pd + t_len * da].to_vec();
        let subtasks: Vec<u16> =
            vals[t_len * pd + t_len * da..].iter().map(|&v| v as u16).collect();
        let domain: Domain = (&meta.domain).into();
        episodes.push(StoredEpisode {
            features,
            actions: if domain == Domain::Robot { Some(acts.clone()) } else { None },
            hidden: if domain == Domain::Human { Some(acts) } else { None },
            subtasks,
            instruction_id: meta.instruction_id,
            domain,
        });
    }
    if cursor != rest.len() {
        return Err(CoreError::Format("trailing bytes after last episode".into()));
    }

    let robot_idx = episodes
        .iter()
        .enumerate()
        .filter(|(_, e)| e.domain == Domain::Robot)
        .map(|(i, _)| i)
        .collect();
    let human_idx = episodes
        .iter()
        .enumerate()
        .filter(|(_, e)| e.domain == Domain::Human)
        .map(|(i, _)| i)
        .collect();
    Ok(DatasetReader { manifest, episodes, robot_idx, human_idx })
}

impl DatasetReader {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn robot_indices(&self) -> &[usize] {
        &self.robot_idx
    }

    pub fn human_indices(&self) -> &[usize] {
        &self.human_idx
    }

    pub fn episode(&self, i: usize) -> EpisodeView<'_> {
        let e = &self.episodes[i];
        EpisodeView {
            features: &e.features,
            actions: e.actions.as_deref(),
            subtask_ids: &e.subtasks,
            instruction_id: e.instruction_id,
            domain: e.domain,
        }
    }

    /// Evaluation interface to withheld human-domain ground truth.
    pub fn eval_hidden_actions(&self, i: usize) -> Option<&[f64]> {
        self.episodes[i].hidden.as_deref()
    }

    pub fn feature_frame(&self, epi: usize, t: usize) -> &[f64] {
        let pd = self.manifest.patches * self.manifest.feature_dim;
        &self.episodes[epi].features[t * pd..(t + 1) * pd]
    }

    /// Normalized H x Da chunk starting at `t`. Robot episodes only.
    pub fn normalized_chunk(&self, epi: usize, t: usize) -> Option<Vec<f64>> {
        let da = self.manifest.action_dim;
        let h = self.manifest.chunk_len;
        let e = &self.episodes[epi];
        let acts = e.actions.as_deref()?;
        Some(self.manifest.normalize(&acts[t * da..(t + h) * da]))
    }

    fn subtask_pair(&self, epi: usize, t: usize) -> (u16, u16) {
        let e = &self.episodes[epi];
        let h = self.manifest.chunk_len;
        let mid = (t + h / 2).min(e.subtasks.len() - 1);
        (e.subtasks[t], e.subtasks[mid])
    }
}

/// One training minibatch of transition windows.
pub struct Batch {
    /// `[B, P, d]` features at window start.
    pub features_t: Tensor,
    /// `[B, P, d]` features at window end (t + H).
    pub features_th: Tensor,
    /// `[B, H, Da]` normalized chunks; rows are defined exactly where
    /// `domain_mask` is true (human rows are zero-filled).
    pub action_chunks: Option<Tensor>,
    pub instruction_ids: Vec<u32>,
    /// Subtask at t and at t + H/2 (the "current, then imminent" pair).
    pub subtask_now: Vec<u16>,
    pub subtask_next: Vec<u16>,
    /// true = robot row.
    pub domain_mask: Vec<bool>,
    pub episode_idx: Vec<usize>,
    pub t_idx: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.domain_mask.len()
    }
}

/// Sample `b` windows with an expected robot fraction of `mix_ratio`.
/// Deterministic in `seed`; windows are drawn with replacement uniformly
/// over episodes of the chosen domain and valid offsets `0..T-H`.
pub fn sample_batch(
    reader: &DatasetReader,
    mix_ratio: f64,
    b: usize,
    seed: u64,
) -> Result<Batch> {
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(CoreError::Config(format!("mix_ratio {mix_ratio} outside [0,1]")));
    }
    if mix_ratio > 0.0 && reader.robot_idx.is_empty() {
        return Err(CoreError::Config("mix_ratio > 0 with empty robot set".into()));
    }
    if mix_ratio < 1.0 && reader.human_idx.is_empty() {
        return Err(CoreError::Config("mix_ratio < 1 with empty human set".into()));
    }
    let m = &reader.manifest;
    let (p, d, da, h) = (m.patches, m.feature_dim, m.action_dim, m.chunk_len);
    let pd = p * d;
    let windows = m.windows_per_episode();

    let mut rng = rngs::seeded(seed);
    let mut features_t = Vec::with_capacity(b * pd);
    let mut features_th = Vec::with_capacity(b * pd);
    let mut chunks = vec![0.0; b * h * da];
    let mut any_robot = false;
    let mut batch = Batch {
        features_t: Tensor::zeros(vec![1]),
        features_th: Tensor::zeros(vec![1]),
        action_chunks: None,
        instruction_ids: Vec::with_capacity(b),
        subtask_now: Vec::with_capacity(b),
        subtask_next: Vec::with_capacity(b),
        domain_mask: Vec::with_capacity(b),
        episode_idx: Vec::with_capacity(b),
        t_idx: Vec::with_capacity(b),
    };

    for row in 0..b {
        let robot = rng.gen::<f64>() < mix_ratio;
        let pool = if robot { &reader.robot_idx } else { &reader.human_idx };
        let epi = pool[rng.gen_range(0..pool.len())];
        let t = rng.gen_range(0..windows);
        features_t.extend_from_slice(reader.feature_frame(epi, t));
        features_th.extend_from_slice(reader.feature_frame(epi, t + h));
        if robot {
            any_robot = true;
            let chunk = reader.normalized_chunk(epi, t).expect("robot episode has actions");
            chunks[row * h * da..(row + 1) * h * da].copy_from_slice(&chunk);
        }
        let (now, next) = reader.subtask_pair(epi, t);
        batch.instruction_ids.push(reader.episodes[epi].instruction_id);
        batch.subtask_now.push(now);
        batch.subtask_next.push(next);
        batch.domain_mask.push(robot);
        batch.episode_idx.push(epi);
        batch.t_idx.push(t);
    }

    batch.features_t = Tensor::new(vec![b, p, d], features_t);
    batch.features_th = Tensor::new(vec![b, p, d], features_th);
    batch.action_chunks = any_robot.then(|| Tensor::new(vec![b, h, da], chunks));
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_episode, Task, TaskKind};

    fn small_cfg() -> WorldConfig {
        WorldConfig { control_rate: 48, ..WorldConfig::default() }
    }

    fn gen_mixed(cfg: &WorldConfig, robot: usize, human: usize) -> Vec<Episode> {
        let mut eps = Vec::new();
        for s in 0..robot {
            let t = Task { kind: TaskKind::PickPlace, target_type: s % 3, zone: s % 4 };
            eps.push(generate_episode(cfg, t, s as u64, Domain::Robot).unwrap());
        }
        for s in 0..human {
            let t = Task { kind: TaskKind::PickPlace, target_type: s % 3, zone: (s + 1) % 4 };
            eps.push(generate_episode(cfg, t, 1000 + s as u64, Domain::Human).unwrap());
        }
        eps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small_cfg();
        let eps = gen_mixed(&cfg, 6, 4);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&eps, dir.path(), &cfg, 16, 7).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        assert_eq!(reader.len(), 10);
        for (i, e) in eps.iter().enumerate() {
            let view = reader.episode(i);
            assert_eq!(view.features, &e.features[..]);
            assert_eq!(view.actions, e.actions.as_deref());
            assert_eq!(view.subtask_ids, &e.subtask_ids[..]);
            assert_eq!(reader.eval_hidden_actions(i), e.eval_hidden_actions());
        }
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let cfg = small_cfg();
        let eps = gen_mixed(&cfg, 2, 0);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&eps, dir.path(), &cfg, 16, 7).unwrap();
        let bin = dir.path().join("episodes.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] = b'X';
        std::fs::write(&bin, bytes).unwrap();
        match read_dataset(dir.path()) {
            Err(CoreError::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            Err(other) => panic!("expected format error, got {other}"),
            Ok(_) => panic!("corrupt magic must not read successfully"),
        }
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let cfg = small_cfg();
        let eps = gen_mixed(&cfg, 2, 0);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&eps, dir.path(), &cfg, 16, 7).unwrap();
        let bin = dir.path().join("episodes.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(CoreError::Format(_))));
    }

    #[test]
    fn normalization_applies_and_inverts() {
        let cfg = small_cfg();
        let eps = gen_mixed(&cfg, 4, 0);
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&eps, dir.path(), &cfg, 16, 7).unwrap();
        let raw = eps[0].actions.as_ref().unwrap();
        let norm = manifest.normalize(raw);
        assert!(norm.iter().all(|v| (-1.0..=1.0).contains(v)), "normalized range");
        let back = manifest.denormalize(&norm);
        for (a, b) in raw.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sampler_honors_pure_robot_mix() {
        let cfg = small_cfg();
        let eps = gen_mixed(&cfg, 3, 3);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&eps, dir.path(), &cfg, 16, 7).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        let batch = sample_batch(&reader, 1.0, 64, 5).unwrap();
        assert!(batch.domain_mask.iter().all(|&r| r));
        assert!(batch.action_chunks.is_some());
    }

    #[test]
    fn sampler_mix_fraction_concentrates() {
        let cfg = small_cfg();
        let eps = gen_mixed(&cfg, 3, 3);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&eps, dir.path(), &cfg, 16, 7).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        let batch = sample_batch(&reader, 0.5, 10_000, 11).unwrap();
        let frac =
            batch.domain_mask.iter().filter(|&&r| r).count() as f64 / batch.rows() as f64;
        assert!((0.48..=0.52).contains(&frac), "robot fraction {frac}");
    }

    #[test]
    fn sampler_is_deterministic_and_errors_on_empty_domain() {
        let cfg = small_cfg();
        let eps = gen_mixed(&cfg, 3, 0);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&eps, dir.path(), &cfg, 16, 7).unwrap();
        let reader = read_dataset(dir.path()).unwrap();

        let a = sample_batch(&reader, 1.0, 16, 3).unwrap();
        let b = sample_batch(&reader, 1.0, 16, 3).unwrap();
        assert_eq!(a.features_t.data(), b.features_t.data());
        assert_eq!(a.t_idx, b.t_idx);

        assert!(sample_batch(&reader, 0.5, 16, 3).is_err(), "need an error on empty human set");
    }

    #[test]
    fn window_offsets_stay_valid() {
        let cfg = small_cfg();
        let eps = gen_mixed(&cfg, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&eps, dir.path(), &cfg, 16, 7).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        let batch = sample_batch(&reader, 0.5, 256, 13).unwrap();
        let max_t = reader.manifest.t_len - reader.manifest.chunk_len;
        assert!(batch.t_idx.iter().all(|&t| t < max_t));
    }
}
