//! Dataset collection via continuous noise distillation, persistent shards
//! and the training batch sampler.
//!
//! Collection runs the demonstrator with progressively noised actions
//! (a = a* + σξ clipped to the action box) so the data covers suboptimal
//! regions, then stores every transition together with the demonstrator's
//! action at that state — the relabel that training regresses onto. Stored
//! values are quantized to f32 at collection time so the in-memory shard and
//! its on-disk form are bit-identical.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envsuite::{EnvError, Split, TaskInstance, Transition, ACTION_BOX};
use crate::ndgrad::Rng;

const SHARD_MAGIC: &[u8; 4] = b"FDSH";
const SHARD_VERSION: u32 = 1;
/// Transitions per CRC-protected block group.
const BLOCK_GROUP: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ShardError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a shard file (bad magic)")]
    BadMagic,
    #[error("shard format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated shard file")]
    Truncated,
    #[error("checksum failure in block group {group}")]
    Checksum { group: usize },
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("manifest says {want} transitions, shard holds {got}")]
    CountMismatch { want: usize, got: usize },
    #[error("collection failed in episode {episode}: {source}")]
    Collect { episode: usize, source: EnvError },
    #[error("no task has at least {0} transitions; cannot sample batches")]
    NoEligibleTasks(usize),
}

/// Noise levels for collection; must include σ=0 so the demonstrator's own
/// distribution is covered.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub levels: Vec<f64>,
    pub episodes_per_level: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { levels: vec![0.0, 0.25, 0.5, 1.0, 2.0], episodes_per_level: 40 }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<(), ShardError> {
        let ok = self.episodes_per_level >= 1
            && !self.levels.is_empty()
            && self.levels.iter().all(|s| *s >= 0.0)
            && self.levels.contains(&0.0);
        if !ok {
            return Err(ShardError::Parse(serde_json::Error::io(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "noise schedule needs non-negative levels including 0 and episodes_per_level >= 1",
            ))));
        }
        Ok(())
    }
}

/// A transition plus the demonstrator's action at its state.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTransition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub action_star: Vec<f64>,
}

impl StoredTransition {
    pub fn to_transition(&self) -> Transition {
        Transition { obs: self.obs.clone(), action: self.action.clone(), reward: self.reward }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardManifest {
    pub format_version: u32,
    pub task_id: String,
    pub group_id: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub reward_scale: f64,
    pub n_transitions: usize,
    pub split: Split,
    pub horizon: usize,
    pub noise_levels: Vec<f64>,
    pub episodes_per_level: usize,
    /// Mean episode return per noise level, in schedule order.
    pub mean_return_per_level: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Shard {
    pub manifest: ShardManifest,
    pub transitions: Vec<StoredTransition>,
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

fn quantize_vec(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| quantize(*x)).collect()
}

/// Collect one task's shard: for each noise level σ, run
/// `episodes_per_level` episodes with behavior a = clip(a* + σξ) and store
/// every transition with its demonstrator relabel.
pub fn collect_cnd(
    task: &TaskInstance,
    schedule: &NoiseSchedule,
    rng: &Rng,
) -> Result<Shard, ShardError> {
    schedule.validate()?;
    let task_rng = rng.stream(&task.task_id);
    let mut transitions = Vec::new();
    let mut mean_returns = Vec::with_capacity(schedule.levels.len());
    let mut episode_counter = 0usize;
    for (level_idx, &sigma) in schedule.levels.iter().enumerate() {
        let level_rng = task_rng.substream(level_idx as u64);
        let mut level_return = 0.0;
        for episode in 0..schedule.episodes_per_level {
            let mut ep_rng = level_rng.substream(episode as u64);
            let mut pending_star: Vec<Vec<f64>> = Vec::with_capacity(task.horizon);
            let result = task
                .run_episode(
                    |obs, r| {
                        let star = task.demonstrator_action(obs, r);
                        let behavior: Vec<f64> = star
                            .iter()
                            .map(|a| (a + sigma * r.normal()).clamp(-ACTION_BOX, ACTION_BOX))
                            .collect();
                        pending_star.push(star);
                        behavior
                    },
                    &mut ep_rng,
                )
                .map_err(|source| ShardError::Collect { episode: episode_counter, source })?;
            episode_counter += 1;
            level_return += result.total_return;
            for (t, star) in result.transitions.into_iter().zip(pending_star) {
                transitions.push(StoredTransition {
                    obs: quantize_vec(&t.obs),
                    action: quantize_vec(&t.action),
                    reward: quantize(t.reward),
                    action_star: quantize_vec(&star),
                });
            }
        }
        mean_returns.push(level_return / schedule.episodes_per_level as f64);
    }
    let manifest = ShardManifest {
        format_version: SHARD_VERSION,
        task_id: task.task_id.clone(),
        group_id: task.group.group_id.clone(),
        obs_dim: task.obs_dim(),
        act_dim: task.act_dim(),
        reward_scale: task.group.reward_scale,
        n_transitions: transitions.len(),
        split: task.split,
        horizon: task.horizon,
        noise_levels: schedule.levels.clone(),
        episodes_per_level: schedule.episodes_per_level,
        mean_return_per_level: mean_returns,
    };
    Ok(Shard { manifest, transitions })
}

fn values_per_transition(manifest: &ShardManifest) -> usize {
    manifest.obs_dim + 2 * manifest.act_dim + 1
}

/// Write `<task_id>.json` + `<task_id>.bin` into `dir`. The binary file is
/// little-endian f32 blocks [o | a_behavior | r | a_star] per transition,
/// grouped with a trailing CRC32 per block group.
pub fn write_shard(dir: &Path, shard: &Shard) -> Result<(PathBuf, PathBuf), ShardError> {
    std::fs::create_dir_all(dir)?;
    let json_path = dir.join(format!("{}.json", shard.manifest.task_id));
    let bin_path = dir.join(format!("{}.bin", shard.manifest.task_id));
    std::fs::write(&json_path, serde_json::to_string_pretty(&shard.manifest)?)?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(&bin_path)?);
    w.write_all(SHARD_MAGIC)?;
    w.write_all(&SHARD_VERSION.to_le_bytes())?;
    for group in shard.transitions.chunks(BLOCK_GROUP) {
        let mut payload = Vec::with_capacity(group.len() * values_per_transition(&shard.manifest) * 4);
        for t in group {
            for x in &t.obs {
                payload.extend_from_slice(&(*x as f32).to_le_bytes());
            }
            for x in &t.action {
                payload.extend_from_slice(&(*x as f32).to_le_bytes());
            }
            payload.extend_from_slice(&(t.reward as f32).to_le_bytes());
            for x in &t.action_star {
                payload.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&payload);
        w.write_all(&payload)?;
        w.write_all(&crc.to_le_bytes())?;
    }
    w.flush()?;
    Ok((json_path, bin_path))
}

/// Read a shard back; verifies version, CRCs and the manifest count.
pub fn read_shard(json_path: &Path) -> Result<Shard, ShardError> {
    let manifest: ShardManifest = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    if manifest.format_version != SHARD_VERSION {
        return Err(ShardError::VersionMismatch {
            found: manifest.format_version,
            expected: SHARD_VERSION,
        });
    }
    let bin_path = json_path.with_extension("bin");
    let mut r = std::io::BufReader::new(std::fs::File::open(&bin_path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ShardError::Truncated)?;
    if &magic != SHARD_MAGIC {
        return Err(ShardError::BadMagic);
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf).map_err(|_| ShardError::Truncated)?;
    let version = u32::from_le_bytes(vbuf);
    if version != SHARD_VERSION {
        return Err(ShardError::VersionMismatch { found: version, expected: SHARD_VERSION });
    }

    let per = values_per_transition(&manifest);
    let mut transitions = Vec::with_capacity(manifest.n_transitions);
    let mut remaining = manifest.n_transitions;
    let mut group_idx = 0usize;
    while remaining > 0 {
        let count = remaining.min(BLOCK_GROUP);
        let mut payload = vec![0u8; count * per * 4];
        r.read_exact(&mut payload).map_err(|_| ShardError::Truncated)?;
        let mut crc_buf = [0u8; 4];
        r.read_exact(&mut crc_buf).map_err(|_| ShardError::Truncated)?;
        if crc32fast::hash(&payload) != u32::from_le_bytes(crc_buf) {
            return Err(ShardError::Checksum { group: group_idx });
        }
        let mut vals = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64);
        for _ in 0..count {
            let obs: Vec<f64> = (&mut vals).take(manifest.obs_dim).collect();
            let action: Vec<f64> = (&mut vals).take(manifest.act_dim).collect();
            let reward = vals.next().ok_or(ShardError::Truncated)?;
            let action_star: Vec<f64> = (&mut vals).take(manifest.act_dim).collect();
            transitions.push(StoredTransition { obs, action, reward, action_star });
        }
        remaining -= count;
        group_idx += 1;
    }
    if transitions.len() != manifest.n_transitions {
        return Err(ShardError::CountMismatch {
            want: manifest.n_transitions,
            got: transitions.len(),
        });
    }
    Ok(Shard { manifest, transitions })
}

/// Query observation, length-L permuted context and the relabeled optimal
/// action, all from the same task.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub task_id: String,
    pub group_id: String,
    pub obs_query: Vec<f64>,
    pub context: Vec<Transition>,
    pub action_star: Vec<f64>,
}

/// Shards loaded for training.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub shards: Vec<Shard>,
}

impl Dataset {
    pub fn load_dir(dir: &Path) -> Result<Self, ShardError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let mut shards = Vec::with_capacity(paths.len());
        for p in paths {
            shards.push(read_shard(&p)?);
        }
        Ok(Dataset { shards })
    }

    pub fn n_transitions(&self) -> usize {
        self.shards.iter().map(|s| s.transitions.len()).sum()
    }

    pub fn shard(&self, task_id: &str) -> Option<&Shard> {
        self.shards.iter().find(|s| s.manifest.task_id == task_id)
    }
}

/// Samples DPT batches: tasks weighted by transition count, query uniform,
/// context of L other transitions in uniformly random order. Tasks with
/// fewer than L+1 transitions are excluded (reported via `skipped`).
#[derive(Debug)]
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    context_len: usize,
    eligible: Vec<usize>,
    cumulative: Vec<u64>,
    pub skipped: Vec<String>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, context_len: usize) -> Result<Self, ShardError> {
        let mut eligible = Vec::new();
        let mut cumulative = Vec::new();
        let mut skipped = Vec::new();
        let mut acc = 0u64;
        for (idx, shard) in dataset.shards.iter().enumerate() {
            if shard.transitions.len() > context_len {
                eligible.push(idx);
                acc += shard.transitions.len() as u64;
                cumulative.push(acc);
            } else {
                skipped.push(shard.manifest.task_id.clone());
            }
        }
        if eligible.is_empty() {
            return Err(ShardError::NoEligibleTasks(context_len + 1));
        }
        Ok(BatchSampler { dataset, context_len, eligible, cumulative, skipped })
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    fn pick_shard(&self, rng: &mut Rng) -> &'a Shard {
        let total = *self.cumulative.last().expect("non-empty");
        let x = rng.below(total);
        let pos = self.cumulative.partition_point(|&c| c <= x);
        &self.dataset.shards[self.eligible[pos]]
    }

    pub fn sample(&self, rng: &mut Rng) -> TrainingSample {
        let shard = self.pick_shard(rng);
        let n = shard.transitions.len();
        let query_idx = rng.below(n as u64) as usize;
        // uniformly ordered L-subset of the other indices via partial shuffle
        let mut others: Vec<usize> = (0..n).filter(|i| *i != query_idx).collect();
        for i in 0..self.context_len {
            let j = i + rng.below((others.len() - i) as u64) as usize;
            others.swap(i, j);
        }
        let context: Vec<Transition> =
            others[..self.context_len].iter().map(|&i| shard.transitions[i].to_transition()).collect();
        let query = &shard.transitions[query_idx];
        TrainingSample {
            task_id: shard.manifest.task_id.clone(),
            group_id: shard.manifest.group_id.clone(),
            obs_query: query.obs.clone(),
            context,
            action_star: query.action_star.clone(),
        }
    }

    pub fn sample_batch(&self, batch_size: usize, rng: &mut Rng) -> Vec<TrainingSample> {
        (0..batch_size).map(|_| self.sample(rng)).collect()
    }
}
