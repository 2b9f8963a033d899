use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::augment::{crop_with_offset, random_offset};
use super::env::{env_reset, env_step, expert_action, render, Action, EnvConfig};
use crate::diffcore::{Reader, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const DATASET_MAGIC: [u8; 4] = *b"IGDS";
pub const DATASET_VERSION: u32 = 1;

/// Field order of one binary record. Every field is a run of 32-bit words.
pub const RECORD_LAYOUT: [&str; 8] = [
    "obs_t:f32[C*H*W]",
    "obs_next:f32[C*H*W]",
    "obs_k:f32[C*H*W]",
    "action:u32",
    "expert_action:u32",
    "k:u32",
    "reward:f32",
    "relevance_t:u32[ceil(H*W/32)]",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Random,
    /// Expert action with probability `1 - epsilon`, uniform otherwise.
    EpsExpert {
        epsilon: f64,
    },
}

impl Default for Policy {
    fn default() -> Self {
        Policy::EpsExpert { epsilon: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub env: EnvConfig,
    pub episodes: usize,
    /// Largest future offset `K`.
    pub horizon_cap: usize,
    pub policy: Policy,
    pub seed: u64,
    /// Render noise-free observations (no texture, no decoy).
    pub eval_mode: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            episodes: 100,
            horizon_cap: 5,
            policy: Policy::default(),
            seed: 0,
            eval_mode: false,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.horizon_cap == 0 || self.horizon_cap >= self.env.episode_len {
            return Err(Error::Config(format!(
                "horizon cap K={} must satisfy 1 <= K < T={}",
                self.horizon_cap, self.env.episode_len
            )));
        }
        if self.episodes == 0 {
            return Err(Error::Config("dataset needs at least one episode".into()));
        }
        if let Policy::EpsExpert { epsilon } = self.policy {
            if !(0.0..=1.0).contains(&epsilon) {
                return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn records_per_episode(&self) -> usize {
        self.env.episode_len - self.horizon_cap
    }
}

/// One `(x_t, a_t, x_{t+1}, x_{t+k})` record. Frames are shared between the
/// records of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs_t: Arc<[f32]>,
    pub obs_next: Arc<[f32]>,
    pub obs_k: Arc<[f32]>,
    pub action: usize,
    pub expert_action: usize,
    pub k: usize,
    pub reward: f32,
    pub relevance_t: Arc<[bool]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: DatasetSpec,
    pub episodes: usize,
    pub records: usize,
    /// `[C, H, W]`.
    pub obs_shape: [usize; 3],
    /// Per-channel statistics of `obs_t` over the whole dataset.
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
    pub layout: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<Transition>,
}

/// A minibatch, observations stacked as `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs_t: Tensor<f32>,
    pub obs_next: Tensor<f32>,
    pub obs_k: Tensor<f32>,
    pub actions: Vec<usize>,
    pub expert_actions: Vec<usize>,
    pub ks: Vec<usize>,
    pub rewards: Vec<f32>,
    /// `[B, H, W]` flattened.
    pub relevance: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

const POLICY_STREAM: u64 = 1;
const HORIZON_STREAM: u64 = 2;

fn choose_action(policy: Policy, expert: usize, rng: &mut Rng) -> usize {
    match policy {
        Policy::Random => rng.gen_range(0..Action::COUNT),
        Policy::EpsExpert { epsilon } => {
            if rng.gen::<f64>() < epsilon {
                rng.gen_range(0..Action::COUNT)
            } else {
                expert
            }
        }
    }
}

fn episode(spec: &DatasetSpec, e: usize) -> Result<Vec<Transition>> {
    let cfg = &spec.env;
    let seed = rng::mix(spec.seed, e as u64);
    let mut policy_rng = rng::stream(seed, POLICY_STREAM);
    let mut k_rng = rng::stream(seed, HORIZON_STREAM);
    let mut state = env_reset(cfg, seed)?;
    let t_len = cfg.episode_len;
    let mut frames = Vec::with_capacity(t_len);
    let mut steps = Vec::with_capacity(t_len - 1);
    let (obs, rel) = render(cfg, &state, spec.eval_mode);
    frames.push((Arc::<[f32]>::from(obs), Arc::<[bool]>::from(rel)));
    for _ in 1..t_len {
        let expert = expert_action(cfg, &state);
        let action = choose_action(spec.policy, expert, &mut policy_rng);
        let reward = env_step(cfg, &mut state, action)?;
        steps.push((action, expert, reward));
        let (obs, rel) = render(cfg, &state, spec.eval_mode);
        frames.push((obs.into(), rel.into()));
    }
    let cap = spec.horizon_cap;
    Ok((0..t_len - cap)
        .map(|t| {
            let k = k_rng.gen_range(1..=cap);
            let (action, expert_action, reward) = steps[t];
            Transition {
                obs_t: frames[t].0.clone(),
                obs_next: frames[t + 1].0.clone(),
                obs_k: frames[t + k].0.clone(),
                action,
                expert_action,
                k,
                reward,
                relevance_t: frames[t].1.clone(),
            }
        })
        .collect())
}

fn channel_stats(records: &[Transition], channels: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for r in records {
        let plane = r.obs_t.len() / channels;
        for (c, chunk) in r.obs_t.chunks(plane).enumerate() {
            for &v in chunk {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
        count += plane;
    }
    let n = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / n - m * m).max(0.0)).sqrt() as f32)
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

/// Rolls out `spec.episodes` episodes; episode `e` is seeded with
/// `mix(seed, e)`, so the output does not depend on generation order.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.episodes * spec.records_per_episode());
    for e in 0..spec.episodes {
        records.extend(episode(spec, e)?);
    }
    let cfg = &spec.env;
    let (norm_mean, norm_std) = channel_stats(&records, cfg.channels);
    Ok(Dataset {
        meta: DatasetMeta {
            spec: spec.clone(),
            episodes: spec.episodes,
            records: records.len(),
            obs_shape: [cfg.channels, cfg.size, cfg.size],
            norm_mean,
            norm_std,
            layout: RECORD_LAYOUT.iter().map(|s| s.to_string()).collect(),
            config_hash: None,
        },
        records,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        self.meta.obs_shape
    }

    fn obs_len(&self) -> usize {
        self.meta.obs_shape.iter().product()
    }

    fn relevance_words(&self) -> usize {
        let [_, h, w] = self.meta.obs_shape;
        (h * w).div_ceil(32)
    }

    fn record_bytes(&self) -> usize {
        4 * (3 * self.obs_len() + 4 + self.relevance_words())
    }

    /// Stacks the given records. With `crop = Some((pad, rng))` every record
    /// gets its own random crop, shared by all of its frames and its
    /// relevance map.
    pub fn batch(&self, indices: &[usize], mut crop: Option<(usize, &mut Rng)>) -> Result<Batch> {
        let [c, h, w] = self.meta.obs_shape;
        let b = indices.len();
        let mut obs = [
            Vec::with_capacity(b * c * h * w),
            Vec::with_capacity(b * c * h * w),
            Vec::with_capacity(b * c * h * w),
        ];
        let mut out = Batch {
            obs_t: Tensor::zeros(&[1]),
            obs_next: Tensor::zeros(&[1]),
            obs_k: Tensor::zeros(&[1]),
            actions: Vec::with_capacity(b),
            expert_actions: Vec::with_capacity(b),
            ks: Vec::with_capacity(b),
            rewards: Vec::with_capacity(b),
            relevance: Vec::with_capacity(b * h * w),
        };
        for &i in indices {
            let r = self.records.get(i).ok_or_else(|| {
                Error::Config(format!("record index {i} out of range ({})", self.len()))
            })?;
            match crop.as_mut() {
                Some((pad, rng)) => {
                    let off = random_offset(*pad, rng);
                    for (dst, src) in obs.iter_mut().zip([&r.obs_t, &r.obs_next, &r.obs_k]) {
                        dst.extend(crop_with_offset(src, c, h, w, *pad, off));
                    }
                    out.relevance
                        .extend(crop_with_offset(&r.relevance_t, 1, h, w, *pad, off));
                }
                None => {
                    for (dst, src) in obs.iter_mut().zip([&r.obs_t, &r.obs_next, &r.obs_k]) {
                        dst.extend_from_slice(src);
                    }
                    out.relevance.extend_from_slice(&r.relevance_t);
                }
            }
            out.actions.push(r.action);
            out.expert_actions.push(r.expert_action);
            out.ks.push(r.k);
            out.rewards.push(r.reward);
        }
        let shape = [b, c, h, w];
        let [t, n, k] = obs;
        out.obs_t = Tensor::new(&shape, t)?;
        out.obs_next = Tensor::new(&shape, n)?;
        out.obs_k = Tensor::new(&shape, k)?;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(12 + meta.len() + self.len() * self.record_bytes());
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let words = self.relevance_words();
        for r in &self.records {
            for obs in [&r.obs_t, &r.obs_next, &r.obs_k] {
                obs.iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            for v in [r.action as u32, r.expert_action as u32, r.k as u32] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&r.reward.to_le_bytes());
            let mut packed = vec![0u32; words];
            for (i, _) in r.relevance_t.iter().enumerate().filter(|(_, &on)| on) {
                packed[i / 32] |= 1 << (i % 32);
            }
            packed
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        let magic = rd.array::<4>("magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let version = rd.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let meta_len = rd.u32("metadata length")? as usize;
        let meta: DatasetMeta = serde_json::from_slice(rd.take(meta_len, "metadata")?)
            .map_err(|e| Error::Malformed(format!("metadata: {e}")))?;
        let cfg = &meta.spec.env;
        if meta.obs_shape != [cfg.channels, cfg.size, cfg.size] {
            return Err(Error::Malformed(format!(
                "observation shape {:?} disagrees with the env config",
                meta.obs_shape
            )));
        }
        let mut ds = Dataset {
            records: Vec::with_capacity(meta.records),
            meta,
        };
        let (obs_len, words) = (ds.obs_len(), ds.relevance_words());
        let [_, h, w] = ds.meta.obs_shape;
        let word = |rd: &mut Reader| -> Result<[u8; 4]> { rd.array::<4>("record") };
        for _ in 0..ds.meta.records {
            let mut frame = || -> Result<Arc<[f32]>> {
                let raw = rd.take(obs_len * 4, "record")?;
                Ok(raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect())
            };
            let (obs_t, obs_next, obs_k) = (frame()?, frame()?, frame()?);
            let action = u32::from_le_bytes(word(&mut rd)?) as usize;
            let expert_action = u32::from_le_bytes(word(&mut rd)?) as usize;
            let k = u32::from_le_bytes(word(&mut rd)?) as usize;
            let reward = f32::from_le_bytes(word(&mut rd)?);
            let mut packed = Vec::with_capacity(words);
            for _ in 0..words {
                packed.push(u32::from_le_bytes(word(&mut rd)?));
            }
            Action::from_id(action)?;
            Action::from_id(expert_action)?;
            if k == 0 {
                return Err(Error::Malformed("record with k = 0".into()));
            }
            ds.records.push(Transition {
                obs_t,
                obs_next,
                obs_k,
                action,
                expert_action,
                k,
                reward,
                relevance_t: (0..h * w)
                    .map(|i| packed[i / 32] >> (i % 32) & 1 == 1)
                    .collect(),
            });
        }
        if !rd.is_done() {
            return Err(Error::Malformed(format!(
                "trailing bytes after {} declared records",
                ds.meta.records
            )));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
