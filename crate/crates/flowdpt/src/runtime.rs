//! Training loop and the online/offline inference protocols.
//!
//! A [`Model`] bundles the shared BOS embedding, per-group codecs, the
//! causal backbone and per-group action heads over one parameter store.
//! Training samples DPT batches, assembles [BOS, query, permuted context]
//! sequences, supervises every position 1..L+1 with the configured head loss
//! and applies clipped Adam updates. Inference extracts the final-position
//! hidden state and integrates the flow (or samples the Gaussian).
//!
//! Per-sample gradients are reduced in sample order, so results are bitwise
//! reproducible for a fixed seed at any worker count.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::codec::{assemble, identity_perm, GroupCodec, SliceWidths};
use crate::datagen::{BatchSampler, Dataset, ShardError, TrainingSample};
use crate::envsuite::{EnvError, TaskGroup, TaskInstance, Transition};
use crate::flowhead::{
    FlowConfig, FlowDraws, FlowError, FlowHead, GaussianHead, TimeEmbeddingConfig,
};
use crate::ndgrad::{
    adam_step, clip_global_norm, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Array,
    CheckpointError, GradError, Gradients, Graph, ParamStore, Rng,
};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("non-finite loss at step {step}; last good checkpoint retained")]
    NonFiniteLoss { step: u64 },
    #[error("prompt of {got} transitions exceeds the maximum context {max}")]
    PromptTooLong { got: usize, max: usize },
    #[error("unknown task group {0}")]
    UnknownGroup(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint meta field {0} is malformed")]
    BadMeta(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Flow,
    Gaussian,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub time: TimeEmbeddingConfig,
    pub head: HeadKind,
    /// Hidden width of the codec nets; defaults to d_model.
    pub codec_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        ModelConfig {
            backbone,
            time: TimeEmbeddingConfig::default(),
            head: HeadKind::Flow,
            codec_hidden: backbone.d_model,
        }
    }
}

/// Everything learnable plus the wiring to run it.
#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub groups: Vec<TaskGroup>,
    pub store: ParamStore,
    codecs: HashMap<String, GroupCodec>,
    backbone: Backbone,
    flow_heads: HashMap<String, FlowHead>,
    gauss_heads: HashMap<String, GaussianHead>,
}

impl Model {
    pub fn init(cfg: ModelConfig, groups: &[TaskGroup], rng: &Rng) -> Result<Self, RuntimeError> {
        cfg.backbone.validate()?;
        let d = cfg.backbone.d_model;
        let mut store = ParamStore::new();
        let mut init_rng = rng.stream("model_init");
        // the BOS embedding is one learnable vector shared across groups
        let bos_std = 0.02;
        store.insert(
            "bos",
            Array::from_vec(&[1, d], (0..d).map(|_| bos_std * init_rng.normal()).collect())
                .expect("bos shape"),
        );
        let mut codecs = HashMap::new();
        let mut flow_heads = HashMap::new();
        let mut gauss_heads = HashMap::new();
        for group in groups {
            let codec = GroupCodec::init(
                &mut store,
                group,
                SliceWidths::split(d),
                cfg.codec_hidden,
                cfg.backbone.activation,
                &mut init_rng,
            );
            codecs.insert(group.group_id.clone(), codec);
        }
        let backbone = Backbone::init(&mut store, cfg.backbone, &mut init_rng);
        for group in groups {
            match cfg.head {
                HeadKind::Flow => {
                    let head = FlowHead::init(
                        &mut store,
                        &group.group_id,
                        group.act_dim,
                        d,
                        cfg.time,
                        cfg.backbone.activation,
                        &mut init_rng,
                    )?;
                    flow_heads.insert(group.group_id.clone(), head);
                }
                HeadKind::Gaussian => {
                    let head = GaussianHead::init(
                        &mut store,
                        &group.group_id,
                        group.act_dim,
                        d,
                        cfg.backbone.activation,
                        &mut init_rng,
                    );
                    gauss_heads.insert(group.group_id.clone(), head);
                }
            }
        }
        Ok(Model {
            cfg,
            groups: groups.to_vec(),
            store,
            codecs,
            backbone,
            flow_heads,
            gauss_heads,
        })
    }

    pub fn l_max(&self) -> usize {
        self.cfg.backbone.l_max
    }

    pub fn codec(&self, group_id: &str) -> Result<&GroupCodec, RuntimeError> {
        self.codecs.get(group_id).ok_or_else(|| RuntimeError::UnknownGroup(group_id.to_string()))
    }

    pub fn flow_head(&self, group_id: &str) -> Result<&FlowHead, RuntimeError> {
        self.flow_heads
            .get(group_id)
            .ok_or_else(|| RuntimeError::UnknownGroup(group_id.to_string()))
    }

    pub fn gaussian_head(&self, group_id: &str) -> Result<&GaussianHead, RuntimeError> {
        self.gauss_heads
            .get(group_id)
            .ok_or_else(|| RuntimeError::UnknownGroup(group_id.to_string()))
    }

    /// Hidden states for [BOS, query, context(perm)]; returns the node for
    /// all positions.
    fn hidden_states(
        &self,
        g: &mut Graph,
        group_id: &str,
        obs_query: &[f64],
        context: &[Transition],
        perm: &[usize],
    ) -> Result<crate::ndgrad::NodeId, RuntimeError> {
        let codec = self.codec(group_id)?;
        let bos = g.param_named("bos");
        let query = codec.encode_query(g, obs_query)?;
        let ctx = if context.is_empty() {
            None
        } else {
            Some(codec.encode_context(g, context)?)
        };
        let seq = assemble(g, bos, query, ctx, perm)?;
        Ok(self.backbone.forward(g, seq)?)
    }

    /// One action from the policy π(·|h): assemble, forward, take the
    /// final-position hidden state, then integrate the flow (or sample the
    /// Gaussian head).
    pub fn act(
        &self,
        group_id: &str,
        context: &[Transition],
        obs_query: &[f64],
        flow_cfg: &FlowConfig,
        rng: &mut Rng,
    ) -> Result<Vec<f64>, RuntimeError> {
        if context.len() > self.l_max() {
            return Err(RuntimeError::PromptTooLong { got: context.len(), max: self.l_max() });
        }
        let mut g = Graph::new(&self.store);
        let perm = identity_perm(context.len());
        let h = self.hidden_states(&mut g, group_id, obs_query, context, &perm)?;
        let n = g.value(h).rows();
        let last = g.slice_rows(h, n - 1, 1)?;
        let h_last = g.value(last).clone();
        drop(g);
        match self.cfg.head {
            HeadKind::Flow => {
                Ok(self.flow_head(group_id)?.sample_action(&self.store, &h_last, flow_cfg, rng)?)
            }
            HeadKind::Gaussian => {
                Ok(self.gaussian_head(group_id)?.sample(&self.store, &h_last, rng)?)
            }
        }
    }

    /// Loss and gradients for one training sample, supervising positions
    /// 1..L+1 (position 1 is the context-free prediction). The head's noise
    /// and time draws come from `rng`, so cloning the stream reproduces the
    /// same loss surface.
    pub fn sample_loss(
        &self,
        sample: &TrainingSample,
        rng: &mut Rng,
    ) -> Result<(f64, Gradients), RuntimeError> {
        let group = self
            .groups
            .iter()
            .find(|g| g.group_id == sample.group_id)
            .ok_or_else(|| RuntimeError::UnknownGroup(sample.group_id.clone()))?;
        let l = sample.context.len();
        let positions = l + 1;
        let mut g = Graph::new(&self.store);
        let perm = identity_perm(l); // the sampler already permuted the context
        let h = self.hidden_states(&mut g, &sample.group_id, &sample.obs_query, &sample.context, &perm)?;
        let h_sup = g.slice_rows(h, 1, positions)?;
        // every supervised position regresses onto the same a*
        let mut tiled = Vec::with_capacity(positions * group.act_dim);
        for _ in 0..positions {
            tiled.extend_from_slice(&sample.action_star);
        }
        let a_star = Array::from_vec(&[positions, group.act_dim], tiled)?;
        let loss = match self.cfg.head {
            HeadKind::Flow => {
                let draws = FlowDraws::sample(&a_star, rng);
                self.flow_head(&sample.group_id)?.rf_loss_with_draws(&mut g, h_sup, &a_star, &draws)?
            }
            HeadKind::Gaussian => {
                self.gaussian_head(&sample.group_id)?.nll_loss(&mut g, h_sup, &a_star)?
            }
        };
        let value = g.value(loss).scalar_value();
        let grads = g.backward(loss)?;
        Ok((value, grads))
    }

    /// Serialize parameters (and optionally optimizer state) with the model
    /// config and group registry in the manifest.
    pub fn save(
        &self,
        path: &Path,
        step: u64,
        adam: Option<&AdamState>,
    ) -> Result<(), RuntimeError> {
        let meta = serde_json::json!({
            "kind": "flowdpt.model",
            "step": step,
            "model": self.cfg,
            "groups": self.groups,
        });
        let mut tensors: Vec<(String, &Array)> =
            self.store.iter().map(|(name, value)| (name.to_string(), value)).collect();
        if let Some(adam) = adam {
            for id in self.store.ids() {
                tensors.push((format!("adam.m.{}", self.store.name(id)), &adam.m[id.0]));
            }
            for id in self.store.ids() {
                tensors.push((format!("adam.v.{}", self.store.name(id)), &adam.v[id.0]));
            }
        }
        save_checkpoint(path, meta, &tensors)?;
        Ok(())
    }

    /// Load a model (and optimizer state if present) from a checkpoint.
    pub fn load(path: &Path) -> Result<(Self, u64, Option<AdamState>), RuntimeError> {
        let (manifest, values) = load_checkpoint(path)?;
        let cfg: ModelConfig = serde_json::from_value(manifest.meta["model"].clone())
            .map_err(|_| RuntimeError::BadMeta("model".into()))?;
        let groups: Vec<TaskGroup> = serde_json::from_value(manifest.meta["groups"].clone())
            .map_err(|_| RuntimeError::BadMeta("groups".into()))?;
        let step = manifest.meta["step"].as_u64().unwrap_or(0);

        let mut store = ParamStore::new();
        let mut adam_m: HashMap<String, Array> = HashMap::new();
        let mut adam_v: HashMap<String, Array> = HashMap::new();
        for (entry, value) in manifest.tensors.iter().zip(values) {
            if let Some(name) = entry.name.strip_prefix("adam.m.") {
                adam_m.insert(name.to_string(), value);
            } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
                adam_v.insert(name.to_string(), value);
            } else {
                store.insert(&entry.name, value);
            }
        }

        let d = cfg.backbone.d_model;
        let mut codecs = HashMap::new();
        let mut flow_heads = HashMap::new();
        let mut gauss_heads = HashMap::new();
        for group in &groups {
            codecs.insert(
                group.group_id.clone(),
                GroupCodec::attach(
                    group,
                    SliceWidths::split(d),
                    cfg.codec_hidden,
                    cfg.backbone.activation,
                ),
            );
            match cfg.head {
                HeadKind::Flow => {
                    flow_heads.insert(
                        group.group_id.clone(),
                        FlowHead::attach(
                            &group.group_id,
                            group.act_dim,
                            d,
                            cfg.time,
                            cfg.backbone.activation,
                        ),
                    );
                }
                HeadKind::Gaussian => {
                    gauss_heads.insert(
                        group.group_id.clone(),
                        GaussianHead::attach(
                            &group.group_id,
                            group.act_dim,
                            d,
                            cfg.backbone.activation,
                        ),
                    );
                }
            }
        }
        let adam = if adam_m.len() == store.len() {
            let mut m = Vec::with_capacity(store.len());
            let mut v = Vec::with_capacity(store.len());
            for id in store.ids() {
                let name = store.name(id);
                m.push(
                    adam_m
                        .get(name)
                        .cloned()
                        .ok_or_else(|| RuntimeError::MissingTensor(format!("adam.m.{name}")))?,
                );
                v.push(
                    adam_v
                        .get(name)
                        .cloned()
                        .ok_or_else(|| RuntimeError::MissingTensor(format!("adam.v.{name}")))?,
                );
            }
            Some(AdamState { m, v, step })
        } else {
            None
        };
        let model = Model {
            cfg,
            groups,
            store,
            codecs,
            backbone: Backbone::attach(cfg.backbone),
            flow_heads,
            gauss_heads,
        };
        Ok((model, step, adam))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Training context length L.
    pub context_len: usize,
    /// Periodic checkpoint interval in steps.
    pub checkpoint_every: u64,
    /// Worker threads for per-sample gradients.
    pub jobs: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.99,
            clip_norm: 2.5,
            batch_size: 16,
            steps: 1000,
            context_len: 32,
            checkpoint_every: 200,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub loss_curve: Vec<(u64, f64)>,
    pub final_step: u64,
}

impl TrainOutput {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().map(|(_, l)| *l)
    }

    /// CSV with a `step,loss` header.
    pub fn write_loss_csv(&self, path: &Path) -> Result<(), std::io::Error> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut out = String::from("step,loss\n");
        for (step, loss) in &self.loss_curve {
            out.push_str(&format!("{step},{loss:.12}\n"));
        }
        std::fs::write(path, out)
    }
}

/// Mean loss and averaged gradients over a batch. Per-sample work may run on
/// several workers; the reduction follows sample order, so the result does
/// not depend on the worker count.
pub fn batch_gradients(
    model: &Model,
    batch: &[TrainingSample],
    step: u64,
    rng: &Rng,
    jobs: usize,
) -> Result<(f64, Gradients), RuntimeError> {
    let jobs = jobs.max(1).min(batch.len().max(1));
    let step_rng = rng.stream("flow_draws").substream(step);
    let mut results: Vec<Option<(f64, Gradients)>> = (0..batch.len()).map(|_| None).collect();
    if jobs == 1 {
        for (idx, sample) in batch.iter().enumerate() {
            let mut sample_rng = step_rng.substream(idx as u64);
            results[idx] = Some(model.sample_loss(sample, &mut sample_rng)?);
        }
    } else {
        let chunk = batch.len().div_ceil(jobs);
        let mut errors: Vec<Option<RuntimeError>> = (0..jobs).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut error_slots = errors.iter_mut();
            for (worker, (samples, slots)) in
                batch.chunks(chunk).zip(results.chunks_mut(chunk)).enumerate()
            {
                let step_rng = step_rng.clone();
                let error_slot = error_slots.next().expect("one error slot per worker");
                scope.spawn(move || {
                    for (offset, (sample, slot)) in samples.iter().zip(slots).enumerate() {
                        let idx = worker * chunk + offset;
                        let mut sample_rng = step_rng.substream(idx as u64);
                        match model.sample_loss(sample, &mut sample_rng) {
                            Ok(r) => *slot = Some(r),
                            Err(e) => {
                                *error_slot = Some(e);
                                return;
                            }
                        }
                    }
                });
            }
        });
        if let Some(e) = errors.into_iter().flatten().next() {
            return Err(e);
        }
    }
    let mut total = Gradients::zeros_like(&model.store);
    let mut loss_sum = 0.0;
    for r in results.into_iter() {
        let (loss, grads) = r.expect("all samples computed");
        loss_sum += loss;
        total.add_assign(&grads);
    }
    let b = batch.len() as f64;
    total.scale_in_place(1.0 / b);
    Ok((loss_sum / b, total))
}

/// One optimizer step on a prepared batch. Returns the batch loss.
pub fn train_step(
    model: &mut Model,
    batch: &[TrainingSample],
    adam: &mut AdamState,
    cfg: &TrainerConfig,
    step: u64,
    rng: &Rng,
) -> Result<f64, RuntimeError> {
    let (loss, mut grads) = batch_gradients(model, batch, step, rng, cfg.jobs)?;
    if !loss.is_finite() {
        return Err(RuntimeError::NonFiniteLoss { step });
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    let adam_cfg = AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8 };
    adam_step(&mut model.store, &grads, adam, &adam_cfg)?;
    Ok(loss)
}

/// Full training loop from `start_step` toward `cfg.steps` total steps.
///
/// Steps are indexed absolutely, so a fresh run to step N and a run resumed
/// at a checkpointed step give bitwise-identical results. Checkpoints every
/// `checkpoint_every` steps when a path is given; on divergence the last
/// periodic checkpoint stays on disk.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainerConfig,
    rng: &Rng,
    checkpoint_path: Option<&Path>,
    start_step: u64,
    adam_init: Option<AdamState>,
) -> Result<TrainOutput, RuntimeError> {
    let sampler = BatchSampler::new(dataset, cfg.context_len)?;
    for task_id in &sampler.skipped {
        eprintln!(
            "warning: task {task_id} has fewer than {} transitions; skipped",
            cfg.context_len + 1
        );
    }
    let mut adam = adam_init.unwrap_or_else(|| AdamState::zeros_like(&model.store));
    let train_rng = rng.stream("train");
    let mut loss_curve = Vec::with_capacity(cfg.steps.saturating_sub(start_step) as usize);
    if let Some(path) = checkpoint_path {
        if cfg.steps <= start_step {
            model.save(path, start_step, Some(&adam))?;
        }
    }
    for step in start_step..cfg.steps {
        let mut batch_rng = train_rng.stream("batch").substream(step);
        let batch = sampler.sample_batch(cfg.batch_size, &mut batch_rng);
        let loss = train_step(model, &batch, &mut adam, cfg, step, &train_rng)?;
        loss_curve.push((step, loss));
        if let Some(path) = checkpoint_path {
            let due = (step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps;
            if due {
                model.save(path, step + 1, Some(&adam))?;
            }
        }
    }
    Ok(TrainOutput { loss_curve, final_step: cfg.steps.max(start_step) })
}

/// Bounded FIFO of transitions used during online inference.
#[derive(Debug, Clone)]
pub struct ContextBuffer {
    capacity: usize,
    entries: VecDeque<Transition>,
}

impl ContextBuffer {
    pub fn new(capacity: usize) -> Self {
        ContextBuffer { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    /// Append; evicts the oldest entry when full.
    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Oldest-first contents.
    pub fn as_slice(&mut self) -> &[Transition] {
        self.entries.make_contiguous();
        self.entries.as_slices().0
    }
}

#[derive(Debug, Clone)]
pub struct OnlineRollout {
    pub returns: Vec<f64>,
    pub final_context: Vec<Transition>,
}

/// Online protocol: the context starts empty and fills FIFO with realized
/// (obs, action, reward) interactions; the oldest transition is evicted past
/// `context_capacity`. The buffer carries across episodes unless
/// `reset_between_episodes` is set.
#[allow(clippy::too_many_arguments)]
pub fn rollout_online(
    model: &Model,
    task: &TaskInstance,
    episodes: usize,
    context_capacity: usize,
    flow_cfg: &FlowConfig,
    rng: &Rng,
    reset_between_episodes: bool,
) -> Result<OnlineRollout, RuntimeError> {
    assert!(episodes >= 1);
    let capacity = context_capacity.min(model.l_max());
    let mut buffer = ContextBuffer::new(capacity);
    let mut returns = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        if reset_between_episodes {
            buffer.clear();
        }
        let ep_rng = rng.substream(episode as u64);
        let mut env_rng = ep_rng.stream("env");
        let mut act_rng = ep_rng.stream("act");
        let (mut env, mut obs) = task.reset(&mut env_rng);
        let mut total = 0.0;
        loop {
            let action =
                model.act(&task.group.group_id, buffer.as_slice(), &obs, flow_cfg, &mut act_rng)?;
            let (next_obs, reward, done) = task.step(&mut env, &action, &mut env_rng)?;
            buffer.push(Transition { obs, action, reward });
            total += reward;
            obs = next_obs;
            if done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(OnlineRollout { returns, final_context: buffer.as_slice().to_vec() })
}

/// Offline protocol: the context is exactly `prompt` for every step of every
/// episode and is never written to.
pub fn rollout_offline(
    model: &Model,
    task: &TaskInstance,
    prompt: &[Transition],
    episodes: usize,
    flow_cfg: &FlowConfig,
    rng: &Rng,
) -> Result<Vec<f64>, RuntimeError> {
    assert!(episodes >= 1);
    if prompt.len() > model.l_max() {
        return Err(RuntimeError::PromptTooLong { got: prompt.len(), max: model.l_max() });
    }
    let mut returns = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let ep_rng = rng.substream(episode as u64);
        let mut env_rng = ep_rng.stream("env");
        let mut act_rng = ep_rng.stream("act");
        let (mut env, mut obs) = task.reset(&mut env_rng);
        let mut total = 0.0;
        loop {
            let action =
                model.act(&task.group.group_id, prompt, &obs, flow_cfg, &mut act_rng)?;
            let (next_obs, reward, done) = task.step(&mut env, &action, &mut env_rng)?;
            total += reward;
            obs = next_obs;
            if done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Fresh demonstrator transitions for offline prompting: runs demonstrator
/// episodes until `k` transitions are collected.
pub fn make_demonstrator_prompt(
    task: &TaskInstance,
    k: usize,
    rng: &Rng,
) -> Result<Vec<Transition>, RuntimeError> {
    make_noised_demonstrator_prompt(task, k, 0.0, rng)
}

/// Demonstrator transitions with actions perturbed by N(0, σ²) noise and
/// clipped to the action box — the distribution the training data covers.
pub fn make_noised_demonstrator_prompt(
    task: &TaskInstance,
    k: usize,
    sigma: f64,
    rng: &Rng,
) -> Result<Vec<Transition>, RuntimeError> {
    let mut prompt = Vec::with_capacity(k);
    let mut episode = 0u64;
    while prompt.len() < k {
        let mut ep_rng = rng.substream(episode);
        let result = task.run_episode(
            |obs, r| {
                task.demonstrator_action(obs, r)
                    .into_iter()
                    .map(|a| {
                        if sigma > 0.0 {
                            (a + sigma * r.normal())
                                .clamp(-crate::envsuite::ACTION_BOX, crate::envsuite::ACTION_BOX)
                        } else {
                            a
                        }
                    })
                    .collect()
            },
            &mut ep_rng,
        )?;
        prompt.extend(result.transitions);
        episode += 1;
    }
    prompt.truncate(k);
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Activation;
    use crate::datagen::{collect_cnd, NoiseSchedule};
    use crate::envsuite::{KindSpec, Split, TaskSpec};
    use crate::flowhead::Solver;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 16,
                d_ff: 32,
                l_max: 8,
                activation: Activation::Gelu,
            },
            time: TimeEmbeddingConfig { d_gamma: 8, f_min: 1.0, f_max: 100.0 },
            head: HeadKind::Flow,
            codec_hidden: 16,
        }
    }

    fn bandit_group() -> TaskGroup {
        TaskGroup { group_id: "bandit2".into(), obs_dim: 2, act_dim: 2, reward_scale: 1.0 }
    }

    fn bandit_task(goal: &[f64]) -> TaskInstance {
        TaskInstance::from_spec(
            &TaskSpec {
                task_id: "gb".into(),
                kind: KindSpec::GoalBandit { goal: goal.to_vec() },
                horizon: 1,
                group_id: "bandit2".into(),
                split: Split::Train,
            },
            bandit_group(),
        )
        .unwrap()
    }

    fn tiny_dataset() -> Dataset {
        let schedule = NoiseSchedule { levels: vec![0.0, 0.5], episodes_per_level: 12 };
        let mut shards = Vec::new();
        for (i, goal) in [[0.4, -0.2], [-0.5, 0.6]].iter().enumerate() {
            let mut task = bandit_task(goal);
            task.task_id = format!("gb{i}");
            shards.push(collect_cnd(&task, &schedule, &Rng::seed(33)).unwrap());
        }
        Dataset { shards }
    }

    fn transition(r: f64) -> Transition {
        Transition { obs: vec![0.0, 0.0], action: vec![0.1, 0.2], reward: r }
    }

    #[test]
    fn fifo_eviction_order() {
        let mut buf = ContextBuffer::new(3);
        for i in 0..4 {
            buf.push(transition(i as f64));
        }
        let contents: Vec<f64> = buf.as_slice().iter().map(|t| t.reward).collect();
        assert_eq!(contents, vec![1.0, 2.0, 3.0], "first push evicted, order kept");
    }

    #[test]
    fn fifo_length_is_min_of_pushes_and_capacity() {
        let mut buf = ContextBuffer::new(5);
        for i in 0..12 {
            buf.push(transition(i as f64));
            assert_eq!(buf.len(), (i + 1).min(5));
        }
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let groups = [bandit_group()];
        let mut model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(1)).unwrap();
        let before: Vec<Vec<f64>> =
            model.store.ids().map(|id| model.store.value(id).data().to_vec()).collect();
        let dir = std::env::temp_dir().join("flowdpt_runtime_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("init.ckpt");
        let dataset = tiny_dataset();
        let cfg = TrainerConfig { steps: 0, context_len: 4, ..TrainerConfig::default() };
        let out = train(&mut model, &dataset, &cfg, &Rng::seed(2), Some(&path), 0, None).unwrap();
        assert!(out.loss_curve.is_empty());
        let (loaded, step, _) = Model::load(&path).unwrap();
        assert_eq!(step, 0);
        for (id, want) in loaded.store.ids().zip(&before) {
            assert_eq!(loaded.store.value(id).data(), want.as_slice());
        }
    }

    #[test]
    fn frozen_batch_loss_decreases() {
        let groups = [bandit_group()];
        let mut model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(3)).unwrap();
        let dataset = tiny_dataset();
        let sampler = BatchSampler::new(&dataset, 4).unwrap();
        let batch = sampler.sample_batch(8, &mut Rng::seed(4).stream("frozen"));
        let mut adam = AdamState::zeros_like(&model.store);
        let cfg = TrainerConfig {
            lr: 1e-3,
            context_len: 4,
            batch_size: 8,
            ..TrainerConfig::default()
        };
        let rng = Rng::seed(5);
        let first = train_step(&mut model, &batch, &mut adam, &cfg, 0, &rng).unwrap();
        let mut last = first;
        for step in 1..200 {
            last = train_step(&mut model, &batch, &mut adam, &cfg, step, &rng).unwrap();
        }
        assert!(last < 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn zero_context_training_sample_supervises_single_position() {
        let groups = [bandit_group()];
        let model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(6)).unwrap();
        let sample = TrainingSample {
            task_id: "gb".into(),
            group_id: "bandit2".into(),
            obs_query: vec![0.0, 0.0],
            context: Vec::new(),
            action_star: vec![0.3, -0.1],
        };
        let (loss, _grads) = model.sample_loss(&sample, &mut Rng::seed(7)).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn act_with_empty_context_cold_start() {
        let groups = [bandit_group()];
        let model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(8)).unwrap();
        let flow_cfg = FlowConfig { m_steps: 4, solver: Solver::Heun };
        let a = model
            .act("bandit2", &[], &[0.0, 0.0], &flow_cfg, &mut Rng::seed(9).stream("act"))
            .unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn act_is_deterministic_given_stream() {
        let groups = [bandit_group()];
        let model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(10)).unwrap();
        let ctx = vec![transition(-0.5), transition(-0.1)];
        let flow_cfg = FlowConfig { m_steps: 8, solver: Solver::Heun };
        let a1 = model
            .act("bandit2", &ctx, &[0.0, 0.0], &flow_cfg, &mut Rng::seed(11).stream("act"))
            .unwrap();
        let a2 = model
            .act("bandit2", &ctx, &[0.0, 0.0], &flow_cfg, &mut Rng::seed(11).stream("act"))
            .unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn act_rigged_constant_field_ignores_context() {
        let groups = [bandit_group()];
        let mut model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(12)).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            if name.starts_with("flow.bandit2.net") {
                for x in model.store.value_mut(id).data_mut() {
                    *x = 0.0;
                }
            }
            if name == "flow.bandit2.net.b2" {
                model.store.value_mut(id).data_mut().copy_from_slice(&[0.5, -0.25]);
            }
        }
        let flow_cfg = FlowConfig { m_steps: 1, solver: Solver::Heun };
        let mut r1 = Rng::seed(13).stream("a");
        let mut probe = r1.clone();
        let x0 = probe.normal_vec(2);
        let empty = model.act("bandit2", &[], &[0.0, 0.0], &flow_cfg, &mut r1).unwrap();
        assert!((empty[0] - (x0[0] + 0.5)).abs() < 1e-12);
        assert!((empty[1] - (x0[1] - 0.25)).abs() < 1e-12);

        let ctx = vec![transition(-2.0)];
        let mut r2 = Rng::seed(13).stream("a");
        let with_ctx = model.act("bandit2", &ctx, &[0.0, 0.0], &flow_cfg, &mut r2).unwrap();
        assert_eq!(empty, with_ctx, "constant field ignores conditioning");
    }

    #[test]
    fn online_rollout_buffer_holds_realized_transitions_in_order() {
        let groups = [bandit_group()];
        let model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(14)).unwrap();
        let task = bandit_task(&[0.2, 0.2]);
        let flow_cfg = FlowConfig { m_steps: 2, solver: Solver::Euler };
        let out = rollout_online(&model, &task, 5, 3, &flow_cfg, &Rng::seed(15), false).unwrap();
        assert_eq!(out.returns.len(), 5);
        assert_eq!(out.final_context.len(), 3, "capacity bounds the buffer");
        // realized rewards match -||a - g||^2 for the stored actions
        for t in &out.final_context {
            let expected = -t
                .action
                .iter()
                .zip([0.2, 0.2])
                .map(|(a, g)| (a - g) * (a - g))
                .sum::<f64>();
            assert!((t.reward - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn offline_rollout_never_mutates_prompt() {
        let groups = [bandit_group()];
        let model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(16)).unwrap();
        let task = bandit_task(&[0.3, -0.3]);
        let prompt = vec![transition(-0.4), transition(-0.2)];
        let snapshot = prompt.clone();
        let flow_cfg = FlowConfig { m_steps: 2, solver: Solver::Heun };
        let returns =
            rollout_offline(&model, &task, &prompt, 4, &flow_cfg, &Rng::seed(17)).unwrap();
        assert_eq!(returns.len(), 4);
        assert_eq!(prompt, snapshot, "prompt bitwise identical after the run");
    }

    #[test]
    fn over_long_prompt_rejected() {
        let groups = [bandit_group()];
        let model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(18)).unwrap();
        let task = bandit_task(&[0.1, 0.1]);
        let prompt: Vec<Transition> = (0..9).map(|i| transition(-(i as f64))).collect();
        let flow_cfg = FlowConfig::default();
        let err =
            rollout_offline(&model, &task, &prompt, 1, &flow_cfg, &Rng::seed(19)).unwrap_err();
        assert!(matches!(err, RuntimeError::PromptTooLong { got: 9, max: 8 }));
    }

    #[test]
    fn training_is_bitwise_reproducible_and_worker_count_invariant() {
        let run = |jobs: usize| {
            let groups = [bandit_group()];
            let mut model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(20)).unwrap();
            let dataset = tiny_dataset();
            let cfg = TrainerConfig {
                lr: 1e-3,
                steps: 5,
                batch_size: 6,
                context_len: 4,
                jobs,
                ..TrainerConfig::default()
            };
            let out = train(&mut model, &dataset, &cfg, &Rng::seed(21), None, 0, None).unwrap();
            let params: Vec<u64> = model
                .store
                .ids()
                .flat_map(|id| model.store.value(id).data().iter().map(|x| x.to_bits()))
                .collect();
            (out.loss_curve, params)
        };
        let (curve1, params1) = run(1);
        let (curve2, params2) = run(1);
        assert_eq!(curve1, curve2, "same seed, same losses");
        assert_eq!(params1, params2, "same seed, same parameters bitwise");
        let (curve4, params4) = run(2);
        assert_eq!(curve1, curve4, "worker count does not change results");
        assert_eq!(params1, params4);
    }

    #[test]
    fn checkpoint_round_trip_preserves_model_and_adam() {
        let groups = [bandit_group()];
        let mut model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(22)).unwrap();
        let dataset = tiny_dataset();
        let cfg = TrainerConfig {
            steps: 3,
            batch_size: 4,
            context_len: 4,
            lr: 1e-3,
            ..TrainerConfig::default()
        };
        let dir = std::env::temp_dir().join("flowdpt_runtime_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round.ckpt");
        train(&mut model, &dataset, &cfg, &Rng::seed(23), Some(&path), 0, None).unwrap();
        let (loaded, step, adam) = Model::load(&path).unwrap();
        assert_eq!(step, 3);
        let adam = adam.expect("optimizer state saved");
        assert_eq!(adam.step, 3);
        for id in model.store.ids() {
            assert_eq!(
                model.store.value(id).data(),
                loaded.store.value(id).data(),
                "param {}",
                model.store.name(id)
            );
        }
        // the loaded model acts identically
        let flow_cfg = FlowConfig { m_steps: 4, solver: Solver::Heun };
        let a1 = model
            .act("bandit2", &[], &[0.0, 0.0], &flow_cfg, &mut Rng::seed(24).stream("x"))
            .unwrap();
        let a2 = loaded
            .act("bandit2", &[], &[0.0, 0.0], &flow_cfg, &mut Rng::seed(24).stream("x"))
            .unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn gaussian_head_model_trains_and_acts() {
        let mut cfg = tiny_model_cfg();
        cfg.head = HeadKind::Gaussian;
        let groups = [bandit_group()];
        let mut model = Model::init(cfg, &groups, &Rng::seed(25)).unwrap();
        let dataset = tiny_dataset();
        let tcfg = TrainerConfig {
            steps: 5,
            batch_size: 4,
            context_len: 4,
            lr: 1e-3,
            ..TrainerConfig::default()
        };
        let out = train(&mut model, &dataset, &tcfg, &Rng::seed(26), None, 0, None).unwrap();
        assert_eq!(out.loss_curve.len(), 5);
        let a = model
            .act("bandit2", &[], &[0.0, 0.0], &FlowConfig::default(), &mut Rng::seed(27).stream("g"))
            .unwrap();
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn empty_prompt_offline_first_episode_matches_online_first_episode() {
        // with an empty buffer the online protocol conditions on nothing,
        // exactly like an empty offline prompt: same streams, same episode
        let groups = [bandit_group()];
        let model = Model::init(tiny_model_cfg(), &groups, &Rng::seed(29)).unwrap();
        let task = bandit_task(&[0.4, 0.1]);
        let flow_cfg = FlowConfig { m_steps: 4, solver: Solver::Heun };
        let online =
            rollout_online(&model, &task, 1, 4, &flow_cfg, &Rng::seed(30), false).unwrap();
        let offline = rollout_offline(&model, &task, &[], 1, &flow_cfg, &Rng::seed(30)).unwrap();
        assert_eq!(online.returns[0].to_bits(), offline[0].to_bits());
    }

    #[test]
    fn demonstrator_prompt_has_requested_length_and_relabel_quality() {
        let task = bandit_task(&[0.6, -0.4]);
        let prompt = make_demonstrator_prompt(&task, 25, &Rng::seed(28)).unwrap();
        assert_eq!(prompt.len(), 25);
        for t in &prompt {
            assert_eq!(t.action, vec![0.6, -0.4]);
            assert_eq!(t.reward, 0.0);
        }
    }
}
