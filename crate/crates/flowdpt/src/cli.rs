//! Config-driven pipeline commands: collect → train → eval → analyze.
//!
//! A run is described by one JSON config file; every command takes the same
//! config. All randomness flows from the single `seed`, expanded into named
//! streams per command, so reruns with identical inputs produce identical
//! outputs. The binary front-end maps errors to exit codes: 1 for
//! usage/config problems, 2 for runtime failures.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{collect_cnd, write_shard, Dataset, NoiseSchedule};
use crate::envsuite::{Registry, Split, TaskInstance};
use crate::evalkit::{
    contraction_analysis, demo_sweep, iqm, normalized_score, svg_contraction_scatter,
    svg_line_chart, task_baselines, write_scores_csv, EvalError, ScoreRecord,
};
use crate::flowhead::{FlowConfig, Solver};
use crate::ndgrad::Rng;
use crate::runtime::{
    make_demonstrator_prompt, rollout_offline, rollout_online, train, Model, ModelConfig,
    RuntimeError, TrainerConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{failed} of {total} tasks failed during collection: {details}")]
    PartialCollect { failed: usize, total: usize, details: String },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 1 = usage/config error, 2 = runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Online,
    Offline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub mode: EvalMode,
    pub episodes: usize,
    /// Demonstrator transitions for offline prompting.
    pub prompt_size: usize,
    pub m_steps: usize,
    pub solver: Solver,
    /// FIFO capacity for online rollouts; clipped to the model's L_max.
    pub context_capacity: usize,
    pub reset_between_episodes: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            mode: EvalMode::Online,
            episodes: 50,
            prompt_size: 100,
            m_steps: 32,
            solver: Solver::Heun,
            context_capacity: usize::MAX,
            reset_between_episodes: false,
        }
    }
}

impl InferenceConfig {
    pub fn flow_cfg(&self) -> FlowConfig {
        FlowConfig { m_steps: self.m_steps, solver: self.solver }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub sweep_sizes: Vec<usize>,
    pub contraction_sizes: Vec<usize>,
    pub n_samples: usize,
    /// Episodes per sweep cell.
    pub episodes: usize,
    /// Task for the contraction analysis; first test task when empty.
    pub contraction_task: Option<String>,
    /// Noise σ of the contraction context material; > 0 makes each context
    /// transition only partially informative so contraction is gradual.
    pub prompt_noise: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            sweep_sizes: vec![5, 25, 100],
            contraction_sizes: vec![0, 10, 100],
            n_samples: 100,
            episodes: 10,
            contraction_task: None,
            prompt_noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub registry: PathBuf,
    pub dataset_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    pub collect: NoiseSchedule,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub inference: InferenceConfig,
    pub analyze: AnalyzeConfig,
    pub eval_seeds: Vec<u64>,
    /// Monte-Carlo episodes for random/expert baselines.
    pub baseline_episodes: usize,
    /// Which splits cmd_eval covers.
    pub eval_splits: Vec<Split>,
    pub emit_svg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            registry: PathBuf::from("registry.json"),
            dataset_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("out/model.ckpt"),
            output_dir: PathBuf::from("out"),
            collect: NoiseSchedule::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            inference: InferenceConfig::default(),
            analyze: AnalyzeConfig::default(),
            eval_seeds: vec![0, 1, 2, 3],
            baseline_episodes: 2000,
            eval_splits: vec![Split::Train, Split::Test],
            emit_svg: true,
        }
    }
}

impl RunConfig {
    /// Load a config file and apply `--set key=value` overrides (dotted
    /// paths into the JSON tree) plus the FLOWDPT_OUT environment override.
    pub fn load(path: &Path, sets: &[String]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        for set in sets {
            apply_set(&mut value, set)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if let Ok(out) = std::env::var("FLOWDPT_OUT") {
            if !out.is_empty() {
                cfg.output_dir = PathBuf::from(out);
            }
        }
        Ok(cfg)
    }

    fn load_registry(&self) -> Result<Registry, PipelineError> {
        Registry::load(&self.registry)
            .map_err(|e| PipelineError::Config(format!("registry {}: {e}", self.registry.display())))
    }

    fn rng(&self, command: &str) -> Rng {
        Rng::seed(self.seed).stream(command)
    }
}

/// Apply one `key.path=value` override. Values parse as JSON when possible,
/// falling back to a string.
fn apply_set(root: &mut serde_json::Value, set: &str) -> Result<(), PipelineError> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("--set wants key=value, got {set}")))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(PipelineError::Config(format!("--set {path}: {part} is not an object")));
        }
        let map = node.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CollectSummary {
    pub shards: Vec<(String, usize)>,
}

/// Stage 1: collect one shard per registry task into `dataset_dir`.
/// Failed tasks are reported together after the others complete.
pub fn cmd_collect(cfg: &RunConfig) -> Result<CollectSummary, PipelineError> {
    let registry = cfg.load_registry()?;
    if registry.tasks.is_empty() {
        eprintln!("warning: registry {} lists no tasks; nothing to collect", cfg.registry.display());
        return Ok(CollectSummary { shards: Vec::new() });
    }
    let tasks = registry.instantiate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let rng = cfg.rng("collect");
    let mut shards = Vec::new();
    let mut failures = Vec::new();
    for task in &tasks {
        match collect_cnd(task, &cfg.collect, &rng) {
            Ok(shard) => {
                let n = shard.transitions.len();
                write_shard(&cfg.dataset_dir, &shard).map_err(RuntimeError::Shard)?;
                println!("collected {:>6} transitions for {}", n, task.task_id);
                shards.push((task.task_id.clone(), n));
            }
            Err(e) => {
                eprintln!("error: task {} failed: {e}", task.task_id);
                failures.push(format!("{}: {e}", task.task_id));
            }
        }
    }
    if !failures.is_empty() {
        return Err(PipelineError::PartialCollect {
            failed: failures.len(),
            total: tasks.len(),
            details: failures.join("; "),
        });
    }
    Ok(CollectSummary { shards })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub final_loss: Option<f64>,
}

/// Stage 2: train (or resume) toward `trainer.steps` total steps, writing
/// the checkpoint and a loss curve CSV.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, PipelineError> {
    let registry = cfg.load_registry()?;
    let dataset = Dataset::load_dir(&cfg.dataset_dir).map_err(|e| {
        PipelineError::Config(format!("dataset dir {}: {e}", cfg.dataset_dir.display()))
    })?;
    let rng = cfg.rng("train");
    let (mut model, start_step, adam) = if cfg.checkpoint.exists() {
        let (model, step, adam) = Model::load(&cfg.checkpoint)?;
        println!("resuming from {} at step {step}", cfg.checkpoint.display());
        (model, step, adam)
    } else {
        (Model::init(cfg.model, &registry.groups, &rng)?, 0, None)
    };
    if start_step >= cfg.trainer.steps && start_step > 0 {
        println!("checkpoint already at step {start_step} >= {}; nothing to do", cfg.trainer.steps);
        return Ok(TrainSummary { steps_run: 0, final_step: start_step, final_loss: None });
    }
    let out = train(&mut model, &dataset, &cfg.trainer, &rng, Some(&cfg.checkpoint), start_step, adam)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    out.write_loss_csv(&cfg.output_dir.join("loss.csv"))?;
    if cfg.emit_svg {
        let pts: Vec<(f64, f64)> =
            out.loss_curve.iter().map(|(s, l)| (*s as f64, *l)).collect();
        svg_line_chart(&cfg.output_dir.join("loss.svg"), "training loss", &[("loss", &pts)])?;
    }
    println!(
        "trained to step {} (loss {})",
        out.final_step,
        out.final_loss().map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(TrainSummary {
        steps_run: out.loss_curve.len() as u64,
        final_step: out.final_step,
        final_loss: out.final_loss(),
    })
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub records: Vec<ScoreRecord>,
    pub iqm_normalized: Option<f64>,
}

/// Stage 3: run the chosen protocol over the configured splits and seeds;
/// writes scores.csv plus per-episode returns.csv.
pub fn cmd_eval(cfg: &RunConfig, mode: EvalMode) -> Result<EvalSummary, PipelineError> {
    if !cfg.checkpoint.exists() {
        return Err(PipelineError::Config(format!(
            "checkpoint {} not found; run train first",
            cfg.checkpoint.display()
        )));
    }
    if mode == EvalMode::Online && cfg.inference.mode == EvalMode::Offline {
        eprintln!("warning: online mode ignores the configured offline prompt");
    }
    let registry = cfg.load_registry()?;
    let (model, _step, _) = Model::load(&cfg.checkpoint)?;
    let tasks: Vec<TaskInstance> = registry
        .instantiate()
        .map_err(|e| PipelineError::Config(e.to_string()))?
        .into_iter()
        .filter(|t| cfg.eval_splits.contains(&t.split))
        .collect();
    let rng = cfg.rng("eval");
    let flow_cfg = cfg.inference.flow_cfg();
    let mut records = Vec::new();
    let mut returns_csv = String::from("task,split,seed,episode,return\n");
    for task in &tasks {
        let (random, expert) = task_baselines(task, cfg.baseline_episodes, &rng)?;
        for &seed in &cfg.eval_seeds {
            let run_rng = rng.stream(&task.task_id).substream(seed);
            let returns = match mode {
                EvalMode::Online => {
                    rollout_online(
                        &model,
                        task,
                        cfg.inference.episodes,
                        cfg.inference.context_capacity.min(model.l_max()),
                        &flow_cfg,
                        &run_rng,
                        cfg.inference.reset_between_episodes,
                    )?
                    .returns
                }
                EvalMode::Offline => {
                    let prompt = make_demonstrator_prompt(
                        task,
                        cfg.inference.prompt_size,
                        &run_rng.stream("prompt"),
                    )?;
                    rollout_offline(
                        &model,
                        task,
                        &prompt,
                        cfg.inference.episodes,
                        &flow_cfg,
                        &run_rng.stream("episodes"),
                    )?
                }
            };
            let split = match task.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            for (episode, r) in returns.iter().enumerate() {
                returns_csv
                    .push_str(&format!("{},{split},{seed},{episode},{r}\n", task.task_id));
            }
            let raw = returns.iter().sum::<f64>() / returns.len() as f64;
            let normalized = normalized_score(raw, random, expert)?;
            records.push(ScoreRecord {
                task_id: task.task_id.clone(),
                split: task.split,
                seed,
                raw,
                random,
                expert,
                normalized,
            });
        }
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_scores_csv(&cfg.output_dir.join("scores.csv"), &records)?;
    std::fs::write(cfg.output_dir.join("returns.csv"), returns_csv)?;
    let iqm_normalized = if records.is_empty() {
        None
    } else {
        Some(iqm(&records.iter().map(|r| r.normalized).collect::<Vec<f64>>())?)
    };
    if let Some(v) = iqm_normalized {
        println!("evaluated {} cells; IQM normalized score {v:.4}", records.len());
    } else {
        eprintln!("warning: no tasks matched the configured splits; scores.csv has headers only");
    }
    Ok(EvalSummary { records, iqm_normalized })
}

#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub sweep_iqm: Vec<(usize, f64)>,
    pub contraction_entropies: Vec<(usize, f64)>,
}

/// Stage 3b: demonstration-count sweep plus posterior-contraction analysis.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalyzeSummary, PipelineError> {
    if !cfg.checkpoint.exists() {
        return Err(PipelineError::Config(format!(
            "checkpoint {} not found; run train first",
            cfg.checkpoint.display()
        )));
    }
    let registry = cfg.load_registry()?;
    let (model, _step, _) = Model::load(&cfg.checkpoint)?;
    let all_tasks = registry.instantiate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let test_tasks: Vec<TaskInstance> =
        all_tasks.iter().filter(|t| t.split == Split::Test).cloned().collect();
    let rng = cfg.rng("analyze");
    let flow_cfg = cfg.inference.flow_cfg();
    std::fs::create_dir_all(&cfg.output_dir)?;

    // sweep sizes and contraction sizes are clipped to the model's maximum
    let clip = |sizes: &[usize]| -> Vec<usize> {
        let mut out: Vec<usize> =
            sizes.iter().map(|s| (*s).min(model.l_max())).collect();
        out.dedup();
        out
    };
    let sweep_sizes = clip(&cfg.analyze.sweep_sizes);
    let sweep_tasks: &[TaskInstance] =
        if test_tasks.is_empty() { &all_tasks } else { &test_tasks };
    let sweep = demo_sweep(
        &model,
        sweep_tasks,
        &sweep_sizes,
        &cfg.eval_seeds,
        cfg.analyze.episodes,
        cfg.baseline_episodes,
        &flow_cfg,
        &rng,
    )?;
    sweep.write_csv(&cfg.output_dir.join("sweep.csv"))?;
    sweep.write_iqm_csv(&cfg.output_dir.join("sweep_iqm.csv"))?;

    let contraction_task = match &cfg.analyze.contraction_task {
        Some(id) => all_tasks
            .iter()
            .find(|t| &t.task_id == id)
            .ok_or_else(|| PipelineError::Config(format!("contraction_task {id} not in registry")))?,
        None => sweep_tasks.first().ok_or_else(|| {
            PipelineError::Config("registry has no tasks for the contraction analysis".into())
        })?,
    };
    let contraction_sizes = clip(&cfg.analyze.contraction_sizes);
    let obs_query = vec![0.0; contraction_task.obs_dim()];
    let report = contraction_analysis(
        &model,
        contraction_task,
        &obs_query,
        &contraction_sizes,
        cfg.analyze.n_samples,
        cfg.analyze.prompt_noise,
        &flow_cfg,
        &rng.stream(&contraction_task.task_id),
    )?;
    report.write_csv(&cfg.output_dir.join("contraction.csv"))?;
    report.write_points_csv(&cfg.output_dir.join("contraction_points.csv"))?;
    if cfg.emit_svg {
        svg_contraction_scatter(&cfg.output_dir.join("contraction.svg"), &report)?;
        let iqm_pts: Vec<(f64, f64)> =
            sweep.iqm_by_size.iter().map(|(s, v)| (*s as f64, *v)).collect();
        svg_line_chart(
            &cfg.output_dir.join("sweep.svg"),
            "normalized score vs prompt size (IQM)",
            &[("iqm", &iqm_pts)],
        )?;
    }
    for (size, value) in &sweep.iqm_by_size {
        println!("sweep: prompt {size:>4} -> IQM normalized {value:.4}");
    }
    for l in &report.levels {
        println!("contraction: context {:>4} -> entropy {:.4}", l.context_size, l.entropy);
    }
    Ok(AnalyzeSummary {
        sweep_iqm: sweep.iqm_by_size.clone(),
        contraction_entropies: report.levels.iter().map(|l| (l.context_size, l.entropy)).collect(),
    })
}

/// Write a starter registry + config pair for the default goal-bandit suite.
pub fn cmd_init(dir: &Path, seed: u64) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    let registry = Registry::goal_bandit_suite(64, 16, 2, seed);
    registry.save(&dir.join("registry.json")).map_err(|e| PipelineError::Config(e.to_string()))?;
    let cfg = RunConfig {
        seed,
        registry: dir.join("registry.json"),
        dataset_dir: dir.join("data"),
        checkpoint: dir.join("out/model.ckpt"),
        output_dir: dir.join("out"),
        ..RunConfig::default()
    };
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg).expect("config json"))?;
    println!("wrote {}/registry.json and {}/config.json", dir.display(), dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_nested_and_scalar_keys() {
        let mut v = serde_json::json!({"seed": 1, "trainer": {"lr": 0.1}});
        apply_set(&mut v, "seed=9").unwrap();
        apply_set(&mut v, "trainer.lr=0.5").unwrap();
        apply_set(&mut v, "trainer.steps=20").unwrap();
        apply_set(&mut v, "inference.mode=offline").unwrap();
        assert_eq!(v["seed"], 9);
        assert_eq!(v["trainer"]["lr"], 0.5);
        assert_eq!(v["trainer"]["steps"], 20);
        assert_eq!(v["inference"]["mode"], "offline");
        assert!(apply_set(&mut v, "nonsense").is_err());
    }

    #[test]
    fn config_round_trips_and_defaults_fill_in() {
        let dir = std::env::temp_dir().join("flowdpt_cli_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("config.json");
        std::fs::write(&path, r#"{"seed": 5, "trainer": {"steps": 11}}"#).unwrap();
        let cfg = RunConfig::load(&path, &["trainer.lr=0.002".into()]).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.trainer.steps, 11);
        assert!((cfg.trainer.lr - 0.002).abs() < 1e-12);
        assert_eq!(cfg.trainer.clip_norm, 2.5, "default preserved");
    }

    #[test]
    fn exit_codes_partition_config_vs_runtime() {
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 1);
        let rt = PipelineError::Runtime(RuntimeError::NonFiniteLoss { step: 3 });
        assert_eq!(rt.exit_code(), 2);
    }
}
