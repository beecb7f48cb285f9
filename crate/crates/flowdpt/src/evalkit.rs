//! Normalized scoring, IQM aggregation, demonstration-count sweeps and the
//! posterior-contraction analysis.
//!
//! The contraction analysis fixes one query observation, grows a
//! demonstrator context through nested prefixes, draws action samples at
//! each size and reports a 2-D projection plus a Gaussian plug-in entropy
//! proxy ½·log det(Σ̂+εI) + (d/2)·log(2πe) — monotone under the contraction
//! being measured and deterministic.

use std::path::Path;

use crate::envsuite::{Split, TaskInstance};
use crate::flowhead::FlowConfig;
use crate::ndgrad::{Array, Rng};
use crate::runtime::{
    make_demonstrator_prompt, make_noised_demonstrator_prompt, rollout_offline, Model,
    RuntimeError,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("normalized score undefined: expert == random == {0}")]
    DegenerateBaseline(f64),
    #[error("iqm of an empty slice")]
    EmptyValues,
    #[error("need at least 2 samples for a 2-D projection, got {0}")]
    TooFewSamples(usize),
    #[error("context sizes must be sorted ascending, got {0:?}")]
    UnsortedSizes(Vec<usize>),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// (raw − random) / (expert − random).
pub fn normalized_score(raw: f64, random: f64, expert: f64) -> Result<f64, EvalError> {
    if expert == random {
        return Err(EvalError::DegenerateBaseline(expert));
    }
    Ok((raw - random) / (expert - random))
}

/// Inter-quartile mean: sort, drop ⌊n/4⌋ values from each end, average the
/// rest.
pub fn iqm(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyValues);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let drop = sorted.len() / 4;
    let kept = &sorted[drop..sorted.len() - drop];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub task_id: String,
    pub split: Split,
    pub seed: u64,
    pub raw: f64,
    pub random: f64,
    pub expert: f64,
    pub normalized: f64,
}

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = String::from("task,split,seed,raw,random,expert,normalized\n");
    for r in records {
        let split = match r.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task_id, split, r.seed, r.raw, r.random, r.expert, r.normalized
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Monte-Carlo random and demonstrator baselines for one task.
pub fn task_baselines(
    task: &TaskInstance,
    n_episodes: usize,
    rng: &Rng,
) -> Result<(f64, f64), EvalError> {
    let mut rand_rng = rng.stream("baseline/random").stream(&task.task_id);
    let mut demo_rng = rng.stream("baseline/expert").stream(&task.task_id);
    let random = task.random_policy_score(n_episodes, &mut rand_rng).map_err(RuntimeError::Env)?;
    let expert =
        task.demonstrator_policy_score(n_episodes, &mut demo_rng).map_err(RuntimeError::Env)?;
    Ok((random, expert))
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub task_id: String,
    pub prompt_size: usize,
    pub seed: u64,
    pub raw: f64,
    pub random: f64,
    pub expert: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    /// IQM of normalized scores pooled over (task, seed) per prompt size.
    pub iqm_by_size: Vec<(usize, f64)>,
}

impl SweepTable {
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut out = String::from("task,prompt_size,seed,raw,random,expert,normalized\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.task_id, c.prompt_size, c.seed, c.raw, c.random, c.expert, c.normalized
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn write_iqm_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::from("prompt_size,iqm_normalized\n");
        for (size, value) in &self.iqm_by_size {
            out.push_str(&format!("{size},{value}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Offline evaluation per (task, prompt size, seed) with IQM aggregation per
/// size. Prompts are nested: the size-k prompt is a prefix of the largest.
#[allow(clippy::too_many_arguments)]
pub fn demo_sweep(
    model: &Model,
    tasks: &[TaskInstance],
    prompt_sizes: &[usize],
    seeds: &[u64],
    episodes: usize,
    baseline_episodes: usize,
    flow_cfg: &FlowConfig,
    rng: &Rng,
) -> Result<SweepTable, EvalError> {
    let max_size = prompt_sizes.iter().copied().max().unwrap_or(0);
    let mut cells = Vec::new();
    for task in tasks {
        let (random, expert) = task_baselines(task, baseline_episodes, rng)?;
        for &seed in seeds {
            let seed_rng = rng.stream("sweep").stream(&task.task_id).substream(seed);
            let prompt = make_demonstrator_prompt(task, max_size, &seed_rng.stream("prompt"))?;
            for &size in prompt_sizes {
                let returns = rollout_offline(
                    model,
                    task,
                    &prompt[..size],
                    episodes,
                    flow_cfg,
                    &seed_rng.stream("episodes").substream(size as u64),
                )?;
                let raw = returns.iter().sum::<f64>() / returns.len() as f64;
                let normalized = normalized_score(raw, random, expert)?;
                cells.push(SweepCell {
                    task_id: task.task_id.clone(),
                    prompt_size: size,
                    seed,
                    raw,
                    random,
                    expert,
                    normalized,
                });
            }
        }
    }
    let mut iqm_by_size = Vec::with_capacity(prompt_sizes.len());
    for &size in prompt_sizes {
        let scores: Vec<f64> =
            cells.iter().filter(|c| c.prompt_size == size).map(|c| c.normalized).collect();
        iqm_by_size.push((size, iqm(&scores)?));
    }
    Ok(SweepTable { cells, iqm_by_size })
}

#[derive(Debug, Clone)]
pub struct ContractionLevel {
    pub context_size: usize,
    pub n_samples: usize,
    pub entropy: f64,
    /// 2-D projection of the action samples.
    pub projected: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub task_id: String,
    pub levels: Vec<ContractionLevel>,
}

impl ContractionReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut out = String::from("context_size,n_samples,entropy\n");
        for l in &self.levels {
            out.push_str(&format!("{},{},{}\n", l.context_size, l.n_samples, l.entropy));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn write_points_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::from("context_size,x,y\n");
        for l in &self.levels {
            for p in &l.projected {
                out.push_str(&format!("{},{},{}\n", l.context_size, p[0], p[1]));
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

pub const ENTROPY_EPS: f64 = 1e-6;

/// Draw `n_samples` actions at one fixed query observation for each context
/// size (all sizes share the same checkpoint, query and prompt material) and
/// report the projected samples plus the entropy proxy.
///
/// `prompt_noise` sets the σ of the context material: with σ > 0 the context
/// follows the noised-demonstrator distribution the training data comes
/// from, so each transition is only partially informative and the posterior
/// narrows gradually as the context grows. A deterministic demonstrator
/// (σ = 0) reveals the task from a single transition, which saturates the
/// contraction immediately.
#[allow(clippy::too_many_arguments)]
pub fn contraction_analysis(
    model: &Model,
    task: &TaskInstance,
    obs_query: &[f64],
    sizes: &[usize],
    n_samples: usize,
    prompt_noise: f64,
    flow_cfg: &FlowConfig,
    rng: &Rng,
) -> Result<ContractionReport, EvalError> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::UnsortedSizes(sizes.to_vec()));
    }
    let max_size = sizes.iter().copied().max().unwrap_or(0);
    let prompt = make_noised_demonstrator_prompt(
        task,
        max_size,
        prompt_noise,
        &rng.stream("contraction/prompt"),
    )?;
    let act_dim = task.act_dim();
    let mut levels = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let sample_rng = rng.stream("contraction/samples").substream(size as u64);
        let mut data = Vec::with_capacity(n_samples * act_dim);
        for i in 0..n_samples {
            let mut draw_rng = sample_rng.substream(i as u64);
            let action = model.act(
                &task.group.group_id,
                &prompt[..size],
                obs_query,
                flow_cfg,
                &mut draw_rng,
            )?;
            data.extend(action);
        }
        let samples = Array::from_vec(&[n_samples, act_dim], data).map_err(RuntimeError::Grad)?;
        let entropy = entropy_proxy(&samples, ENTROPY_EPS);
        let projected = if n_samples >= 2 {
            let proj = tsvd_2d(&samples)?;
            (0..n_samples).map(|i| [proj.at(i, 0), proj.at(i, 1)]).collect()
        } else {
            Vec::new()
        };
        levels.push(ContractionLevel { context_size: size, n_samples, entropy, projected });
    }
    Ok(ContractionReport { task_id: task.task_id.clone(), levels })
}

/// Sample covariance with the 1/n convention (well-defined for one sample).
fn covariance(samples: &Array) -> Vec<f64> {
    let (n, d) = (samples.rows(), samples.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += samples.at(i, j);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            let da = samples.at(i, a) - mean[a];
            for b in 0..d {
                let db = samples.at(i, b) - mean[b];
                cov[a * d + b] += da * db;
            }
        }
    }
    for c in &mut cov {
        *c /= n as f64;
    }
    cov
}

/// Jacobi eigen-decomposition of a symmetric d×d matrix (descending
/// eigenvalues). Returns (eigenvalues, row-major eigenvector rows).
fn symmetric_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p * d + q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * a[p * d + q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].partial_cmp(&a[i * d + i]).expect("finite eigenvalues"));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * d + i]).collect();
    // eigenvector for column i becomes row i of the output
    let mut vectors = vec![0.0; d * d];
    for (row, &col) in order.iter().enumerate() {
        for k in 0..d {
            vectors[row * d + k] = v[k * d + col];
        }
    }
    (eigenvalues, vectors)
}

/// Center the samples and project onto the top-2 right singular vectors
/// (via the eigen-decomposition of the sample covariance).
pub fn tsvd_2d(samples: &Array) -> Result<Array, EvalError> {
    let (n, d) = (samples.rows(), samples.cols());
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += samples.at(i, j);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let cov = covariance(samples);
    let (_vals, vecs) = symmetric_eigen(&cov, d);
    let mut out = vec![0.0; n * 2];
    for i in 0..n {
        for (c, row) in (0..2).zip(vecs.chunks(d)) {
            if c < d {
                out[i * 2 + c] =
                    (0..d).map(|k| (samples.at(i, k) - mean[k]) * row[k]).sum::<f64>();
            }
        }
    }
    Ok(Array::from_vec(&[n, 2], out).expect("projection shape"))
}

/// Gaussian plug-in entropy of the fitted covariance:
/// ½·log det(Σ̂ + εI) + (d/2)·log(2πe).
pub fn entropy_proxy(samples: &Array, eps: f64) -> f64 {
    assert!(eps > 0.0);
    let d = samples.cols();
    let mut cov = covariance(samples);
    for i in 0..d {
        cov[i * d + i] += eps;
    }
    // Cholesky log-determinant; Σ̂+εI is symmetric positive definite
    let mut chol = cov;
    let mut log_det = 0.0;
    for i in 0..d {
        for j in 0..=i {
            let mut sum = chol[i * d + j];
            for k in 0..j {
                sum -= chol[i * d + k] * chol[j * d + k];
            }
            if i == j {
                let diag = sum.max(1e-300).sqrt();
                chol[i * d + i] = diag;
                log_det += 2.0 * diag.ln();
            } else {
                chol[i * d + j] = sum / chol[j * d + j];
            }
        }
    }
    0.5 * log_det + d as f64 / 2.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
}

/// Minimal standalone SVG line chart (one polyline per series).
pub fn svg_line_chart(
    path: &Path,
    title: &str,
    series: &[(&str, &[(f64, f64)])],
) -> Result<(), EvalError> {
    let (w, h, margin) = (640.0, 400.0, 50.0);
    let points: Vec<(f64, f64)> =
        series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if points.is_empty() {
        std::fs::write(path, format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\"><text x=\"20\" y=\"30\">{title}: no data</text></svg>"))?;
        return Ok(());
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in &points {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<text x=\"20\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#444\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"#444\"/>\n",
        m = margin,
        b = h - margin,
        r = w - margin,
        t = margin
    ));
    svg.push_str(&format!(
        "<text x=\"{m}\" y=\"{yb}\" font-size=\"10\" font-family=\"sans-serif\">{x0:.3} .. {x1:.3}</text>\n<text x=\"4\" y=\"{m}\" font-size=\"10\" font-family=\"sans-serif\">{y1:.3}</text>\n<text x=\"4\" y=\"{yb2}\" font-size=\"10\" font-family=\"sans-serif\">{y0:.3}</text>\n",
        m = margin,
        yb = h - margin + 16.0,
        yb2 = h - margin,
    ));
    for (idx, (name, pts)) in series.iter().enumerate() {
        let color = colors[idx % colors.len()];
        let path_points: Vec<String> =
            pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path_points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"{color}\">{name}</text>\n",
            w - margin + 4.0,
            margin + 14.0 * idx as f64
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Scatter plot of the contraction report, one color per context size.
pub fn svg_contraction_scatter(path: &Path, report: &ContractionReport) -> Result<(), EvalError> {
    let (w, h, margin) = (480.0, 480.0, 40.0);
    let all: Vec<[f64; 2]> = report.levels.iter().flat_map(|l| l.projected.iter().copied()).collect();
    let mut extent = 1e-9f64;
    for p in &all {
        extent = extent.max(p[0].abs()).max(p[1].abs());
    }
    let scale = (w / 2.0 - margin) / extent;
    let colors = ["#bbbbbb", "#1f77b4", "#2ca02c", "#d62728", "#9467bd"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<text x=\"16\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">action samples, task {}</text>\n",
        report.task_id
    );
    for (idx, level) in report.levels.iter().enumerate() {
        let color = colors[idx % colors.len()];
        for p in &level.projected {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n",
                w / 2.0 + p[0] * scale,
                h / 2.0 - p[1] * scale
            ));
        }
        svg.push_str(&format!(
            "<text x=\"16\" y=\"{}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"{color}\">context {} (entropy {:.3})</text>\n",
            40.0 + 14.0 * idx as f64,
            level.context_size,
            level.entropy
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
