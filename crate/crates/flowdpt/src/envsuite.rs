//! Analytic toy continuous-control tasks with exact demonstrators and
//! random-policy baselines.
//!
//! Three kinds: `goal_bandit` (one-step, reward −‖a−g‖², unobservable goal),
//! `bimodal_reach` (one-step, reward −min(‖a−g‖², ‖a+g‖²), genuinely
//! multimodal optimum) and `linear_control` (noisy linear dynamics with a
//! quadratic cost and an LQR demonstrator). Bandit observations are constant
//! zero vectors so the task identity must be inferred from context rewards.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ndgrad::{array, Array, Rng};

/// Actions live in [-ACTION_BOX, ACTION_BOX]^act_dim for every task kind.
pub const ACTION_BOX: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dim { what: String, expected: usize, got: usize },
    #[error("riccati iteration did not converge within {0} iterations")]
    RiccatiDiverged(usize),
    #[error("invalid task spec {task_id}: {reason}")]
    BadSpec { task_id: String, reason: String },
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Grad(#[from] crate::ndgrad::GradError),
}

/// Tasks sharing observation/action dimensionality, served by one codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGroup {
    pub group_id: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    #[serde(default = "default_reward_scale")]
    pub reward_scale: f64,
}

fn default_reward_scale() -> f64 {
    1.0
}

/// One (observation, action, reward) tuple in a task group's spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum KindSpec {
    GoalBandit { goal: Vec<f64> },
    BimodalReach { goal: Vec<f64> },
    LinearControl {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
    },
}

fn default_noise_std() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(flatten)]
    pub kind: KindSpec,
    pub horizon: usize,
    pub group_id: String,
    pub split: Split,
}

/// Task registry file: groups plus task descriptors, the desk-scale analogue
/// of a train/test split over environment suites.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Registry {
    pub groups: Vec<TaskGroup>,
    pub tasks: Vec<TaskSpec>,
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn group(&self, group_id: &str) -> Result<&TaskGroup, EnvError> {
        self.groups
            .iter()
            .find(|g| g.group_id == group_id)
            .ok_or_else(|| EnvError::UnknownGroup(group_id.to_string()))
    }

    /// Validate and instantiate every task (solves LQR gains up front).
    pub fn instantiate(&self) -> Result<Vec<TaskInstance>, EnvError> {
        self.tasks
            .iter()
            .map(|spec| TaskInstance::from_spec(spec, self.group(&spec.group_id)?.clone()))
            .collect()
    }

    /// A suite of goal-reaching bandits with goals drawn uniformly from
    /// [-0.9, 0.9]^act_dim.
    pub fn goal_bandit_suite(n_train: usize, n_test: usize, act_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::seed(seed).stream("registry/goal_bandit");
        let group = TaskGroup {
            group_id: format!("bandit{act_dim}"),
            obs_dim: act_dim,
            act_dim,
            reward_scale: 1.0,
        };
        let mut tasks = Vec::new();
        for i in 0..n_train + n_test {
            let goal: Vec<f64> = (0..act_dim).map(|_| rng.uniform_in(-0.9, 0.9)).collect();
            let split = if i < n_train { Split::Train } else { Split::Test };
            tasks.push(TaskSpec {
                task_id: format!("goal_bandit_{i:03}"),
                kind: KindSpec::GoalBandit { goal },
                horizon: 1,
                group_id: group.group_id.clone(),
                split,
            });
        }
        Registry { groups: vec![group], tasks }
    }

    /// Bimodal reaching bandits; each goal coordinate has magnitude in
    /// [0.3, 0.9] so the two modes stay well separated.
    pub fn bimodal_suite(n_train: usize, n_test: usize, act_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::seed(seed).stream("registry/bimodal");
        let group = TaskGroup {
            group_id: format!("bimodal{act_dim}"),
            obs_dim: act_dim,
            act_dim,
            reward_scale: 1.0,
        };
        let mut tasks = Vec::new();
        for i in 0..n_train + n_test {
            let goal: Vec<f64> = (0..act_dim)
                .map(|_| {
                    let mag = rng.uniform_in(0.3, 0.9);
                    if rng.uniform() < 0.5 {
                        -mag
                    } else {
                        mag
                    }
                })
                .collect();
            let split = if i < n_train { Split::Train } else { Split::Test };
            tasks.push(TaskSpec {
                task_id: format!("bimodal_reach_{i:03}"),
                kind: KindSpec::BimodalReach { goal },
                horizon: 1,
                group_id: group.group_id.clone(),
                split,
            });
        }
        Registry { groups: vec![group], tasks }
    }

    /// Linear-control tasks with randomized stable-ish dynamics around a
    /// double integrator; state dim 2, action dim 1, horizon 20.
    pub fn linear_control_suite(n_train: usize, n_test: usize, seed: u64) -> Self {
        let mut rng = Rng::seed(seed).stream("registry/linear_control");
        let group = TaskGroup {
            group_id: "lincon21".to_string(),
            obs_dim: 2,
            act_dim: 1,
            reward_scale: 1.0,
        };
        let mut tasks = Vec::new();
        for i in 0..n_train + n_test {
            let dt = rng.uniform_in(0.05, 0.15);
            let damping = rng.uniform_in(0.9, 1.0);
            let gain = rng.uniform_in(0.5, 1.5);
            let split = if i < n_train { Split::Train } else { Split::Test };
            tasks.push(TaskSpec {
                task_id: format!("linear_control_{i:03}"),
                kind: KindSpec::LinearControl {
                    a: vec![vec![1.0, dt], vec![0.0, damping]],
                    b: vec![vec![0.0], vec![gain * dt]],
                    q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    r: vec![vec![0.1]],
                    noise_std: 0.1,
                },
                horizon: 20,
                group_id: group.group_id.clone(),
                split,
            });
        }
        Registry { groups: vec![group], tasks }
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // a handful of instances live per run
enum Dynamics {
    GoalBandit { goal: Vec<f64> },
    BimodalReach { goal: Vec<f64> },
    LinearControl {
        a: Array,
        b: Array,
        q: Array,
        r: Array,
        gain: Array,
        noise_std: f64,
    },
}

/// An instantiated task: immutable after construction.
#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub task_id: String,
    pub horizon: usize,
    pub group: TaskGroup,
    pub split: Split,
    dynamics: Dynamics,
}

/// Mutable per-episode state owned by the runner.
#[derive(Debug, Clone)]
pub struct EnvState {
    state: Vec<f64>,
    t: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub total_return: f64,
    pub transitions: Vec<Transition>,
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<Array, EnvError> {
    let m = rows.len();
    let n = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(m * n);
    for row in rows {
        if row.len() != n {
            return Err(EnvError::Dim { what: "ragged matrix".into(), expected: n, got: row.len() });
        }
        data.extend_from_slice(row);
    }
    Ok(Array::from_vec(&[m, n], data)?)
}

impl TaskInstance {
    pub fn from_spec(spec: &TaskSpec, group: TaskGroup) -> Result<Self, EnvError> {
        let dynamics = match &spec.kind {
            KindSpec::GoalBandit { goal } => {
                check_dim("goal", goal.len(), group.act_dim, &spec.task_id)?;
                check_dim("bandit obs", group.obs_dim, group.act_dim, &spec.task_id)?;
                Dynamics::GoalBandit { goal: goal.clone() }
            }
            KindSpec::BimodalReach { goal } => {
                check_dim("goal", goal.len(), group.act_dim, &spec.task_id)?;
                check_dim("bandit obs", group.obs_dim, group.act_dim, &spec.task_id)?;
                Dynamics::BimodalReach { goal: goal.clone() }
            }
            KindSpec::LinearControl { a, b, q, r, noise_std } => {
                let a = to_matrix(a)?;
                let b = to_matrix(b)?;
                let q = to_matrix(q)?;
                let r = to_matrix(r)?;
                let n = a.rows();
                check_dim("state", n, group.obs_dim, &spec.task_id)?;
                check_dim("input", b.cols(), group.act_dim, &spec.task_id)?;
                let (gain, _p) = solve_lqr(&a, &b, &q, &r, 10_000, 1e-10).map_err(|e| {
                    EnvError::BadSpec {
                        task_id: spec.task_id.clone(),
                        reason: format!("(A,B) not stabilizable: {e}"),
                    }
                })?;
                Dynamics::LinearControl { a, b, q, r, gain, noise_std: *noise_std }
            }
        };
        Ok(TaskInstance {
            task_id: spec.task_id.clone(),
            horizon: spec.horizon,
            group,
            split: spec.split,
            dynamics,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.group.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.group.act_dim
    }

    /// LQR gain for linear-control tasks.
    pub fn lqr_gain(&self) -> Option<&Array> {
        match &self.dynamics {
            Dynamics::LinearControl { gain, .. } => Some(gain),
            _ => None,
        }
    }

    /// Start an episode. Bandit kinds observe a constant zero vector;
    /// linear control draws its state from N(0, 0.5·I).
    pub fn reset(&self, rng: &mut Rng) -> (EnvState, Vec<f64>) {
        let state = match &self.dynamics {
            Dynamics::GoalBandit { .. } | Dynamics::BimodalReach { .. } => Vec::new(),
            Dynamics::LinearControl { a, .. } => {
                let std = 0.5f64.sqrt();
                (0..a.rows()).map(|_| std * rng.normal()).collect()
            }
        };
        let env = EnvState { state, t: 0 };
        let obs = self.observe(&env);
        (env, obs)
    }

    fn observe(&self, env: &EnvState) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::GoalBandit { .. } | Dynamics::BimodalReach { .. } => {
                vec![0.0; self.obs_dim()]
            }
            Dynamics::LinearControl { .. } => env.state.clone(),
        }
    }

    /// Advance one step: returns (next observation, reward, done).
    pub fn step(
        &self,
        env: &mut EnvState,
        action: &[f64],
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, f64, bool), EnvError> {
        check_dim("action", action.len(), self.act_dim(), &self.task_id)?;
        let reward = match &self.dynamics {
            Dynamics::GoalBandit { goal } => -sq_dist(action, goal),
            Dynamics::BimodalReach { goal } => {
                let plus = sq_dist(action, goal);
                let minus: f64 =
                    action.iter().zip(goal).map(|(a, g)| (a + g) * (a + g)).sum();
                -plus.min(minus)
            }
            Dynamics::LinearControl { a, b, q, r, noise_std, .. } => {
                let s = Array::from_vec(&[a.rows(), 1], env.state.clone())?;
                let act = Array::from_vec(&[b.cols(), 1], action.to_vec())?;
                let mut next = array::add(&array::matmul(a, &s)?, &array::matmul(b, &act)?)?;
                for x in next.data_mut() {
                    *x += noise_std * rng.normal();
                }
                let state_cost = quad_form(q, next.data());
                let action_cost = quad_form(r, action);
                env.state = next.data().to_vec();
                -state_cost - action_cost
            }
        };
        env.t += 1;
        let done = env.t >= self.horizon;
        Ok((self.observe(env), reward, done))
    }

    /// The exact demonstrator. Bimodal reach picks +g or −g with equal
    /// probability from the stream, a genuinely multimodal optimal policy.
    pub fn demonstrator_action(&self, obs: &[f64], rng: &mut Rng) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::GoalBandit { goal } => goal.clone(),
            Dynamics::BimodalReach { goal } => {
                if rng.uniform() < 0.5 {
                    goal.clone()
                } else {
                    goal.iter().map(|g| -g).collect()
                }
            }
            Dynamics::LinearControl { gain, .. } => {
                let s = Array::from_vec(&[obs.len(), 1], obs.to_vec()).expect("state vector");
                let u = array::matmul(gain, &s).expect("gain shape");
                u.data().iter().map(|x| -x).collect()
            }
        }
    }

    /// Run a whole episode under a policy closure.
    pub fn run_episode<F>(&self, mut policy: F, rng: &mut Rng) -> Result<EpisodeResult, EnvError>
    where
        F: FnMut(&[f64], &mut Rng) -> Vec<f64>,
    {
        let (mut env, mut obs) = self.reset(rng);
        let mut transitions = Vec::with_capacity(self.horizon);
        let mut total = 0.0;
        loop {
            let action = policy(&obs, rng);
            let (next_obs, reward, done) = self.step(&mut env, &action, rng)?;
            transitions.push(Transition { obs, action, reward });
            total += reward;
            obs = next_obs;
            if done {
                break;
            }
        }
        Ok(EpisodeResult { total_return: total, transitions })
    }

    /// Monte-Carlo mean return of actions uniform in the action box.
    pub fn random_policy_score(&self, n_episodes: usize, rng: &mut Rng) -> Result<f64, EnvError> {
        assert!(n_episodes >= 1);
        let act_dim = self.act_dim();
        let mut total = 0.0;
        for ep in 0..n_episodes {
            let mut ep_rng = rng.substream(ep as u64);
            let result = self.run_episode(
                |_obs, r| (0..act_dim).map(|_| r.uniform_in(-ACTION_BOX, ACTION_BOX)).collect(),
                &mut ep_rng,
            )?;
            total += result.total_return;
        }
        Ok(total / n_episodes as f64)
    }

    /// Monte-Carlo mean return of the demonstrator, the expert baseline.
    pub fn demonstrator_policy_score(
        &self,
        n_episodes: usize,
        rng: &mut Rng,
    ) -> Result<f64, EnvError> {
        assert!(n_episodes >= 1);
        let mut total = 0.0;
        for ep in 0..n_episodes {
            let mut ep_rng = rng.substream(ep as u64);
            let result =
                self.run_episode(|obs, r| self.demonstrator_action(obs, r), &mut ep_rng)?;
            total += result.total_return;
        }
        Ok(total / n_episodes as f64)
    }
}

fn check_dim(what: &str, got: usize, expected: usize, task_id: &str) -> Result<(), EnvError> {
    if got != expected {
        return Err(EnvError::Dim { what: format!("{what} for {task_id}"), expected, got });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn quad_form(m: &Array, x: &[f64]) -> f64 {
    let n = m.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += x[i] * m.at(i, j) * x[j];
        }
    }
    acc
}

/// Gauss-Jordan inverse with partial pivoting, for the small SPD matrices
/// appearing in the Riccati recursion.
fn invert(m: &Array) -> Result<Array, EnvError> {
    let n = m.rows();
    if m.cols() != n {
        return Err(EnvError::Dim { what: "invert".into(), expected: n, got: m.cols() });
    }
    let mut a: Vec<f64> = m.data().to_vec();
    let mut inv: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(EnvError::BadSpec {
                task_id: "invert".into(),
                reason: "singular matrix".into(),
            });
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
                inv.swap(col * n + k, pivot * n + k);
            }
        }
        let d = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = a[row * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        a[row * n + k] -= f * a[col * n + k];
                        inv[row * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
    }
    Ok(Array::from_vec(&[n, n], inv)?)
}

/// Fixed-point iteration of the discrete algebraic Riccati equation.
///
/// Returns the gain K = (R + BᵀPB)⁻¹BᵀPA and the fixed point P.
pub fn solve_lqr(
    a: &Array,
    b: &Array,
    q: &Array,
    r: &Array,
    max_iters: usize,
    tol: f64,
) -> Result<(Array, Array), EnvError> {
    let at = array::transpose(a);
    let bt = array::transpose(b);
    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..max_iters {
        // P' = Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA
        let pa = array::matmul(&p, a)?;
        let pb = array::matmul(&p, b)?;
        let atpa = array::matmul(&at, &pa)?;
        let atpb = array::matmul(&at, &pb)?;
        let btpb = array::matmul(&bt, &pb)?;
        let inner = invert(&array::add(r, &btpb)?)?;
        let btpa = array::matmul(&bt, &pa)?;
        let correction = array::matmul(&atpb, &array::matmul(&inner, &btpa)?)?;
        let next = array::sub(&array::add(q, &atpa)?, &correction)?;
        let delta = array::sub(&next, &p)?.max_abs();
        p = next;
        if delta < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(EnvError::RiccatiDiverged(max_iters));
    }
    let pb = array::matmul(&p, b)?;
    let btpb = array::matmul(&bt, &pb)?;
    let inner = invert(&array::add(r, &btpb)?)?;
    let btpa = array::matmul(&bt, &array::matmul(&p, a)?)?;
    let k = array::matmul(&inner, &btpa)?;
    Ok((k, p))
}

/// Max-abs residual of the Riccati equation at P.
pub fn riccati_residual(
    a: &Array,
    b: &Array,
    q: &Array,
    r: &Array,
    p: &Array,
) -> Result<f64, EnvError> {
    let at = array::transpose(a);
    let bt = array::transpose(b);
    let pa = array::matmul(p, a)?;
    let pb = array::matmul(p, b)?;
    let atpa = array::matmul(&at, &pa)?;
    let atpb = array::matmul(&at, &pb)?;
    let btpb = array::matmul(&bt, &pb)?;
    let inner = invert(&array::add(r, &btpb)?)?;
    let btpa = array::matmul(&bt, &pa)?;
    let correction = array::matmul(&atpb, &array::matmul(&inner, &btpa)?)?;
    let rhs = array::sub(&array::add(q, &atpa)?, &correction)?;
    Ok(array::sub(p, &rhs)?.max_abs())
}
