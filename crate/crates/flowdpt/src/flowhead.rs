//! Context-conditioned rectified-flow action head.
//!
//! A learnable sinusoidal time embedding γ(t) = [sin(t·f); cos(t·f)] feeds a
//! per-group vector-field net v(γ(t), h, x_t). Training regresses v onto the
//! constant displacement a* − x₀ along linear interpolations; sampling draws
//! x₀ ~ N(0, I) and integrates dx/dt = v(t, h, x) from t=0 to 1 with M
//! uniform steps of Heun's method (Euler is kept for ablations and the
//! order-of-accuracy tests). A diagonal Gaussian head serves as the baseline.

use serde::{Deserialize, Serialize};

use crate::codec::Activation;
use crate::ndgrad::{Array, GradError, Graph, NodeId, ParamStore, Rng};

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("non-finite state at integration step {step}")]
    NonFinite { step: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("invalid flow config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Heun,
    Euler,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Number of uniform integration steps M.
    pub m_steps: usize,
    pub solver: Solver,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { m_steps: 32, solver: Solver::Heun }
    }
}

/// Log-spaced frequencies f_k = f_min (f_max/f_min)^{k/(d_γ/2−1)}.
pub fn init_frequencies(f_min: f64, f_max: f64, d_gamma: usize) -> Result<Vec<f64>, FlowError> {
    if !(f_min > 0.0 && f_min < f_max) {
        return Err(FlowError::BadConfig(format!(
            "frequency bounds must satisfy 0 < f_min < f_max, got {f_min}, {f_max}"
        )));
    }
    if !d_gamma.is_multiple_of(2) || d_gamma < 4 {
        return Err(FlowError::BadConfig(format!("d_gamma must be even and >= 4, got {d_gamma}")));
    }
    let half = d_gamma / 2;
    let ratio = f_max / f_min;
    Ok((0..half)
        .map(|k| f_min * ratio.powf(k as f64 / (half as f64 - 1.0)))
        .collect())
}

/// Linear interpolation x_t = (1−t)·x₀ + t·a*.
pub fn interpolate(x0: &[f64], a_star: &[f64], t: f64) -> Vec<f64> {
    debug_assert_eq!(x0.len(), a_star.len());
    x0.iter().zip(a_star).map(|(x, a)| (1.0 - t) * x + t * a).collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeEmbeddingConfig {
    pub d_gamma: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for TimeEmbeddingConfig {
    // The frequency range spans period scales from 1 down to ~0.006 on [0,1].
    fn default() -> Self {
        TimeEmbeddingConfig { d_gamma: 32, f_min: 1.0, f_max: 1000.0 }
    }
}

/// Rectified-flow head for one task group.
#[derive(Debug, Clone)]
pub struct FlowHead {
    pub group_id: String,
    pub act_dim: usize,
    pub d_model: usize,
    pub time: TimeEmbeddingConfig,
    pub activation: Activation,
    prefix: String,
}

fn xavier(shape: &[usize], rng: &mut Rng) -> Array {
    let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
    let n: usize = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| std * rng.normal()).collect()).expect("xavier shape")
}

/// Vector-field net width: 4·act_dim + 64.
fn vf_hidden(act_dim: usize) -> usize {
    4 * act_dim + 64
}

impl FlowHead {
    pub fn init(
        store: &mut ParamStore,
        group_id: &str,
        act_dim: usize,
        d_model: usize,
        time: TimeEmbeddingConfig,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self, FlowError> {
        let prefix = format!("flow.{group_id}");
        let mut r = rng.stream(&prefix);
        let freqs = init_frequencies(time.f_min, time.f_max, time.d_gamma)?;
        // store log f so learned frequencies stay positive
        let logf: Vec<f64> = freqs.iter().map(|f| f.ln()).collect();
        store.insert(
            &format!("{prefix}.time.logf"),
            Array::from_vec(&[1, time.d_gamma / 2], logf)?,
        );
        let in_dim = time.d_gamma + d_model + act_dim;
        let hidden = vf_hidden(act_dim);
        store.insert(&format!("{prefix}.net.w0"), xavier(&[in_dim, hidden], &mut r));
        store.insert(&format!("{prefix}.net.b0"), Array::zeros(&[hidden]));
        store.insert(&format!("{prefix}.net.w1"), xavier(&[hidden, hidden], &mut r));
        store.insert(&format!("{prefix}.net.b1"), Array::zeros(&[hidden]));
        store.insert(&format!("{prefix}.net.w2"), xavier(&[hidden, act_dim], &mut r));
        store.insert(&format!("{prefix}.net.b2"), Array::zeros(&[act_dim]));
        Ok(FlowHead {
            group_id: group_id.to_string(),
            act_dim,
            d_model,
            time,
            activation,
            prefix,
        })
    }

    pub fn attach(
        group_id: &str,
        act_dim: usize,
        d_model: usize,
        time: TimeEmbeddingConfig,
        activation: Activation,
    ) -> Self {
        FlowHead {
            group_id: group_id.to_string(),
            act_dim,
            d_model,
            time,
            activation,
            prefix: format!("flow.{group_id}"),
        }
    }

    /// γ for a batch of times: [P, d_gamma], first half sin(t·f), second half
    /// cos(t·f). Differentiable into the learnable log-frequencies.
    pub fn gamma_batch(&self, g: &mut Graph, ts: &[f64]) -> Result<NodeId, FlowError> {
        for &t in ts {
            if !(0.0..=1.0).contains(&t) {
                return Err(FlowError::BadConfig(format!("time {t} outside [0, 1]")));
            }
        }
        let logf = g.param_named(&format!("{}.time.logf", self.prefix));
        let f = g.exp(logf); // [1, K]
        let t_col = g.constant(Array::from_vec(&[ts.len(), 1], ts.to_vec())?);
        let tf = g.matmul(t_col, f)?; // [P, K]
        let s = g.sin(tf);
        let c = g.cos(tf);
        Ok(g.concat_cols(&[s, c])?)
    }

    /// v(γ(t), h, x_t) for batched rows; all three parts must have P rows.
    pub fn field_batch(
        &self,
        g: &mut Graph,
        gamma: NodeId,
        h: NodeId,
        xt: NodeId,
    ) -> Result<NodeId, FlowError> {
        let input = g.concat_cols(&[gamma, h, xt])?;
        let w0 = g.param_named(&format!("{}.net.w0", self.prefix));
        let b0 = g.param_named(&format!("{}.net.b0", self.prefix));
        let w1 = g.param_named(&format!("{}.net.w1", self.prefix));
        let b1 = g.param_named(&format!("{}.net.b1", self.prefix));
        let w2 = g.param_named(&format!("{}.net.w2", self.prefix));
        let b2 = g.param_named(&format!("{}.net.b2", self.prefix));
        let mut x = g.matmul(input, w0)?;
        x = g.add_bias(x, b0)?;
        x = self.activation.apply(g, x);
        x = g.matmul(x, w1)?;
        x = g.add_bias(x, b1)?;
        x = self.activation.apply(g, x);
        x = g.matmul(x, w2)?;
        Ok(g.add_bias(x, b2)?)
    }

    /// Rectified-flow matching loss over supervised positions.
    ///
    /// One x₀ ~ N(0, I) and one t ~ U(0,1) are drawn per position from the
    /// given stream; the loss is the mean over positions of
    /// ‖v(γ(t), h, x_t) − (a* − x₀)‖².
    pub fn rf_loss(
        &self,
        g: &mut Graph,
        h: NodeId,
        a_star: &Array,
        rng: &mut Rng,
    ) -> Result<NodeId, FlowError> {
        let draws = FlowDraws::sample(a_star, rng);
        self.rf_loss_with_draws(g, h, a_star, &draws)
    }

    /// Deterministic variant used by gradient checks: noise and times are
    /// supplied by the caller.
    pub fn rf_loss_with_draws(
        &self,
        g: &mut Graph,
        h: NodeId,
        a_star: &Array,
        draws: &FlowDraws,
    ) -> Result<NodeId, FlowError> {
        let p = a_star.rows();
        if g.value(h).rows() != p {
            return Err(GradError::ShapeMismatch {
                op: "rf_loss".to_string(),
                lhs: g.value(h).shape().to_vec(),
                rhs: a_star.shape().to_vec(),
            }
            .into());
        }
        let act = self.act_dim;
        let mut xt = Vec::with_capacity(p * act);
        let mut target = Vec::with_capacity(p * act);
        for i in 0..p {
            let x0 = &draws.x0[i * act..(i + 1) * act];
            let a = a_star.row_slice(i);
            xt.extend(interpolate(x0, a, draws.t[i]));
            target.extend(a.iter().zip(x0).map(|(a, x)| a - x));
        }
        let gamma = self.gamma_batch(g, &draws.t)?;
        let xt = g.constant(Array::from_vec(&[p, act], xt)?);
        let target = g.constant(Array::from_vec(&[p, act], target)?);
        let pred = self.field_batch(g, gamma, h, xt)?;
        let d = g.sub(pred, target)?;
        let sq = g.mul(d, d)?;
        let total = g.sum(sq);
        let loss = g.scale(total, 1.0 / p as f64);
        let value = g.value(loss).scalar_value();
        if !value.is_finite() {
            return Err(FlowError::NonFiniteLoss(format!(
                "positions {p}, act_dim {act}, t range [{:?}]",
                (
                    draws.t.iter().cloned().fold(f64::INFINITY, f64::min),
                    draws.t.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                )
            )));
        }
        Ok(loss)
    }

    /// Draw one action: x₀ ~ N(0, I_act) integrated through the learned
    /// field conditioned on the hidden state h ([1, d_model]).
    pub fn sample_action(
        &self,
        store: &ParamStore,
        h: &Array,
        cfg: &FlowConfig,
        rng: &mut Rng,
    ) -> Result<Vec<f64>, FlowError> {
        let x0 = rng.normal_vec(self.act_dim);
        let field = |t: f64, x: &[f64]| -> Result<Vec<f64>, FlowError> {
            let mut g = Graph::new(store);
            let gamma = self.gamma_batch(&mut g, &[t])?;
            let h_node = g.constant(h.clone());
            let x_node = g.constant(Array::from_vec(&[1, self.act_dim], x.to_vec())?);
            let v = self.field_batch(&mut g, gamma, h_node, x_node)?;
            Ok(g.value(v).data().to_vec())
        };
        integrate(field, x0, cfg.m_steps, cfg.solver)
    }
}

/// Pre-drawn noise and times for the flow loss, one pair per position.
#[derive(Debug, Clone)]
pub struct FlowDraws {
    pub x0: Vec<f64>,
    pub t: Vec<f64>,
}

impl FlowDraws {
    pub fn sample(a_star: &Array, rng: &mut Rng) -> Self {
        let p = a_star.rows();
        let act = a_star.cols();
        // per position: first its noise vector, then its time
        let mut x0 = Vec::with_capacity(p * act);
        let mut t = Vec::with_capacity(p);
        for _ in 0..p {
            x0.extend(rng.normal_vec(act));
            t.push(rng.uniform());
        }
        FlowDraws { x0, t }
    }
}

/// Integrate dx/dt = field(t, x) from t=0 to t=1 with m uniform steps.
///
/// Heun follows the predictor-corrector form: k1 at t, k2 at t+Δt on the
/// Euler-predicted state, update by the average. Times are computed as exact
/// step fractions so the final stage is evaluated at t = 1.
pub fn integrate<F>(
    mut field: F,
    x0: Vec<f64>,
    m: usize,
    solver: Solver,
) -> Result<Vec<f64>, FlowError>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, FlowError>,
{
    if m < 1 {
        return Err(FlowError::BadConfig("integration needs at least one step".into()));
    }
    let dt = 1.0 / m as f64;
    let mut x = x0;
    for step in 0..m {
        let t = step as f64 / m as f64;
        let k1 = field(t, &x)?;
        match solver {
            Solver::Euler => {
                for (xi, k) in x.iter_mut().zip(&k1) {
                    *xi += dt * k;
                }
            }
            Solver::Heun => {
                let predicted: Vec<f64> =
                    x.iter().zip(&k1).map(|(xi, k)| xi + dt * k).collect();
                let t_next = (step + 1) as f64 / m as f64;
                let k2 = field(t_next, &predicted)?;
                for ((xi, a), b) in x.iter_mut().zip(&k1).zip(&k2) {
                    *xi += 0.5 * dt * (a + b);
                }
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(FlowError::NonFinite { step });
        }
    }
    Ok(x)
}

/// Diagonal Gaussian policy head, the baseline the flow head is compared to.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub group_id: String,
    pub act_dim: usize,
    pub d_model: usize,
    pub activation: Activation,
    prefix: String,
}

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_TAU: f64 = 0.918_938_533_204_672_7; // 0.5·ln(2π)

impl GaussianHead {
    pub fn init(
        store: &mut ParamStore,
        group_id: &str,
        act_dim: usize,
        d_model: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let prefix = format!("gauss.{group_id}");
        let mut r = rng.stream(&prefix);
        let hidden = vf_hidden(act_dim);
        store.insert(&format!("{prefix}.net.w0"), xavier(&[d_model, hidden], &mut r));
        store.insert(&format!("{prefix}.net.b0"), Array::zeros(&[hidden]));
        store.insert(&format!("{prefix}.net.w1"), xavier(&[hidden, hidden], &mut r));
        store.insert(&format!("{prefix}.net.b1"), Array::zeros(&[hidden]));
        store.insert(&format!("{prefix}.net.w2"), xavier(&[hidden, 2 * act_dim], &mut r));
        store.insert(&format!("{prefix}.net.b2"), Array::zeros(&[2 * act_dim]));
        GaussianHead { group_id: group_id.to_string(), act_dim, d_model, activation, prefix }
    }

    pub fn attach(group_id: &str, act_dim: usize, d_model: usize, activation: Activation) -> Self {
        GaussianHead {
            group_id: group_id.to_string(),
            act_dim,
            d_model,
            activation,
            prefix: format!("gauss.{group_id}"),
        }
    }

    /// (mean, log_std) with log_std clamped to [−5, 2].
    pub fn forward(&self, g: &mut Graph, h: NodeId) -> Result<(NodeId, NodeId), FlowError> {
        let w0 = g.param_named(&format!("{}.net.w0", self.prefix));
        let b0 = g.param_named(&format!("{}.net.b0", self.prefix));
        let w1 = g.param_named(&format!("{}.net.w1", self.prefix));
        let b1 = g.param_named(&format!("{}.net.b1", self.prefix));
        let w2 = g.param_named(&format!("{}.net.w2", self.prefix));
        let b2 = g.param_named(&format!("{}.net.b2", self.prefix));
        let mut x = g.matmul(h, w0)?;
        x = g.add_bias(x, b0)?;
        x = self.activation.apply(g, x);
        x = g.matmul(x, w1)?;
        x = g.add_bias(x, b1)?;
        x = self.activation.apply(g, x);
        x = g.matmul(x, w2)?;
        x = g.add_bias(x, b2)?;
        let mean = g.slice_cols(x, 0, self.act_dim)?;
        let log_std_raw = g.slice_cols(x, self.act_dim, self.act_dim)?;
        let log_std = g.clamp(log_std_raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok((mean, log_std))
    }

    /// Diagonal Gaussian negative log-likelihood, summed over action dims and
    /// averaged over positions.
    pub fn nll_loss(&self, g: &mut Graph, h: NodeId, a_star: &Array) -> Result<NodeId, FlowError> {
        let p = a_star.rows();
        let (mean, log_std) = self.forward(g, h)?;
        let target = g.constant(a_star.clone());
        let d = g.sub(mean, target)?;
        let sq = g.mul(d, d)?;
        let neg2ls = g.scale(log_std, -2.0);
        let inv_var = g.exp(neg2ls);
        let quad = g.mul(sq, inv_var)?;
        let quad = g.scale(quad, 0.5);
        let with_ls = g.add(quad, log_std)?;
        let const_term = g.constant(Array::full(&[p, self.act_dim], HALF_LOG_TAU));
        let full = g.add(with_ls, const_term)?;
        let total = g.sum(full);
        Ok(g.scale(total, 1.0 / p as f64))
    }

    /// Reparameterized sample: mean + std ⊙ ξ.
    pub fn sample(
        &self,
        store: &ParamStore,
        h: &Array,
        rng: &mut Rng,
    ) -> Result<Vec<f64>, FlowError> {
        let mut g = Graph::new(store);
        let h_node = g.constant(h.clone());
        let (mean, log_std) = self.forward(&mut g, h_node)?;
        let mean = g.value(mean).data().to_vec();
        let std: Vec<f64> = g.value(log_std).data().iter().map(|x| x.exp()).collect();
        Ok(mean.iter().zip(&std).map(|(m, s)| m + s * rng.normal()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::ParamId;

    #[test]
    fn frequencies_hit_endpoints() {
        let f = init_frequencies(1.0, 100.0, 4).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-12);
        assert!((f[1] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn frequencies_geometric_midpoint() {
        let f = init_frequencies(1.0, 100.0, 6).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-12);
        assert!((f[1] - 10.0).abs() < 1e-10);
        assert!((f[2] - 100.0).abs() < 1e-10);
    }

    #[test]
    fn frequencies_have_constant_ratio() {
        let f = init_frequencies(0.5, 800.0, 16).unwrap();
        let r0 = f[1] / f[0];
        for w in f.windows(2) {
            assert!((w[1] / w[0] - r0).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_frequency_bounds_rejected() {
        assert!(init_frequencies(0.0, 10.0, 8).is_err());
        assert!(init_frequencies(10.0, 1.0, 8).is_err());
        assert!(init_frequencies(1.0, 10.0, 7).is_err());
        assert!(init_frequencies(1.0, 10.0, 2).is_err());
    }

    fn head(d_model: usize, act_dim: usize) -> (ParamStore, FlowHead) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(5);
        let fh = FlowHead::init(
            &mut store,
            "g",
            act_dim,
            d_model,
            TimeEmbeddingConfig { d_gamma: 8, f_min: 1.0, f_max: 100.0 },
            Activation::Gelu,
            &mut rng,
        )
        .unwrap();
        (store, fh)
    }

    #[test]
    fn gamma_values_at_zero_and_norm_identity() {
        let (store, fh) = head(4, 2);
        let mut g = Graph::new(&store);
        let at0 = fh.gamma_batch(&mut g, &[0.0]).unwrap();
        let v = g.value(at0).data();
        let half = v.len() / 2;
        assert!(v[..half].iter().all(|x| *x == 0.0), "sin part at t=0");
        assert!(v[half..].iter().all(|x| (*x - 1.0).abs() < 1e-15), "cos part at t=0");

        // ||gamma(t)||^2 = d_gamma/2 for any t
        for &t in &[0.1, 0.5, 0.77, 1.0] {
            let node = fh.gamma_batch(&mut g, &[t]).unwrap();
            let sq: f64 = g.value(node).data().iter().map(|x| x * x).sum();
            assert!((sq - half as f64).abs() < 1e-12, "t={t}: {sq}");
        }
    }

    #[test]
    fn gamma_matches_hand_values() {
        // d_gamma=2 is below the init bound, so build the store by hand
        let mut store = ParamStore::new();
        store
            .insert("flow.g.time.logf", Array::from_vec(&[1, 1], vec![(std::f64::consts::FRAC_PI_2).ln()]).unwrap());
        let fh = FlowHead::attach(
            "g",
            1,
            4,
            TimeEmbeddingConfig { d_gamma: 2, f_min: 1.0, f_max: 10.0 },
            Activation::Gelu,
        );
        let mut g = Graph::new(&store);
        let node = fh.gamma_batch(&mut g, &[1.0]).unwrap();
        let v = g.value(node).data();
        assert!((v[0] - 1.0).abs() < 1e-12, "sin(pi/2)");
        assert!(v[1].abs() < 1e-12, "cos(pi/2)");
    }

    #[test]
    fn gamma_rejects_out_of_range_times() {
        let (store, fh) = head(4, 2);
        let mut g = Graph::new(&store);
        assert!(fh.gamma_batch(&mut g, &[-0.01]).is_err());
        assert!(fh.gamma_batch(&mut g, &[1.01]).is_err());
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = [0.0, 0.0];
        let a = [2.0, -2.0];
        assert_eq!(interpolate(&x0, &a, 0.0), vec![0.0, 0.0]);
        assert_eq!(interpolate(&x0, &a, 1.0), vec![2.0, -2.0]);
        assert_eq!(interpolate(&x0, &a, 0.5), vec![1.0, -1.0]);
    }

    #[test]
    fn zero_field_loss_is_mean_squared_displacement() {
        // zero all net params: v ≡ 0, so loss = mean ||a*-x0||^2
        let (mut store, fh) = head(4, 2);
        for id in store.ids().collect::<Vec<ParamId>>() {
            if store.name(id).starts_with("flow.g.net") {
                for x in store.value_mut(id).data_mut() {
                    *x = 0.0;
                }
            }
        }
        let a_star = Array::from_vec(&[3, 2], vec![1.0, 0.5, -0.3, 0.2, 0.0, 2.0]).unwrap();
        let draws = FlowDraws {
            x0: vec![0.1, -0.2, 0.5, 0.5, -1.0, 0.7],
            t: vec![0.3, 0.9, 0.05],
        };
        let expected: f64 = (0..3)
            .map(|i| {
                (0..2)
                    .map(|j| {
                        let d = a_star.at(i, j) - draws.x0[i * 2 + j];
                        d * d
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 3.0;

        let mut g = Graph::new(&store);
        let h = g.constant(Array::zeros(&[3, 4]));
        let loss = fh.rf_loss_with_draws(&mut g, h, &a_star, &draws).unwrap();
        assert!((g.value(loss).scalar_value() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_field_and_matching_targets_give_zero_loss() {
        let (mut store, fh) = head(4, 2);
        for id in store.ids().collect::<Vec<ParamId>>() {
            if store.name(id).starts_with("flow.g.net") {
                for x in store.value_mut(id).data_mut() {
                    *x = 0.0;
                }
            }
        }
        // a* = x0 → target displacement zero → loss exactly zero
        let a_star = Array::from_vec(&[2, 2], vec![0.4, -0.6, 1.0, 0.0]).unwrap();
        let draws = FlowDraws { x0: vec![0.4, -0.6, 1.0, 0.0], t: vec![0.5, 0.25] };
        let mut g = Graph::new(&store);
        let h = g.constant(Array::zeros(&[2, 4]));
        let loss = fh.rf_loss_with_draws(&mut g, h, &a_star, &draws).unwrap();
        assert_eq!(g.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn rigged_exact_field_gives_zero_loss() {
        // bias-only net emitting exactly a*-x0 for a single known position
        let (mut store, fh) = head(4, 2);
        let a_star = Array::from_vec(&[1, 2], vec![0.8, -0.4]).unwrap();
        let draws = FlowDraws { x0: vec![0.3, 0.1], t: vec![0.6] };
        for id in store.ids().collect::<Vec<ParamId>>() {
            let name = store.name(id).to_string();
            if name.starts_with("flow.g.net") {
                for x in store.value_mut(id).data_mut() {
                    *x = 0.0;
                }
            }
            if name == "flow.g.net.b2" {
                store.value_mut(id).data_mut().copy_from_slice(&[0.5, -0.5]);
            }
        }
        let mut g = Graph::new(&store);
        let h = g.constant(Array::zeros(&[1, 4]));
        let loss = fh.rf_loss_with_draws(&mut g, h, &a_star, &draws).unwrap();
        assert!(g.value(loss).scalar_value() < 1e-24);
    }

    #[test]
    fn constant_field_heun_single_step_is_exact() {
        let field = |_t: f64, _x: &[f64]| Ok(vec![0.7, -0.2]);
        let out = integrate(field, vec![1.0, 1.0], 1, Solver::Heun).unwrap();
        assert!((out[0] - 1.7).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_field_returns_x0() {
        let field = |_t: f64, x: &[f64]| Ok(vec![0.0; x.len()]);
        let out = integrate(field, vec![0.3, -0.9], 16, Solver::Heun).unwrap();
        assert_eq!(out, vec![0.3, -0.9]);
    }

    #[test]
    fn solver_orders_on_linear_decay_field() {
        // dx/dt = -x from x0=1: exact e^{-1}; halving the step size shrinks
        // Heun error ~4x and Euler error ~2x
        let exact = (-1.0f64).exp();
        let error = |m: usize, solver: Solver| -> f64 {
            let field = |_t: f64, x: &[f64]| Ok(vec![-x[0]]);
            let out = integrate(field, vec![1.0], m, solver).unwrap();
            (out[0] - exact).abs()
        };
        for m in [8usize, 16, 32] {
            let heun_ratio = error(m, Solver::Heun) / error(2 * m, Solver::Heun);
            let euler_ratio = error(m, Solver::Euler) / error(2 * m, Solver::Euler);
            assert!((heun_ratio - 4.0).abs() < 0.5, "heun ratio {heun_ratio} at M={m}");
            assert!((euler_ratio - 2.0).abs() < 0.3, "euler ratio {euler_ratio} at M={m}");
        }
    }

    #[test]
    fn non_finite_state_reports_step_index() {
        let field = |t: f64, x: &[f64]| {
            if t >= 0.5 {
                Ok(vec![f64::INFINITY; x.len()])
            } else {
                Ok(vec![0.0; x.len()])
            }
        };
        let err = integrate(field, vec![0.0], 4, Solver::Euler).unwrap_err();
        match err {
            FlowError::NonFinite { step } => assert_eq!(step, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn sample_action_constant_rigged_field_adds_displacement() {
        // zero weights + bias c: integrating v≡c ends at x0 + c
        let (mut store, fh) = head(4, 2);
        for id in store.ids().collect::<Vec<ParamId>>() {
            let name = store.name(id).to_string();
            if name.starts_with("flow.g.net") {
                for x in store.value_mut(id).data_mut() {
                    *x = 0.0;
                }
            }
            if name == "flow.g.net.b2" {
                store.value_mut(id).data_mut().copy_from_slice(&[0.25, -1.5]);
            }
        }
        let h = Array::zeros(&[1, 4]);
        let cfg = FlowConfig { m_steps: 1, solver: Solver::Heun };
        let mut rng = Rng::seed(77).stream("sample");
        let mut probe = rng.clone();
        let x0 = probe.normal_vec(2);
        let out = fh.sample_action(&store, &h, &cfg, &mut rng).unwrap();
        assert!((out[0] - (x0[0] + 0.25)).abs() < 1e-12);
        assert!((out[1] - (x0[1] - 1.5)).abs() < 1e-12);
    }

    #[test]
    fn flow_head_gradient_matches_finite_differences() {
        let (mut store, fh) = head(6, 2);
        let mut rng = Rng::seed(21).stream("fd");
        let h_val =
            Array::from_vec(&[2, 6], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let a_star = Array::from_vec(&[2, 2], vec![0.3, -0.8, 1.1, 0.2]).unwrap();
        let draws = FlowDraws { x0: vec![0.5, -0.1, -0.9, 0.4], t: vec![0.37, 0.81] };

        let loss_fn = |store: &ParamStore| -> f64 {
            let mut g = Graph::new(store);
            let h = g.constant(h_val.clone());
            let loss = fh.rf_loss_with_draws(&mut g, h, &a_star, &draws).unwrap();
            g.value(loss).scalar_value()
        };

        let mut g = Graph::new(&store);
        let h = g.constant(h_val.clone());
        let loss = fh.rf_loss_with_draws(&mut g, h, &a_star, &draws).unwrap();
        let grads = g.backward(loss).unwrap();
        drop(g);

        let step = 1e-5;
        for id in store.ids().collect::<Vec<ParamId>>() {
            let n = store.value(id).len();
            for k in (0..n).step_by(7) {
                let orig = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = orig + step;
                let up = loss_fn(&store);
                store.value_mut(id).data_mut()[k] = orig - step;
                let dn = loss_fn(&store);
                store.value_mut(id).data_mut()[k] = orig;
                let numeric = (up - dn) / (2.0 * step);
                let analytic = grads.get(id).data()[k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "{}[{k}]: rel {rel}", store.name(id));
            }
        }
    }

    #[test]
    fn gaussian_nll_matches_closed_form_for_standard_normal() {
        // rig mean=0, log_std=0 via zero params; NLL at a*=0 is act_dim·½·ln(2π)
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(31);
        let gh = GaussianHead::init(&mut store, "g", 3, 4, Activation::Gelu, &mut rng);
        for id in store.ids().collect::<Vec<ParamId>>() {
            for x in store.value_mut(id).data_mut() {
                *x = 0.0;
            }
        }
        let mut g = Graph::new(&store);
        let h = g.constant(Array::zeros(&[1, 4]));
        let a_star = Array::zeros(&[1, 3]);
        let loss = gh.nll_loss(&mut g, h, &a_star).unwrap();
        let expected = 3.0 * HALF_LOG_TAU;
        assert!((g.value(loss).scalar_value() - expected).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_lower_bound_at_clamped_std() {
        // mean == a* and log_std pushed to the clamp floor minimizes the NLL
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(32);
        let gh = GaussianHead::init(&mut store, "g", 1, 4, Activation::Gelu, &mut rng);
        for id in store.ids().collect::<Vec<ParamId>>() {
            let name = store.name(id).to_string();
            for x in store.value_mut(id).data_mut() {
                *x = 0.0;
            }
            if name == "gauss.g.net.b2" {
                // mean slot 0, raw log_std slot 1 pushed far below the clamp
                store.value_mut(id).data_mut().copy_from_slice(&[0.0, -100.0]);
            }
        }
        let mut g = Graph::new(&store);
        let h = g.constant(Array::zeros(&[1, 4]));
        let a_star = Array::zeros(&[1, 1]);
        let loss = gh.nll_loss(&mut g, h, &a_star).unwrap();
        let bound = LOG_STD_MIN + HALF_LOG_TAU;
        assert!((g.value(loss).scalar_value() - bound).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_mean_gradient_is_error_at_unit_std() {
        // d NLL / d mean = (mean - a*) / sigma^2; rig sigma=1 via zero params,
        // then check against finite differences through the bias producing mean
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(33);
        let gh = GaussianHead::init(&mut store, "g", 1, 4, Activation::Gelu, &mut rng);
        for id in store.ids().collect::<Vec<ParamId>>() {
            for x in store.value_mut(id).data_mut() {
                *x = 0.0;
            }
        }
        let delta = 0.37;
        let b2 = store.id("gauss.g.net.b2").unwrap();
        store.value_mut(b2).data_mut()[0] = delta; // mean = delta, a* = 0

        let a_star = Array::zeros(&[1, 1]);
        let mut g = Graph::new(&store);
        let h = g.constant(Array::zeros(&[1, 4]));
        let loss = gh.nll_loss(&mut g, h, &a_star).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(b2).data()[0];
        assert!((analytic - delta).abs() < 1e-12, "{analytic} vs {delta}");

        // finite-difference cross-check
        drop(g);
        let step = 1e-6;
        let eval = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let h = g.constant(Array::zeros(&[1, 4]));
            let loss = gh.nll_loss(&mut g, h, &a_star).unwrap();
            g.value(loss).scalar_value()
        };
        store.value_mut(b2).data_mut()[0] = delta + step;
        let up = eval(&store);
        store.value_mut(b2).data_mut()[0] = delta - step;
        let dn = eval(&store);
        let numeric = (up - dn) / (2.0 * step);
        assert!((analytic - numeric).abs() < 1e-5, "{analytic} vs {numeric}");
    }

    #[test]
    fn gaussian_sample_is_mean_plus_scaled_noise() {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(34);
        let gh = GaussianHead::init(&mut store, "g", 2, 4, Activation::Gelu, &mut rng);
        for id in store.ids().collect::<Vec<ParamId>>() {
            let name = store.name(id).to_string();
            for x in store.value_mut(id).data_mut() {
                *x = 0.0;
            }
            if name == "gauss.g.net.b2" {
                store.value_mut(id).data_mut().copy_from_slice(&[1.0, -1.0, 0.0, 0.0]);
            }
        }
        let h = Array::zeros(&[1, 4]);
        let mut rng = Rng::seed(99).stream("gsample");
        let mut probe = rng.clone();
        let noise = probe.normal_vec(2);
        let s = gh.sample(&store, &h, &mut rng).unwrap();
        assert!((s[0] - (1.0 + noise[0])).abs() < 1e-12);
        assert!((s[1] - (-1.0 + noise[1])).abs() < 1e-12);
    }

    /// Training an unconditional 1-D flow on the two-point target {−1, +1}
    /// must put substantial mass on both modes.
    #[test]
    fn unconditional_two_mode_training_covers_both_modes() {
        use crate::ndgrad::{adam_step, AdamConfig, AdamState};

        let d_model = 4;
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(42);
        let fh = FlowHead::init(
            &mut store,
            "g",
            1,
            d_model,
            TimeEmbeddingConfig { d_gamma: 8, f_min: 1.0, f_max: 100.0 },
            Activation::Gelu,
            &mut rng,
        )
        .unwrap();

        let mut adam = AdamState::zeros_like(&store);
        let cfg = AdamConfig { lr: 3e-3, ..AdamConfig::default() };
        let train_rng = Rng::seed(7).stream("two_mode");
        let batch = 64;
        for step in 0..1200 {
            let mut r = train_rng.substream(step);
            let targets: Vec<f64> =
                (0..batch).map(|_| if r.uniform() < 0.5 { -1.0 } else { 1.0 }).collect();
            let a_star = Array::from_vec(&[batch, 1], targets).unwrap();
            let mut g = Graph::new(&store);
            let h = g.constant(Array::zeros(&[batch, d_model]));
            let loss = fh.rf_loss(&mut g, h, &a_star, &mut r).unwrap();
            let grads = g.backward(loss).unwrap();
            drop(g);
            adam_step(&mut store, &grads, &mut adam, &cfg).unwrap();
        }

        let h = Array::zeros(&[1, d_model]);
        let flow_cfg = FlowConfig::default();
        let sample_rng = Rng::seed(11).stream("modes");
        let n = 1000;
        let (mut lo, mut hi, mut stray) = (0usize, 0usize, 0usize);
        for i in 0..n {
            let mut r = sample_rng.substream(i);
            let a = fh.sample_action(&store, &h, &flow_cfg, &mut r).unwrap()[0];
            if (a + 1.0).abs() < 0.2 {
                lo += 1;
            } else if (a - 1.0).abs() < 0.2 {
                hi += 1;
            } else {
                stray += 1;
            }
        }
        let lo_frac = lo as f64 / n as f64;
        let hi_frac = hi as f64 / n as f64;
        assert!(
            (0.35..=0.65).contains(&lo_frac) && (0.35..=0.65).contains(&hi_frac),
            "mode masses {lo_frac:.3}/{hi_frac:.3}, stray {stray}"
        );
    }
}
