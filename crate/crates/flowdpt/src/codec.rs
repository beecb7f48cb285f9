//! Per-task-group observation/action/reward encoders and the token assembly
//! that produces the transformer input sequence.
//!
//! Each group owns three two-layer nets φ_o, φ_a, φ_r whose output slices
//! concatenate to d_model in (obs, act, rew) order. A sequence is laid out as
//! [BOS, query, permuted context]: the query token carries the query
//! observation with exactly-zero action and reward slices.

use serde::{Deserialize, Serialize};

use crate::envsuite::{TaskGroup, Transition};
use crate::ndgrad::{Array, GradError, Graph, NodeId, ParamStore, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Silu => g.silu(x),
        }
    }
}

/// Slice widths for the token layout; they must sum to d_model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceWidths {
    pub d_obs: usize,
    pub d_act: usize,
    pub d_rew: usize,
}

impl SliceWidths {
    /// Default split: half for observations, a quarter each for actions and
    /// rewards.
    pub fn split(d_model: usize) -> Self {
        let d_obs = d_model / 2;
        let d_act = d_model / 4;
        let d_rew = d_model - d_obs - d_act;
        SliceWidths { d_obs, d_act, d_rew }
    }

    pub fn d_model(&self) -> usize {
        self.d_obs + self.d_act + self.d_rew
    }
}

/// Encoders for one task group. Parameters live in the shared store under
/// the `codec.<group_id>.*` prefix.
#[derive(Debug, Clone)]
pub struct GroupCodec {
    pub group: TaskGroup,
    pub widths: SliceWidths,
    pub hidden: usize,
    pub activation: Activation,
    prefix: String,
}

fn xavier(shape: &[usize], rng: &mut Rng) -> Array {
    let fan_in = shape[0] as f64;
    let fan_out = shape[1] as f64;
    let std = (2.0 / (fan_in + fan_out)).sqrt();
    let n: usize = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| std * rng.normal()).collect()).expect("xavier shape")
}

/// Insert a two-layer net's parameters under `prefix`.
fn init_two_layer(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    rng: &mut Rng,
) {
    store.insert(&format!("{prefix}.w1"), xavier(&[in_dim, hidden], rng));
    store.insert(&format!("{prefix}.b1"), Array::zeros(&[hidden]));
    store.insert(&format!("{prefix}.w2"), xavier(&[hidden, out_dim], rng));
    store.insert(&format!("{prefix}.b2"), Array::zeros(&[out_dim]));
}

/// Apply the two-layer net stored at `prefix` to x: act(x·w1+b1)·w2+b2.
fn two_layer(
    g: &mut Graph,
    prefix: &str,
    x: NodeId,
    activation: Activation,
) -> Result<NodeId, GradError> {
    let w1 = g.param_named(&format!("{prefix}.w1"));
    let b1 = g.param_named(&format!("{prefix}.b1"));
    let w2 = g.param_named(&format!("{prefix}.w2"));
    let b2 = g.param_named(&format!("{prefix}.b2"));
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = activation.apply(g, h);
    let y = g.matmul(h, w2)?;
    g.add_bias(y, b2)
}

impl GroupCodec {
    pub fn init(
        store: &mut ParamStore,
        group: &TaskGroup,
        widths: SliceWidths,
        hidden: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let prefix = format!("codec.{}", group.group_id);
        let mut r = rng.stream(&prefix);
        init_two_layer(store, &format!("{prefix}.obs"), group.obs_dim, hidden, widths.d_obs, &mut r);
        init_two_layer(store, &format!("{prefix}.act"), group.act_dim, hidden, widths.d_act, &mut r);
        init_two_layer(store, &format!("{prefix}.rew"), 1, hidden, widths.d_rew, &mut r);
        GroupCodec { group: group.clone(), widths, hidden, activation, prefix }
    }

    /// Rebind to an existing store (e.g. after checkpoint load).
    pub fn attach(
        group: &TaskGroup,
        widths: SliceWidths,
        hidden: usize,
        activation: Activation,
    ) -> Self {
        GroupCodec {
            group: group.clone(),
            widths,
            hidden,
            activation,
            prefix: format!("codec.{}", group.group_id),
        }
    }

    pub fn d_model(&self) -> usize {
        self.widths.d_model()
    }

    fn check_obs(&self, len: usize) -> Result<(), GradError> {
        if len != self.group.obs_dim {
            return Err(GradError::BadShape(format!(
                "group {}: observation has {len} entries, expected {}",
                self.group.group_id, self.group.obs_dim
            )));
        }
        Ok(())
    }

    fn check_act(&self, len: usize) -> Result<(), GradError> {
        if len != self.group.act_dim {
            return Err(GradError::BadShape(format!(
                "group {}: action has {len} entries, expected {}",
                self.group.group_id, self.group.act_dim
            )));
        }
        Ok(())
    }

    /// Encode a batch of transitions into context tokens [L, d_model].
    /// Rewards are scaled by the group's reward_scale before encoding.
    pub fn encode_context(
        &self,
        g: &mut Graph,
        transitions: &[Transition],
    ) -> Result<NodeId, GradError> {
        let l = transitions.len();
        assert!(l > 0, "encode_context wants at least one transition");
        let mut obs = Vec::with_capacity(l * self.group.obs_dim);
        let mut act = Vec::with_capacity(l * self.group.act_dim);
        let mut rew = Vec::with_capacity(l);
        for t in transitions {
            self.check_obs(t.obs.len())?;
            self.check_act(t.action.len())?;
            obs.extend_from_slice(&t.obs);
            act.extend_from_slice(&t.action);
            rew.push(t.reward * self.group.reward_scale);
        }
        let obs = g.constant(Array::from_vec(&[l, self.group.obs_dim], obs)?);
        let act = g.constant(Array::from_vec(&[l, self.group.act_dim], act)?);
        let rew = g.constant(Array::from_vec(&[l, 1], rew)?);
        let eo = two_layer(g, &format!("{}.obs", self.prefix), obs, self.activation)?;
        let ea = two_layer(g, &format!("{}.act", self.prefix), act, self.activation)?;
        let er = two_layer(g, &format!("{}.rew", self.prefix), rew, self.activation)?;
        g.concat_cols(&[eo, ea, er])
    }

    /// Encode a single transition into one token [1, d_model].
    pub fn encode_transition(&self, g: &mut Graph, t: &Transition) -> Result<NodeId, GradError> {
        self.encode_context(g, std::slice::from_ref(t))
    }

    /// Encode the query observation: φ_o(o_q) with exactly-zero action and
    /// reward slices.
    pub fn encode_query(&self, g: &mut Graph, obs: &[f64]) -> Result<NodeId, GradError> {
        self.check_obs(obs.len())?;
        let o = g.constant(Array::from_vec(&[1, self.group.obs_dim], obs.to_vec())?);
        let eo = two_layer(g, &format!("{}.obs", self.prefix), o, self.activation)?;
        let zeros = g.constant(Array::zeros(&[1, self.widths.d_act + self.widths.d_rew]));
        g.concat_cols(&[eo, zeros])
    }
}

/// Assemble [BOS, query, context permuted by `perm`] into one sequence.
/// `perm` must be a permutation of 0..n where n is the context length; the
/// query never participates in the permutation and always sits at index 1.
pub fn assemble(
    g: &mut Graph,
    bos: NodeId,
    query: NodeId,
    context: Option<NodeId>,
    perm: &[usize],
) -> Result<NodeId, GradError> {
    match context {
        None => {
            if !perm.is_empty() {
                return Err(GradError::BadShape(format!(
                    "assemble: empty context but perm has {} entries",
                    perm.len()
                )));
            }
            g.concat_rows(&[bos, query])
        }
        Some(ctx) => {
            let permuted = g.permute_rows(ctx, perm)?;
            g.concat_rows(&[bos, query, permuted])
        }
    }
}

pub fn identity_perm(n: usize) -> Vec<usize> {
    (0..n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::array;

    fn group(obs_dim: usize, act_dim: usize) -> TaskGroup {
        TaskGroup { group_id: "g".into(), obs_dim, act_dim, reward_scale: 1.0 }
    }

    fn setup(d_model: usize) -> (ParamStore, GroupCodec) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(3);
        let codec = GroupCodec::init(
            &mut store,
            &group(3, 2),
            SliceWidths::split(d_model),
            d_model,
            Activation::Gelu,
            &mut rng,
        );
        (store, codec)
    }

    fn transition() -> Transition {
        Transition { obs: vec![0.1, -0.4, 0.7], action: vec![0.2, -0.9], reward: 0.5 }
    }

    #[test]
    fn zero_weights_give_zero_token() {
        let (mut store, codec) = setup(16);
        for id in store.ids().collect::<Vec<_>>() {
            for x in store.value_mut(id).data_mut() {
                *x = 0.0;
            }
        }
        let mut g = Graph::new(&store);
        let tok = codec.encode_transition(&mut g, &transition()).unwrap();
        assert!(g.value(tok).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn slices_are_functionally_independent() {
        let (store, codec) = setup(16);
        let w = codec.widths;
        let base = transition();
        let mut version_a = base.clone();
        version_a.action = vec![0.8, 0.3];
        let mut version_r = base.clone();
        version_r.reward += 0.25;

        let encode = |t: &Transition| {
            let mut g = Graph::new(&store);
            let tok = codec.encode_transition(&mut g, t).unwrap();
            g.value(tok).data().to_vec()
        };
        let e0 = encode(&base);
        let ea = encode(&version_a);
        let er = encode(&version_r);

        // perturbing the action leaves the obs slice untouched
        assert_eq!(&e0[..w.d_obs], &ea[..w.d_obs]);
        // and the reward slice too
        assert_eq!(&e0[w.d_obs + w.d_act..], &ea[w.d_obs + w.d_act..]);
        // perturbing the reward changes only the last d_rew coordinates
        assert_eq!(&e0[..w.d_obs + w.d_act], &er[..w.d_obs + w.d_act]);
        assert_ne!(&e0[w.d_obs + w.d_act..], &er[w.d_obs + w.d_act..]);
    }

    #[test]
    fn query_token_action_reward_slices_exactly_zero() {
        let (store, codec) = setup(16);
        let w = codec.widths;
        let mut g = Graph::new(&store);
        let tok = codec.encode_query(&mut g, &[0.3, 0.6, -0.2]).unwrap();
        let data = g.value(tok).data();
        assert!(data[w.d_obs..].iter().all(|x| *x == 0.0));
        assert_eq!(data.len(), 16);
    }

    #[test]
    fn query_differs_from_zero_action_transition_with_random_biases() {
        // phi_a(0) and phi_r(0) are nonzero once biases are random, so the
        // query token is not the same as encoding a transition with a=0, r=0.
        let (mut store, codec) = setup(16);
        let mut rng = Rng::seed(9).stream("bias");
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains(".b") {
                for x in store.value_mut(id).data_mut() {
                    *x = rng.normal();
                }
            }
        }
        let obs = vec![0.3, 0.6, -0.2];
        let mut g = Graph::new(&store);
        let q = codec.encode_query(&mut g, &obs).unwrap();
        let t = Transition { obs: obs.clone(), action: vec![0.0, 0.0], reward: 0.0 };
        let tok = codec.encode_transition(&mut g, &t).unwrap();
        assert_ne!(g.value(q).data(), g.value(tok).data());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (store, codec) = setup(16);
        let mut g = Graph::new(&store);
        assert!(codec.encode_query(&mut g, &[0.1, 0.2]).is_err());
        let bad = Transition { obs: vec![0.0; 3], action: vec![0.0; 3], reward: 0.0 };
        assert!(codec.encode_transition(&mut g, &bad).is_err());
    }

    #[test]
    fn reward_scale_applies_before_encoding() {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(4);
        let mut grp = group(3, 2);
        grp.reward_scale = 0.01;
        let codec = GroupCodec::init(
            &mut store,
            &grp,
            SliceWidths::split(16),
            16,
            Activation::Gelu,
            &mut rng,
        );
        let grp_unscaled = group(3, 2);
        let codec_unscaled =
            GroupCodec::attach(&grp_unscaled, SliceWidths::split(16), 16, Activation::Gelu);

        let t_big = Transition { obs: vec![0.0; 3], action: vec![0.0; 2], reward: 100.0 };
        let t_scaled = Transition { obs: vec![0.0; 3], action: vec![0.0; 2], reward: 1.0 };
        let mut g = Graph::new(&store);
        let a = codec.encode_transition(&mut g, &t_big).unwrap();
        let b = codec_unscaled.encode_transition(&mut g, &t_scaled).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn assemble_layout_and_permutation() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let bos = g.constant(Array::row(vec![1.0, 0.0]));
        let query = g.constant(Array::row(vec![2.0, 0.0]));
        let ctx = g.constant(
            Array::from_vec(&[3, 2], vec![10.0, 0.0, 20.0, 0.0, 30.0, 0.0]).unwrap(),
        );

        // n=0: [BOS, query]
        let seq0 = assemble(&mut g, bos, query, None, &[]).unwrap();
        assert_eq!(g.value(seq0).shape(), &[2, 2]);
        assert_eq!(g.value(seq0).at(0, 0), 1.0);
        assert_eq!(g.value(seq0).at(1, 0), 2.0);

        // identity keeps context order
        let seq_id = assemble(&mut g, bos, query, Some(ctx), &identity_perm(3)).unwrap();
        assert_eq!(g.value(seq_id).at(2, 0), 10.0);
        assert_eq!(g.value(seq_id).at(3, 0), 20.0);
        assert_eq!(g.value(seq_id).at(4, 0), 30.0);

        // perm [2,0,1] on [A,B,C] yields [BOS,q,C,A,B]
        let seq_p = assemble(&mut g, bos, query, Some(ctx), &[2, 0, 1]).unwrap();
        assert_eq!(g.value(seq_p).at(1, 0), 2.0, "query stays at index 1");
        assert_eq!(g.value(seq_p).at(2, 0), 30.0);
        assert_eq!(g.value(seq_p).at(3, 0), 10.0);
        assert_eq!(g.value(seq_p).at(4, 0), 20.0);

        // invalid permutation rejected
        assert!(assemble(&mut g, bos, query, Some(ctx), &[0, 0, 1]).is_err());
        assert!(assemble(&mut g, bos, query, Some(ctx), &[0, 1]).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, codec) = setup(32);
        let t = transition();
        let run = || {
            let mut g = Graph::new(&store);
            let tok = codec.encode_transition(&mut g, &t).unwrap();
            g.value(tok).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn context_batch_matches_per_transition_encoding() {
        let (store, codec) = setup(16);
        let ts = vec![
            transition(),
            Transition { obs: vec![0.9, 0.1, 0.0], action: vec![-0.3, 0.4], reward: -1.2 },
        ];
        let mut g = Graph::new(&store);
        let batch = codec.encode_context(&mut g, &ts).unwrap();
        let t0 = codec.encode_transition(&mut g, &ts[0]).unwrap();
        let t1 = codec.encode_transition(&mut g, &ts[1]).unwrap();
        let row0 = array::slice_rows(g.value(batch), 0, 1).unwrap();
        let row1 = array::slice_rows(g.value(batch), 1, 1).unwrap();
        assert_eq!(row0.data(), g.value(t0).data());
        assert_eq!(row1.data(), g.value(t1).data());
    }
}
