//! Self-gated prompting: a multi-channel gating unit that decides, once per
//! feature map, whether the multi-scale fusion block should run.
//!
//! The unit summarises a `(H, W, D, C)` map by mean-pooling along the three
//! complementary axes of each axis, maps each summary to a scalar key with a
//! two-layer perceptron, mixes the keys with softmax-normalised learnable
//! weights into a logit `s`, and turns `s` into a gate with a Gumbel-sigmoid
//! relaxation `σ((s + log ε − log(1 − ε)) / T)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Graph, Var};
use crate::error::{Error, Result};
pub use crate::feature::FeatureMap4D;
use crate::msfb::{self, MsfbParamIds, MsfbParams, MsfbVars};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Axis order used for keys, weights and summaries.
pub const AXES: [&str; 4] = ["H", "W", "D", "C"];

/// Noise value that cancels the logistic-noise term; used in evaluation.
pub const EVAL_NOISE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Soft,
    #[serde(alias = "st")]
    StraightThrough,
}

/// Mean of the map over all indices with one axis coordinate fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisSummaries {
    pub h: Vec<f64>,
    pub w: Vec<f64>,
    pub d: Vec<f64>,
    pub c: Vec<f64>,
}

impl AxisSummaries {
    pub fn axes(&self) -> [&[f64]; 4] {
        [&self.h, &self.w, &self.d, &self.c]
    }

    pub fn lengths(&self) -> [usize; 4] {
        self.axes().map(<[f64]>::len)
    }
}

pub fn axis_summaries(f: &FeatureMap4D) -> AxisSummaries {
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let [h, w, d, c] = summaries_graph(&mut g, x).map(|v| g.value(v).data().to_vec());
    AxisSummaries { h, w, d, c }
}

fn summaries_graph(g: &mut Graph, x: Var) -> [Var; 4] {
    [0, 1, 2, 3].map(|axis| g.axis_mean(x, axis))
}

/// Two-layer perceptron `len → hidden → 1` with a tanh between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPredictor {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl KeyPredictor {
    pub fn hidden_width(input_len: usize) -> usize {
        (input_len / 4).max(8)
    }

    pub fn random<R: Rng>(input_len: usize, output_bias: f64, rng: &mut R) -> Self {
        let hidden = Self::hidden_width(input_len);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::from_parts(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            )
        };
        Self {
            w1: uniform(&[input_len, hidden], input_len),
            b1: Tensor::zeros(&[hidden]),
            w2: uniform(&[hidden, 1], hidden),
            b2: Tensor::scalar(output_bias),
        }
    }

    pub fn input_len(&self) -> usize {
        self.w1.shape()[0]
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub predictors: [KeyPredictor; 4],
    /// Pre-softmax mixing logits `a`.
    pub mix_logits: [f64; 4],
    pub temperature: f64,
}

impl GateParams {
    /// Initial logit bias that leaves the gate mildly open.
    pub const INITIAL_KEY_BIAS: f64 = 0.5;

    pub fn random<R: Rng>(shape: [usize; 4], temperature: f64, rng: &mut R) -> Self {
        Self::random_with_bias(shape, temperature, Self::INITIAL_KEY_BIAS, rng)
    }

    pub fn random_with_bias<R: Rng>(
        shape: [usize; 4],
        temperature: f64,
        key_bias: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            predictors: shape.map(|len| KeyPredictor::random(len, key_bias, rng)),
            mix_logits: [0.0; 4],
            temperature,
        }
    }

    pub fn input_lengths(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.predictors[i].input_len())
    }

    pub fn validate(&self) -> Result<()> {
        validate_temperature(self.temperature)?;
        for (p, axis) in self.predictors.iter().zip(AXES) {
            let (len, hidden) = (p.w1.shape()[0], p.w1.shape()[1]);
            if p.b1.shape() != [hidden] || p.w2.shape() != [hidden, 1] || p.b2.shape() != [1] {
                return Err(Error::Config(format!(
                    "predictor for axis {axis} (input {len}) has inconsistent layer shapes"
                )));
            }
        }
        Ok(())
    }

    pub fn to_vars(&self, g: &mut Graph, trainable: bool) -> GateVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.variable(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let predictors = [0, 1, 2, 3].map(|i| {
            let [w1, b1, w2, b2] = self.predictors[i].tensors().map(&mut leaf);
            PredictorVars { w1, b1, w2, b2 }
        });
        let mix_logits = leaf(&Tensor::vector(self.mix_logits.to_vec()));
        GateVars {
            predictors,
            mix_logits,
        }
    }
}

fn validate_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "gate temperature must be positive and finite, got {t}"
        )))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PredictorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub predictors: [PredictorVars; 4],
    pub mix_logits: Var,
}

impl GateVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self
            .predictors
            .iter()
            .flat_map(|p| [p.w1, p.b1, p.w2, p.b2])
            .collect();
        out.push(self.mix_logits);
        out
    }
}

/// Keys, mixing weights and logit of one gate evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateLogit {
    pub keys: [f64; 4],
    pub weights: [f64; 4],
    pub logit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub keys: [f64; 4],
    pub weights: [f64; 4],
    pub logit: f64,
    pub soft_gate: f64,
    pub hard_gate: bool,
    /// The uniform sample `ε` the soft gate was computed with.
    pub noise: f64,
}

impl GateDecision {
    pub fn new(logit: GateLogit, soft_gate: f64, hard_gate: bool, noise: f64) -> Self {
        Self {
            keys: logit.keys,
            weights: logit.weights,
            logit: logit.logit,
            soft_gate,
            hard_gate,
            noise,
        }
    }
}

struct LogitVars {
    keys: Var,
    weights: Var,
    logit: Var,
}

fn logit_graph(g: &mut Graph, summaries: [Var; 4], gate: &GateVars) -> LogitVars {
    let keys: Vec<Var> = summaries
        .iter()
        .zip(&gate.predictors)
        .map(|(&f, p)| {
            let len = g.value(f).len();
            let row = g.reshape(f, &[1, len]);
            let hidden = g.linear(row, p.w1, p.b1);
            let hidden = g.tanh(hidden);
            let key = g.linear(hidden, p.w2, p.b2);
            g.reshape(key, &[1])
        })
        .collect();
    let keys = g.concat(&keys);
    let weights = g.softmax(gate.mix_logits);
    let logit = g.dot(weights, keys);
    LogitVars {
        keys,
        weights,
        logit,
    }
}

impl LogitVars {
    fn read(&self, g: &Graph) -> GateLogit {
        let arr = |v: Var| -> [f64; 4] { g.value(v).data().try_into().unwrap() };
        GateLogit {
            keys: arr(self.keys),
            weights: arr(self.weights),
            logit: g.scalar(self.logit),
        }
    }
}

pub fn gate_logit(summaries: &AxisSummaries, params: &GateParams) -> Result<GateLogit> {
    params.validate()?;
    let expected = params.input_lengths();
    let actual = summaries.lengths();
    if expected != actual {
        return Err(Error::Config(format!(
            "axis summary lengths {actual:?} do not match predictor inputs {expected:?}"
        )));
    }
    let mut g = Graph::new();
    let vars = params.to_vars(&mut g, false);
    let inputs = summaries
        .axes()
        .map(|s| g.constant(Tensor::vector(s.to_vec())));
    let out = logit_graph(&mut g, inputs, &vars);
    Ok(out.read(&g))
}

/// `log ε − log(1 − ε)`; the logistic-noise term of the relaxation.
pub fn logistic_noise(noise: f64) -> f64 {
    noise.ln() - (1.0 - noise).ln()
}

fn effective_noise(noise: f64, mode: Mode) -> Result<f64> {
    match mode {
        Mode::Eval => Ok(EVAL_NOISE),
        Mode::Train if noise > 0.0 && noise < 1.0 => Ok(noise),
        Mode::Train => Err(Error::InvalidInput(format!(
            "gate noise must lie strictly inside (0, 1), got {noise}"
        ))),
    }
}

/// Returns `(soft_gate, hard_gate)`. In eval mode `noise` is ignored and the
/// logistic-noise term is exactly zero.
pub fn gumbel_sigmoid(logit: f64, temperature: f64, noise: f64, mode: Mode) -> Result<(f64, bool)> {
    validate_temperature(temperature)?;
    let noise = effective_noise(noise, mode)?;
    let soft = autograd::sigmoid((logit + logistic_noise(noise)) * (1.0 / temperature));
    Ok((soft, soft > 0.5))
}

pub fn apply_gate(
    f: &FeatureMap4D,
    enhanced: &FeatureMap4D,
    decision: &GateDecision,
    mode: Mode,
    estimator: Estimator,
) -> Result<FeatureMap4D> {
    if f.shape() != enhanced.shape() {
        return Err(Error::ShapeMismatch {
            context: "apply_gate",
            expected: f.shape().to_vec(),
            actual: enhanced.shape().to_vec(),
        });
    }
    let select_hard = || {
        if decision.hard_gate {
            enhanced.clone()
        } else {
            f.clone()
        }
    };
    match (mode, estimator) {
        (Mode::Eval, _) | (Mode::Train, Estimator::StraightThrough) => Ok(select_hard()),
        (Mode::Train, Estimator::Soft) => {
            let g = decision.soft_gate;
            let data = enhanced
                .data()
                .iter()
                .zip(f.data())
                .map(|(e, x)| g * e + (1.0 - g) * x)
                .collect();
            FeatureMap4D::new(f.shape(), data)
        }
    }
}

/// Per-call gate settings.
#[derive(Debug, Clone, Copy)]
pub struct GateContext {
    pub mode: Mode,
    pub estimator: Estimator,
    pub temperature: f64,
    /// Uniform sample `ε`; ignored in eval mode.
    pub noise: f64,
}

impl GateContext {
    pub fn eval(temperature: f64) -> Self {
        Self {
            mode: Mode::Eval,
            estimator: Estimator::Soft,
            temperature,
            noise: EVAL_NOISE,
        }
    }
}

/// Full gated unit on the tape. In eval mode a closed gate returns `x` itself
/// and the fusion block is never evaluated.
pub fn sgpm_graph(
    g: &mut Graph,
    x: Var,
    gate: &GateVars,
    block: &MsfbVars,
    ctx: &GateContext,
) -> Result<(Var, GateDecision)> {
    validate_temperature(ctx.temperature)?;
    let noise = effective_noise(ctx.noise, ctx.mode)?;
    let summaries = summaries_graph(g, x);
    let logit = logit_graph(g, summaries, gate);
    let shifted = g.add_scalar(logit.logit, logistic_noise(noise));
    let scaled = g.scale(shifted, 1.0 / ctx.temperature);
    let soft = g.sigmoid(scaled);
    let soft_value = g.scalar(soft);
    let hard = soft_value > 0.5;
    let decision = GateDecision::new(logit.read(g), soft_value, hard, noise);
    let out = match (ctx.mode, ctx.estimator) {
        (Mode::Eval, _) => {
            if hard {
                msfb::msfb_graph(g, x, block)
            } else {
                x
            }
        }
        (Mode::Train, Estimator::Soft) => {
            let enhanced = msfb::msfb_graph(g, x, block);
            g.blend(enhanced, x, soft)
        }
        (Mode::Train, Estimator::StraightThrough) => {
            let enhanced = msfb::msfb_graph(g, x, block);
            let gate = g.straight_through(soft, if hard { 1.0 } else { 0.0 });
            g.blend(enhanced, x, gate)
        }
    };
    Ok((out, decision))
}

/// Gate decision plus gated output for plain (untaped) parameters.
pub fn sgpm_forward(
    f: &FeatureMap4D,
    gate: &GateParams,
    block: &MsfbParams,
    ctx: &GateContext,
) -> Result<(FeatureMap4D, GateDecision)> {
    gate.validate()?;
    block.validate()?;
    if gate.input_lengths() != f.shape() {
        return Err(Error::Config(format!(
            "gate predictors built for {:?}, feature map is {:?}",
            gate.input_lengths(),
            f.shape()
        )));
    }
    if block.channels() != f.channels() {
        return Err(Error::Config(format!(
            "MSFB expects {} channels, feature map has {}",
            block.channels(),
            f.channels()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let gv = gate.to_vars(&mut g, false);
    let mv = block.to_vars(&mut g, false);
    let (out, decision) = sgpm_graph(&mut g, x, &gv, &mv, ctx)?;
    Ok((FeatureMap4D::from_tensor(g.value(out).clone())?, decision))
}

/// Gate parameters registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GateParamIds {
    predictors: [[ParamId; 4]; 4],
    mix_logits: ParamId,
}

impl GateParamIds {
    pub fn register(store: &mut ParamStore, prefix: &str, init: &GateParams) -> Self {
        let predictors = [0, 1, 2, 3].map(|i| {
            let p = &init.predictors[i];
            let axis = AXES[i].to_lowercase();
            let names = ["w1", "b1", "w2", "b2"];
            let mut ids = p
                .tensors()
                .into_iter()
                .zip(names)
                .map(|(t, n)| store.add(format!("{prefix}.key_{axis}.{n}"), t.clone()));
            [0; 4].map(|_| ids.next().unwrap())
        });
        let mix_logits = store.add(
            format!("{prefix}.mix_logits"),
            Tensor::vector(init.mix_logits.to_vec()),
        );
        Self {
            predictors,
            mix_logits,
        }
    }

    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> GateVars {
        let predictors = self.predictors.map(|[w1, b1, w2, b2]| PredictorVars {
            w1: g.param(store, w1),
            b1: g.param(store, b1),
            w2: g.param(store, w2),
            b2: g.param(store, b2),
        });
        GateVars {
            predictors,
            mix_logits: g.param(store, self.mix_logits),
        }
    }

    pub fn params(&self, store: &ParamStore, temperature: f64) -> GateParams {
        let predictors = self.predictors.map(|[w1, b1, w2, b2]| KeyPredictor {
            w1: store.get(w1).clone(),
            b1: store.get(b1).clone(),
            w2: store.get(w2).clone(),
            b2: store.get(b2).clone(),
        });
        GateParams {
            predictors,
            mix_logits: store.get(self.mix_logits).data().try_into().unwrap(),
            temperature,
        }
    }

    /// Sets every key predictor's output bias, e.g. to a huge negative value
    /// to pin the gate closed.
    pub fn set_key_bias(&self, store: &mut ParamStore, bias: f64) {
        for [_, _, _, b2] in self.predictors {
            store.get_mut(b2).data_mut()[0] = bias;
        }
    }
}

/// One gated unit (gate + fusion block) inside the encoder.
#[derive(Debug, Clone)]
pub struct SgpmUnit {
    pub gate: GateParamIds,
    pub block: MsfbParamIds,
    pub shape: [usize; 4],
    pub compressed: usize,
}

impl SgpmUnit {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        shape: [usize; 4],
        compressed: usize,
        key_bias: f64,
        rng: &mut R,
    ) -> Self {
        let gate_init = GateParams::random_with_bias(shape, 1.0, key_bias, rng);
        let gate = GateParamIds::register(store, &format!("{prefix}.gate"), &gate_init);
        let block_init = MsfbParams::random(shape[3], compressed, rng);
        let block = MsfbParamIds::register(store, &format!("{prefix}.msfb"), block_init);
        Self {
            gate,
            block,
            shape,
            compressed,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &GateContext,
    ) -> Result<(Var, GateDecision)> {
        let gate = self.gate.vars(g, store);
        let block = self.block.vars(g, store);
        sgpm_graph(g, x, &gate, &block, ctx)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp() -> FeatureMap4D {
        FeatureMap4D::new([2, 2, 2, 2], (0..16).map(f64::from).collect()).unwrap()
    }

    /// Brute-force per-channel average over the 8 entries sharing a channel.
    fn channel_means_oracle(f: &FeatureMap4D) -> Vec<f64> {
        let mut sums = [0.0; 2];
        for h in 0..2 {
            for w in 0..2 {
                for d in 0..2 {
                    for (c, s) in sums.iter_mut().enumerate() {
                        *s += f.get(h, w, d, c);
                    }
                }
            }
        }
        sums.iter().map(|s| s / 8.0).collect()
    }

    #[test]
    fn summaries_of_constant_map() {
        let f = FeatureMap4D::filled([2, 2, 2, 2], 3.0).unwrap();
        let s = axis_summaries(&f);
        for axis in s.axes() {
            assert_eq!(axis, &[3.0, 3.0]);
        }
    }

    #[test]
    fn channel_summary_of_ramp() {
        let f = ramp();
        let oracle = channel_means_oracle(&f);
        assert_eq!(oracle, vec![7.0, 8.0]);
        assert_eq!(axis_summaries(&f).c, oracle);
    }

    #[test]
    fn single_voxel_summaries() {
        let f = FeatureMap4D::new([1, 1, 1, 3], vec![1.0, 2.0, 6.0]).unwrap();
        let s = axis_summaries(&f);
        assert_eq!(s.h, vec![3.0]);
        assert_eq!(s.w, vec![3.0]);
        assert_eq!(s.d, vec![3.0]);
        assert_eq!(s.c, vec![1.0, 2.0, 6.0]);
    }

    /// Predictors whose output is the constant `key` (zero second layer).
    fn constant_key_params(lengths: [usize; 4], keys: [f64; 4], mix: [f64; 4]) -> GateParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut predictors = lengths.map(|len| KeyPredictor::random(len, 0.0, &mut rng));
        for (p, k) in predictors.iter_mut().zip(keys) {
            p.w2 = Tensor::zeros(p.w2.shape());
            p.b2 = Tensor::scalar(k);
        }
        GateParams {
            predictors,
            mix_logits: mix,
            temperature: 1.0,
        }
    }

    #[test]
    fn uniform_mixing() {
        let f = ramp();
        let p = constant_key_params([2; 4], [1.0, 2.0, 3.0, 4.0], [0.0; 4]);
        let out = gate_logit(&axis_summaries(&f), &p).unwrap();
        assert_eq!(out.weights, [0.25; 4]);
        assert_eq!(out.logit, 2.5);
    }

    #[test]
    fn saturated_mixing_selects_first_key() {
        let f = ramp();
        let p = constant_key_params([2; 4], [1.7, -3.0, 5.0, 2.0], [10.0, -10.0, -10.0, -10.0]);
        let out = gate_logit(&axis_summaries(&f), &p).unwrap();
        // residual weight on the other keys is ~6e-9 each
        assert!((out.logit - 1.7).abs() < 1e-6, "{}", out.logit);
    }

    #[test]
    fn equal_keys_ignore_weights() {
        let f = ramp();
        let p = constant_key_params([2; 4], [1.0; 4], [1.0, 0.0, 0.0, 0.0]);
        let out = gate_logit(&axis_summaries(&f), &p).unwrap();
        assert!((out.logit - 1.0).abs() < 1e-15);
    }

    #[test]
    fn predictor_length_mismatch() {
        let f = ramp();
        let p = constant_key_params([3, 2, 2, 2], [0.0; 4], [0.0; 4]);
        assert!(matches!(
            gate_logit(&axis_summaries(&f), &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gumbel_sigmoid_examples() {
        assert_eq!(gumbel_sigmoid(0.0, 1.0, 0.5, Mode::Train).unwrap(), (0.5, false));
        let (soft, hard) = gumbel_sigmoid(0.5, 1.0, 0.5, Mode::Train).unwrap();
        // 1 / (1 + e^-0.5)
        assert!((soft - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert!(hard);
        // near-zero temperature saturates at the largest double below 1
        let (soft, hard) = gumbel_sigmoid(0.5, 1e-6, 0.5, Mode::Train).unwrap();
        assert_eq!(soft, 1.0 - f64::EPSILON / 2.0);
        assert!(hard);
    }

    #[test]
    fn gumbel_sigmoid_rejects_bad_inputs() {
        for eps in [0.0, 1.0, -0.1, 1.5] {
            assert!(gumbel_sigmoid(0.0, 1.0, eps, Mode::Train).is_err());
        }
        assert!(gumbel_sigmoid(0.0, 0.0, 0.5, Mode::Train).is_err());
        assert!(gumbel_sigmoid(0.0, -1.0, 0.5, Mode::Eval).is_err());
        // eval ignores the supplied noise
        assert_eq!(
            gumbel_sigmoid(0.3, 1.0, 0.0, Mode::Eval).unwrap(),
            gumbel_sigmoid(0.3, 1.0, 0.5, Mode::Train).unwrap()
        );
    }

    fn decision(soft: f64, hard: bool) -> GateDecision {
        GateDecision::new(
            GateLogit {
                keys: [0.0; 4],
                weights: [0.25; 4],
                logit: 0.0,
            },
            soft,
            hard,
            0.5,
        )
    }

    #[test]
    fn apply_gate_modes() {
        let f = FeatureMap4D::filled([2, 1, 1, 2], 1.0).unwrap();
        let e = FeatureMap4D::filled([2, 1, 1, 2], 2.0).unwrap();
        let closed = apply_gate(&f, &e, &decision(0.2, false), Mode::Eval, Estimator::Soft).unwrap();
        assert_eq!(closed, f);
        let open = apply_gate(&f, &e, &decision(0.8, true), Mode::Eval, Estimator::Soft).unwrap();
        assert_eq!(open, e);
        let soft = apply_gate(&f, &e, &decision(0.3, false), Mode::Train, Estimator::Soft).unwrap();
        assert!(soft.data().iter().all(|&v| (v - 1.3).abs() < 1e-15));
        let st = apply_gate(
            &f,
            &e,
            &decision(0.7, true),
            Mode::Train,
            Estimator::StraightThrough,
        )
        .unwrap();
        assert_eq!(st, e);
        let other = FeatureMap4D::filled([1, 2, 1, 2], 2.0).unwrap();
        assert!(apply_gate(&f, &other, &decision(0.5, false), Mode::Eval, Estimator::Soft).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_skips_closed_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = [2, 3, 2, 4];
        let n = shape.iter().product();
        let f = FeatureMap4D::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let mut gate = GateParams::random(shape, 1.0, &mut rng);
        let block = MsfbParams::random(4, 1, &mut rng);
        let ctx = GateContext::eval(1.0);
        let a = sgpm_forward(&f, &gate, &block, &ctx).unwrap();
        let b = sgpm_forward(&f, &gate, &block, &ctx).unwrap();
        assert_eq!(a, b);
        for p in &mut gate.predictors {
            p.b2 = Tensor::scalar(-1e6);
        }
        let (out, d) = sgpm_forward(&f, &gate, &block, &ctx).unwrap();
        assert!(!d.hard_gate);
        assert_eq!(out, f);
    }
}
