use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{
    DecoderConfig, EncoderConfig, ForwardOptions, LayerRange, ModelConfig, PointLabel, PromptPoint,
    PromptSet, SegmentationModel, SgpmPosition,
};
use crate::error::{Error, Result};
use crate::msfb::{compressed_channels, msfb_graph, MsfbParamIds, MsfbParams};
use crate::params::{named_rng, ParamId, ParamStore};
use crate::sgpm::{sgpm_graph, Estimator, GateContext, GateParamIds, GateParams, Mode};
use crate::tensor::Tensor;
use crate::zoomloss::{zoom_loss_graph, LossConfig};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor, so gradients that are zero up to round-off are
/// compared absolutely.
const ABS_FLOOR: f64 = 1e-6;
/// Scalars checked per run; larger problems are subsampled.
const MAX_CHECKED: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Sgpm,
    Msfb,
    Loss,
    EndToEnd,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Sgpm, Component::Msfb, Component::Loss, Component::EndToEnd];
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgpm" => Ok(Component::Sgpm),
            "msfb" => Ok(Component::Msfb),
            "loss" => Ok(Component::Loss),
            "end_to_end" | "end-to-end" => Ok(Component::EndToEnd),
            other => Err(Error::Config(format!(
                "unknown gradcheck component {other:?} (sgpm, msfb, loss, end_to_end)"
            ))),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Sgpm => "sgpm",
            Component::Msfb => "msfb",
            Component::Loss => "loss",
            Component::EndToEnd => "end_to_end",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub component: Component,
    pub seed: u64,
    pub checked: usize,
    pub total_scalars: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: String,
    pub passed: bool,
    pub seconds: f64,
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} seed {}: {} ({} of {} scalars, max rel err {:.3e} at {})",
            self.component,
            self.seed,
            if self.passed { "pass" } else { "FAIL" },
            self.checked,
            self.total_scalars,
            self.max_rel_error,
            self.worst
        )
    }
}

type Builder = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ out ⊙ R` with fixed random weights, so every output entry matters.
fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    g.dot(out, w)
}

fn sgpm_problem(rng: &mut ChaCha8Rng) -> (ParamStore, Builder) {
    let shape = [2, 2, 2, 3];
    let mut store = ParamStore::new();
    let input = store.add("input", uniform_tensor(&shape, -1.0, 1.0, rng));
    let gate = GateParamIds::register(&mut store, "gate", &GateParams::random(shape, 1.0, rng));
    let block = MsfbParamIds::register(
        &mut store,
        "msfb",
        MsfbParams::random(3, compressed_channels(3), rng),
    );
    let weights = uniform_tensor(&shape, -1.0, 1.0, rng);
    let ctx = GateContext {
        mode: Mode::Train,
        estimator: Estimator::Soft,
        temperature: rng.random_range(0.5..1.5),
        noise: rng.random_range(0.2..0.8),
    };
    let build = move |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, input);
        let gv = gate.vars(g, s);
        let mv = block.vars(g, s);
        let (out, _) = sgpm_graph(g, x, &gv, &mv, &ctx)?;
        Ok(weighted_sum(g, out, &weights))
    };
    (store, Box::new(build))
}

fn msfb_problem(rng: &mut ChaCha8Rng) -> (ParamStore, Builder) {
    // three channels compress to a single bottleneck channel
    let shape = [3, 3, 3, 3];
    let mut store = ParamStore::new();
    let input = store.add("input", uniform_tensor(&shape, -1.0, 1.0, rng));
    let mut init = MsfbParams::random(3, compressed_channels(3), rng);
    for conv in init.convs_mut() {
        for b in conv.bias.data_mut() {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    let block = MsfbParamIds::register(&mut store, "msfb", init);
    let weights = uniform_tensor(&shape, -1.0, 1.0, rng);
    let build = move |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, input);
        let mv = block.vars(g, s);
        let out = msfb_graph(g, x, &mv);
        Ok(weighted_sum(g, out, &weights))
    };
    (store, Box::new(build))
}

fn random_label(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut y = uniform_tensor(shape, 0.0, 1.0, rng).map(|v| if v < 0.3 { 1.0 } else { 0.0 });
    y.data_mut()[0] = 1.0;
    y
}

fn loss_problem(seed: u64, rng: &mut ChaCha8Rng) -> (ParamStore, Builder) {
    let shape = [3, 3, 3];
    let mut store = ParamStore::new();
    let p = store.add("p", uniform_tensor(&shape, 0.05, 0.95, rng));
    let y = random_label(&shape, rng);
    let cfg = if seed % 2 == 0 {
        LossConfig::default()
    } else {
        LossConfig {
            focal_gamma: rng.random_range(0.0..3.0),
            focal_alpha: rng.random_range(0.1..0.9),
            ..LossConfig::default()
        }
    };
    let build = move |g: &mut Graph, s: &ParamStore| {
        let pv = g.param(s, p);
        Ok(zoom_loss_graph(g, pv, &y, &cfg)?.0)
    };
    (store, Box::new(build))
}

fn end_to_end_problem(seed: u64, rng: &mut ChaCha8Rng) -> Result<(ParamStore, Builder)> {
    let config = ModelConfig {
        volume_shape: [8, 8, 8],
        encoder: EncoderConfig {
            patch_size: 4,
            embed_channels: 8,
            num_blocks: 2,
            sgpm_layers: Some(LayerRange::new(1, 2)?),
            sgpm_position: SgpmPosition::ALL[(seed % 3) as usize],
            heads: 2,
            mlp_ratio: 2,
            compressed_channels: None,
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig {
            layers: 1,
            ..DecoderConfig::default()
        },
    };
    let (model, store) = SegmentationModel::new(config, seed)?;
    let image = uniform_tensor(&[8, 8, 8], -1.0, 1.0, rng);
    let label = random_label(&[8, 8, 8], rng);
    let prompts = PromptSet::new(
        vec![
            PromptPoint { x: rng.random_range(0..8), y: rng.random_range(0..8), z: rng.random_range(0..8), label: PointLabel::Foreground },
            PromptPoint { x: rng.random_range(0..8), y: rng.random_range(0..8), z: rng.random_range(0..8), label: PointLabel::Background },
        ],
        "gradcheck",
    );
    let opts = ForwardOptions::train(Estimator::Soft, 1.0);
    let build = move |g: &mut Graph, s: &ParamStore| {
        let mut noise = named_rng(seed, "gradcheck.noise");
        let out = model.forward(g, s, &image, &prompts, &opts, Some(&mut noise))?;
        Ok(zoom_loss_graph(g, out.probs, &label, &LossConfig::default())?.0)
    };
    Ok((store, Box::new(build)))
}

fn loss_value(build: &Builder, store: &ParamStore) -> Result<f64> {
    let mut g = Graph::new();
    let v = build(&mut g, store)?;
    Ok(g.value(v).item())
}

/// Runs the check with the analytic gradient multiplied by
/// `analytic_scale`; any value other than 1 should make it fail.
pub fn gradcheck_scaled(component: Component, seed: u64, analytic_scale: f64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = named_rng(seed, &format!("gradcheck.{component}"));
    let (mut store, build) = match component {
        Component::Sgpm => sgpm_problem(&mut rng),
        Component::Msfb => msfb_problem(&mut rng),
        Component::Loss => loss_problem(seed, &mut rng),
        Component::EndToEnd => end_to_end_problem(seed, &mut rng)?,
    };
    let mut g = Graph::new();
    let root = build(&mut g, &store)?;
    let analytic: Vec<(ParamId, Tensor)> = g.backward(root).params(&g);

    let slots: Vec<(ParamId, usize)> = analytic
        .iter()
        .flat_map(|(id, t)| (0..t.len()).map(move |i| (*id, i)))
        .collect();
    let chosen: Vec<usize> = if slots.len() <= MAX_CHECKED {
        (0..slots.len()).collect()
    } else {
        let mut v = sample_indices(&mut rng, slots.len(), MAX_CHECKED).into_vec();
        v.sort_unstable();
        v
    };
    let grad_of = |id: ParamId, i: usize| {
        analytic
            .iter()
            .find(|(p, _)| *p == id)
            .map_or(0.0, |(_, t)| t.data()[i])
    };

    let (mut max_rel, mut worst) = (0.0f64, String::from("-"));
    for &k in &chosen {
        let (id, i) = slots[k];
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + STEP;
        let up = loss_value(&build, &store)?;
        store.get_mut(id).data_mut()[i] = orig - STEP;
        let down = loss_value(&build, &store)?;
        store.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic_scale * grad_of(id, i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
        if !(rel <= max_rel) {
            max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
            worst = format!("{}[{i}]", store.name(id));
        }
    }
    Ok(GradcheckReport {
        component,
        seed,
        checked: chosen.len(),
        total_scalars: slots.len(),
        max_rel_error: max_rel,
        worst,
        passed: max_rel < REL_TOLERANCE,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn gradcheck(component: Component, seed: u64) -> Result<GradcheckReport> {
    gradcheck_scaled(component, seed, 1.0)
}
