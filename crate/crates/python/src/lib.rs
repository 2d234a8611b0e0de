//! Python bindings. Arrays cross the boundary as flat lists in row-major
//! order plus an explicit shape, so no numpy dependency is required.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sgpsam::backbone::{ModelConfig, PointLabel, PromptPoint, PromptSet, SegmentationModel};
use sgpsam::feature::FeatureMap4D;
use sgpsam::harness::{self, Component};
use sgpsam::msfb::{self, MsfbParams};
use sgpsam::params::ParamStore;
use sgpsam::sgpm::{self, Estimator, GateContext, GateDecision, GateParams, Mode};
use sgpsam::synthdata::{self, GenSpec};
use sgpsam::tensor::Tensor;
use sgpsam::zoomloss::{self, LossConfig, Objective, SizeWeighting};
use sgpsam::{metrics, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) | Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py)
}

fn feature(data: Vec<f64>, shape: [usize; 4]) -> PyResult<FeatureMap4D> {
    FeatureMap4D::new(shape, data).map_err(to_py)
}

fn decision_dict<'py>(py: Python<'py>, d: &GateDecision) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("keys", d.keys.to_vec())?;
    out.set_item("weights", d.weights.to_vec())?;
    out.set_item("logit", d.logit)?;
    out.set_item("soft_gate", d.soft_gate)?;
    out.set_item("hard_gate", d.hard_gate)?;
    out.set_item("noise", d.noise)?;
    Ok(out)
}

fn loss_config(objective: &str, alpha: f64, gamma: f64, lambda: f64, size_weighting: &str) -> PyResult<LossConfig> {
    let objective = match objective {
        "zoom" => Objective::Zoom,
        "dice_bce" => Objective::DiceBce,
        o => return Err(PyValueError::new_err(format!("unknown objective {o:?}"))),
    };
    let size_weighting = match size_weighting {
        "off" => SizeWeighting::Off,
        "inverse_fraction" => SizeWeighting::InverseFraction,
        s => return Err(PyValueError::new_err(format!("unknown size weighting {s:?}"))),
    };
    let cfg = LossConfig {
        objective,
        focal_alpha: alpha,
        focal_gamma: gamma,
        combine_lambda: lambda,
        size_weighting,
        ..LossConfig::default()
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Per-axis means `(f_H, f_W, f_D, f_C)` of a 4D feature map.
#[pyfunction]
fn axis_summaries(data: Vec<f64>, shape: [usize; 4]) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let s = sgpm::axis_summaries(&feature(data, shape)?);
    Ok((s.h, s.w, s.d, s.c))
}

/// `(soft_gate, hard_gate)` of the relaxed Bernoulli gate. In eval mode the
/// noise argument is ignored.
#[pyfunction]
#[pyo3(signature = (logit, temperature=1.0, noise=0.5, train=false))]
fn gumbel_sigmoid(logit: f64, temperature: f64, noise: f64, train: bool) -> PyResult<(f64, bool)> {
    let mode = if train { Mode::Train } else { Mode::Eval };
    sgpm::gumbel_sigmoid(logit, temperature, noise, mode).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (p, y, shape, alpha=0.75, gamma=2.0))]
fn focal_term(p: Vec<f64>, y: Vec<f64>, shape: Vec<usize>, alpha: f64, gamma: f64) -> PyResult<f64> {
    zoomloss::focal_term(&tensor(p, shape.clone())?, &tensor(y, shape)?, alpha, gamma).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (p, y, shape, smooth=1e-5))]
fn dice_term(p: Vec<f64>, y: Vec<f64>, shape: Vec<usize>, smooth: f64) -> PyResult<f64> {
    zoomloss::dice_term(&tensor(p, shape.clone())?, &tensor(y, shape)?, smooth).map_err(to_py)
}

/// Full objective; returns a dict with the total and its components.
#[pyfunction]
#[pyo3(signature = (p, y, shape, objective="zoom", alpha=0.75, gamma=2.0, combine_lambda=1.0, size_weighting="inverse_fraction"))]
#[allow(clippy::too_many_arguments)]
fn zoom_loss<'py>(
    py: Python<'py>,
    p: Vec<f64>,
    y: Vec<f64>,
    shape: Vec<usize>,
    objective: &str,
    alpha: f64,
    gamma: f64,
    combine_lambda: f64,
    size_weighting: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = loss_config(objective, alpha, gamma, combine_lambda, size_weighting)?;
    let r = zoomloss::zoom_loss(&tensor(p, shape.clone())?, &tensor(y, shape)?, &cfg).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("total", r.total)?;
    out.set_item("dice_term", r.dice_term)?;
    out.set_item("focal_term", r.focal_term)?;
    out.set_item("lesion_fraction", r.lesion_fraction)?;
    out.set_item("size_weight", r.size_weight)?;
    Ok(out)
}

/// `(iou, dice)` of `pred > threshold` against a binary target.
#[pyfunction]
#[pyo3(signature = (pred, target, shape, threshold=0.5))]
fn binary_iou_dice(pred: Vec<f64>, target: Vec<f64>, shape: Vec<usize>, threshold: f64) -> PyResult<(f64, f64)> {
    metrics::binary_iou_dice(&tensor(pred, shape.clone())?, &tensor(target, shape)?, threshold).map_err(to_py)
}

/// Multiply-adds of one fusion-block call on a map of this shape.
#[pyfunction]
fn msfb_flops(shape: [usize; 4], compressed: usize) -> u64 {
    msfb::msfb_flops(shape, compressed)
}

/// Multi-scale fusion block with seeded random weights.
#[pyclass(name = "Msfb", module = "sgpsam_py")]
struct PyMsfb {
    params: MsfbParams,
}

#[pymethods]
impl PyMsfb {
    #[new]
    #[pyo3(signature = (channels, compressed=None, seed=0))]
    fn new(channels: usize, compressed: Option<usize>, seed: u64) -> PyResult<Self> {
        let compressed = compressed.unwrap_or_else(|| msfb::compressed_channels(channels));
        let params = MsfbParams::random(channels, compressed, &mut ChaCha8Rng::seed_from_u64(seed));
        params.validate().map_err(to_py)?;
        Ok(Self { params })
    }

    /// Identity-initialised block: delta kernels, zero biases.
    #[staticmethod]
    fn identity(channels: usize) -> Self {
        Self {
            params: MsfbParams::identity(channels),
        }
    }

    #[getter]
    fn channels(&self) -> usize {
        self.params.channels()
    }

    #[getter]
    fn compressed(&self) -> usize {
        self.params.compressed()
    }

    fn forward(&self, data: Vec<f64>, shape: [usize; 4]) -> PyResult<Vec<f64>> {
        let out = msfb::msfb_forward(&feature(data, shape)?, &self.params).map_err(to_py)?;
        Ok(out.into_tensor().into_data())
    }
}

/// Self-gated prompting unit: gate plus fusion block for one feature shape.
#[pyclass(name = "Sgpm", module = "sgpsam_py")]
struct PySgpm {
    gate: GateParams,
    block: MsfbParams,
    shape: [usize; 4],
}

#[pymethods]
impl PySgpm {
    #[new]
    #[pyo3(signature = (shape, temperature=1.0, seed=0))]
    fn new(shape: [usize; 4], temperature: f64, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gate = GateParams::random(shape, temperature, &mut rng);
        gate.validate().map_err(to_py)?;
        let block = MsfbParams::random(shape[3], msfb::compressed_channels(shape[3]), &mut rng);
        Ok(Self { gate, block, shape })
    }

    #[getter]
    fn shape(&self) -> [usize; 4] {
        self.shape
    }

    /// Gated output and the gate decision. `train=True` samples with the
    /// supplied uniform `noise`; eval mode uses the hard gate.
    #[pyo3(signature = (data, train=false, noise=0.5, estimator="soft"))]
    fn forward<'py>(
        &self,
        py: Python<'py>,
        data: Vec<f64>,
        train: bool,
        noise: f64,
        estimator: &str,
    ) -> PyResult<(Vec<f64>, Bound<'py, PyDict>)> {
        let estimator = match estimator {
            "soft" => Estimator::Soft,
            "st" => Estimator::StraightThrough,
            e => return Err(PyValueError::new_err(format!("unknown estimator {e:?}"))),
        };
        let ctx = GateContext {
            mode: if train { Mode::Train } else { Mode::Eval },
            estimator,
            temperature: self.gate.temperature,
            noise,
        };
        let f = feature(data, self.shape)?;
        let (out, d) = sgpm::sgpm_forward(&f, &self.gate, &self.block, &ctx).map_err(to_py)?;
        Ok((out.into_tensor().into_data(), decision_dict(py, &d)?))
    }
}

/// Promptable segmentation model (encoder with optional gated units,
/// prompt encoder, mask decoder).
#[pyclass(name = "Model", module = "sgpsam_py")]
struct PyModel {
    model: SegmentationModel,
    store: ParamStore,
}

#[pymethods]
impl PyModel {
    /// `config` is a TOML fragment of model settings; empty means defaults.
    #[new]
    #[pyo3(signature = (config="", seed=0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = toml::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let (model, store) = SegmentationModel::new(cfg, seed).map_err(to_py)?;
        Ok(Self { model, store })
    }

    /// Loads the trained weights of a run directory.
    #[staticmethod]
    fn load(run_dir: PathBuf) -> PyResult<Self> {
        let paths = harness::RunPaths::new(&run_dir);
        let (saved, cfg) = sgpsam::checkpoint::load(&paths.checkpoint_bin(), &paths.checkpoint_index()).map_err(to_py)?;
        let run: harness::RunConfig =
            serde_json::from_value(cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let (model, mut store) = SegmentationModel::new(run.model, run.seed).map_err(to_py)?;
        store.load_from(&saved).map_err(to_py)?;
        Ok(Self { model, store })
    }

    #[getter]
    fn volume_shape(&self) -> [usize; 3] {
        self.model.config().volume_shape
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    #[getter]
    fn gate_count(&self) -> usize {
        self.model.config().encoder.gate_count()
    }

    /// Foreground probabilities (flat) and one gate decision per unit.
    /// Prompts are `(x, y, z, label)` with label 1 = foreground.
    #[pyo3(signature = (image, prompts, temperature=1.0))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        image: Vec<f64>,
        prompts: Vec<(usize, usize, usize, u8)>,
        temperature: f64,
    ) -> PyResult<(Vec<f64>, Vec<Bound<'py, PyDict>>)> {
        let shape = self.volume_shape().to_vec();
        let points = prompts
            .into_iter()
            .map(|(x, y, z, l)| PromptPoint {
                x,
                y,
                z,
                label: if l == 1 { PointLabel::Foreground } else { PointLabel::Background },
            })
            .collect();
        let set = PromptSet::new(points, "python");
        let (probs, traces) = self
            .model
            .predict(&self.store, &tensor(image, shape)?, &set, temperature)
            .map_err(to_py)?;
        let gates = traces
            .iter()
            .map(|t| {
                let d = decision_dict(py, &t.decision)?;
                d.set_item("layer", t.layer)?;
                d.set_item("side", match t.side {
                    metrics::Side::Begin => "begin",
                    metrics::Side::End => "end",
                })?;
                d.set_item("msfb_flops", t.msfb_flops)?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok((probs.into_data(), gates))
    }
}

/// One synthetic volume: `(image, label, shape, prompts)` with flat data.
#[pyfunction]
#[pyo3(signature = (index=0, seed=42, size=32, contrast=None))]
#[allow(clippy::type_complexity)]
fn generate_sample(
    index: usize,
    seed: u64,
    size: usize,
    contrast: Option<f64>,
) -> PyResult<(Vec<f64>, Vec<f64>, [usize; 3], Vec<(usize, usize, usize, u8)>)> {
    let mut spec = GenSpec {
        seed,
        volume_shape: [size; 3],
        ..GenSpec::default()
    };
    if let Some(c) = contrast {
        spec.intensity_contrast = c;
    }
    spec.validate().map_err(to_py)?;
    let s = synthdata::generate_sample(&spec, index).map_err(to_py)?;
    let p = synthdata::sample_prompts(&s.label, spec.prompts.n_fg, spec.prompts.n_bg, spec.prompts.seed, &s.sample_id)
        .map_err(to_py)?;
    let prompts = p.points.iter().map(|q| (q.x, q.y, q.z, u8::from(q.label))).collect();
    Ok((s.image.into_data(), s.label.into_data(), spec.volume_shape, prompts))
}

/// Finite-difference check of one component; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (component, seed=0))]
fn gradcheck<'py>(py: Python<'py>, component: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let c: Component = component.parse().map_err(to_py)?;
    let r = harness::gradcheck(c, seed).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("component", r.component.to_string())?;
    out.set_item("seed", r.seed)?;
    out.set_item("checked", r.checked)?;
    out.set_item("max_rel_error", r.max_rel_error)?;
    out.set_item("worst", r.worst)?;
    out.set_item("passed", r.passed)?;
    Ok(out)
}

#[pymodule]
fn sgpsam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(axis_summaries, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(focal_term, m)?)?;
    m.add_function(wrap_pyfunction!(dice_term, m)?)?;
    m.add_function(wrap_pyfunction!(zoom_loss, m)?)?;
    m.add_function(wrap_pyfunction!(binary_iou_dice, m)?)?;
    m.add_function(wrap_pyfunction!(msfb_flops, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyMsfb>()?;
    m.add_class::<PySgpm>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
