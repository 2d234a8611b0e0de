//! Promptable 3D segmentation backbone: a patch-token image encoder with
//! optional gated fusion units, a point-prompt encoder, and a two-way
//! attention mask decoder.

mod config;
mod decoder;
mod encoder;
mod prompt;
mod sample;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{parse_layers, DecoderConfig, EncoderConfig, LayerRange, ModelConfig, SgpmPosition};
pub use decoder::{upsample_channels, MaskDecoder};
pub use encoder::{patchify, ImageEncoder, PlacedUnit};
pub use prompt::{grid_encoding, normalise, positional_encoding, PromptEmbeddings, PromptEncoder};
pub use sample::{PointLabel, PromptPoint, PromptSet, VolumeSample};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{GateRecord, Side};
use crate::params::ParamStore;
use crate::sgpm::{Estimator, GateDecision, Mode};
use crate::tensor::Tensor;

/// Run-time switches for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub estimator: Estimator,
    pub temperature: f64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            estimator: Estimator::Soft,
            temperature: 1.0,
        }
    }

    pub fn train(estimator: Estimator, temperature: f64) -> Self {
        Self {
            mode: Mode::Train,
            estimator,
            temperature,
        }
    }
}

/// What one gated unit decided during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub layer: usize,
    pub side: Side,
    pub decision: GateDecision,
    pub msfb_flops: u64,
}

impl GateTrace {
    pub fn record(&self) -> GateRecord {
        GateRecord {
            layer: self.layer,
            side: self.side,
            logit: self.decision.logit,
            soft_gate: self.decision.soft_gate,
            hard_gate: self.decision.hard_gate,
            msfb_flops: self.msfb_flops,
        }
    }
}

/// Output of a differentiable forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Voxel-wise foreground probabilities, `(H, W, D)`.
    pub probs: Var,
    pub traces: Vec<GateTrace>,
}

#[derive(Debug, Clone)]
pub struct SegmentationModel {
    config: ModelConfig,
    encoder: ImageEncoder,
    prompt: PromptEncoder,
    decoder: MaskDecoder,
}

impl SegmentationModel {
    /// Builds the model and its freshly initialised parameters. Every
    /// parameter is drawn from a stream keyed by its module name, so shared
    /// modules initialise identically with or without gated units.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = ImageEncoder::register(&mut store, &config, seed);
        let prompt = PromptEncoder::register(&mut store, &config, seed);
        let decoder = MaskDecoder::register(&mut store, &config, seed);
        Ok((
            Self {
                config,
                encoder,
                prompt,
                decoder,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &MaskDecoder {
        &self.decoder
    }

    pub fn units(&self) -> &[PlacedUnit] {
        self.encoder.units()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.config.volume_shape {
            return Err(Error::ShapeMismatch {
                context: "input volume",
                expected: self.config.volume_shape.to_vec(),
                actual: image.shape().to_vec(),
            });
        }
        if let Some((index, value)) = image.first_non_finite() {
            return Err(Error::NonFinite { index, value });
        }
        Ok(())
    }

    /// Differentiable forward pass. Training mode draws one uniform sample
    /// per gated unit from `noise`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
        prompts: &PromptSet,
        opts: &ForwardOptions,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        self.check_image(image)?;
        let (features, traces) = self.encoder.forward(g, store, image, opts, noise)?;
        let p = self.prompt.forward(g, store, prompts)?;
        let probs = self
            .decoder
            .forward(g, store, features, p.sparse, p.dense, p.image_pe);
        Ok(ForwardOutput { probs, traces })
    }

    /// Deterministic inference: probabilities and the gate traces.
    pub fn predict(
        &self,
        store: &ParamStore,
        image: &Tensor,
        prompts: &PromptSet,
        temperature: f64,
    ) -> Result<(Tensor, Vec<GateTrace>)> {
        let mut g = Graph::new();
        let opts = ForwardOptions {
            temperature,
            ..ForwardOptions::eval()
        };
        let out = self.forward(&mut g, store, image, prompts, &opts, None)?;
        Ok((g.value(out.probs).clone(), out.traces))
    }

    /// Image features `(N, C)` from the encoder in eval mode.
    pub fn encode_image(&self, store: &ParamStore, image: &Tensor) -> Result<(Tensor, Vec<GateTrace>)> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let (f, traces) = self
            .encoder
            .forward(&mut g, store, image, &ForwardOptions::eval(), None)?;
        Ok((g.value(f).clone(), traces))
    }

    pub fn encode_prompts(&self, store: &ParamStore, prompts: &PromptSet) -> Result<PromptEmbeddings> {
        let mut g = Graph::new();
        let p = self.prompt.forward(&mut g, store, prompts)?;
        Ok(PromptEmbeddings {
            sparse: g.value(p.sparse).clone(),
            dense: g.value(p.dense).clone(),
            positional: self.prompt.point_encodings(prompts),
        })
    }

    /// Decodes precomputed image features against a prompt set.
    pub fn decode_mask(
        &self,
        store: &ParamStore,
        features: &Tensor,
        prompts: &PromptSet,
    ) -> Result<Tensor> {
        let [h, w, d, c] = self.config.feature_shape();
        if features.shape() != [h * w * d, c] {
            return Err(Error::ShapeMismatch {
                context: "image features",
                expected: vec![h * w * d, c],
                actual: features.shape().to_vec(),
            });
        }
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let p = self.prompt.forward(&mut g, store, prompts)?;
        let probs = self
            .decoder
            .forward(&mut g, store, f, p.sparse, p.dense, p.image_pe);
        Ok(g.value(probs).clone())
    }

    /// Overrides every gate's key bias; a large negative value pins all
    /// gates shut in eval mode.
    pub fn set_gate_bias(&self, store: &mut ParamStore, bias: f64) {
        for u in self.units() {
            u.unit.gate.set_key_bias(store, bias);
        }
    }

    pub fn close_all_gates(&self, store: &mut ParamStore) {
        self.set_gate_bias(store, -1e6);
    }
}
