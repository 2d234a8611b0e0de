use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, SgpmPosition};
use super::{ForwardOptions, GateTrace};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::Side;
use crate::msfb::msfb_flops;
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::params::{named_rng, ParamId, ParamStore};
use crate::sgpm::{GateContext, Mode, SgpmUnit, EVAL_NOISE};
use crate::tensor::Tensor;

/// Splits an `(H, W, D)` volume into non-overlapping `p³` patches, one row per
/// patch in row-major grid order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [h, w, d]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::InvalidInput(format!("image must be 3D, got {:?}", image.shape())))?;
    if [h, w, d].iter().any(|&v| v % patch != 0) {
        return Err(Error::InvalidInput(format!(
            "volume {:?} is not divisible by patch size {patch}; pad it first",
            [h, w, d]
        )));
    }
    let (gh, gw, gd) = (h / patch, w / patch, d / patch);
    let p3 = patch * patch * patch;
    let mut out = Vec::with_capacity(h * w * d);
    for i in 0..gh {
        for j in 0..gw {
            for l in 0..gd {
                for a in 0..patch {
                    for b in 0..patch {
                        let row = ((i * patch + a) * w + j * patch + b) * d + l * patch;
                        out.extend_from_slice(&image.data()[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw * gd, p3], out)
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.norm1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, h);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}

/// A gated unit and the block slot it occupies.
#[derive(Debug, Clone)]
pub struct PlacedUnit {
    pub layer: usize,
    pub side: Side,
    pub unit: SgpmUnit,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch: usize,
    feature_shape: [usize; 4],
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<EncoderBlock>,
    units: Vec<PlacedUnit>,
    neck: LayerNorm,
}

impl ImageEncoder {
    pub fn register(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Self {
        let enc = &config.encoder;
        let c = enc.embed_channels;
        let patch = enc.patch_size;
        let feature_shape = config.feature_shape();
        let tokens = feature_shape[0] * feature_shape[1] * feature_shape[2];
        let mut rng = named_rng(seed, "encoder.stem");
        let p3 = patch * patch * patch;
        let patch_embed = Linear::register(store, "encoder.patch_embed", p3, c, &mut rng);
        let pos = (0..tokens * c).map(|_| rng.random_range(-0.02..0.02)).collect();
        let pos_embed = store.add("encoder.pos_embed", Tensor::from_parts(vec![tokens, c], pos));
        let mut blocks = Vec::with_capacity(enc.num_blocks);
        let mut units = Vec::new();
        for layer in 1..=enc.num_blocks {
            let name = format!("encoder.block{layer}");
            let mut rng = named_rng(seed, &name);
            blocks.push(EncoderBlock {
                norm1: LayerNorm::register(store, &format!("{name}.norm1"), c),
                attn: Attention::register(store, &format!("{name}.attn"), c, enc.heads, &mut rng),
                norm2: LayerNorm::register(store, &format!("{name}.norm2"), c),
                mlp: Mlp::register(
                    store,
                    &format!("{name}.mlp"),
                    c,
                    c * enc.mlp_ratio,
                    c,
                    &mut rng,
                ),
            });
            if !enc.sgpm_layers.is_some_and(|r| r.contains(layer)) {
                continue;
            }
            let sides: &[Side] = match enc.sgpm_position {
                SgpmPosition::Begin => &[Side::Begin],
                SgpmPosition::End => &[Side::End],
                SgpmPosition::Both => &[Side::Begin, Side::End],
            };
            for &side in sides {
                let tag = match side {
                    Side::Begin => "begin",
                    Side::End => "end",
                };
                let prefix = format!("encoder.sgpm{layer}_{tag}");
                let mut rng = named_rng(seed, &prefix);
                let unit =
                    SgpmUnit::register(
                        store,
                        &prefix,
                        feature_shape,
                        enc.compressed(),
                        enc.gate_bias_init,
                        &mut rng,
                    );
                units.push(PlacedUnit { layer, side, unit });
            }
        }
        Self {
            patch,
            feature_shape,
            patch_embed,
            pos_embed,
            blocks,
            units,
            neck: LayerNorm::register(store, "encoder.neck", c),
        }
    }

    pub fn units(&self) -> &[PlacedUnit] {
        &self.units
    }

    pub fn feature_shape(&self) -> [usize; 4] {
        self.feature_shape
    }

    fn apply_unit(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        placed: &PlacedUnit,
        opts: &ForwardOptions,
        noise: &mut Option<&mut ChaCha8Rng>,
        traces: &mut Vec<GateTrace>,
    ) -> Result<Var> {
        let eps = match (opts.mode, noise.as_deref_mut()) {
            (Mode::Eval, _) => EVAL_NOISE,
            (Mode::Train, Some(rng)) => rng.sample(rand::distr::Open01),
            (Mode::Train, None) => {
                return Err(Error::InvalidInput(
                    "training-mode forward needs a noise stream".into(),
                ))
            }
        };
        let ctx = GateContext {
            mode: opts.mode,
            estimator: opts.estimator,
            temperature: opts.temperature,
            noise: eps,
        };
        let [h, w, d, c] = self.feature_shape;
        let grid = g.reshape(x, &[h, w, d, c]);
        let (out, decision) = placed.unit.forward(g, store, grid, &ctx)?;
        traces.push(GateTrace {
            layer: placed.layer,
            side: placed.side,
            decision,
            msfb_flops: msfb_flops(self.feature_shape, placed.unit.compressed),
        });
        if out == grid {
            // closed gate in eval: hand back the untouched token matrix
            return Ok(x);
        }
        Ok(g.reshape(out, &[h * w * d, c]))
    }

    /// Returns the `(N, C)` token features and one trace per traversed unit,
    /// ordered bottom-up with begin before end.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
        opts: &ForwardOptions,
        mut noise: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<GateTrace>)> {
        let patches = g.constant(patchify(image, self.patch)?);
        let x = self.patch_embed.forward(g, store, patches);
        let pos = g.param(store, self.pos_embed);
        let mut x = g.add(x, pos);
        let mut traces = Vec::with_capacity(self.units.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = i + 1;
            for placed in self.units.iter().filter(|u| u.layer == layer && u.side == Side::Begin) {
                x = self.apply_unit(g, store, x, placed, opts, &mut noise, &mut traces)?;
            }
            x = block.forward(g, store, x);
            for placed in self.units.iter().filter(|u| u.layer == layer && u.side == Side::End) {
                x = self.apply_unit(g, store, x, placed, opts, &mut noise, &mut traces)?;
            }
        }
        Ok((self.neck.forward(g, store, x), traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_layout() {
        let image = Tensor::new(vec![4, 2, 2], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&image, 2).unwrap();
        assert_eq!(p.shape(), &[2, 8]);
        assert_eq!(&p.data()[..8], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(&p.data()[8..], &[8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
        assert!(patchify(&image, 4).is_err());
    }
}
