use super::config::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::nn::{Attention, LayerNorm, Mlp};
use crate::params::{named_rng, ParamId, ParamStore};

/// Prompt ↔ image attention layer: token self-attention, tokens attending
/// to the image, a token MLP, then the image attending back to the tokens.
#[derive(Debug, Clone)]
struct TwoWayLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    image_to_token: Attention,
    norm4: LayerNorm,
}

#[derive(Debug, Clone)]
struct UpStage {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    mask_token: ParamId,
    layers: Vec<TwoWayLayer>,
    stages: Vec<UpStage>,
    hyper: Mlp,
    mask_bias: ParamId,
    grid: [usize; 3],
    volume: [usize; 3],
    channels: usize,
}

/// Channel widths along the ×2 upsampling path, input width first.
pub fn upsample_channels(embed: usize, patch: usize) -> Vec<usize> {
    let stages = patch.trailing_zeros() as usize;
    let mut widths = vec![embed];
    for _ in 0..stages {
        let last = *widths.last().unwrap();
        widths.push((last / 2).max(4).min(last));
    }
    widths
}

impl MaskDecoder {
    pub fn register(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Self {
        let d = &config.decoder;
        let c = config.encoder.embed_channels;
        let mut rng = named_rng(seed, "decoder");
        let mask_token = store.add_uniform("decoder.mask_token", &[1, c], c, &mut rng);
        let layers = (0..d.layers)
            .map(|i| {
                let n = format!("decoder.layer{i}");
                let mut rng = named_rng(seed, &n);
                TwoWayLayer {
                    self_attn: Attention::register(store, &format!("{n}.self_attn"), c, d.heads, &mut rng),
                    norm1: LayerNorm::register(store, &format!("{n}.norm1"), c),
                    token_to_image: Attention::register(store, &format!("{n}.t2i"), c, d.heads, &mut rng),
                    norm2: LayerNorm::register(store, &format!("{n}.norm2"), c),
                    mlp: Mlp::register(store, &format!("{n}.mlp"), c, c * d.mlp_ratio, c, &mut rng),
                    norm3: LayerNorm::register(store, &format!("{n}.norm3"), c),
                    image_to_token: Attention::register(store, &format!("{n}.i2t"), c, d.heads, &mut rng),
                    norm4: LayerNorm::register(store, &format!("{n}.norm4"), c),
                }
            })
            .collect();
        let widths = upsample_channels(c, config.encoder.patch_size);
        let mut rng = named_rng(seed, "decoder.upsample");
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| UpStage {
                weight: store.add_uniform(
                    format!("decoder.up{i}.weight"),
                    &[2, 2, 2, w[0], w[1]],
                    w[0],
                    &mut rng,
                ),
                bias: store.add_full(format!("decoder.up{i}.bias"), &[w[1]], 0.0),
            })
            .collect();
        let out_width = *widths.last().unwrap();
        let mut rng = named_rng(seed, "decoder.head");
        let hyper = Mlp::register(store, "decoder.hyper", c, c, out_width, &mut rng);
        let mask_bias = store.add_full("decoder.mask_bias", &[1], d.mask_bias_init);
        Self {
            mask_token,
            layers,
            stages,
            hyper,
            mask_bias,
            grid: config.grid(),
            volume: config.volume_shape,
            channels: c,
        }
    }

    /// Parameters of the final projection producing per-voxel logits; zeroing
    /// them yields a probability of ½ everywhere.
    pub fn final_projection(&self) -> [ParamId; 3] {
        [self.hyper.fc2.weight, self.hyper.fc2.bias, self.mask_bias]
    }

    /// Mask probabilities of shape `(H, W, D)` from `(N, C)` image features.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        sparse: Var,
        dense: Var,
        image_pe: Var,
    ) -> Var {
        let mut src = g.add(features, dense);
        let mask_token = g.param(store, self.mask_token);
        let mut tokens = g.concat(&[mask_token, sparse]);
        for layer in &self.layers {
            let a = layer.self_attn.forward(g, store, tokens, tokens, tokens);
            let t = g.add(tokens, a);
            tokens = layer.norm1.forward(g, store, t);

            let keys = g.add(src, image_pe);
            let a = layer.token_to_image.forward(g, store, tokens, keys, src);
            let t = g.add(tokens, a);
            tokens = layer.norm2.forward(g, store, t);

            let m = layer.mlp.forward(g, store, tokens);
            let t = g.add(tokens, m);
            tokens = layer.norm3.forward(g, store, t);

            let queries = g.add(src, image_pe);
            let a = layer.image_to_token.forward(g, store, queries, tokens, tokens);
            let s = g.add(src, a);
            src = layer.norm4.forward(g, store, s);
        }

        let [h, w, d] = self.grid;
        let mut up = g.reshape(src, &[h, w, d, self.channels]);
        for stage in &self.stages {
            let wt = g.param(store, stage.weight);
            let b = g.param(store, stage.bias);
            up = g.upsample2(up, wt, b);
            up = g.gelu(up);
        }
        let width = *g.value(up).shape().last().unwrap();
        let voxels: usize = self.volume.iter().product();
        let flat = g.reshape(up, &[voxels, width]);

        let mask_out = g.rows(tokens, 0, 1);
        let weights = self.hyper.forward(g, store, mask_out);
        let weights = g.reshape(weights, &[width, 1]);
        let logits = g.matmul(flat, weights);
        let bias = g.param(store, self.mask_bias);
        let logits = g.add_row(logits, bias);
        let probs = g.sigmoid(logits);
        g.reshape(probs, &self.volume)
    }
}
