use std::f64::consts::PI;

use super::config::ModelConfig;
use super::sample::{PointLabel, PromptSet};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::Linear;
use crate::params::{named_rng, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Sinusoidal encoding of normalised coordinates: for each axis and each
/// frequency `2^k π`, a sine then a cosine, axes in `(x, y, z)` order.
pub fn positional_encoding(coords: [f64; 3], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * frequencies);
    for u in coords {
        for k in 0..frequencies {
            let a = f64::from(1u32 << k) * PI * u;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Normalised coordinate `x / H` (etc.) of a voxel index.
pub fn normalise(point: [usize; 3], volume: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| point[i] as f64 / volume[i] as f64)
}

/// Encoding of every token centre on the feature grid, row-major.
pub fn grid_encoding(config: &ModelConfig) -> Tensor {
    let grid = config.grid();
    let p = config.encoder.patch_size as f64;
    let vol = config.volume_shape.map(|v| v as f64);
    let k = config.decoder.pe_frequencies;
    let mut data = Vec::with_capacity(grid.iter().product::<usize>() * 6 * k);
    for i in 0..grid[0] {
        for j in 0..grid[1] {
            for l in 0..grid[2] {
                let centre = [i, j, l]
                    .iter()
                    .zip(vol)
                    .map(|(&g, v)| (g as f64 * p + p / 2.0) / v)
                    .collect::<Vec<_>>();
                data.extend(positional_encoding([centre[0], centre[1], centre[2]], k));
            }
        }
    }
    Tensor::from_parts(vec![grid.iter().product(), 6 * k], data)
}

/// Sparse point embeddings, the dense no-mask field, and the image-grid
/// positional embedding consumed by the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbeddings {
    /// One row per prompt point, `(n, C)`.
    pub sparse: Tensor,
    /// Learned constant field over the feature grid, `(N, C)`.
    pub dense: Tensor,
    /// Positional part of each sparse row before projection, `(n, 6K)`.
    pub positional: Tensor,
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    frequencies: usize,
    point_proj: Linear,
    label_embed: ParamId,
    label_proj: ParamId,
    no_mask: ParamId,
    image_pe: Linear,
    grid_pe: Tensor,
    volume: [usize; 3],
}

pub(crate) struct PromptVars {
    pub sparse: Var,
    pub dense: Var,
    pub image_pe: Var,
}

impl PromptEncoder {
    pub fn register(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = named_rng(seed, "prompt");
        let d = &config.decoder;
        let c = config.encoder.embed_channels;
        let pe = 6 * d.pe_frequencies;
        Self {
            frequencies: d.pe_frequencies,
            point_proj: Linear::register(store, "prompt.point_proj", pe, c, &mut rng),
            label_embed: store.add_uniform("prompt.label_embed", &[2, d.label_dim], 1, &mut rng),
            label_proj: store.add_uniform(
                "prompt.label_proj",
                &[d.label_dim, c],
                d.label_dim,
                &mut rng,
            ),
            no_mask: store.add_uniform("prompt.no_mask", &[c], c, &mut rng),
            image_pe: Linear::register(store, "prompt.image_pe", pe, c, &mut rng),
            grid_pe: grid_encoding(config),
            volume: config.volume_shape,
        }
    }

    pub fn point_encodings(&self, prompts: &PromptSet) -> Tensor {
        let rows = prompts.points.len();
        let data = prompts
            .points
            .iter()
            .flat_map(|p| positional_encoding(normalise([p.x, p.y, p.z], self.volume), self.frequencies))
            .collect();
        Tensor::from_parts(vec![rows, 6 * self.frequencies], data)
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prompts: &PromptSet,
    ) -> Result<PromptVars> {
        prompts.validate(self.volume)?;
        let pe = g.constant(self.point_encodings(prompts));
        let mut one_hot = Tensor::zeros(&[prompts.points.len(), 2]);
        for (i, p) in prompts.points.iter().enumerate() {
            let col = usize::from(p.label == PointLabel::Foreground);
            one_hot.data_mut()[2 * i + col] = 1.0;
        }
        let one_hot = g.constant(one_hot);
        let positional = self.point_proj.forward(g, store, pe);
        let table = g.param(store, self.label_embed);
        let labels = g.matmul(one_hot, table);
        let proj = g.param(store, self.label_proj);
        let labels = g.matmul(labels, proj);
        let sparse = g.add(positional, labels);

        let grid_pe = g.constant(self.grid_pe.clone());
        let image_pe = self.image_pe.forward(g, store, grid_pe);
        let tokens = self.grid_pe.shape()[0];
        let width = store.get(self.no_mask).len();
        let zeros = g.constant(Tensor::zeros(&[tokens, width]));
        let no_mask = g.param(store, self.no_mask);
        let dense = g.add_row(zeros, no_mask);
        Ok(PromptVars {
            sparse,
            dense,
            image_pe,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_of_centre() {
        let pe = positional_encoding([0.5, 0.5, 0.5], 2);
        // sin(π/2), cos(π/2), sin(π), cos(π) per axis
        for axis in pe.chunks(4) {
            assert!((axis[0] - 1.0).abs() < 1e-15);
            assert!(axis[1].abs() < 1e-15);
            assert!(axis[2].abs() < 1e-15);
            assert!((axis[3] + 1.0).abs() < 1e-15);
        }
        assert_eq!(normalise([16, 16, 16], [32, 32, 32]), [0.5; 3]);
    }
}
