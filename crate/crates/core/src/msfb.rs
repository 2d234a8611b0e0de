//! Multi-scale feature fusion block.
//!
//! Channels are compressed with a 1³ convolution, passed through parallel
//! 1³, 3³ and 5³ convolutions (zero "same" padding), averaged, re-expanded
//! with a 1³ convolution and rectified:
//!
//! `out = ReLU(expand((b1(c) + b3(c) + b5(c)) / 3))`, `c = compress(F)`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::feature::FeatureMap4D;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BRANCH_KERNELS: [usize; 3] = [1, 3, 5];

/// Default bottleneck width `max(1, C / 4)`.
pub fn compressed_channels(channels: usize) -> usize {
    (channels / 4).max(1)
}

/// A single convolution's kernel `(k, k, k, Cin, Cout)` and bias `(Cout)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3dParams {
    fn random<R: Rng>(k: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        let fan_in = k * k * k * cin;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = fan_in * cout;
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::from_parts(vec![k, k, k, cin, cout], data),
            bias: Tensor::zeros(&[cout]),
        }
    }

    /// Centred delta kernel mapping channel `i` to channel `i` (`cin == cout`).
    pub fn identity(k: usize, channels: usize) -> Self {
        let mut weight = Tensor::zeros(&[k, k, k, channels, channels]);
        let centre = ((k / 2) * k + k / 2) * k + k / 2;
        for c in 0..channels {
            weight.data_mut()[(centre * channels + c) * channels + c] = 1.0;
        }
        Self {
            weight,
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[4]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsfbParams {
    pub compress: Conv3dParams,
    pub branch1: Conv3dParams,
    pub branch3: Conv3dParams,
    pub branch5: Conv3dParams,
    pub expand: Conv3dParams,
}

impl MsfbParams {
    /// Small-uniform kernels, zero biases.
    pub fn random<R: Rng>(channels: usize, compressed: usize, rng: &mut R) -> Self {
        Self {
            compress: Conv3dParams::random(1, channels, compressed, rng),
            branch1: Conv3dParams::random(1, compressed, compressed, rng),
            branch3: Conv3dParams::random(3, compressed, compressed, rng),
            branch5: Conv3dParams::random(5, compressed, compressed, rng),
            expand: Conv3dParams::random(1, compressed, channels, rng),
        }
    }

    /// Every convolution a delta kernel with `C' = C`; the block reduces to ReLU.
    pub fn identity(channels: usize) -> Self {
        Self {
            compress: Conv3dParams::identity(1, channels),
            branch1: Conv3dParams::identity(1, channels),
            branch3: Conv3dParams::identity(3, channels),
            branch5: Conv3dParams::identity(5, channels),
            expand: Conv3dParams::identity(1, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.compress.in_channels()
    }

    pub fn compressed(&self) -> usize {
        self.compress.out_channels()
    }

    /// `C / C'`.
    pub fn compression_ratio(&self) -> f64 {
        self.channels() as f64 / self.compressed() as f64
    }

    pub fn convs(&self) -> [&Conv3dParams; 5] {
        [
            &self.compress,
            &self.branch1,
            &self.branch3,
            &self.branch5,
            &self.expand,
        ]
    }

    pub fn convs_mut(&mut self) -> [&mut Conv3dParams; 5] {
        [
            &mut self.compress,
            &mut self.branch1,
            &mut self.branch3,
            &mut self.branch5,
            &mut self.expand,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (c, cp) = (self.channels(), self.compressed());
        if cp == 0 || cp > c {
            return Err(Error::Config(format!(
                "compressed width {cp} must lie in 1..={c}"
            )));
        }
        let expected = [(1, c, cp), (1, cp, cp), (3, cp, cp), (5, cp, cp), (1, cp, c)];
        for (conv, (k, cin, cout)) in self.convs().into_iter().zip(expected) {
            if conv.weight.shape() != [k, k, k, cin, cout] || conv.bias.shape() != [cout] {
                return Err(Error::Config(format!(
                    "MSFB kernel shape {:?} does not match expected ({k},{k},{k},{cin},{cout})",
                    conv.weight.shape()
                )));
            }
            for t in [&conv.weight, &conv.bias] {
                if let Some((index, value)) = t.first_non_finite() {
                    return Err(Error::NonFinite { index, value });
                }
            }
        }
        Ok(())
    }

    pub fn to_vars(&self, g: &mut Graph, trainable: bool) -> MsfbVars {
        let mut conv = |c: &Conv3dParams| {
            let leaf = |g: &mut Graph, t: &Tensor| {
                if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            };
            ConvVars {
                weight: leaf(g, &c.weight),
                bias: leaf(g, &c.bias),
            }
        };
        MsfbVars {
            compress: conv(&self.compress),
            branch1: conv(&self.branch1),
            branch3: conv(&self.branch3),
            branch5: conv(&self.branch5),
            expand: conv(&self.expand),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MsfbVars {
    pub compress: ConvVars,
    pub branch1: ConvVars,
    pub branch3: ConvVars,
    pub branch5: ConvVars,
    pub expand: ConvVars,
}

impl MsfbVars {
    pub fn all(&self) -> Vec<Var> {
        [
            self.compress,
            self.branch1,
            self.branch3,
            self.branch5,
            self.expand,
        ]
        .iter()
        .flat_map(|c| [c.weight, c.bias])
        .collect()
    }
}

/// MSFB output before the final ReLU.
pub fn pre_activation_graph(g: &mut Graph, x: Var, p: &MsfbVars) -> Var {
    let fc = g.conv3d(x, p.compress.weight, p.compress.bias);
    let f1 = g.conv3d(fc, p.branch1.weight, p.branch1.bias);
    let f3 = g.conv3d(fc, p.branch3.weight, p.branch3.bias);
    let f5 = g.conv3d(fc, p.branch5.weight, p.branch5.bias);
    // mean written as f1 + ((f3 - f1) + (f5 - f1)) / 3: identical branches
    // average back to themselves exactly, which (f1 + f3 + f5) / 3 does not
    let d3 = g.sub(f3, f1);
    let d5 = g.sub(f5, f1);
    let spread = g.add(d3, d5);
    let spread = g.scale(spread, 1.0 / 3.0);
    let fused = g.add(f1, spread);
    g.conv3d(fused, p.expand.weight, p.expand.bias)
}

pub fn msfb_graph(g: &mut Graph, x: Var, p: &MsfbVars) -> Var {
    let pre = pre_activation_graph(g, x, p);
    g.relu(pre)
}

fn check_channels(f: &FeatureMap4D, params: &MsfbParams) -> Result<()> {
    params.validate()?;
    if f.channels() != params.channels() {
        return Err(Error::Config(format!(
            "feature map has {} channels but MSFB expects {}",
            f.channels(),
            params.channels()
        )));
    }
    Ok(())
}

pub fn msfb_forward(f: &FeatureMap4D, params: &MsfbParams) -> Result<FeatureMap4D> {
    check_channels(f, params)?;
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let vars = params.to_vars(&mut g, false);
    let out = msfb_graph(&mut g, x, &vars);
    FeatureMap4D::from_tensor(g.value(out).clone())
}

pub fn msfb_pre_activation(f: &FeatureMap4D, params: &MsfbParams) -> Result<Tensor> {
    check_channels(f, params)?;
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let vars = params.to_vars(&mut g, false);
    let out = pre_activation_graph(&mut g, x, &vars);
    Ok(g.value(out).clone())
}

/// Floating-point operations (2 per multiply-add) of one MSFB pass with full
/// kernel support at every voxel.
pub fn msfb_flops(shape: [usize; 4], compressed: usize) -> u64 {
    let voxels = (shape[0] * shape[1] * shape[2]) as u64;
    let (c, cp) = (shape[3] as u64, compressed as u64);
    let taps: u64 = BRANCH_KERNELS.iter().map(|&k| (k * k * k) as u64).sum();
    2 * voxels * (c * cp + taps * cp * cp + cp * c)
}

/// MSFB parameters registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MsfbParamIds {
    ids: [(ParamId, ParamId); 5],
}

impl MsfbParamIds {
    pub fn register(store: &mut ParamStore, prefix: &str, init: MsfbParams) -> Self {
        let names = ["compress", "branch1", "branch3", "branch5", "expand"];
        let ids = init
            .convs()
            .into_iter()
            .zip(names)
            .map(|(conv, name)| {
                (
                    store.add(format!("{prefix}.{name}.weight"), conv.weight.clone()),
                    store.add(format!("{prefix}.{name}.bias"), conv.bias.clone()),
                )
            })
            .collect::<Vec<_>>();
        Self {
            ids: ids.try_into().unwrap(),
        }
    }

    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> MsfbVars {
        let mut conv = |i: usize| ConvVars {
            weight: g.param(store, self.ids[i].0),
            bias: g.param(store, self.ids[i].1),
        };
        MsfbVars {
            compress: conv(0),
            branch1: conv(1),
            branch3: conv(2),
            branch5: conv(3),
            expand: conv(4),
        }
    }

    pub fn params(&self, store: &ParamStore) -> MsfbParams {
        let conv = |i: usize| Conv3dParams {
            weight: store.get(self.ids[i].0).clone(),
            bias: store.get(self.ids[i].1).clone(),
        };
        MsfbParams {
            compress: conv(0),
            branch1: conv(1),
            branch3: conv(2),
            branch5: conv(3),
            expand: conv(4),
        }
    }
}
