//! Small convolutional critic used for adversarial training of the generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Result};
use crate::generator::LRELU_SLOPE;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    /// Channels after the RGB stem, then after each downsampling block.
    pub channels: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn for_resolution(resolution: usize) -> Self {
        let blocks = (resolution / 4).trailing_zeros() as usize;
        let mut channels = vec![8usize];
        for b in 0..blocks {
            channels.push((16usize << b).min(32));
        }
        Self {
            resolution,
            channels,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        ensure_input!(
            self.resolution >= 8 && self.resolution.is_power_of_two(),
            "discriminator resolution must be a power of two >= 8"
        );
        ensure_input!(
            self.channels.len() == (self.resolution / 4).trailing_zeros() as usize + 1,
            "discriminator needs {} channel entries",
            (self.resolution / 4).trailing_zeros() + 1
        );
        Ok(())
    }
}

/// Maps `[N, 3, R, R]` images to `[N, 1]` realness logits.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
}

fn init<T: Scalar>(r: &mut rng::Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let n = shape.iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let v: Vec<f64> = rng::normal_vec(r, n);
    Tensor::from_vec(shape, v.into_iter().map(|x| T::lit(x * std)).collect()).expect("shape")
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed);
        let mut p = ParamSet::new();
        let c0 = config.channels[0];
        p.push("stem.weight", init(&mut r, &[c0, 3, 1, 1], 3));
        p.push("stem.bias", Tensor::zeros(&[c0]));
        for b in 0..config.num_blocks() {
            let (ci, co) = (config.channels[b], config.channels[b + 1]);
            p.push(format!("b{b}.weight"), init(&mut r, &[co, ci, 3, 3], ci * 9));
            p.push(format!("b{b}.bias"), Tensor::zeros(&[co]));
        }
        let last = *config.channels.last().expect("non-empty");
        p.push("head.weight", init(&mut r, &[1, last * 16], last * 16));
        p.push("head.bias", Tensor::zeros(&[1]));
        Ok(Self { config, params: p })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Var {
        let slope = T::lit(LRELU_SLOPE);
        let n = g.value(x).shape()[0];
        let mut h = g.conv2d(x, bound.var(0), Some(bound.var(1)));
        h = g.leaky_relu(h, slope);
        for b in 0..self.config.num_blocks() {
            h = g.conv2d(h, bound.var(2 + 2 * b), Some(bound.var(3 + 2 * b)));
            h = g.leaky_relu(h, slope);
            h = g.avg_pool2x(h);
        }
        let flat = g.value(h).len() / n;
        let h = g.reshape(h, &[n, flat]);
        let nb = self.config.num_blocks();
        g.linear(h, bound.var(2 + 2 * nb), Some(bound.var(3 + 2 * nb)))
    }
}
