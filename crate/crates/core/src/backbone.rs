//! Frozen convolutional feature extractor yielding a mid-level and a
//! high-level map from one image. Support and query share one parameter set.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, HseError, Result};
use crate::numerics::{ops, Real, Tape, Tensor, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::seeding::{rng_for, uniform_tensor};

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub high_channels: usize,
    /// Image-to-mid-map downsample factor (power of two).
    pub mid_stride: usize,
    /// Image-to-high-map downsample factor (power of two, > `mid_stride`).
    pub high_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            mid_channels: 32,
            high_channels: 32,
            mid_stride: 4,
            high_stride: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HseError::Config(m));
        if self.in_channels == 0 || self.mid_channels == 0 || self.high_channels == 0 {
            return bad(format!(
                "backbone channel counts must be positive: {self:?}"
            ));
        }
        if !self.mid_stride.is_power_of_two() || !self.high_stride.is_power_of_two() {
            return bad(format!(
                "downsample factors must be powers of two, got {} and {}",
                self.mid_stride, self.high_stride
            ));
        }
        if self.high_stride <= self.mid_stride {
            return bad(format!(
                "high-level stride {} must exceed mid-level stride {}",
                self.high_stride, self.mid_stride
            ));
        }
        Ok(())
    }

    /// Mid and high map extents for an `h×w` image.
    pub fn feature_extents(&self, h: usize, w: usize) -> Result<((usize, usize), (usize, usize))> {
        if h % self.high_stride != 0 || w % self.high_stride != 0 {
            return dim_err(format!(
                "image extent {h}×{w} not divisible by downsample factors {} and {}",
                self.mid_stride, self.high_stride
            ));
        }
        let mid = (h / self.mid_stride, w / self.mid_stride);
        if mid.0 < 2 || mid.1 < 2 {
            return dim_err(format!(
                "mid-level map {}×{} smaller than 2×2",
                mid.0, mid.1
            ));
        }
        Ok((mid, (h / self.high_stride, w / self.high_stride)))
    }
}

/// Maps pixel values from `[0, 1]` to `[-1, 1]`.
pub fn center_pixels<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let two = T::from_f64(2.0);
    image.map(|v| (v - half) * two)
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Mid- and high-level maps from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair<T: Real = f32> {
    pub mid: Tensor<T>,
    pub high: Tensor<T>,
}

/// Layer layout of the extractor; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    to_mid: Vec<ConvLayer>,
    to_high: Vec<ConvLayer>,
}

/// Registers freshly initialised, frozen backbone parameters in `store`.
/// Kernels are He-uniform from a stream keyed on `seed`; biases start at zero.
pub fn build_backbone(
    cfg: &BackboneConfig,
    seed: u64,
    store: &mut ParamStore<f32>,
) -> Result<Backbone> {
    cfg.validate()?;
    let mut rng = rng_for("backbone", &[seed]);
    let mut layer = |idx: usize, c_in: usize, c_out: usize, stride: usize| {
        let fan_in = (c_in * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let kernel = store.add(
            format!("{BACKBONE_PREFIX}conv{idx}.kernel"),
            uniform_tensor(&[c_out, c_in, 3, 3], bound, &mut rng),
            true,
        );
        let bias = store.add(
            format!("{BACKBONE_PREFIX}conv{idx}.bias"),
            Tensor::zeros([c_out]),
            true,
        );
        ConvLayer {
            kernel,
            bias,
            stride,
        }
    };

    let c = cfg.mid_channels;
    let mut to_mid = vec![layer(0, cfg.in_channels, c, 1)];
    for _ in 0..cfg.mid_stride.trailing_zeros() {
        let i = to_mid.len();
        to_mid.push(layer(i, c, c, 2));
    }
    let mut to_high = Vec::new();
    let mut c_in = c;
    for _ in 0..(cfg.high_stride / cfg.mid_stride).trailing_zeros() {
        let i = to_mid.len() + to_high.len();
        to_high.push(layer(i, c_in, cfg.high_channels, 2));
        c_in = cfg.high_channels;
    }
    Ok(Backbone {
        cfg: cfg.clone(),
        to_mid,
        to_high,
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.to_mid
            .iter()
            .chain(&self.to_high)
            .flat_map(|l| [l.kernel, l.bias])
            .collect()
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [c, h, w] if *c == self.cfg.in_channels => self.cfg.feature_extents(*h, *w).map(|_| ()),
            s => dim_err(format!(
                "backbone expects a {}×H×W image, got {s:?}",
                self.cfg.in_channels
            )),
        }
    }

    /// Pure extraction on values.
    pub fn extract_features<T: Real>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
    ) -> Result<FeaturePair<T>> {
        self.check_image(image.shape())?;
        let run = |x: Tensor<T>, layers: &[ConvLayer]| -> Result<Tensor<T>> {
            let mut x = x;
            for l in layers {
                let y = ops::conv2d(&x, store.value(l.kernel), l.stride, 1)?;
                let b = store.value(l.bias).clone().reshape([y.shape()[0], 1, 1])?;
                x = ops::relu(&ops::broadcast_binary(&y, &b, |a, b| a + b)?);
            }
            Ok(x)
        };
        let mid = run(center_pixels(image), &self.to_mid)?;
        let high = run(mid.clone(), &self.to_high)?;
        Ok(FeaturePair { mid, high })
    }

    /// Extraction recorded on a tape, for runs that train the backbone.
    pub fn extract_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        image: Var,
    ) -> Result<(Var, Var)> {
        self.check_image(tape.shape(image))?;
        let mut run = |x: Var, layers: &[ConvLayer], tape: &mut Tape<T>| -> Result<Var> {
            let mut x = x;
            for l in layers {
                let k = binder.var(tape, l.kernel);
                let b = binder.var(tape, l.bias);
                let y = tape.conv2d(x, k, l.stride, 1)?;
                let c = tape.shape(y)[0];
                let b = tape.reshape(b, &[c, 1, 1])?;
                let y = tape.add(y, b)?;
                x = tape.relu(y);
            }
            Ok(x)
        };
        let centered = tape.constant(center_pixels(tape.value(image)));
        let mid = run(centered, &self.to_mid, tape)?;
        let high = run(mid, &self.to_high, tape)?;
        Ok((mid, high))
    }
}
