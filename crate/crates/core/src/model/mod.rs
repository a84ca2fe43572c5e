//! Convolutional encoder with a per-position local projector and a global expander.

pub mod checkpoint;
mod encoder;
mod heads;

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Tensor};
pub use encoder::{Encoder, EncoderCache, EncoderConfig, NormKind};
pub use heads::{Mlp, MlpCache};

use crate::error::{Error, Result};
use crate::nn::{from_planar, to_planar, Extent, Layer, Mode, Param, ParamKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Local projector widths, first entry = encoder channels.
    pub projector_dims: Vec<usize>,
    /// Global expander widths, first entry = encoder channels.
    pub expander_dims: Vec<usize>,
    pub projector_norm: bool,
    pub expander_norm: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            projector_dims: vec![128, 64, 64, 64],
            expander_dims: vec![128, 512, 512, 512],
            projector_norm: true,
            expander_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            heads: HeadConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let c = self.encoder.out_channels();
        for (name, dims) in [
            ("projector", &self.heads.projector_dims),
            ("expander", &self.heads.expander_dims),
        ] {
            if dims.first() != Some(&c) {
                return Err(Error::invalid(format!(
                    "{name} input width {:?} must equal encoder channels {c}",
                    dims.first()
                )));
            }
        }
        Ok(())
    }
}

/// Channelwise mean over the spatial positions of a `B x C x H x W` map.
pub fn pool(y: ArrayView4<f64>) -> Array2<f64> {
    let (b, c, h, w) = y.dim();
    y.to_shape((b, c, h * w))
        .expect("reshape")
        .mean_axis(Axis(2))
        .expect("nonempty map")
}

/// Planar `C x (B * H * W)` to pooled `C x B`.
fn pool_planar(y: ArrayView2<f64>, ext: Extent) -> Array2<f64> {
    let (b, h, w) = ext;
    y.to_shape((y.nrows(), b, h * w))
        .expect("reshape")
        .mean_axis(Axis(2))
        .expect("nonempty map")
}

fn pool_planar_backward(d: &Array2<f64>, ext: Extent) -> Array2<f64> {
    let (b, h, w) = ext;
    let scale = 1.0 / (h * w) as f64;
    let hw = h * w;
    Array2::from_shape_fn((d.nrows(), b * hw), |(k, col)| d[[k, col / hw]] * scale)
}

/// Forward state of one view batch kept for the backward pass.
pub struct ViewForward {
    /// Encoder output `B x C x H x W`.
    pub features: Array4<f64>,
    /// Local embeddings `B x D x H x W`.
    pub maps: Array4<f64>,
    /// Pooled representations `B x C`.
    pub pooled: Array2<f64>,
    /// Global embeddings `B x D'`.
    pub global: Array2<f64>,
    ext: Extent,
    planar_features: Array2<f64>,
    encoder: EncoderCache,
    projector: MlpCache,
    expander: MlpCache,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub encoder: Encoder,
    pub projector: Mlp,
    pub expander: Mlp,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let act = config.encoder.activation;
        let encoder = Encoder::new(&mut rng, &config.encoder)?;
        let projector = Mlp::new(&mut rng, &config.heads.projector_dims, config.heads.projector_norm, act)?;
        let expander = Mlp::new(&mut rng, &config.heads.expander_dims, config.heads.expander_norm, act)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            projector,
            expander,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Pre-pool feature map of a batch of images.
    pub fn encode(&mut self, x: ArrayView4<f64>, mode: Mode) -> Result<Array4<f64>> {
        Ok(self.encoder.forward(x, mode)?.0)
    }

    /// Output of every encoder stage, for multi-stage probing.
    pub fn encode_stages(&mut self, x: ArrayView4<f64>, mode: Mode) -> Result<Vec<Array4<f64>>> {
        Ok(self.encoder.forward_stages(x, mode)?.0)
    }

    /// Applies the local projector independently at every position.
    pub fn local_project(&mut self, y: ArrayView4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let (p, ext) = to_planar(y);
        let (z, _) = self.projector.forward(p.view(), mode)?;
        Ok(from_planar(z.view(), ext))
    }

    /// Expands pooled `B x C` representations to `B x D'` embeddings.
    pub fn global_expand(&mut self, v: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        Ok(self
            .expander
            .forward(v.t(), mode)?
            .0
            .reversed_axes()
            .as_standard_layout()
            .into_owned())
    }

    pub fn forward_view(&mut self, x: ArrayView4<f64>, mode: Mode) -> Result<ViewForward> {
        let (mut outs, encoder) = self.encoder.forward_planar(x, mode)?;
        let (planar_features, ext) = outs.pop().expect("at least one output");
        let (z, projector) = self.projector.forward(planar_features.view(), mode)?;
        let maps = from_planar(z.view(), ext);
        let pooled_t = pool_planar(planar_features.view(), ext);
        let (global_t, expander) = self.expander.forward(pooled_t.view(), mode)?;
        Ok(ViewForward {
            features: from_planar(planar_features.view(), ext),
            maps,
            pooled: pooled_t.reversed_axes().as_standard_layout().into_owned(),
            global: global_t.reversed_axes().as_standard_layout().into_owned(),
            ext,
            planar_features,
            encoder,
            projector,
            expander,
        })
    }

    /// Accumulates parameter gradients for `d loss / d maps` and `d loss / d global`.
    pub fn backward_view(&mut self, fwd: &ViewForward, d_maps: &Array4<f64>, d_global: &Array2<f64>) {
        let (d_z, _) = to_planar(d_maps.view());
        let mut d_features = self.projector.backward(&fwd.projector, d_z);
        let d_pooled = self.expander.backward(&fwd.expander, d_global.t().to_owned());
        d_features += &pool_planar_backward(&d_pooled, fwd.ext);
        debug_assert_eq!(d_features.dim(), fwd.planar_features.dim());
        self.encoder.backward_planar(&fwd.encoder, d_features);
    }

    pub fn visit_params(&mut self, f: &mut crate::nn::Visitor) {
        self.encoder.visit("encoder", f);
        self.projector.visit("projector", f);
        self.expander.visit("expander", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, _, p: &mut Param| p.zero_grad());
    }

    /// Every named tensor (trainable parameters and buffers) in a fixed order.
    pub fn state(&mut self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, _, p| out.push((name.to_string(), p.value.clone())));
        out
    }

    pub fn load_state(&mut self, state: &[(String, ArrayD<f64>)]) -> Result<()> {
        let mut err = None;
        self.visit_params(&mut |name, _, p| {
            if err.is_some() {
                return;
            }
            match state.iter().find(|(n, _)| n == name) {
                Some((_, v)) if v.shape() == p.value.shape() => p.value.assign(v),
                Some((_, v)) => {
                    err = Some(Error::invalid(format!(
                        "tensor {name}: shape {:?} does not match model {:?}",
                        v.shape(),
                        p.value.shape()
                    )))
                }
                None => err = Some(Error::invalid(format!("tensor {name} missing from state"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Number of trainable scalars.
    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, kind, p| {
            if kind == ParamKind::Trainable {
                n += p.value.len()
            }
        });
        n
    }

    /// Order-sensitive checksum over every tensor value's bit pattern.
    pub fn checksum(&mut self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit_params(&mut |_, _, p| {
            for v in p.value.iter() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        });
        h
    }

    /// Same model structure with a different activation-free projector, used in tests.
    pub fn with_projector(mut self, projector: Mlp) -> Self {
        self.projector = projector;
        self
    }
}
