use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    from_planar, to_planar, Activation, BatchNorm, BnCache, Conv2d, ConvCache, Extent, Layer, Mode, Visitor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Batch,
    None,
}

/// Shape of the residual convolutional encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub norm: NormKind,
    pub activation: Activation,
    /// Resolution of large views.
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 8,
            stem_stride: 2,
            stage_channels: vec![16, 32, 128],
            stage_strides: vec![2, 2, 2],
            norm: NormKind::Batch,
            activation: Activation::Relu,
            input_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn output_stride(&self) -> usize {
        self.stem_stride * self.stage_strides.iter().product::<usize>()
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(self.stem_channels)
    }

    pub fn map_size(&self, input: usize) -> Result<usize> {
        let stride = self.output_stride();
        if input == 0 || input % stride != 0 {
            return Err(Error::invalid(format!(
                "input size {input} is not a positive multiple of the output stride {stride}"
            )));
        }
        Ok(input / stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::invalid("stage_channels and stage_strides differ in length"));
        }
        if self.stem_stride == 0 || self.stage_strides.contains(&0) {
            return Err(Error::invalid("strides must be >= 1"));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::invalid("channel counts must be >= 1"));
        }
        self.map_size(self.input_size)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: Option<BatchNorm>,
}

struct ConvBnCache {
    conv: ConvCache,
    bn: Option<BnCache>,
}

impl ConvBn {
    fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, k: usize, stride: usize, norm: NormKind) -> Self {
        Self {
            conv: Conv2d::new(rng, c_in, c_out, k, stride, k / 2),
            bn: (norm == NormKind::Batch).then(|| BatchNorm::new(c_out)),
        }
    }

    fn forward(&mut self, x: ArrayView2<f64>, ext: Extent, mode: Mode) -> (Array2<f64>, Extent, ConvBnCache) {
        let (y, ext, conv) = self.conv.forward(x, ext);
        match &mut self.bn {
            Some(bn) => {
                let (y, bn) = bn.forward(y.view(), mode);
                (y, ext, ConvBnCache { conv, bn })
            }
            None => (y, ext, ConvBnCache { conv, bn: None }),
        }
    }

    fn backward(&mut self, cache: &ConvBnCache, dy: Array2<f64>) -> Array2<f64> {
        let dy = match (&mut self.bn, &cache.bn) {
            (Some(bn), Some(c)) => bn.backward(c, dy.view()),
            _ => dy,
        };
        self.conv.backward(&cache.conv, dy.view())
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit(&format!("{prefix}.bn"), f);
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
    act: Activation,
}

struct ResCache {
    c1: ConvBnCache,
    pre1: Array2<f64>,
    c2: ConvBnCache,
    short: Option<ConvBnCache>,
    pre_out: Array2<f64>,
}

impl ResBlock {
    fn forward(&mut self, x: ArrayView2<f64>, ext: Extent, mode: Mode) -> (Array2<f64>, Extent, ResCache) {
        let (h, ext_h, c1) = self.conv1.forward(x, ext, mode);
        let (h, pre1) = self.act.forward(h);
        let (mut main, ext_out, c2) = self.conv2.forward(h.view(), ext_h, mode);
        let short = match &mut self.shortcut {
            Some(sc) => {
                let (s, _, cache) = sc.forward(x, ext, mode);
                main += &s;
                Some(cache)
            }
            None => {
                main += &x;
                None
            }
        };
        let (out, pre_out) = self.act.forward(main);
        (
            out,
            ext_out,
            ResCache {
                c1,
                pre1,
                c2,
                short,
                pre_out,
            },
        )
    }

    fn backward(&mut self, cache: &ResCache, dy: Array2<f64>) -> Array2<f64> {
        let d_sum = self.act.backward(&cache.pre_out, dy);
        let d_h = self.conv2.backward(&cache.c2, d_sum.clone());
        let d_h = self.act.backward(&cache.pre1, d_h);
        let mut dx = self.conv1.backward(&cache.c1, d_h);
        match (&mut self.shortcut, &cache.short) {
            (Some(sc), Some(c)) => dx += &sc.backward(c, d_sum),
            _ => dx += &d_sum,
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit(&format!("{prefix}.shortcut"), f);
        }
    }
}

/// Stem convolution followed by residual stages.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    stem: ConvBn,
    stages: Vec<ResBlock>,
}

pub struct EncoderCache {
    stem: ConvBnCache,
    stem_pre: Array2<f64>,
    stages: Vec<ResCache>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new(
            rng,
            config.in_channels,
            config.stem_channels,
            3,
            config.stem_stride,
            config.norm,
        );
        let mut c_in = config.stem_channels;
        let mut stages = Vec::new();
        for (&c_out, &stride) in config.stage_channels.iter().zip(&config.stage_strides) {
            let shortcut =
                (stride != 1 || c_in != c_out).then(|| ConvBn::new(rng, c_in, c_out, 1, stride, config.norm));
            stages.push(ResBlock {
                conv1: ConvBn::new(rng, c_in, c_out, 3, stride, config.norm),
                conv2: ConvBn::new(rng, c_out, c_out, 3, 1, config.norm),
                shortcut,
                act: config.activation,
            });
            c_in = c_out;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_input(&self, x: &ArrayView4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::invalid(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.map_size(h)?;
        self.config.map_size(w)?;
        Ok(())
    }

    /// Planar output of every stage (the stem output when there are no
    /// stages); the last entry is the final feature map.
    pub fn forward_planar(
        &mut self,
        x: ArrayView4<f64>,
        mode: Mode,
    ) -> Result<(Vec<(Array2<f64>, Extent)>, EncoderCache)> {
        self.check_input(&x)?;
        let (x, ext) = to_planar(x);
        let (h, mut ext, stem) = self.stem.forward(x.view(), ext, mode);
        let (mut h, stem_pre) = self.config.activation.forward(h);
        let mut outputs = Vec::with_capacity(self.stages.len().max(1));
        let mut caches = Vec::with_capacity(self.stages.len());
        if self.stages.is_empty() {
            outputs.push((h.clone(), ext));
        }
        for block in &mut self.stages {
            let (out, ext_out, cache) = block.forward(h.view(), ext, mode);
            caches.push(cache);
            outputs.push((out.clone(), ext_out));
            h = out;
            ext = ext_out;
        }
        Ok((
            outputs,
            EncoderCache {
                stem,
                stem_pre,
                stages: caches,
            },
        ))
    }

    /// Output of every stage as `B x C x H x W` maps.
    pub fn forward_stages(&mut self, x: ArrayView4<f64>, mode: Mode) -> Result<(Vec<Array4<f64>>, EncoderCache)> {
        let (outs, cache) = self.forward_planar(x, mode)?;
        Ok((outs.iter().map(|(y, ext)| from_planar(y.view(), *ext)).collect(), cache))
    }

    pub fn forward(&mut self, x: ArrayView4<f64>, mode: Mode) -> Result<(Array4<f64>, EncoderCache)> {
        let (mut outs, cache) = self.forward_stages(x, mode)?;
        Ok((outs.pop().expect("at least one output"), cache))
    }

    /// Backpropagates a planar gradient on the final map; returns the planar input gradient.
    pub fn backward_planar(&mut self, cache: &EncoderCache, dy: Array2<f64>) -> Array2<f64> {
        let mut d = dy;
        for (block, c) in self.stages.iter_mut().zip(&cache.stages).rev() {
            d = block.backward(c, d);
        }
        let d = self.config.activation.backward(&cache.stem_pre, d);
        self.stem.backward(&cache.stem, d)
    }

    /// Backpropagates a gradient on the final map; returns the input gradient.
    pub fn backward(&mut self, cache: &EncoderCache, dy: Array4<f64>) -> Array4<f64> {
        let (dy, _) = to_planar(dy.view());
        let ext = cache.stem.conv.in_ext();
        from_planar(self.backward_planar(cache, dy).view(), ext)
    }
}

impl Layer for Encoder {
    fn visit(&mut self, prefix: &str, f: &mut Visitor) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, block) in self.stages.iter_mut().enumerate() {
            block.visit(&format!("{prefix}.stage{i}"), f);
        }
    }
}
