use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm, BnCache, Layer, Linear, Mode, Visitor};

/// Multilayer perceptron with optional batch norm and an activation between
/// layers and nothing after the last layer. Samples are columns: inputs are
/// `in_dim x N`.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    norms: Vec<Option<BatchNorm>>,
    act: Activation,
}

pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    norms: Vec<Option<BnCache>>,
    pre_acts: Vec<Array2<f64>>,
}

impl Mlp {
    /// `dims` lists every width including input and output, e.g. `[128, 512, 512, 512]`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dims: &[usize], norm: bool, act: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("invalid MLP dims {dims:?}")));
        }
        let layers: Vec<Linear> = dims.windows(2).map(|w| Linear::new(rng, w[0], w[1])).collect();
        let norms = dims[1..dims.len() - 1]
            .iter()
            .map(|&d| norm.then(|| BatchNorm::new(d)))
            .collect();
        Ok(Self { layers, norms, act })
    }

    /// A network made of the given layers with activations (and no norms) in between.
    pub fn from_layers(layers: Vec<Linear>, act: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("MLP needs at least one layer"));
        }
        if layers.windows(2).any(|w| w[0].dims().1 != w[1].dims().0) {
            return Err(Error::invalid("MLP layer widths do not chain"));
        }
        let norms = vec![None; layers.len() - 1];
        Ok(Self { layers, norms, act })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].dims().0
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].dims().1
    }

    pub fn forward(&mut self, x: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, MlpCache)> {
        if x.nrows() != self.in_dim() {
            return Err(Error::invalid(format!(
                "MLP expects {} inputs, got {}",
                self.in_dim(),
                x.nrows()
            )));
        }
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            norms: Vec::new(),
            pre_acts: Vec::new(),
        };
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(h.view());
            cache.inputs.push(h);
            if i == last {
                h = y;
                break;
            }
            let y = match &mut self.norms[i] {
                Some(bn) => {
                    let (y, c) = bn.forward(y.view(), mode);
                    cache.norms.push(c);
                    y
                }
                None => {
                    cache.norms.push(None);
                    y
                }
            };
            let (y, pre) = self.act.forward(y);
            cache.pre_acts.push(pre);
            h = y;
        }
        Ok((h, cache))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: Array2<f64>) -> Array2<f64> {
        let mut d = dy;
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                d = self.act.backward(&cache.pre_acts[i], d);
                if let (Some(bn), Some(c)) = (&mut self.norms[i], &cache.norms[i]) {
                    d = bn.backward(c, d.view());
                }
            }
            d = self.layers[i].backward(cache.inputs[i].view(), d.view());
        }
        d
    }
}

impl Layer for Mlp {
    fn visit(&mut self, prefix: &str, f: &mut Visitor) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&format!("{prefix}.fc{i}"), f);
        }
        for (i, bn) in self.norms.iter_mut().enumerate() {
            if let Some(bn) = bn {
                bn.visit(&format!("{prefix}.bn{i}"), f);
            }
        }
    }
}
