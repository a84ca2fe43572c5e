use ndarray::{ArrayD, Zip};

use crate::error::{Error, Result};
use crate::model::{Model, Tensor};
use crate::nn::{Param, ParamKind};
use crate::trainer::config::{OptimizerConfig, OptimizerKind};

/// First-order optimizer state, one slot per trainable tensor in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    /// Momentum (SGD) or first moment (AdamW).
    m: Vec<ArrayD<f64>>,
    /// Second moment, AdamW only.
    v: Vec<ArrayD<f64>>,
    names: Vec<String>,
    steps: u64,
}

/// Weight decay applies to kernels and weight matrices only.
fn decays(p: &Param) -> bool {
    p.value.ndim() >= 2
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, model: &mut Model) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        model.visit_params(&mut |name, kind, p| {
            if kind == ParamKind::Trainable {
                names.push(name.to_string());
                m.push(ArrayD::zeros(p.value.raw_dim()));
            }
        });
        let v = if cfg.kind == OptimizerKind::Adamw {
            m.clone()
        } else {
            Vec::new()
        };
        Self {
            cfg,
            m,
            v,
            names,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr` using the accumulated gradients.
    pub fn step(&mut self, model: &mut Model, lr: f64) {
        self.steps += 1;
        let cfg = self.cfg;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        let mut slot = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params(&mut |_, kind, p| {
            if kind != ParamKind::Trainable {
                return;
            }
            let wd = if decays(p) { cfg.weight_decay } else { 0.0 };
            let Param { value, grad } = p;
            match cfg.kind {
                OptimizerKind::Sgd => {
                    Zip::from(value).and(grad).and(&mut ms[slot]).for_each(|w, g, buf| {
                        let g = *g;
                        *buf = cfg.momentum * *buf + g + wd * *w;
                        *w -= lr * *buf;
                    });
                }
                OptimizerKind::Adamw => {
                    Zip::from(value)
                        .and(grad)
                        .and(&mut ms[slot])
                        .and(&mut vs[slot])
                        .for_each(|w, g, m, v| {
                            let g = *g;
                            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                            *w -= lr * (update + wd * *w);
                        });
                }
            }
            slot += 1;
        });
    }

    /// Named state tensors for checkpointing.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("optim.steps".to_string(), Tensor::scalar_u64(self.steps))];
        for (i, name) in self.names.iter().enumerate() {
            out.push((format!("optim.m.{name}"), Tensor::F64(self.m[i].clone())));
            if let Some(v) = self.v.get(i) {
                out.push((format!("optim.v.{name}"), Tensor::F64(v.clone())));
            }
        }
        out
    }

    pub fn load_state(&mut self, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        let missing = |n: &str| Error::invalid(format!("optimizer tensor {n} missing from checkpoint"));
        match lookup("optim.steps") {
            Some(Tensor::U64(a)) if a.len() == 1 => self.steps = a.iter().copied().next().unwrap_or(0),
            _ => return Err(missing("optim.steps")),
        }
        let adam = !self.v.is_empty();
        for (i, name) in self.names.iter().enumerate() {
            let fill = |prefix: &str, dst: &mut ArrayD<f64>| -> Result<()> {
                let key = format!("{prefix}.{name}");
                match lookup(&key) {
                    Some(Tensor::F64(a)) if a.shape() == dst.shape() => {
                        dst.assign(&a);
                        Ok(())
                    }
                    _ => Err(missing(&key)),
                }
            };
            fill("optim.m", &mut self.m[i])?;
            if adam {
                fill("optim.v", &mut self.v[i])?;
            }
        }
        Ok(())
    }
}
