//! First-order optimizers over a [`ParamSet`].

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr } => lr > 0.0,
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    step: u64,
    moments: IndexMap<String, Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            step: 0,
            moments: IndexMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer step", p.shape(), g.shape()));
            }
            match self.cfg {
                OptimizerConfig::Sgd { lr } => {
                    let lr = T::from_f64_lossy(lr);
                    *p = p.zip_map(g, "sgd", |w, g| w - lr * g)?;
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let state = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                        m: Tensor::zeros(g.shape()),
                        v: Tensor::zeros(g.shape()),
                    });
                    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                    let one = T::one();
                    state.m = state.m.zip_map(g, "adam m", |m, g| b1 * m + (one - b1) * g)?;
                    state.v = state.v.zip_map(g, "adam v", |v, g| b2 * v + (one - b2) * g * g)?;
                    let t = self.step as i32;
                    let c1 = T::from_f64_lossy(1.0 - beta1.powi(t));
                    let c2 = T::from_f64_lossy(1.0 - beta2.powi(t));
                    let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(eps));
                    let update = state
                        .m
                        .zip_map(&state.v, "adam", |m, v| lr * (m / c1) / ((v / c2).sqrt() + eps))?;
                    *p = p.sub(&update)?;
                }
            }
        }
        Ok(())
    }
}
