use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};

use crate::config::TrainingSettings;
use crate::error::Result;
use crate::params::ParamStore;

/// AdamW with decoupled weight decay and global-norm gradient clipping.
pub struct Optimizer {
    inner: AdamW,
    vars: Vec<(String, Var)>,
    clip: f64,
}

impl Optimizer {
    pub fn new(store: &ParamStore, settings: &TrainingSettings, frozen: &[String]) -> Result<Self> {
        let vars = store.trainable(frozen);
        let params = ParamsAdamW {
            lr: settings.lr_peak,
            beta1: settings.beta1,
            beta2: settings.beta2,
            eps: 1e-8,
            weight_decay: settings.weight_decay,
        };
        let inner = AdamW::new(vars.iter().map(|(_, v)| v.clone()).collect(), params)?;
        Ok(Self {
            inner,
            vars,
            clip: settings.grad_clip,
        })
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    /// Backpropagates `loss`, clips and applies one update. Returns the
    /// pre-clipping global gradient norm.
    pub fn step(&mut self, loss: &Tensor, lr: f64) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for (_, v) in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if self.clip > 0.0 && norm > self.clip {
            let scale = self.clip / (norm + 1e-6);
            for (_, v) in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        self.inner.set_learning_rate(lr);
        self.inner.step(&grads)?;
        Ok(norm)
    }
}
