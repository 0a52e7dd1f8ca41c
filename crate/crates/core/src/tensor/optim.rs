use super::{Gradients, ParameterStore, Scalar};
use crate::error::{Error, Result};

/// RMSProp with momentum:
///
/// ```text
/// ms  <- rho * ms + (1 - rho) * g^2
/// mom <- momentum * mom + lr * g / sqrt(ms + eps)
/// w   <- w - mom
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay_rate: f64,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay_rate: 0.9,
            momentum: 0.9,
            eps: 1e-8,
        }
    }
}

impl RmsProp {
    pub fn new(lr: f64, decay_rate: f64, momentum: f64) -> Result<Self> {
        let opt = Self {
            lr,
            decay_rate,
            momentum,
            ..Self::default()
        };
        opt.validate()?;
        Ok(opt)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.decay_rate) {
            return Err(Error::Param(format!("decay rate must lie in [0, 1), got {}", self.decay_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.eps <= 0.0 {
            return Err(Error::Param(format!("epsilon must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Applies one update. Entries without a gradient are stepped with a zero
    /// gradient; gradients naming unknown entries are rejected.
    pub fn step<T: Scalar>(&self, params: &mut ParameterStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step_with_decay(params, grads, 0.0).map(|_| ())
    }

    /// Applies one update to `loss + coef * sum(W^2)` over the decayed
    /// entries, adding the decay gradient `2 * coef * w` inside the update
    /// loop. Returns `sum(W^2)` before the update.
    pub fn step_with_decay<T: Scalar>(&self, params: &mut ParameterStore<T>, grads: &Gradients<T>, coef: f64) -> Result<f64> {
        self.validate()?;
        for (name, g) in grads {
            let entry = params
                .entry(name)
                .ok_or_else(|| Error::Param(format!("gradient for unknown parameter `{name}`")))?;
            if entry.tensor.numel() != g.len() {
                return Err(Error::shape("rmsprop_step", entry.tensor.shape(), &[g.len()]));
            }
        }
        let (lr, rho, mu, eps) = (T::lit(self.lr), T::lit(self.decay_rate), T::lit(self.momentum), T::lit(self.eps));
        let one_minus_rho = T::one() - rho;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let mut sum_sq = 0.0f64;
        for name in names {
            let grad = grads.get(&name);
            let (entry, slot) = params.entry_and_slot_mut(&name).expect("slot exists for every entry");
            let two_c = if entry.decay { T::lit(2.0 * coef) } else { T::zero() };
            if entry.decay {
                sum_sq += entry.tensor.sum_squares().as_f64();
            }
            let w = entry.tensor.data_mut();
            let ms = slot.mean_square.iter_mut();
            let mom = slot.momentum.iter_mut();
            let update = |w: &mut T, ms: &mut T, m: &mut T, g: T| {
                let g = g + two_c * *w;
                *ms = rho * *ms + one_minus_rho * g * g;
                *m = mu * *m + lr * g / (*ms + eps).sqrt();
                *w = *w - *m;
            };
            match grad {
                Some(g) => w
                    .iter_mut()
                    .zip(ms)
                    .zip(mom)
                    .zip(g)
                    .for_each(|(((w, ms), m), &g)| update(w, ms, m, g)),
                None => w
                    .iter_mut()
                    .zip(ms)
                    .zip(mom)
                    .for_each(|((w, ms), m)| update(w, ms, m, T::zero())),
            }
        }
        params.set_step_count(params.step_count() + 1);
        Ok(sum_sq)
    }
}
