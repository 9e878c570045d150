use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Linear warmup from `lr_warmup_start` to `lr0` over `warmup_steps`, then
/// cosine decay to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, warmup_steps: usize, lr_warmup_start: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    if step > total {
        return Err(Error::Invalid(format!("step {step} beyond schedule of {total}")));
    }
    if step < warmup_steps {
        return Ok(lr_warmup_start + (lr0 - lr_warmup_start) * step as f64 / warmup_steps as f64);
    }
    let span = total.saturating_sub(warmup_steps);
    let t = if span == 0 { 1.0 } else { (step - warmup_steps) as f64 / span as f64 };
    Ok((lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Also decay norm scales/shifts and biases.
    pub decay_norm_bias: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

/// Gradient statistics of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdStats {
    /// Norm of the loss gradient before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// SGD with heavy-ball momentum, L2 weight decay and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub cfg: SgdConfig,
    buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, buffers: Vec::new() }
    }

    /// Momentum buffer of parameter `index`, once it has been stepped.
    pub fn buffer(&self, index: usize) -> Option<&Tensor<T>> {
        self.buffers.get(index).and_then(Option::as_ref)
    }

    /// Clips the stored gradients, folds in weight decay, and updates every
    /// trainable parameter that has a gradient. Non-finite gradients abort
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<SgdStats> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {lr}")));
        }
        for e in store.entries() {
            if let Some(g) = &e.grad {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", e.name)));
                }
            }
        }
        let grad_norm = store.grad_norm();
        let clip_scale = match self.cfg.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        if self.buffers.len() < store.len() {
            self.buffers.resize(store.len(), None);
        }
        let (mom, scale, lr_t) = (T::lit(self.cfg.momentum), T::lit(clip_scale), T::lit(lr));
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.kind.trainable() {
                continue;
            }
            let Some(g) = &e.grad else { continue };
            let decay = if e.kind == ParamKind::Weight || self.cfg.decay_norm_bias {
                T::lit(self.cfg.weight_decay)
            } else {
                T::zero()
            };
            let buf = self.buffers[i].get_or_insert_with(|| Tensor::zeros(e.value.shape()));
            for ((p, b), &gv) in e.value.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
                let d = gv * scale + decay * *p;
                *b = mom * *b + d;
                *p = *p - lr_t * *b;
            }
        }
        Ok(SgdStats { grad_norm, clip_scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let (lr0, start) = (0.025, 0.00625);
        assert_eq!(cosine_lr(0, 100, lr0, 10, start).unwrap(), start);
        assert!((cosine_lr(10, 100, lr0, 10, start).unwrap() - lr0).abs() < 1e-15);
        assert!(cosine_lr(100, 100, lr0, 10, start).unwrap().abs() < 1e-15);
        assert!((cosine_lr(55, 100, lr0, 10, start).unwrap() - lr0 / 2.0).abs() < 1e-12);
        assert!(cosine_lr(0, 0, lr0, 0, start).is_err());
        assert!(cosine_lr(101, 100, lr0, 0, start).is_err());
        for s in 0..=100 {
            assert!(cosine_lr(s, 100, lr0, 10, start).unwrap() >= 0.0);
        }
    }

    fn store(w: &[f64], g: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64(&[w.len()], w).unwrap(), ParamKind::Weight);
        s.entries_mut()[id.index()].grad = Some(Tensor::from_f64(&[g.len()], g).unwrap());
        s
    }

    fn cfg(clip: Option<f64>) -> SgdConfig {
        SgdConfig { momentum: 0.9, weight_decay: 1e-4, decay_norm_bias: false, clip_norm: clip }
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(&[1.0, -2.0], &[0.5, 0.25]);
        Sgd::new(cfg(None)).step(&mut s, 0.1).unwrap();
        let w = s.entries()[0].value.data();
        assert!((w[0] - (1.0 - 0.1 * (0.5 + 1e-4))).abs() < 1e-15);
        assert!((w[1] - (-2.0 - 0.1 * (0.25 - 2e-4))).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_and_zero_lr_leave_params() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("b", Tensor::ones(&[3]), ParamKind::NormOrBias);
        s.entries_mut()[id.index()].grad = Some(Tensor::zeros(&[3]));
        Sgd::new(cfg(Some(1.0))).step(&mut s, 0.5).unwrap();
        assert_eq!(s.get(id).data(), &[1.0; 3]);
        let mut t = store(&[1.0, 2.0], &[3.0, 4.0]);
        Sgd::new(cfg(None)).step(&mut t, 0.0).unwrap();
        assert_eq!(t.entries()[0].value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn clipping_scales_to_bound() {
        let mut s = store(&[0.0, 0.0], &[6.0, 8.0]);
        let mut opt = Sgd::new(SgdConfig { weight_decay: 0.0, ..cfg(Some(1.0)) });
        let stats = opt.step(&mut s, 1.0).unwrap();
        assert_eq!(stats.grad_norm, 10.0);
        assert!((stats.clip_scale - 0.1).abs() < 1e-15);
        let w = s.entries()[0].value.data();
        assert!((w[0] + 0.6).abs() < 1e-15 && (w[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut s = store(&[1.0], &[f64::NAN]);
        let err = Sgd::new(cfg(None)).step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
        assert_eq!(s.entries()[0].value.data(), &[1.0]);
    }
}
