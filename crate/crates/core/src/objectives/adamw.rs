use std::collections::BTreeMap;

use crate::error::{MktError, Result};
use crate::numerics::Parameters;

/// AdamW with bias correction and decoupled weight decay.
///
/// Moments are keyed by parameter name and created lazily on the first
/// step a tensor takes part in.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates every `requires_grad` tensor of `params` from its gradient
    /// slot, then clears the slot. Frozen tensors are left alone.
    ///
    /// `w ← w − lr·wd·w − lr·m̂/(√v̂ + ε)`
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, lr: f64, weight_decay: f64) -> Result<()> {
        let mut missing = None;
        params.visit(&mut |name, t| {
            if t.requires_grad() && !t.has_grad() && missing.is_none() {
                missing = Some(name);
            }
        });
        if let Some(name) = missing {
            return Err(MktError::MissingGrad(name));
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, p| {
            if !p.requires_grad() {
                return;
            }
            let g = p.grad().expect("checked above");
            p.zero_grad();
            let (m, v) = moments.entry(name).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w -= lr * weight_decay * *w;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        });
        Ok(())
    }
}
