use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{ParamStore, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Moments are created lazily, so parameters that
/// never receive a gradient are never touched.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adam {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads {
            let p = params
                .params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidInput(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(md.iter_mut()).zip(vd.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                *pi -= lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        s.params.insert("w".into(), Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
        s.params.insert("unused".into(), Tensor::full(&[2], 3.0));
        s
    }

    fn grads(values: &[f64]) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(&[values.len()], values.to_vec()).unwrap())])
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[1.0, -2.0]);
        Adam::new().apply(&mut p, &grads(&[0.5, -4.0]), 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn zero_rate_keeps_bits() {
        let mut p = store(&[0.1, 1e-300]);
        let before = p.clone();
        let mut opt = Adam::new();
        for _ in 0..3 {
            opt.apply(&mut p, &grads(&[1e3, -1e-3]), 0.0).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn parameters_without_gradient_are_untouched() {
        let mut p = store(&[1.0]);
        let mut opt = Adam::new();
        opt.apply(&mut p, &grads(&[1.0]), 0.5).unwrap();
        assert_eq!(p.get("unused").unwrap().data(), &[3.0, 3.0]);
        assert!(!opt.m.contains_key("unused"));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = store(&[5.0]);
        let mut opt = Adam::new();
        for _ in 0..2000 {
            let w = p.get("w").unwrap().data()[0];
            opt.apply(&mut p, &grads(&[2.0 * (w - 1.5)]), 0.05).unwrap();
        }
        assert!((p.get("w").unwrap().data()[0] - 1.5).abs() < 1e-3);
    }
}
