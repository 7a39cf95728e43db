use super::tensor::{Real, Tensor};
use super::NnError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment accumulators and step counter for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update with rate `lr / (1 + decay * t)`, where `t`
    /// is the step count after incrementing.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
        decay: f64,
    ) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch(format!(
                "adam holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "adam shapes {:?} / {:?} / {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.t += 1;
        let t = self.t as f64;
        let lr_t = lr / (1.0 + decay * t);
        let c1 = 1.0 - BETA1.powf(t);
        let c2 = 1.0 - BETA2.powf(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gv.to_f64();
                let mf = BETA1 * mv.to_f64() + (1.0 - BETA1) * gf;
                let vf = BETA2 * vv.to_f64() + (1.0 - BETA2) * gf * gf;
                *mv = T::from_f64(mf);
                *vv = T::from_f64(vf);
                let upd = lr_t * (mf / c1) / ((vf / c2).sqrt() + EPSILON);
                *pv = T::from_f64(pv.to_f64() - upd);
            }
        }
        Ok(())
    }
}
