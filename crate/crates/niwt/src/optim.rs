//! Minibatch Adam over named parameter sets.

use crate::array::Array;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    /// `sizes` gives the element count of each parameter slot, in a fixed
    /// order the caller must preserve across steps.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One update. `params[i]` and `grads[i]` must match the declared sizes.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[&Array]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let pd = p.data_mut();
            let gd = g.data();
            assert_eq!(pd.len(), gd.len());
            for i in 0..pd.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gd[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}
