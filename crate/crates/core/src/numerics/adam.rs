use crate::numerics::Tensor;
use crate::{Error, Result};

/// Adam optimizer with bias correction. Moment buffers are allocated on the
/// first step and must keep matching the parameter shapes afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over a fixed parameter ordering. `grads[i]` may be `None`
    /// (parameter untouched by the last loss); its moments still decay.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [&mut Tensor],
        grads: &[Option<&[f64]>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "adam_step got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "adam state holds {} tensors but step got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if m.len() != param.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            if let Some(g) = grad {
                if g.len() != param.numel() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        lhs: param.shape().to_vec(),
                        rhs: vec![g.len()],
                    });
                }
            }
            let zero = [];
            let g: &[f64] = grad.unwrap_or(&zero);
            let data = param.data_mut();
            for i in 0..data.len() {
                let gi = g.get(i).copied().unwrap_or(0.0);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers and step count, for checkpointing.
    pub fn state(&self) -> (&[Vec<f64>], &[Vec<f64>], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
