use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::DenseMatrix;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: DenseMatrix,
    #[serde(skip)]
    grad: Option<DenseMatrix>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: DenseMatrix) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    /// Accumulated gradient (zeros if nothing has been accumulated).
    pub fn grad(&self) -> DenseMatrix {
        self.grad
            .clone()
            .unwrap_or_else(|| DenseMatrix::zeros(self.value.rows(), self.value.cols()))
    }

    pub fn accumulate(&mut self, g: &DenseMatrix) {
        assert_eq!(g.shape(), self.value.shape(), "gradient shape for {}", self.name);
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: DenseMatrix,
    v: DenseMatrix,
}

/// Adam with bias correction (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every param and zeroes their gradients.
    ///
    /// The parameter list must be the same (same order, same shapes) on every
    /// call. A non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    bail!(Numeric, "non-finite gradient in parameter {}", p.name);
                }
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: DenseMatrix::zeros(p.value.rows(), p.value.cols()),
                    v: DenseMatrix::zeros(p.value.rows(), p.value.cols()),
                })
                .collect();
        } else if self.moments.len() != params.len()
            || self.moments.iter().zip(params.iter()).any(|(m, p)| m.m.shape() != p.value.shape())
        {
            bail!(Internal, "parameter set changed between optimizer steps");
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (p, state) in params.iter_mut().zip(self.moments.iter_mut()) {
            let g = p.grad.take().unwrap_or_else(|| {
                DenseMatrix::zeros(p.value.rows(), p.value.cols())
            });
            let values = p.value.data_mut();
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for k in 0..values.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                values[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
