use crate::numerics::kernels;
use crate::{Error, Result};

/// Dense row-major f64 tensor.
///
/// `grad` is populated by [`super::Tape::backward`] for tensors that live on
/// a tape; free-standing tensors used for inference leave it empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Extent of the last axis (0 for rank-0 tensors).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub fn rows(&self) -> usize {
        if self.cols() == 0 {
            0
        } else {
            self.data.len() / self.cols()
        }
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let data = kernels::matmul(&self.data, m, k, &other.data, n);
        Tensor::new(vec![m, n], data)
    }

    /// Softmax over the last axis, stable under constant shifts.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.cols() == 0 {
            return Err(Error::contract("softmax needs a non-empty last axis"));
        }
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax"));
        }
        let mut data = self.data.clone();
        kernels::softmax_rows_inplace(&mut data, self.cols());
        Tensor::new(self.shape.clone(), data)
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        if self.cols() == 0 {
            return Err(Error::contract("log_softmax needs a non-empty last axis"));
        }
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("log_softmax"));
        }
        let mut data = self.data.clone();
        kernels::log_softmax_rows_inplace(&mut data, self.cols());
        Tensor::new(self.shape.clone(), data)
    }
}

/// Result of [`cross_entropy`]: the loss and how many positions contributed.
#[derive(Debug, Clone, Copy)]
pub struct CeLoss {
    pub loss: f64,
    pub unmasked: usize,
}

/// Mean of `-log p(target)` over unmasked rows of a `[n, V]` log-probability
/// matrix. With every position masked the loss is defined as 0 and a warning
/// is logged; callers can detect the case via `unmasked == 0`.
pub fn cross_entropy(log_probs: &Tensor, targets: &[usize], mask: &[bool]) -> Result<CeLoss> {
    let v = log_probs.cols();
    let n = log_probs.rows();
    if targets.len() != n || mask.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![n, v],
            rhs: vec![targets.len(), mask.len()],
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::contract(format!(
            "cross_entropy target {t} out of range for vocabulary {v}"
        )));
    }
    let mut sum = 0.0;
    let mut unmasked = 0usize;
    for (i, (&t, &keep)) in targets.iter().zip(mask).enumerate() {
        if keep {
            sum -= log_probs.data()[i * v + t];
            unmasked += 1;
        }
    }
    if unmasked == 0 {
        log::warn!("cross_entropy: all positions masked, loss defined as 0");
        return Ok(CeLoss {
            loss: 0.0,
            unmasked: 0,
        });
    }
    Ok(CeLoss {
        loss: sum / unmasked as f64,
        unmasked,
    })
}
