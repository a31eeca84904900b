use crate::diffcore::{DiffError, ParamId, ParamStore, Tape, Tensor, Var};

use super::FlowError;

/// Per-dimension affine layer `y = x * exp(log_scale) + offset` with
/// data-dependent initialization.
#[derive(Debug, Clone)]
pub struct ActNormLayer {
    pub(crate) log_scale: ParamId,
    pub(crate) offset: ParamId,
    pub(crate) initialized: bool,
}

impl ActNormLayer {
    pub(crate) fn build(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self, DiffError> {
        Ok(Self {
            log_scale: store.add(format!("{prefix}.actnorm.log_scale"), Tensor::zeros(1, dim))?,
            offset: store.add(format!("{prefix}.actnorm.offset"), Tensor::zeros(1, dim))?,
            initialized: false,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn log_scale(&self) -> ParamId {
        self.log_scale
    }

    pub fn offset(&self) -> ParamId {
        self.offset
    }

    /// Sets offset and log-scale so `batch` maps to zero mean and unit
    /// (population) variance in every dimension.
    pub(crate) fn initialize(&mut self, store: &mut ParamStore, batch: &Tensor) -> Result<(), FlowError> {
        let (n, d) = batch.shape();
        if n < 2 {
            return Err(FlowError::DegenerateBatch("ActNorm initialization needs at least 2 points".into()));
        }
        let mut log_scale = Vec::with_capacity(d);
        let mut offset = Vec::with_capacity(d);
        for j in 0..d {
            let mean = (0..n).map(|i| batch.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (batch.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            if !(var > 0.0) {
                return Err(FlowError::DegenerateBatch(format!("zero variance in dimension {j}")));
            }
            let std = var.sqrt();
            log_scale.push(-std.ln());
            offset.push(-mean / std);
        }
        store.set_value(self.log_scale, Tensor::row_vector(log_scale))?;
        store.set_value(self.offset, Tensor::row_vector(offset))?;
        self.initialized = true;
        Ok(())
    }

    pub(crate) fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var, DiffError> {
        let scale = tape.exp(bound[self.log_scale.index()])?;
        let scaled = tape.mul_row(x, scale)?;
        tape.add_row(scaled, bound[self.offset.index()])
    }

    pub(crate) fn inverse(&self, tape: &mut Tape, bound: &[Var], y: Var) -> Result<Var, DiffError> {
        let neg_offset = tape.neg(bound[self.offset.index()])?;
        let centered = tape.add_row(y, neg_offset)?;
        let neg_log = tape.neg(bound[self.log_scale.index()])?;
        let inv_scale = tape.exp(neg_log)?;
        tape.mul_row(centered, inv_scale)
    }

    /// `exp(2 log_scale)`, the squared diagonal of this layer's Jacobian.
    pub(crate) fn scale_sq(&self, tape: &mut Tape, bound: &[Var]) -> Result<Var, DiffError> {
        let twice = tape.scale(bound[self.log_scale.index()], 2.0)?;
        tape.exp(twice)
    }
}
