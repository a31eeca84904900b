use rand::Rng;

use crate::diffcore::{DiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

/// Fully connected network with `tanh` hidden layers and a linear output.
///
/// Weights are stored `fan_in x fan_out` and applied as `x W + b`.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    widths: Vec<usize>,
}

/// Values kept from a forward pass for input-Jacobian products.
#[derive(Debug, Clone)]
pub(crate) struct MlpTrace {
    pub output: Var,
    hidden: Vec<Var>,
}

impl Mlp {
    /// Hidden layers get Glorot-uniform weights; the output layer starts at
    /// zero so the network is identically zero at initialization.
    pub(crate) fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if widths.len() < 3 {
            return Err(DiffError::InvalidArgument("an MLP needs at least one hidden layer"));
        }
        let last = widths.len() - 2;
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = if l == last {
                Tensor::zeros(fan_in, fan_out)
            } else {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Tensor::new(fan_in, fan_out, data)?
            };
            let weight = store.add(format!("{prefix}.layer{l}.weight"), weight)?;
            let bias = store.add(format!("{prefix}.layer{l}.bias"), Tensor::zeros(1, fan_out))?;
            layers.push(Dense { weight, bias });
        }
        Ok(Self {
            layers,
            widths: widths.to_vec(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|d| [d.weight, d.bias])
    }

    /// Output-layer bias, handy for building constant networks.
    pub fn output_bias(&self) -> ParamId {
        self.layers.last().expect("non-empty").bias
    }

    pub(crate) fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<MlpTrace, DiffError> {
        let mut h = x;
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        for (l, d) in self.layers.iter().enumerate() {
            let z = tape.affine(h, bound[d.weight.index()], bound[d.bias.index()])?;
            if l + 1 < self.layers.len() {
                h = tape.tanh(z)?;
                hidden.push(h);
            } else {
                h = z;
            }
        }
        Ok(MlpTrace { output: h, hidden })
    }

    /// `1 - h^2` for each hidden activation.
    pub(crate) fn slopes(&self, tape: &mut Tape, trace: &MlpTrace) -> Result<Vec<Var>, DiffError> {
        trace
            .hidden
            .iter()
            .map(|&h| {
                let h2 = tape.square(h)?;
                tape.scale_shift(h2, -1.0, 1.0)
            })
            .collect()
    }

    /// Derivative of every output w.r.t. input coordinate `k`, per point
    /// (`N x out`): `e_k W1 diag(s1) W2 diag(s2) ... W_last`.
    pub(crate) fn input_tangent(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        slopes: &[Var],
        k: usize,
    ) -> Result<Var, DiffError> {
        let first = self.layers[0];
        let w1 = bound[first.weight.index()];
        let h1 = self.widths[1];
        let row = tape.gather(w1, (k * h1..(k + 1) * h1).collect(), 1, h1)?;
        let mut t = tape.mul_row(slopes[0], row)?;
        for (l, d) in self.layers.iter().enumerate().skip(1) {
            let w = bound[d.weight.index()];
            t = tape.matmul(t, w)?;
            if l + 1 < self.layers.len() {
                t = tape.mul(t, slopes[l])?;
            }
        }
        Ok(t)
    }
}
