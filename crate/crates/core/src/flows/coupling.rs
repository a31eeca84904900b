use rand::Rng;

use crate::diffcore::{DiffError, ParamStore, Tape, Var};

use super::mlp::Mlp;

/// Affine coupling: the "id" coordinates pass through, the "ch" coordinates
/// become `(x_ch + D(x_id)) * exp(E(x_id))`.
///
/// `E` is the raw scale network output squashed by `c * tanh(. / c)` with
/// clamp `c`; the squashed value is what forward, inverse and the Jacobian
/// all use.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    id_idx: Vec<usize>,
    ch_idx: Vec<usize>,
    /// Column order that undoes `[id_idx, ch_idx]` concatenation.
    restore: Vec<usize>,
    offset_net: Mlp,
    scale_net: Mlp,
    clamp: f64,
}

/// Intermediate values of a coupling forward pass.
struct Pieces {
    shifted: Var,
    exp_e: Var,
    squashed: Var,
    offset_trace: super::mlp::MlpTrace,
    scale_trace: super::mlp::MlpTrace,
}

impl CouplingLayer {
    /// `mask[i] == true` marks coordinate `i` as changed.
    pub(crate) fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        mask: Vec<bool>,
        hidden: &[usize],
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let id_idx: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        let ch_idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if id_idx.is_empty() || ch_idx.is_empty() {
            return Err(DiffError::InvalidArgument("coupling mask needs both partitions non-empty"));
        }
        let mut restore = vec![0; mask.len()];
        for (pos, &c) in id_idx.iter().chain(&ch_idx).enumerate() {
            restore[c] = pos;
        }
        let mut widths = vec![id_idx.len()];
        widths.extend_from_slice(hidden);
        widths.push(ch_idx.len());
        let offset_net = Mlp::build(store, &format!("{prefix}.offset_net"), &widths, rng)?;
        let scale_net = Mlp::build(store, &format!("{prefix}.scale_net"), &widths, rng)?;
        Ok(Self {
            mask,
            id_idx,
            ch_idx,
            restore,
            offset_net,
            scale_net,
            clamp,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn id_indices(&self) -> &[usize] {
        &self.id_idx
    }

    pub fn ch_indices(&self) -> &[usize] {
        &self.ch_idx
    }

    /// Network implementing the offset `D`.
    pub fn offset_net(&self) -> &Mlp {
        &self.offset_net
    }

    /// Network implementing the raw log-scale before squashing.
    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    /// Raw network output that squashes to `target`; inverse of the clamp.
    pub fn raw_scale_for(&self, target: f64) -> f64 {
        self.clamp * (target / self.clamp).atanh()
    }

    fn conditioners(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        x_id: Var,
    ) -> Result<(super::mlp::MlpTrace, super::mlp::MlpTrace, Var, Var), DiffError> {
        let offset_trace = self.offset_net.forward(tape, bound, x_id)?;
        let scale_trace = self.scale_net.forward(tape, bound, x_id)?;
        let scaled = tape.scale(scale_trace.output, 1.0 / self.clamp)?;
        let squashed = tape.tanh(scaled)?;
        let e = tape.scale(squashed, self.clamp)?;
        Ok((offset_trace, scale_trace, squashed, e))
    }

    fn pieces(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<(Var, Pieces), DiffError> {
        let x_id = tape.select(x, &self.id_idx)?;
        let x_ch = tape.select(x, &self.ch_idx)?;
        let (offset_trace, scale_trace, squashed, e) = self.conditioners(tape, bound, x_id)?;
        let exp_e = tape.exp(e)?;
        let shifted = tape.add(x_ch, offset_trace.output)?;
        let y_ch = tape.mul(shifted, exp_e)?;
        let joined = tape.concat(&[x_id, y_ch])?;
        let y = tape.select(joined, &self.restore)?;
        Ok((
            y,
            Pieces {
                shifted,
                exp_e,
                squashed,
                offset_trace,
                scale_trace,
            },
        ))
    }

    pub(crate) fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var, DiffError> {
        Ok(self.pieces(tape, bound, x)?.0)
    }

    /// Forward pass plus per-point `||J||_F^2` of the map `x -> y`, with the
    /// Jacobian columns optionally weighted by a preceding diagonal layer
    /// whose squared scales are `input_scale_sq` (`1 x d`).
    pub(crate) fn forward_with_energy(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        x: Var,
        input_scale_sq: Option<Var>,
    ) -> Result<(Var, Var), DiffError> {
        let (y, p) = self.pieces(tape, bound, x)?;
        let d_slopes = self.offset_net.slopes(tape, &p.offset_trace)?;
        let e_slopes = self.scale_net.slopes(tape, &p.scale_trace)?;
        let sq = tape.square(p.squashed)?;
        let squash_slope = tape.scale_shift(sq, -1.0, 1.0)?;

        // Column k of the lower-left block A = diag(e^E) J_D + diag((x_ch + D) e^E) J_E.
        let mut col_norms = Vec::with_capacity(self.id_idx.len());
        for k in 0..self.id_idx.len() {
            let dd = self.offset_net.input_tangent(tape, bound, &d_slopes, k)?;
            let de_raw = self.scale_net.input_tangent(tape, bound, &e_slopes, k)?;
            let de = tape.mul(de_raw, squash_slope)?;
            let via_scale = tape.mul(p.shifted, de)?;
            let inner = tape.add(dd, via_scale)?;
            let a_k = tape.mul(p.exp_e, inner)?;
            let a_sq = tape.square(a_k)?;
            col_norms.push(tape.row_sum(a_sq)?);
        }
        let cols = tape.concat(&col_norms)?;
        let id_cols = tape.scale_shift(cols, 1.0, 1.0)?;
        let ch_diag = tape.square(p.exp_e)?;
        let (id_part, ch_part) = match input_scale_sq {
            Some(s2) => {
                let s_id = tape.select(s2, &self.id_idx)?;
                let s_ch = tape.select(s2, &self.ch_idx)?;
                let a = tape.mul_row(id_cols, s_id)?;
                let b = tape.mul_row(ch_diag, s_ch)?;
                (a, b)
            }
            None => (id_cols, ch_diag),
        };
        let id_sum = tape.row_sum(id_part)?;
        let ch_sum = tape.row_sum(ch_part)?;
        let energy = tape.add(id_sum, ch_sum)?;
        Ok((y, energy))
    }

    pub(crate) fn inverse(&self, tape: &mut Tape, bound: &[Var], y: Var) -> Result<Var, DiffError> {
        let y_id = tape.select(y, &self.id_idx)?;
        let y_ch = tape.select(y, &self.ch_idx)?;
        let (offset_trace, _, _, e) = self.conditioners(tape, bound, y_id)?;
        let neg_e = tape.neg(e)?;
        let inv_scale = tape.exp(neg_e)?;
        let unscaled = tape.mul(y_ch, inv_scale)?;
        let x_ch = tape.sub(unscaled, offset_trace.output)?;
        let joined = tape.concat(&[y_id, x_ch])?;
        tape.select(joined, &self.restore)
    }
}
