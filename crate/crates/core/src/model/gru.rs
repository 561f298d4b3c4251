use super::{Init, Layout};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, Real, Var};

/// Gated recurrent unit with gates stacked as `[update, reset, candidate]`.
#[derive(Clone, Debug)]
pub struct GruParams {
    /// Input weights `[3H, in]`.
    pub w_x: ParamId,
    /// Recurrent weights for update and reset gates `[2H, H]`.
    pub u_zr: ParamId,
    /// Recurrent weights of the candidate `[H, H]`.
    pub u_h: ParamId,
    /// Bias `[3H]`.
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruParams {
    pub(crate) fn register(
        layout: &mut Layout,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        GruParams {
            w_x: layout.add(
                format!("{prefix}.w_x"),
                &[3 * hidden, input_dim],
                Init::Glorot { blocks: 3 },
            ),
            u_zr: layout.add(
                format!("{prefix}.u_zr"),
                &[2 * hidden, hidden],
                Init::Glorot { blocks: 2 },
            ),
            u_h: layout.matrix(format!("{prefix}.u_h"), hidden, hidden),
            b: layout.bias(format!("{prefix}.b"), 3 * hidden),
            input_dim,
            hidden,
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_x, self.u_zr, self.u_h, self.b]
    }

    /// Input projection `x·W_xᵀ + b` for one or many rows.
    pub fn project_input<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.w_x);
        let b = g.param(self.b);
        let xp = g.linear(x, w)?;
        g.add_row(xp, b)
    }
}

/// One recurrence given an already projected input `xp [k, 3H]`:
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)      r = σ(W_r x + U_r h + b_r)
/// h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
pub fn gru_step<F: Real>(g: &mut Graph<'_, F>, p: &GruParams, xp: Var, h_prev: Var) -> Result<Var> {
    let hd = p.hidden;
    if g.shape(xp).last() != Some(&(3 * hd)) || g.shape(h_prev).last() != Some(&hd) {
        return Err(Error::dim("gru_step", g.shape(xp), g.shape(h_prev)));
    }
    let u_zr = g.param(p.u_zr);
    let u_h = g.param(p.u_h);
    let x_zr = g.slice_cols(xp, 0, 2 * hd)?;
    let x_h = g.slice_cols(xp, 2 * hd, hd)?;
    let h_zr = g.linear(h_prev, u_zr)?;
    let pre = g.add(x_zr, h_zr)?;
    let zr = g.sigmoid(pre);
    let z = g.slice_cols(zr, 0, hd)?;
    let r = g.slice_cols(zr, hd, hd)?;
    let rh = g.mul(r, h_prev)?;
    let rh_u = g.linear(rh, u_h)?;
    let cand_pre = g.add(x_h, rh_u)?;
    let cand = g.tanh(cand_pre);
    let delta = g.sub(cand, h_prev)?;
    let step = g.mul(z, delta)?;
    g.add(h_prev, step)
}

/// Full cell: projects `x` and applies one recurrence.
pub fn gru_cell<F: Real>(g: &mut Graph<'_, F>, p: &GruParams, h_prev: Var, x: Var) -> Result<Var> {
    let (_, in_dim) = crate::tensor::rows_cols(g.shape(x))?;
    if in_dim != p.input_dim {
        return Err(Error::dim("gru_cell", g.shape(x), &[p.input_dim]));
    }
    let xp = p.project_input(g, x)?;
    gru_step(g, p, xp, h_prev)
}
