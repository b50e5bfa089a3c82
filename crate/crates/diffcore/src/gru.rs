use crate::{DiffError, Tape, Var};

/// Weights of a gated recurrent cell. Gate blocks are stacked in the column
/// order reset, update, candidate.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    /// `input × 3·hidden`
    pub w_ih: Var,
    /// `hidden × 3·hidden`
    pub w_hh: Var,
    /// `3·hidden`
    pub b_ih: Var,
    /// `3·hidden`
    pub b_hh: Var,
}

/// One step of a gated recurrent unit on a batch of rows.
///
/// `x` is `batch × input`, `h` is `batch × hidden`. Returns the new
/// `batch × hidden` state
/// `h' = (1 − u) ⊙ c + u ⊙ h` with `c = tanh(x·W_c + b_c + r ⊙ (h·U_c + d_c))`.
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, p: &GruParams) -> Result<Var, DiffError> {
    let hidden = tape.shape(p.w_hh)[0];
    let (xs, hs) = (tape.shape(x).to_vec(), tape.shape(h).to_vec());
    let wi = tape.shape(p.w_ih).to_vec();
    let wh = tape.shape(p.w_hh).to_vec();
    let shapes_ok = xs.len() == 2
        && hs.len() == 2
        && xs[0] == hs[0]
        && wi.len() == 2
        && wi[0] == xs[1]
        && wi[1] == 3 * hidden
        && wh[1] == 3 * hidden
        && hs[1] == hidden;
    if !shapes_ok {
        return Err(DiffError::ShapeMismatch { op: "gru_cell", lhs: xs, rhs: hs });
    }
    let gi = tape.matmul(x, p.w_ih)?;
    let gi = tape.add(gi, p.b_ih)?;
    let gh = tape.matmul(h, p.w_hh)?;
    let gh = tape.add(gh, p.b_hh)?;

    let gi_ru = tape.slice(gi, 1, 0, 2 * hidden)?;
    let gh_ru = tape.slice(gh, 1, 0, 2 * hidden)?;
    let ru = tape.add(gi_ru, gh_ru)?;
    let ru = tape.sigmoid(ru)?;
    let r = tape.slice(ru, 1, 0, hidden)?;
    let u = tape.slice(ru, 1, hidden, 2 * hidden)?;

    let gi_c = tape.slice(gi, 1, 2 * hidden, 3 * hidden)?;
    let gh_c = tape.slice(gh, 1, 2 * hidden, 3 * hidden)?;
    let gated = tape.mul(r, gh_c)?;
    let c = tape.add(gi_c, gated)?;
    let c = tape.tanh(c)?;

    // h' = c + u ⊙ (h − c)
    let diff = tape.sub(h, c)?;
    let kept = tape.mul(u, diff)?;
    tape.add(c, kept)
}
