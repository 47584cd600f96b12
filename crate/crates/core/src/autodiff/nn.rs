use super::{AutodiffError, Graph, Real, Var};

/// One LSTM step with gates packed as `[input, forget, cell, output]`.
///
/// `w_ih` is `[4H, in]`, `w_hh` is `[4H, H]`, `b` is `[4H]`; `h` and `c`
/// are `[1, H]` (or `[rows, H]` for a batch of independent cells).
/// Returns the new `(h, c)`.
pub fn lstm_cell<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
) -> Result<(Var, Var), AutodiffError> {
    let zx = g.affine(x, w_ih, Some(b))?;
    lstm_step(g, zx, h, c, w_hh)
}

/// The recurrent half of [`lstm_cell`] for an input projection `zx`
/// computed ahead of time.
pub(crate) fn lstm_step<T: Real>(
    g: &mut Graph<'_, T>,
    zx: Var,
    h: Var,
    c: Var,
    w_hh: Var,
) -> Result<(Var, Var), AutodiffError> {
    let hidden = g.shape(h).last().copied().unwrap_or(1);
    let zh = g.affine(h, w_hh, None)?;
    let z = g.add(zx, zh)?;
    let zi = g.slice_cols(z, 0, hidden)?;
    let zf = g.slice_cols(z, hidden, hidden)?;
    let zg = g.slice_cols(z, 2 * hidden, hidden)?;
    let zo = g.slice_cols(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}
