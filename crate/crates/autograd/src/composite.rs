//! Layers assembled purely from primitive tape operations.

use crate::error::Result;
use crate::graph::{Graph, Var};

/// One LSTM step from primitives: `x: [B,D]`, `h, c: [B,H]`, gate layout
/// input, forget, cell, output. Returns the new `(h, c)`.
///
/// [`Graph::lstm`] fuses the same recurrence over a whole sequence; this
/// version exists so the two can be checked against each other.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, wx: Var, wh: Var, bias: Var) -> Result<(Var, Var)> {
    let hidden = g.shape(h)[1];
    let zx = g.matmul(x, wx)?;
    let zh = g.matmul(h, wh)?;
    let z = g.add(zx, zh)?;
    let z = g.add_broadcast(z, bias)?;
    let i = g.slice(z, 1, 0, hidden)?;
    let f = g.slice(z, 1, hidden, hidden)?;
    let cand = g.slice(z, 1, 2 * hidden, hidden)?;
    let o = g.slice(z, 1, 3 * hidden, hidden)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}
