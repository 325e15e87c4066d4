use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Scaled dot-product self-attention across axis 1 of `x [G, N, A]`.
///
/// `mask [G*N]` marks the tokens that exist; padded tokens neither attend nor
/// get attended to (their outputs are zero). The projections `wq`, `wk`,
/// `wv`, `wo` are `[A, A]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    heads: usize,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 || mask.len() != s[0] * s[1] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: s,
            rhs: vec![heads, mask.len()],
        });
    }
    let (g, n, a) = (s[0], s[1], s[2]);
    let dh = a / heads;
    let split = |tape: &mut Tape, w: Var| -> Result<Var> {
        let p = tape.matmul(x, w)?;
        let p = tape.reshape(p, &[g, n, heads, dh])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        tape.reshape(p, &[g * heads, n, dh])
    };
    let q = split(tape, wq)?;
    let k = split(tape, wk)?;
    let v = split(tape, wv)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let mut key_mask = Vec::with_capacity(g * heads * n * n);
    for gi in 0..g {
        let row = &mask[gi * n..(gi + 1) * n];
        for _ in 0..heads {
            for &qi in row {
                key_mask.extend(row.iter().map(|&kj| qi && kj));
            }
        }
    }
    let attn = tape.masked_softmax(scores, &key_mask)?;
    let out = tape.bmm(attn, v, false)?;
    let out = tape.reshape(out, &[g, heads, n, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[g, n, a])?;
    tape.matmul(out, wo)
}
