//! Shape arithmetic shared by the tensor ops: row-major strides and
//! right-aligned (numpy-style) broadcasting.

use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Broadcast two shapes right-aligned; dimensions must match or be 1.
pub fn broadcast_shapes(context: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = dim_right_aligned(a, rank, d);
        let db = dim_right_aligned(b, rank, d);
        out[d] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Dimension {
                context,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn dim_right_aligned(shape: &[usize], rank: usize, d: usize) -> usize {
    let pad = rank - shape.len();
    if d < pad {
        1
    } else {
        shape[d - pad]
    }
}

/// Per-output-dimension strides into an operand being broadcast to
/// `out_shape`: 0 where the operand dimension is 1 (or missing).
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    let pad = rank - shape.len();
    (0..rank)
        .map(|d| {
            if d < pad || shape[d - pad] == 1 {
                0
            } else {
                own[d - pad]
            }
        })
        .collect()
}

/// Walks every coordinate of `out_shape`, calling `f(out_idx, a_off, b_off)`
/// with the flat offsets into two operands broadcast to that shape.
pub fn zip_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total = numel(out_shape);
    if rank == 0 {
        if total > 0 {
            f(0, 0, 0);
        }
        return;
    }
    let mut coords = vec![0usize; rank];
    let mut a_off = 0usize;
    let mut b_off = 0usize;
    for out_idx in 0..total {
        f(out_idx, a_off, b_off);
        for d in (0..rank).rev() {
            coords[d] += 1;
            a_off += a_strides[d];
            b_off += b_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            a_off -= a_strides[d] * out_shape[d];
            b_off -= b_strides[d] * out_shape[d];
        }
    }
}

/// Flat offsets of each batch coordinate of `out_batch` within an operand
/// whose leading (batch) dims are `op_batch`, broadcast right-aligned.
/// `block` is the size of one matrix within the operand.
pub fn batch_offsets(out_batch: &[usize], op_batch: &[usize], block: usize) -> Vec<usize> {
    let mut offs = Vec::with_capacity(numel(out_batch).max(1));
    let bstr: Vec<usize> = broadcast_strides(op_batch, out_batch)
        .iter()
        .map(|s| s * block)
        .collect();
    let rank = out_batch.len();
    if rank == 0 {
        return vec![0];
    }
    let mut coords = vec![0usize; rank];
    let mut off = 0usize;
    let total = numel(out_batch);
    for _ in 0..total {
        offs.push(off);
        for d in (0..rank).rev() {
            coords[d] += 1;
            off += bstr[d];
            if coords[d] < out_batch[d] {
                break;
            }
            coords[d] = 0;
            off -= bstr[d] * out_batch[d];
        }
    }
    offs
}
