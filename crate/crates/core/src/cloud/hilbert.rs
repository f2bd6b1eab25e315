//! 3D Hilbert curve indexing.
//!
//! Uses Skilling's transposed-index construction ("Programming the Hilbert
//! curve", AIP Conf. Proc. 707, 2004): coordinates are rotated/reflected in
//! place, Gray-coded, and the bits interleaved with `x` most significant.

use crate::error::{invalid, Result};

const DIMS: usize = 3;

/// Index of `cell` along the order-`order` curve, in `[0, 2^(3·order))`.
pub fn hilbert_index(cell: [u32; 3], order: u32) -> Result<u64> {
    if order == 0 || order > 21 {
        return Err(invalid(format!(
            "hilbert order must be in 1..=21, got {order}"
        )));
    }
    let side = 1u32 << order;
    if let Some(c) = cell.iter().find(|&&c| c >= side) {
        return Err(invalid(format!("coordinate {c} outside [0, {side})")));
    }
    let mut x = cell;
    axes_to_transpose(&mut x, order);
    let mut index = 0u64;
    for bit in (0..order).rev() {
        for xi in x {
            index = (index << 1) | u64::from((xi >> bit) & 1);
        }
    }
    Ok(index)
}

/// Inverse of [`hilbert_index`].
pub fn hilbert_cell(index: u64, order: u32) -> Result<[u32; 3]> {
    if order == 0 || order > 21 {
        return Err(invalid(format!(
            "hilbert order must be in 1..=21, got {order}"
        )));
    }
    if index >> (DIMS as u32 * order) != 0 {
        return Err(invalid(format!(
            "index {index} outside order-{order} curve"
        )));
    }
    let mut x = [0u32; 3];
    let mut pos = DIMS as u32 * order;
    for bit in (0..order).rev() {
        for xi in x.iter_mut() {
            pos -= 1;
            *xi |= (((index >> pos) & 1) as u32) << bit;
        }
    }
    transpose_to_axes(&mut x, order);
    Ok(x)
}

fn axes_to_transpose(x: &mut [u32; 3], order: u32) {
    let m = 1u32 << (order - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..DIMS {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..DIMS {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[DIMS - 1] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for xi in x.iter_mut() {
        *xi ^= t;
    }
}

fn transpose_to_axes(x: &mut [u32; 3], order: u32) {
    let n = 2u32 << (order - 1);
    let t = x[DIMS - 1] >> 1;
    for i in (1..DIMS).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2;
    while q != n {
        let p = q - 1;
        for i in (0..DIMS).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
}
