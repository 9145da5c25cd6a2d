use rayon::prelude::*;

use crate::tensor::{Scalar, Tensor};

use super::{DiscreteStep, SsmError};

/// Steps per leaf of the parallel reduction tree.
pub const SCAN_CHUNK: usize = 64;

fn check_h0<T: Scalar>(d: &DiscreteStep<T>, h0: &[T]) -> Result<(), SsmError> {
    if h0.len() != d.channels * d.state {
        return Err(SsmError::Shape(format!(
            "h0 must hold C·P = {} entries, got {}",
            d.channels * d.state,
            h0.len()
        )));
    }
    Ok(())
}

/// Left-to-right evaluation. Returns `(y: [L×C], h_final: [C×P])`.
pub fn scan_sequential<T: Scalar>(
    d: &DiscreteStep<T>,
    h0: &[T],
) -> Result<(Tensor<T>, Tensor<T>), SsmError> {
    check_h0(d, h0)?;
    let (c, p) = (d.channels, d.state);
    let mut h = h0.to_vec();
    let mut y = vec![T::zero(); d.len * c];
    for t in 0..d.len {
        run_step(d, t, &mut h, &mut y[t * c..(t + 1) * c]);
    }
    Ok((Tensor::new(&[d.len, c], y)?, Tensor::new(&[c, p], h)?))
}

#[inline]
fn run_step<T: Scalar>(d: &DiscreteStep<T>, t: usize, h: &mut [T], y_row: &mut [T]) {
    let (c, p) = (d.channels, d.state);
    let base = t * c * p;
    for ch in 0..c {
        let xt = d.x[t * c + ch];
        let mut acc = T::zero();
        for s in 0..p {
            let i = ch * p + s;
            h[i] = d.a_bar[base + i] * h[i] + d.b_bar[base + i] * xt;
            acc += d.c[base + i] * h[i];
        }
        y_row[ch] = acc + d.skip[ch] * xt;
    }
}

/// Chunked scan over the associative composition
/// `(a₂, b₂)∘(a₁, b₁) = (a₂a₁, a₂b₁ + b₂)`.
///
/// Chunks of [`SCAN_CHUNK`] steps are summarized independently, the chunk
/// summaries are combined by a Blelloch up/down sweep over a tree whose
/// shape depends only on `L`, and each chunk is then replayed from its
/// incoming state. Work is spread over the current rayon pool; the result
/// is bitwise identical for every thread count.
pub fn scan_parallel<T: Scalar>(
    d: &DiscreteStep<T>,
    h0: &[T],
) -> Result<(Tensor<T>, Tensor<T>), SsmError> {
    check_h0(d, h0)?;
    let (c, p) = (d.channels, d.state);
    let lanes = c * p;
    let n_chunks = d.len.div_ceil(SCAN_CHUNK);

    // Leaf summaries.
    let summaries: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
        .into_par_iter()
        .map(|j| {
            let mut sa = vec![T::one(); lanes];
            let mut sb = vec![T::zero(); lanes];
            for t in j * SCAN_CHUNK..((j + 1) * SCAN_CHUNK).min(d.len) {
                let base = t * lanes;
                for ch in 0..c {
                    let xt = d.x[t * c + ch];
                    for s in 0..p {
                        let i = ch * p + s;
                        let a = d.a_bar[base + i];
                        sa[i] = a * sa[i];
                        sb[i] = a * sb[i] + d.b_bar[base + i] * xt;
                    }
                }
            }
            (sa, sb)
        })
        .collect();

    let prefixes = exclusive_tree_scan(summaries, lanes);

    let mut y = vec![T::zero(); d.len * c];
    let finals: Vec<Vec<T>> = y
        .par_chunks_mut(SCAN_CHUNK * c)
        .enumerate()
        .map(|(j, y_chunk)| {
            let (pa, pb) = &prefixes[j];
            let mut h: Vec<T> = (0..lanes).map(|i| pa[i] * h0[i] + pb[i]).collect();
            let start = j * SCAN_CHUNK;
            for (lt, y_row) in y_chunk.chunks_mut(c).enumerate() {
                run_step(d, start + lt, &mut h, y_row);
            }
            h
        })
        .collect();
    let h_final = finals.into_iter().last().unwrap_or_else(|| h0.to_vec());
    Ok((Tensor::new(&[d.len, c], y)?, Tensor::new(&[c, p], h_final)?))
}

/// Runs [`scan_parallel`] on a dedicated pool with `threads` workers.
pub fn scan_parallel_threads<T: Scalar>(
    d: &DiscreteStep<T>,
    h0: &[T],
    threads: usize,
) -> Result<(Tensor<T>, Tensor<T>), SsmError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| SsmError::Shape(format!("thread pool: {e}")))?;
    pool.install(|| scan_parallel(d, h0))
}

/// Exclusive prefix over chunk summaries by a balanced up/down sweep padded
/// to a power of two with the identity `(1, 0)`.
fn exclusive_tree_scan<T: Scalar>(leaves: Vec<(Vec<T>, Vec<T>)>, lanes: usize) -> Vec<(Vec<T>, Vec<T>)> {
    let n = leaves.len();
    let size = n.next_power_of_two().max(1);
    let mut nodes = leaves;
    nodes.resize_with(size, || (vec![T::one(); lanes], vec![T::zero(); lanes]));

    let mut stride = 1;
    while stride < size {
        for i in (0..size).step_by(2 * stride) {
            let (l, r) = (i + stride - 1, i + 2 * stride - 1);
            let (left, right) = pair_mut(&mut nodes, l, r);
            // right ← right ∘ left
            for k in 0..lanes {
                right.1[k] = right.0[k] * left.1[k] + right.1[k];
                right.0[k] = right.0[k] * left.0[k];
            }
        }
        stride *= 2;
    }

    nodes[size - 1] = (vec![T::one(); lanes], vec![T::zero(); lanes]);
    stride = size / 2;
    while stride >= 1 {
        for i in (0..size).step_by(2 * stride) {
            let (l, r) = (i + stride - 1, i + 2 * stride - 1);
            let (left, right) = pair_mut(&mut nodes, l, r);
            // left ← parent prefix; right ← left subtree ∘ parent prefix
            let subtree = std::mem::replace(left, right.clone());
            for k in 0..lanes {
                right.1[k] = subtree.0[k] * right.1[k] + subtree.1[k];
                right.0[k] = subtree.0[k] * right.0[k];
            }
        }
        stride /= 2;
    }
    nodes.truncate(n);
    nodes
}

fn pair_mut<X>(v: &mut [X], l: usize, r: usize) -> (&mut X, &mut X) {
    debug_assert!(l < r);
    let (a, b) = v.split_at_mut(r);
    (&mut a[l], &mut b[0])
}
