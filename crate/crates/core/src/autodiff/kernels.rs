//! Dense loops shared by the tape ops. All buffers are row-major.

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let alpha = a[i * k + kk];
            if alpha != 0.0 {
                axpy(alpha, &b[kk * n..(kk + 1) * n], row);
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let alpha = a[i * k + kk];
            if alpha != 0.0 {
                axpy(alpha, br, &mut out[kk * n..(kk + 1) * n]);
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> alloc::vec::Vec<usize> {
    let mut s = alloc::vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into `dst` laid out as the permuted tensor,
/// i.e. `dst` axis `i` is `src` axis `perm[i]`.
pub(crate) fn permute(src: &[f32], shape: &[usize], perm: &[usize], dst: &mut [f32]) {
    let rank = shape.len();
    let src_strides = strides(shape);
    let out_shape: alloc::vec::Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let moved: alloc::vec::Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    if rank == 0 {
        dst[0] = src[0];
        return;
    }
    // The innermost output axis is walked as a strided run.
    let inner = out_shape[rank - 1];
    let inner_stride = moved[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = alloc::vec![0usize; rank - 1];
    let mut base = 0usize;
    for o in 0..outer {
        let d = &mut dst[o * inner..(o + 1) * inner];
        for (j, v) in d.iter_mut().enumerate() {
            *v = src[base + j * inner_stride];
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += moved[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= moved[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> alloc::vec::Vec<usize> {
    let mut inv = alloc::vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
