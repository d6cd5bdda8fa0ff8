//! Channels-first 3D tensor kernels with hand-written backward passes.
//!
//! Every activation is a flat `(channels, z, y, x)` buffer for one sample.
//! The 3^3 convolution lowers to GEMM through im2col; its input gradient is
//! the col2im (adjoint) of `W^T * dOut`.

use super::Scalar;

pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
pub fn voxels(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Rows are `ci * 27 + (dz * 9 + dy * 3 + dx)`, columns are output voxels.
pub fn im2col<T: Scalar>(input: &[T], cin: usize, dims: [usize; 3]) -> Vec<T> {
    let mut cols = Vec::new();
    im2col_into(input, cin, dims, &mut cols);
    cols
}

/// [`im2col`] into a reusable buffer.
pub fn im2col_into<T: Scalar>(input: &[T], cin: usize, dims: [usize; 3], cols: &mut Vec<T>) {
    let n = voxels(dims);
    let [d, h, w] = dims;
    cols.clear();
    cols.resize(27 * cin * n, T::zero());
    for ci in 0..cin {
        let src = &input[ci * n..(ci + 1) * n];
        for k in 0..27 {
            let (dz, dy, dx) = (k / 9, (k / 3) % 3, k % 3);
            let dst = &mut cols[(ci * 27 + k) * n..(ci * 27 + k + 1) * n];
            for z in 0..d {
                let sz = z + dz;
                if sz < 1 || sz > d {
                    continue;
                }
                let sz = sz - 1;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    let s = (sz * h + sy) * w;
                    let o = (z * h + y) * w;
                    match dx {
                        0 => dst[o + 1..o + w].copy_from_slice(&src[s..s + w - 1]),
                        1 => dst[o..o + w].copy_from_slice(&src[s..s + w]),
                        _ => dst[o..o + w - 1].copy_from_slice(&src[s + 1..s + w]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub fn col2im<T: Scalar>(cols: &[T], cin: usize, dims: [usize; 3]) -> Vec<T> {
    let n = voxels(dims);
    let [d, h, w] = dims;
    let mut out = vec![T::zero(); cin * n];
    for ci in 0..cin {
        let dst = &mut out[ci * n..(ci + 1) * n];
        for k in 0..27 {
            let (dz, dy, dx) = (k / 9, (k / 3) % 3, k % 3);
            let src = &cols[(ci * 27 + k) * n..(ci * 27 + k + 1) * n];
            for z in 0..d {
                let sz = z + dz;
                if sz < 1 || sz > d {
                    continue;
                }
                let sz = sz - 1;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    let s = (sz * h + sy) * w;
                    let o = (z * h + y) * w;
                    let (dst_run, src_run) = match dx {
                        0 => (&mut dst[s..s + w - 1], &src[o + 1..o + w]),
                        1 => (&mut dst[s..s + w], &src[o..o + w]),
                        _ => (&mut dst[s + 1..s + w], &src[o..o + w - 1]),
                    };
                    for (a, &b) in dst_run.iter_mut().zip(src_run) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
    out
}

/// Row-streaming 3^3 convolution without the im2col buffer. Each output row
/// accumulates shifted input rows for every output channel while the
/// `cout x width` accumulator stays in L1.
pub fn conv3_direct<T: Scalar>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let [d, h, w] = dims;
    let n = voxels(dims);
    let mut out = vec![T::zero(); cout * n];
    let mut acc = vec![T::zero(); cout * w];
    for z in 0..d {
        for y in 0..h {
            for (co, b) in bias.iter().enumerate() {
                acc[co * w..(co + 1) * w].fill(*b);
            }
            for ci in 0..cin {
                for dz in 0..3 {
                    let sz = z + dz;
                    if sz < 1 || sz > d {
                        continue;
                    }
                    for dy in 0..3 {
                        let sy = y + dy;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let src = &x[ci * n + ((sz - 1) * h + sy - 1) * w..][..w];
                        for dx in 0..3 {
                            let k = dz * 9 + dy * 3 + dx;
                            for co in 0..cout {
                                let wv = weight[(co * cin + ci) * 27 + k];
                                let a = &mut acc[co * w..(co + 1) * w];
                                match dx {
                                    0 => axpy(wv, &src[..w - 1], &mut a[1..]),
                                    1 => axpy(wv, src, a),
                                    _ => axpy(wv, &src[1..], &mut a[..w - 1]),
                                }
                            }
                        }
                    }
                }
            }
            for co in 0..cout {
                out[co * n + (z * h + y) * w..][..w].copy_from_slice(&acc[co * w..(co + 1) * w]);
            }
        }
    }
    out
}

/// Weight gradient of [`conv3_direct`]: `dW[co][ci][k] += sum_v dOut[co][v] * x_k[ci][v]`.
pub fn conv3_direct_weight_grad<T: Scalar>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    d_out: &[T],
    cout: usize,
    d_weight: &mut [T],
) {
    let [d, h, w] = dims;
    let n = voxels(dims);
    for z in 0..d {
        for y in 0..h {
            let orow = (z * h + y) * w;
            for ci in 0..cin {
                for dz in 0..3 {
                    let sz = z + dz;
                    if sz < 1 || sz > d {
                        continue;
                    }
                    for dy in 0..3 {
                        let sy = y + dy;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let src = &x[ci * n + ((sz - 1) * h + sy - 1) * w..][..w];
                        for dx in 0..3 {
                            let k = dz * 9 + dy * 3 + dx;
                            for co in 0..cout {
                                let g = &d_out[co * n + orow..][..w];
                                let v = match dx {
                                    0 => dot(&src[..w - 1], &g[1..]),
                                    1 => dot(src, g),
                                    _ => dot(&src[1..], &g[..w - 1]),
                                };
                                let slot = &mut d_weight[(co * cin + ci) * 27 + k];
                                *slot = *slot + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// 3^3 same-padded convolution: `out = W * im2col(x) + b`.
pub fn conv3_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    // measured crossover: long rows and few output channels favour streaming
    if dims[2] >= 32 && cout <= 8 {
        return conv3_direct(x, cin, dims, weight, bias, cout);
    }
    let n = voxels(dims);
    let mut out = vec![T::zero(); cout * n];
    for (co, b) in bias.iter().enumerate() {
        out[co * n..(co + 1) * n].fill(*b);
    }
    let k = 27 * cin;
    T::with_scratch(0, |cols| {
        im2col_into(x, cin, dims, cols);
        T::gemm(cout, k, n, weight, [k, 1], cols, [n, 1], T::one(), &mut out, [n, 1]);
    });
    out
}

/// `acc[i * k + r] += <rows_a[i], rows_b[r]>` for row-major `m x n` and
/// `k x n` operands. Blocked over `n` so the `m` rows stay cache resident;
/// this shape (tiny `m`, `k`, huge `n`) is where packed GEMM loses.
pub fn accumulate_dots<T: Scalar>(a: &[T], m: usize, b: &[T], k: usize, n: usize, acc: &mut [T]) {
    const BLOCK: usize = 2048;
    let mut v0 = 0;
    while v0 < n {
        let v1 = (v0 + BLOCK).min(n);
        for r in 0..k {
            let br = &b[r * n + v0..r * n + v1];
            for i in 0..m {
                let ar = &a[i * n + v0..i * n + v1];
                acc[i * k + r] = acc[i * k + r] + dot(ar, br);
            }
        }
        v0 = v1;
    }
}

fn weight_grad<T: Scalar>(d_out: &[T], m: usize, cols: &[T], k: usize, n: usize, acc: &mut [T]) {
    if n >= 512 {
        accumulate_dots(d_out, m, cols, k, n, acc);
    } else {
        T::gemm(m, n, k, d_out, [n, 1], cols, [1, n], T::one(), acc, [k, 1]);
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

pub fn conv3_im2col_weight_grad<T: Scalar>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    d_out: &[T],
    cout: usize,
    d_weight: &mut [T],
) {
    let n = voxels(dims);
    let k = 27 * cin;
    T::with_scratch(0, |cols| {
        im2col_into(x, cin, dims, cols);
        // dW (cout x k) += dOut (cout x n) * cols^T (n x k)
        weight_grad(d_out, cout, cols, k, n, d_weight);
    });
}

/// Kernel of the adjoint convolution: `W'[ci][co][k] = W[co][ci][26 - k]`.
fn flipped_weights<T: Scalar>(weight: &[T], cin: usize, cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..27 {
                out[(ci * cout + co) * 27 + k] = weight[(co * cin + ci) * 27 + 26 - k];
            }
        }
    }
    out
}

/// Accumulates into `d_weight` / `d_bias`; returns the input gradient when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3_backward<T: Scalar>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    cout: usize,
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let n = voxels(dims);
    let k = 27 * cin;
    for (co, db) in d_bias.iter_mut().enumerate() {
        *db = *db + d_out[co * n..(co + 1) * n].iter().copied().fold(T::zero(), |a, b| a + b);
    }
    conv3_im2col_weight_grad(x, cin, dims, d_out, cout, d_weight);
    if !need_dx {
        return None;
    }
    if cout <= cin {
        // same-padded stride-1 convolution is adjoint to itself with a flipped kernel
        let zeros = vec![T::zero(); cin];
        return Some(conv3_forward(d_out, cout, dims, &flipped_weights(weight, cin, cout), &zeros, cin));
    }
    // dCols (k x n) = W^T (k x cout) * dOut (cout x n)
    Some(T::with_scratch(1, |d_cols| {
        d_cols.clear();
        d_cols.resize(k * n, T::zero());
        T::gemm(k, cout, n, weight, [1, k], d_out, [n, 1], T::zero(), d_cols, [n, 1]);
        col2im(d_cols, cin, dims)
    }))
}

/// Pointwise (1^3) convolution.
pub fn conv1_forward<T: Scalar>(x: &[T], cin: usize, n: usize, weight: &[T], bias: &[T], cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cout * n];
    for (co, b) in bias.iter().enumerate() {
        out[co * n..(co + 1) * n].fill(*b);
    }
    T::gemm(cout, cin, n, weight, [cin, 1], x, [n, 1], T::one(), &mut out, [n, 1]);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv1_backward<T: Scalar>(
    x: &[T],
    cin: usize,
    n: usize,
    weight: &[T],
    cout: usize,
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    for (co, db) in d_bias.iter_mut().enumerate() {
        *db = *db + d_out[co * n..(co + 1) * n].iter().copied().fold(T::zero(), |a, b| a + b);
    }
    weight_grad(d_out, cout, x, cin, n, d_weight);
    let mut dx = vec![T::zero(); cin * n];
    T::gemm(cin, cout, n, weight, [1, cin], d_out, [n, 1], T::zero(), &mut dx, [n, 1]);
    dx
}

pub fn leaky_relu_inplace<T: Scalar>(x: &mut [T]) {
    let slope = T::of_f64(LEAKY_SLOPE);
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
}

/// Given the activation output `y` (same sign as its input), turn the
/// upstream gradient into the pre-activation gradient in place.
pub fn leaky_relu_backward_inplace<T: Scalar>(y: &[T], grad: &mut [T]) {
    let slope = T::of_f64(LEAKY_SLOPE);
    for (g, &v) in grad.iter_mut().zip(y) {
        if v <= T::zero() {
            *g = *g * slope;
        }
    }
}

/// 2x2x2 average pooling with stride 2. All dims must be even.
pub fn avgpool2_forward<T: Scalar>(x: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let od = [d / 2, h / 2, w / 2];
    let on = voxels(od);
    let n = voxels(dims);
    let eighth = T::of_f64(0.125);
    let mut out = vec![T::zero(); c * on];
    for ch in 0..c {
        let src = &x[ch * n..(ch + 1) * n];
        let dst = &mut out[ch * on..(ch + 1) * on];
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let mut s = T::zero();
                    for k in 0..8 {
                        let (a, b, e) = (k >> 2, (k >> 1) & 1, k & 1);
                        s = s + src[((2 * z + a) * h + 2 * y + b) * w + 2 * xx + e];
                    }
                    dst[(z * od[1] + y) * od[2] + xx] = s * eighth;
                }
            }
        }
    }
    out
}

pub fn avgpool2_backward<T: Scalar>(d_out: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let od = [d / 2, h / 2, w / 2];
    let on = voxels(od);
    let n = voxels(dims);
    let eighth = T::of_f64(0.125);
    let mut dx = vec![T::zero(); c * n];
    for ch in 0..c {
        let src = &d_out[ch * on..(ch + 1) * on];
        let dst = &mut dx[ch * n..(ch + 1) * n];
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    dst[(z * h + y) * w + xx] = src[((z / 2) * od[1] + y / 2) * od[2] + xx / 2] * eighth;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling; `dims` are the low-resolution dims.
pub fn upsample2_forward<T: Scalar>(x: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (uh, uw) = (2 * h, 2 * w);
    let n = voxels(dims);
    let un = 8 * n;
    let mut out = vec![T::zero(); c * un];
    for ch in 0..c {
        let src = &x[ch * n..(ch + 1) * n];
        let dst = &mut out[ch * un..(ch + 1) * un];
        for z in 0..2 * d {
            for y in 0..uh {
                let s = ((z / 2) * h + y / 2) * w;
                let o = (z * uh + y) * uw;
                for xx in 0..uw {
                    dst[o + xx] = src[s + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(d_out: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (uh, uw) = (2 * h, 2 * w);
    let n = voxels(dims);
    let un = 8 * n;
    let mut dx = vec![T::zero(); c * n];
    for ch in 0..c {
        let src = &d_out[ch * un..(ch + 1) * un];
        let dst = &mut dx[ch * n..(ch + 1) * n];
        for z in 0..2 * d {
            for y in 0..uh {
                let s = ((z / 2) * h + y / 2) * w;
                let o = (z * uh + y) * uw;
                for xx in 0..uw {
                    dst[s + xx / 2] = dst[s + xx / 2] + src[o + xx];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // direct 7-loop convolution with zero padding
    fn conv3_loops(x: &[f64], cin: usize, dims: [usize; 3], w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let n = voxels(dims);
        let [d, h, wd] = dims;
        let mut out = vec![0.0; cout * n];
        for co in 0..cout {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for k in 0..27 {
                                let (dz, dy, dx) = (k / 9, (k / 3) % 3, k % 3);
                                let (sz, sy, sx) = (z as isize + dz as isize - 1, y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let v = x[ci * n + (sz as usize * h + sy as usize) * wd + sx as usize];
                                s += v * w[(co * cin + ci) * 27 + k];
                            }
                        }
                        out[co * n + (z * h + y) * wd + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_direct_loops() {
        let dims = [3, 4, 5];
        let (cin, cout) = (2, 3);
        let x = rand_vec(cin * voxels(dims), 1);
        let w = rand_vec(cout * cin * 27, 2);
        let b = rand_vec(cout, 3);
        let fast = conv3_forward(&x, cin, dims, &w, &b, cout);
        let slow = conv3_loops(&x, cin, dims, &w, &b, cout);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3_backward_matches_adjoint_identities() {
        // <conv(x), g> is linear in x and W: its gradients must reproduce it
        for (cin, cout) in [(2usize, 3usize), (3, 2), (1, 1)] {
            let dims = [3, 5, 4];
            let n = voxels(dims);
            let x = rand_vec(cin * n, 10);
            let w = rand_vec(cout * cin * 27, 11);
            let g = rand_vec(cout * n, 12);
            let zeros = vec![0.0; cout];
            let y = conv3_forward(&x, cin, dims, &w, &zeros, cout);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; cout];
            let dx = conv3_backward(&x, cin, dims, &w, cout, &g, &mut dw, &mut db, true).unwrap();
            let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10, "{cin}->{cout}");
            assert!((lhs - via_w).abs() < 1e-10, "{cin}->{cout}");
            let gsum: Vec<f64> = (0..cout).map(|c| g[c * n..(c + 1) * n].iter().sum()).collect();
            for c in 0..cout {
                assert!((db[c] - gsum[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direct_kernels_match_gemm_path() {
        let dims = [2, 3, 33];
        let (cin, cout) = (3, 2);
        let n = voxels(dims);
        let x = rand_vec(cin * n, 20);
        let w = rand_vec(cout * cin * 27, 21);
        let b = rand_vec(cout, 22);
        let g = rand_vec(cout * n, 23);
        let direct = conv3_direct(&x, cin, dims, &w, &b, cout);
        let slow = conv3_loops(&x, cin, dims, &w, &b, cout);
        for (a, e) in direct.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-12);
        }
        let mut dw1 = vec![0.0; w.len()];
        let mut dw2 = vec![0.0; w.len()];
        conv3_direct_weight_grad(&x, cin, dims, &g, cout, &mut dw1);
        conv3_im2col_weight_grad(&x, cin, dims, &g, cout, &mut dw2);
        for (a, e) in dw1.iter().zip(&dw2) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let dims = [4, 3, 5];
        let cin = 2;
        let x = rand_vec(cin * voxels(dims), 4);
        let c = rand_vec(27 * cin * voxels(dims), 5);
        let lhs: f64 = im2col(&x, cin, dims).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, cin, dims)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_pairs() {
        let dims = [4, 2, 6];
        let low = [2, 1, 3];
        let x = rand_vec(2 * voxels(dims), 6);
        let g = rand_vec(2 * voxels(low), 7);
        let lhs: f64 = avgpool2_forward(&x, 2, dims).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(avgpool2_backward(&g, 2, dims)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let u = rand_vec(2 * voxels(low), 8);
        let gu = rand_vec(2 * voxels(dims), 9);
        let lhs: f64 = upsample2_forward(&u, 2, low).iter().zip(&gu).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(upsample2_backward(&gu, 2, low)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
