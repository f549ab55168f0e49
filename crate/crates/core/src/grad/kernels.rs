//! Slice-level forward and backward loops behind the graph primitives.
//!
//! Reductions use a fixed eight-lane accumulation order so results are
//! reproducible run to run while still vectorizing.

use super::Scalar;

const LANES: usize = 8;

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    fold_lanes(acc) + tail
}

#[inline]
pub fn sum<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    let mut tail = S::zero();
    for x in rest {
        tail += *x;
    }
    fold_lanes(acc) + tail
}

#[inline]
fn fold_lanes<S: Scalar>(acc: [S; LANES]) -> S {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// `y += alpha * x`
#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `c[m,n] = a[m,k] @ b[k,n]`
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != S::zero() {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    c
}

/// `da[m,k] = dc[m,n] @ b[k,n]^T`
pub fn matmul_grad_a<S: Scalar>(dc: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut da = vec![S::zero(); m * k];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] = dot(drow, &b[p * n..(p + 1) * n]);
        }
    }
    da
}

/// `db[k,n] = a[m,k]^T @ dc[m,n]`
pub fn matmul_grad_b<S: Scalar>(dc: &[S], a: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut db = vec![S::zero(); k * n];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != S::zero() {
                axpy(av, drow, &mut db[p * n..(p + 1) * n]);
            }
        }
    }
    db
}

/// Kernel-size-1 convolution: `y[o,:] = bias[o] + sum_c w[o,c] * x[c,:]`.
pub fn conv1d<S: Scalar>(w: &[S], bias: &[S], x: &[S], cout: usize, cin: usize, n: usize) -> Vec<S> {
    let mut y = vec![S::zero(); cout * n];
    for o in 0..cout {
        let row = &mut y[o * n..(o + 1) * n];
        row.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..cin {
            axpy(w[o * cin + c], &x[c * n..(c + 1) * n], row);
        }
    }
    y
}

pub fn conv1d_grad_x<S: Scalar>(w: &[S], dy: &[S], cout: usize, cin: usize, n: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); cin * n];
    for o in 0..cout {
        let drow = &dy[o * n..(o + 1) * n];
        for c in 0..cin {
            let wv = w[o * cin + c];
            if wv != S::zero() {
                axpy(wv, drow, &mut dx[c * n..(c + 1) * n]);
            }
        }
    }
    dx
}

pub fn conv1d_grad_w<S: Scalar>(x: &[S], dy: &[S], cout: usize, cin: usize, n: usize) -> Vec<S> {
    let mut dw = vec![S::zero(); cout * cin];
    for o in 0..cout {
        let drow = &dy[o * n..(o + 1) * n];
        for c in 0..cin {
            dw[o * cin + c] = dot(drow, &x[c * n..(c + 1) * n]);
        }
    }
    dw
}

pub fn row_sums<S: Scalar>(dy: &[S], rows: usize, n: usize) -> Vec<S> {
    (0..rows).map(|r| sum(&dy[r * n..(r + 1) * n])).collect()
}

/// Geometry of a direct 3D convolution over a `[C, D, H, W]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dGeom {
    pub fn new(
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 {
            return None;
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * padding;
            if kernel[a] == 0 || kernel[a] > padded {
                return None;
            }
            output[a] = (padded - kernel[a]) / stride + 1;
        }
        Some(Self { cin, cout, input, kernel, output, stride, padding })
    }

    /// Input coordinate hit by output index `o` and kernel tap `k` on axis `a`.
    #[inline]
    fn src(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let p = o * self.stride + k;
        if p < self.padding {
            return None;
        }
        let i = p - self.padding;
        (i < self.input[a]).then_some(i)
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Visits every (output voxel, input voxel) pair for a kernel tap, calling
/// `f(out_index, in_index)` with flat per-channel indices.
#[inline]
fn for_each_tap<F: FnMut(usize, usize)>(g: &Conv3dGeom, kz: usize, ky: usize, kx: usize, mut f: F) {
    let [_, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    for oz in 0..od {
        let Some(iz) = g.src(0, oz, kz) else { continue };
        for oy in 0..oh {
            let Some(iy) = g.src(1, oy, ky) else { continue };
            let obase = (oz * oh + oy) * ow;
            let ibase = (iz * ih + iy) * iw;
            for ox in 0..ow {
                if let Some(ix) = g.src(2, ox, kx) {
                    f(obase + ox, ibase + ix);
                }
            }
        }
    }
}

pub fn conv3d<S: Scalar>(g: &Conv3dGeom, x: &[S], w: &[S], bias: &[S]) -> Vec<S> {
    let (il, ol, kl) = (g.in_len(), g.out_len(), g.k_len());
    let [_, kh, kw] = g.kernel;
    let mut y = vec![S::zero(); g.cout * ol];
    for o in 0..g.cout {
        let yo = &mut y[o * ol..(o + 1) * ol];
        yo.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..g.cin {
            let xc = &x[c * il..(c + 1) * il];
            let wk = &w[(o * g.cin + c) * kl..(o * g.cin + c + 1) * kl];
            for kz in 0..g.kernel[0] {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wk[(kz * kh + ky) * kw + kx];
                        for_each_tap(g, kz, ky, kx, |oi, ii| yo[oi] += wv * xc[ii]);
                    }
                }
            }
        }
    }
    y
}

pub fn conv3d_grad_x<S: Scalar>(g: &Conv3dGeom, w: &[S], dy: &[S]) -> Vec<S> {
    let (il, ol, kl) = (g.in_len(), g.out_len(), g.k_len());
    let [_, kh, kw] = g.kernel;
    let mut dx = vec![S::zero(); g.cin * il];
    for o in 0..g.cout {
        let dyo = &dy[o * ol..(o + 1) * ol];
        for c in 0..g.cin {
            let dxc = &mut dx[c * il..(c + 1) * il];
            let wk = &w[(o * g.cin + c) * kl..(o * g.cin + c + 1) * kl];
            for kz in 0..g.kernel[0] {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wk[(kz * kh + ky) * kw + kx];
                        for_each_tap(g, kz, ky, kx, |oi, ii| dxc[ii] += wv * dyo[oi]);
                    }
                }
            }
        }
    }
    dx
}

pub fn conv3d_grad_w<S: Scalar>(g: &Conv3dGeom, x: &[S], dy: &[S]) -> Vec<S> {
    let (il, ol, kl) = (g.in_len(), g.out_len(), g.k_len());
    let [_, kh, kw] = g.kernel;
    let mut dw = vec![S::zero(); g.cout * g.cin * kl];
    for o in 0..g.cout {
        let dyo = &dy[o * ol..(o + 1) * ol];
        for c in 0..g.cin {
            let xc = &x[c * il..(c + 1) * il];
            let base = (o * g.cin + c) * kl;
            for kz in 0..g.kernel[0] {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = S::zero();
                        for_each_tap(g, kz, ky, kx, |oi, ii| acc += dyo[oi] * xc[ii]);
                        dw[base + (kz * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        }
    }
    dw
}

/// Nearest neighbour in `b` for every point of `a`, with squared distances.
/// Ties resolve to the lowest index.
pub fn nearest<S: Scalar>(a: &[S], b: &[S], dim: usize) -> (Vec<usize>, Vec<S>) {
    let (na, nb) = (a.len() / dim, b.len() / dim);
    let mut idx = vec![0usize; na];
    let mut best = vec![S::infinity(); na];
    for i in 0..na {
        let p = &a[i * dim..(i + 1) * dim];
        let (mut bi, mut bd) = (0usize, S::infinity());
        for j in 0..nb {
            let q = &b[j * dim..(j + 1) * dim];
            let mut d = S::zero();
            for t in 0..dim {
                let e = p[t] - q[t];
                d += e * e;
            }
            if d < bd {
                bd = d;
                bi = j;
            }
        }
        idx[i] = bi;
        best[i] = bd;
    }
    (idx, best)
}

/// Specialised 3D nearest neighbour pass over structure-of-arrays copies;
/// produces the same answer as [`nearest`] with `dim == 3`.
pub fn nearest3<S: Scalar>(a: &[S], b: &[S]) -> (Vec<usize>, Vec<S>) {
    let nb = b.len() / 3;
    let (mut bx, mut by, mut bz) = (Vec::with_capacity(nb), Vec::with_capacity(nb), Vec::with_capacity(nb));
    for q in b.chunks_exact(3) {
        bx.push(q[0]);
        by.push(q[1]);
        bz.push(q[2]);
    }
    let na = a.len() / 3;
    let mut idx = vec![0usize; na];
    let mut best = vec![S::infinity(); na];
    let mut dist = vec![S::zero(); nb];
    for (i, p) in a.chunks_exact(3).enumerate() {
        for j in 0..nb {
            let (ex, ey, ez) = (p[0] - bx[j], p[1] - by[j], p[2] - bz[j]);
            dist[j] = ex * ex + ey * ey + ez * ez;
        }
        let (mut bi, mut bd) = (0usize, S::infinity());
        for (j, &d) in dist.iter().enumerate() {
            if d < bd {
                bd = d;
                bi = j;
            }
        }
        idx[i] = bi;
        best[i] = bd;
    }
    (idx, best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_and_sum_handle_tails() {
        let a: Vec<f64> = (0..19).map(|v| v as f64).collect();
        let b = vec![2.0; 19];
        assert_eq!(dot(&a, &b), 2.0 * 171.0);
        assert_eq!(sum(&a), 171.0);
        assert_eq!(sum::<f64>(&[]), 0.0);
    }

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] @ [5 6; 7 8]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv3d_geometry() {
        let g = Conv3dGeom::new(1, 8, [30; 3], [6; 3], 2, 0).unwrap();
        assert_eq!(g.output, [13; 3]);
        let g2 = Conv3dGeom::new(8, 16, g.output, [5; 3], 2, 0).unwrap();
        assert_eq!(g2.output, [5; 3]);
        assert!(Conv3dGeom::new(1, 1, [2; 3], [3; 3], 1, 0).is_none());
        assert_eq!(Conv3dGeom::new(1, 1, [2; 3], [3; 3], 1, 1).unwrap().output, [2; 3]);
    }

    #[test]
    fn nearest_variants_agree() {
        let a: Vec<f64> = (0..30).map(|v| ((v * 7919) % 17) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..24).map(|v| ((v * 104729) % 13) as f64 * 0.13).collect();
        assert_eq!(nearest(&a, &b, 3), nearest3(&a, &b));
    }
}
