//! Differentiable building blocks on HWC tensors.
//!
//! Each layer has a forward pass and a backward pass that, given the layer
//! input and the gradient of the loss w.r.t. the layer output, returns the
//! gradient w.r.t. the input and accumulates parameter gradients.

/// Row-major `h x w x c` tensor.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }
}

/// Upper bound on scratch-matrix size (elements) per chunk of rows.
const CHUNK_ELEMS: usize = 1 << 21;

/// `c = a * b + beta * c` for strided `m x k` and `k x n` operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(a.len() > last(m, k, rsa, csa), "gemm: lhs out of bounds");
        assert!(b.len() > last(k, n, rsb, csb), "gemm: rhs out of bounds");
    }
    assert!(c.len() > last(m, n, rsc, csc), "gemm: output out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn rows_per_chunk(row_elems: usize) -> usize {
    (CHUNK_ELEMS / row_elems.max(1)).max(1)
}

/// 3x3 convolution, stride 1, zero padding 1. Weights are `(9 * cin) x cout`
/// indexed `[(ky * 3 + kx) * cin + ci][co]`.
pub(crate) fn conv3_forward(x: &Tensor, w: &[f64], b: &[f64], cout: usize) -> Tensor {
    let (h, wd, cin) = (x.h, x.w, x.c);
    let kdim = 9 * cin;
    let mut out = Tensor::zeros(h, wd, cout);
    let chunk = rows_per_chunk(wd * kdim);
    let mut col = Vec::new();
    for y0 in (0..h).step_by(chunk) {
        let y1 = (y0 + chunk).min(h);
        im2col3(x, y0, y1, &mut col);
        let m = (y1 - y0) * wd;
        let out_rows = &mut out.data[y0 * wd * cout..y1 * wd * cout];
        for px in out_rows.chunks_exact_mut(cout) {
            px.copy_from_slice(b);
        }
        gemm(m, kdim, cout, &col, (kdim, 1), w, (cout, 1), 1.0, out_rows, (cout, 1));
    }
    out
}

fn im2col3(x: &Tensor, y0: usize, y1: usize, col: &mut Vec<f64>) {
    let (h, wd, cin) = (x.h, x.w, x.c);
    let kdim = 9 * cin;
    col.clear();
    col.resize((y1 - y0) * wd * kdim, 0.0);
    for y in y0..y1 {
        for xx in 0..wd {
            let row = &mut col[((y - y0) * wd + xx) * kdim..((y - y0) * wd + xx + 1) * kdim];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let src = (sy as usize * wd + sx as usize) * cin;
                    let dst = (ky * 3 + kx) * cin;
                    row[dst..dst + cin].copy_from_slice(&x.data[src..src + cin]);
                }
            }
        }
    }
}

/// Returns `dx`; accumulates into `dw` and `db`.
pub(crate) fn conv3_backward(x: &Tensor, w: &[f64], cout: usize, dy: &Tensor, dw: &mut [f64], db: &mut [f64]) -> Tensor {
    let (h, wd, cin) = (x.h, x.w, x.c);
    let kdim = 9 * cin;
    let mut dx = Tensor::zeros(h, wd, cin);
    let chunk = rows_per_chunk(wd * kdim);
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for px in dy.data.chunks_exact(cout) {
        for (acc, g) in db.iter_mut().zip(px) {
            *acc += g;
        }
    }
    for y0 in (0..h).step_by(chunk) {
        let y1 = (y0 + chunk).min(h);
        im2col3(x, y0, y1, &mut col);
        let m = (y1 - y0) * wd;
        let dy_rows = &dy.data[y0 * wd * cout..y1 * wd * cout];
        // dW += col^T * dy
        gemm(kdim, m, cout, &col, (1, kdim), dy_rows, (cout, 1), 1.0, dw, (cout, 1));
        // dcol = dy * W^T
        dcol.clear();
        dcol.resize(m * kdim, 0.0);
        gemm(m, cout, kdim, dy_rows, (cout, 1), w, (1, cout), 0.0, &mut dcol, (kdim, 1));
        for y in y0..y1 {
            for xx in 0..wd {
                let row = &dcol[((y - y0) * wd + xx) * kdim..((y - y0) * wd + xx + 1) * kdim];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let dst = (sy as usize * wd + sx as usize) * cin;
                        let src = (ky * 3 + kx) * cin;
                        for (d, s) in dx.data[dst..dst + cin].iter_mut().zip(&row[src..src + cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Transposed convolution, kernel 4, stride 2, padding 1 (doubles both
/// spatial dims). Weights are `cin x (16 * cout)` indexed `[ci][(ky * 4 + kx) * cout + co]`.
pub(crate) fn convt4_forward(x: &Tensor, w: &[f64], b: &[f64], cout: usize) -> Tensor {
    let (h, wd, cin) = (x.h, x.w, x.c);
    let (oh, ow) = (2 * h, 2 * wd);
    let ncol = 16 * cout;
    let mut out = Tensor::zeros(oh, ow, cout);
    for px in out.data.chunks_exact_mut(cout) {
        px.copy_from_slice(b);
    }
    let chunk = rows_per_chunk(wd * ncol);
    let mut contrib = Vec::new();
    for y0 in (0..h).step_by(chunk) {
        let y1 = (y0 + chunk).min(h);
        let m = (y1 - y0) * wd;
        contrib.clear();
        contrib.resize(m * ncol, 0.0);
        gemm(m, cin, ncol, &x.data[y0 * wd * cin..y1 * wd * cin], (cin, 1), w, (ncol, 1), 0.0, &mut contrib, (ncol, 1));
        for iy in y0..y1 {
            for ix in 0..wd {
                let row = &contrib[((iy - y0) * wd + ix) * ncol..((iy - y0) * wd + ix + 1) * ncol];
                for ky in 0..4 {
                    let oy = 2 * iy as isize - 1 + ky as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..4 {
                        let ox = 2 * ix as isize - 1 + kx as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let dst = (oy as usize * ow + ox as usize) * cout;
                        let src = (ky * 4 + kx) * cout;
                        for (d, s) in out.data[dst..dst + cout].iter_mut().zip(&row[src..src + cout]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn convt4_backward(x: &Tensor, w: &[f64], cout: usize, dy: &Tensor, dw: &mut [f64], db: &mut [f64]) -> Tensor {
    let (h, wd, cin) = (x.h, x.w, x.c);
    let (oh, ow) = (dy.h, dy.w);
    let ncol = 16 * cout;
    let mut dx = Tensor::zeros(h, wd, cin);
    for px in dy.data.chunks_exact(cout) {
        for (acc, g) in db.iter_mut().zip(px) {
            *acc += g;
        }
    }
    let chunk = rows_per_chunk(wd * ncol);
    let mut dcontrib = Vec::new();
    for y0 in (0..h).step_by(chunk) {
        let y1 = (y0 + chunk).min(h);
        let m = (y1 - y0) * wd;
        dcontrib.clear();
        dcontrib.resize(m * ncol, 0.0);
        for iy in y0..y1 {
            for ix in 0..wd {
                let row = &mut dcontrib[((iy - y0) * wd + ix) * ncol..((iy - y0) * wd + ix + 1) * ncol];
                for ky in 0..4 {
                    let oy = 2 * iy as isize - 1 + ky as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..4 {
                        let ox = 2 * ix as isize - 1 + kx as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let src = (oy as usize * ow + ox as usize) * cout;
                        let dst = (ky * 4 + kx) * cout;
                        row[dst..dst + cout].copy_from_slice(&dy.data[src..src + cout]);
                    }
                }
            }
        }
        let xs = &x.data[y0 * wd * cin..y1 * wd * cin];
        // dW += x^T * dcontrib
        gemm(cin, m, ncol, xs, (1, cin), &dcontrib, (ncol, 1), 1.0, dw, (ncol, 1));
        // dx = dcontrib * W^T
        gemm(
            m,
            ncol,
            cin,
            &dcontrib,
            (ncol, 1),
            w,
            (1, ncol),
            0.0,
            &mut dx.data[y0 * wd * cin..y1 * wd * cin],
            (cin, 1),
        );
    }
    dx
}

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        h: x.h,
        w: x.w,
        c: x.c,
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

pub(crate) fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        h: x.h,
        w: x.w,
        c: x.c,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
            .collect(),
    }
}

/// Two-tap interpolation table for one axis: output index -> (i0, i1, w0, w1).
#[derive(Clone, Debug)]
pub(crate) struct Taps(Vec<(usize, usize, f64, f64)>);

impl Taps {
    /// Pixel-center aligned resize from `n_in` to `n_out` samples.
    pub fn resize(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        Self::from_positions((0..n_out).map(|u| (u as f64 + 0.5) * scale - 0.5), n_in)
    }

    /// Taps for arbitrary source positions, clamped into `[0, n_in - 1]`.
    pub fn from_positions(positions: impl Iterator<Item = f64>, n_in: usize) -> Self {
        let max = (n_in - 1) as f64;
        Self(
            positions
                .map(|p| {
                    let p = p.clamp(0.0, max);
                    let i0 = p.floor();
                    let t = p - i0;
                    let i0 = i0 as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, 1.0 - t, t)
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

pub(crate) fn bilinear_forward(x: &Tensor, ty: &Taps, tx: &Taps) -> Tensor {
    let c = x.c;
    let mut out = Tensor::zeros(ty.len(), tx.len(), c);
    for (v, &(y0, y1, wy0, wy1)) in ty.0.iter().enumerate() {
        for (u, &(x0, x1, wx0, wx1)) in tx.0.iter().enumerate() {
            let dst = &mut out.data[(v * tx.len() + u) * c..(v * tx.len() + u + 1) * c];
            for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                if wy == 0.0 {
                    continue;
                }
                for (xi, wx) in [(x0, wx0), (x1, wx1)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let src = &x.data[(yi * x.w + xi) * c..(yi * x.w + xi + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wgt * s;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(in_h: usize, in_w: usize, dy: &Tensor, ty: &Taps, tx: &Taps) -> Tensor {
    let c = dy.c;
    let mut dx = Tensor::zeros(in_h, in_w, c);
    for (v, &(y0, y1, wy0, wy1)) in ty.0.iter().enumerate() {
        for (u, &(x0, x1, wx0, wx1)) in tx.0.iter().enumerate() {
            let g = &dy.data[(v * tx.len() + u) * c..(v * tx.len() + u + 1) * c];
            for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                if wy == 0.0 {
                    continue;
                }
                for (xi, wx) in [(x0, wx0), (x1, wx1)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let dst = &mut dx.data[(yi * in_w + xi) * c..(yi * in_w + xi + 1) * c];
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += wgt * s;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0 - 0.5) * scale).collect()
    }

    fn tensor(h: usize, w: usize, c: usize) -> Tensor {
        Tensor { h, w, c, data: seq(h * w * c, 2.0) }
    }

    fn naive_conv3(x: &Tensor, w: &[f64], b: &[f64], cout: usize) -> Tensor {
        let mut out = Tensor::zeros(x.h, x.w, cout);
        for y in 0..x.h {
            for xx in 0..x.w {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            for ci in 0..x.c {
                                acc += x.data[(sy as usize * x.w + sx as usize) * x.c + ci]
                                    * w[((ky * 3 + kx) * x.c + ci) * cout + co];
                            }
                        }
                    }
                    out.data[(y * x.w + xx) * cout + co] = acc;
                }
            }
        }
        out
    }

    fn naive_convt4(x: &Tensor, w: &[f64], b: &[f64], cout: usize) -> Tensor {
        let (oh, ow) = (2 * x.h, 2 * x.w);
        let mut out = Tensor::zeros(oh, ow, cout);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..4 {
                        for kx in 0..4 {
                            // oy = 2 iy - 1 + ky
                            let ny = oy as isize + 1 - ky as isize;
                            let nx = ox as isize + 1 - kx as isize;
                            if ny % 2 != 0 || nx % 2 != 0 {
                                continue;
                            }
                            let (iy, ix) = (ny / 2, nx / 2);
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            for ci in 0..x.c {
                                acc += x.data[(iy as usize * x.w + ix as usize) * x.c + ci]
                                    * w[ci * 16 * cout + (ky * 4 + kx) * cout + co];
                            }
                        }
                    }
                    out.data[(oy * ow + ox) * cout + co] = acc;
                }
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv3_matches_direct_sum() {
        let x = tensor(5, 6, 3);
        let w = seq(27 * 4, 1.0);
        let b = seq(4, 0.3);
        close(&conv3_forward(&x, &w, &b, 4).data, &naive_conv3(&x, &w, &b, 4).data, 1e-12);
    }

    #[test]
    fn convt4_matches_direct_sum() {
        let x = tensor(3, 4, 2);
        let w = seq(2 * 16 * 3, 1.0);
        let b = seq(3, 0.3);
        let got = convt4_forward(&x, &w, &b, 3);
        assert_eq!((got.h, got.w), (6, 8));
        close(&got.data, &naive_convt4(&x, &w, &b, 3).data, 1e-12);
    }

    /// Checks a layer's backward pass against central differences of
    /// `sum(weights * forward(x))`.
    fn check_input_grad(x: &Tensor, forward: impl Fn(&Tensor) -> Tensor, backward: impl Fn(&Tensor) -> Tensor) {
        let y = forward(x);
        let probe = Tensor { h: y.h, w: y.w, c: y.c, data: seq(y.data.len(), 1.0) };
        let dx = backward(&probe);
        let obj = |x: &Tensor| -> f64 { forward(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum() };
        for i in 0..x.data.len() {
            let h = 1e-6;
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            let fd = (obj(&p) - obj(&m)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7, "input {i}: fd {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn conv3_backward_matches_finite_differences() {
        let x = tensor(4, 3, 2);
        let w = seq(18 * 3, 1.0);
        let b = seq(3, 0.1);
        check_input_grad(
            &x,
            |x| conv3_forward(x, &w, &b, 3),
            |dy| {
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; 3];
                conv3_backward(&x, &w, 3, dy, &mut dw, &mut db)
            },
        );
        // weight gradient
        let y = conv3_forward(&x, &w, &b, 3);
        let probe = Tensor { h: y.h, w: y.w, c: 3, data: seq(y.data.len(), 1.0) };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        conv3_backward(&x, &w, 3, &probe, &mut dw, &mut db);
        let obj = |w: &[f64], b: &[f64]| -> f64 {
            conv3_forward(&x, w, b, 3).data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
        };
        for i in 0..w.len() {
            let mut p = w.clone();
            p[i] += 1e-6;
            let mut m = w.clone();
            m[i] -= 1e-6;
            assert!(((obj(&p, &b) - obj(&m, &b)) / 2e-6 - dw[i]).abs() < 1e-7);
        }
        for i in 0..3 {
            let mut p = b.clone();
            p[i] += 1e-6;
            let mut m = b.clone();
            m[i] -= 1e-6;
            assert!(((obj(&w, &p) - obj(&w, &m)) / 2e-6 - db[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn convt4_backward_matches_finite_differences() {
        let x = tensor(3, 2, 2);
        let w = seq(2 * 16 * 2, 1.0);
        let b = seq(2, 0.1);
        check_input_grad(
            &x,
            |x| convt4_forward(x, &w, &b, 2),
            |dy| {
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; 2];
                convt4_backward(&x, &w, 2, dy, &mut dw, &mut db)
            },
        );
        let y = convt4_forward(&x, &w, &b, 2);
        let probe = Tensor { h: y.h, w: y.w, c: 2, data: seq(y.data.len(), 1.0) };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 2];
        convt4_backward(&x, &w, 2, &probe, &mut dw, &mut db);
        let obj = |w: &[f64]| -> f64 {
            convt4_forward(&x, w, &b, 2).data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
        };
        for i in 0..w.len() {
            let mut p = w.clone();
            p[i] += 1e-6;
            let mut m = w.clone();
            m[i] -= 1e-6;
            assert!(((obj(&p) - obj(&m)) / 2e-6 - dw[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let x = tensor(3, 5, 2);
        let ty = Taps::resize(3, 7);
        let tx = Taps::resize(5, 4);
        check_input_grad(&x, |x| bilinear_forward(x, &ty, &tx), |dy| bilinear_backward(3, 5, dy, &ty, &tx));
    }

    #[test]
    fn bilinear_identity_resize_is_exact() {
        let x = tensor(4, 4, 3);
        let t = Taps::resize(4, 4);
        assert_eq!(bilinear_forward(&x, &t, &t), x);
    }

    #[test]
    fn large_inputs_chunk_consistently() {
        // Force several chunks: 9 * cin * w per row with cin = 64 => many rows per chunk still,
        // so use a tall input.
        let x = tensor(300, 40, 24);
        let w = seq(9 * 24 * 2, 0.5);
        let b = vec![0.0; 2];
        let got = conv3_forward(&x, &w, &b, 2);
        let want = naive_conv3(&x, &w, &b, 2);
        close(&got.data, &want.data, 1e-10);
    }
}
