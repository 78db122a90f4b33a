//! Row-major dense kernels shared by the graph operator and the network.

/// `out[r, o] += scale * Σ_i x[r, i] * w[i, o]` for `x: rows×cin`, `w: cin×cout`.
pub(crate) fn matmul_acc(x: &[f64], rows: usize, cin: usize, w: &[f64], cout: usize, scale: f64, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * cin);
    debug_assert_eq!(w.len(), cin * cout);
    debug_assert_eq!(out.len(), rows * cout);
    for r in 0..rows {
        let xr = &x[r * cin..(r + 1) * cin];
        let or = &mut out[r * cout..(r + 1) * cout];
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let a = scale * xv;
            let wr = &w[i * cout..(i + 1) * cout];
            for (o, wv) in or.iter_mut().zip(wr) {
                *o += a * wv;
            }
        }
    }
}

/// `gx[r, i] += Σ_o gy[r, o] * w[i, o]` (gradient of `matmul_acc` w.r.t. `x`).
pub(crate) fn matmul_grad_input(gy: &[f64], rows: usize, cout: usize, w: &[f64], cin: usize, gx: &mut [f64]) {
    for r in 0..rows {
        let gr = &gy[r * cout..(r + 1) * cout];
        let xr = &mut gx[r * cin..(r + 1) * cin];
        for (i, g) in xr.iter_mut().enumerate() {
            let wr = &w[i * cout..(i + 1) * cout];
            let mut acc = 0.0;
            for (a, b) in gr.iter().zip(wr) {
                acc += a * b;
            }
            *g += acc;
        }
    }
}

/// `gw[i, o] += Σ_r x[r, i] * gy[r, o]` (gradient of `matmul_acc` w.r.t. `w`).
pub(crate) fn matmul_grad_weight(x: &[f64], rows: usize, cin: usize, gy: &[f64], cout: usize, gw: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * cin..(r + 1) * cin];
        let gr = &gy[r * cout..(r + 1) * cout];
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &mut gw[i * cout..(i + 1) * cout];
            for (w, g) in wr.iter_mut().zip(gr) {
                *w += xv * g;
            }
        }
    }
}
