//! Forward/backward kernels on row-major `[rows, cols]` matrices. Spatial
//! tensors are stored channels-last: row `(z * h + y) * w + x`, one column per
//! channel.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::volume::Shape3;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &ArrayView2<'_, f64>, gamma: &ArrayView2<'_, f64>, beta: &ArrayView2<'_, f64>, eps: f64) -> (Array2<f64>, LayerNormCache) {
    let c = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / c;
        let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / c;
        let is = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv_std.push(is);
    }
    let y = &xhat * gamma + beta;
    (y, LayerNormCache { xhat, inv_std })
}

/// Linear interpolation taps for resizing `n_in -> n_out` with half-voxel
/// aligned centres: `(i0, i1, w1)`, value = `(1-w1) v[i0] + w1 v[i1]`.
pub fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn interp_axis(data: &[f64], dims: [usize; 4], axis: usize, n_out: usize, transpose: bool, n_in_t: usize) -> (Vec<f64>, [usize; 4]) {
    // forward: dims[axis] = n_in, output has n_out along axis
    // transpose: dims[axis] = n_out (grad), output has n_in_t along axis
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out_dims = dims;
    if !transpose {
        let n_in = dims[axis];
        let taps = resize_taps(n_in, n_out);
        out_dims[axis] = n_out;
        let mut out = vec![0.0; outer * n_out * inner];
        for o in 0..outer {
            for (j, &(i0, i1, w1)) in taps.iter().enumerate() {
                let dst = &mut out[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
                let a = &data[(o * n_in + i0) * inner..(o * n_in + i0 + 1) * inner];
                if w1 == 0.0 {
                    dst.copy_from_slice(a);
                } else {
                    let b = &data[(o * n_in + i1) * inner..(o * n_in + i1 + 1) * inner];
                    let w0 = 1.0 - w1;
                    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                        *d = w0 * x + w1 * y;
                    }
                }
            }
        }
        (out, out_dims)
    } else {
        let n_grad = dims[axis];
        let taps = resize_taps(n_in_t, n_grad);
        out_dims[axis] = n_in_t;
        let mut out = vec![0.0; outer * n_in_t * inner];
        for o in 0..outer {
            for (j, &(i0, i1, w1)) in taps.iter().enumerate() {
                let g = &data[(o * n_grad + j) * inner..(o * n_grad + j + 1) * inner];
                let w0 = 1.0 - w1;
                {
                    let d0 = &mut out[(o * n_in_t + i0) * inner..(o * n_in_t + i0 + 1) * inner];
                    for (d, &x) in d0.iter_mut().zip(g) {
                        *d += w0 * x;
                    }
                }
                if w1 != 0.0 {
                    let d1 = &mut out[(o * n_in_t + i1) * inner..(o * n_in_t + i1 + 1) * inner];
                    for (d, &x) in d1.iter_mut().zip(g) {
                        *d += w1 * x;
                    }
                }
            }
        }
        (out, out_dims)
    }
}

/// Separable trilinear resize of a channels-last grid from `from` to `to`.
pub fn upsample_trilinear(x: &ArrayView2<'_, f64>, from: Shape3, to: Shape3) -> Array2<f64> {
    let c = x.ncols();
    let mut data = x.as_standard_layout().iter().copied().collect::<Vec<_>>();
    let mut dims = [from[0], from[1], from[2], c];
    for axis in (0..3).rev() {
        if dims[axis] != to[axis] {
            let (d, nd) = interp_axis(&data, dims, axis, to[axis], false, 0);
            data = d;
            dims = nd;
        }
    }
    Array2::from_shape_vec((to[0] * to[1] * to[2], c), data).expect("resize shape")
}

/// Adjoint of [`upsample_trilinear`].
pub fn upsample_trilinear_backward(g: &ArrayView2<'_, f64>, from: Shape3, to: Shape3) -> Array2<f64> {
    let c = g.ncols();
    let mut data = g.as_standard_layout().iter().copied().collect::<Vec<_>>();
    let mut dims = [to[0], to[1], to[2], c];
    for axis in 0..3 {
        if dims[axis] != from[axis] {
            let (d, nd) = interp_axis(&data, dims, axis, 0, true, from[axis]);
            data = d;
            dims = nd;
        }
    }
    Array2::from_shape_vec((from[0] * from[1] * from[2], c), data).expect("resize shape")
}

/// 3x3x3 same-padded neighbourhood gather: `[N, C] -> [N, 27 C]`, column
/// block `k = (dz+1)*9 + (dy+1)*3 + (dx+1)` holds the neighbour's channels.
pub fn im2col3(x: &ArrayView2<'_, f64>, grid: Shape3) -> Array2<f64> {
    let c = x.ncols();
    let [d, h, w] = grid;
    let mut out = Array2::zeros((d * h * w, 27 * c));
    for z in 0..d {
        for y in 0..h {
            for xx in 0..w {
                let row = (z * h + y) * w + xx;
                let mut orow = out.row_mut(row);
                let mut k = 0;
                for dz in -1isize..=1 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (nz, ny, nx) = (z as isize + dz, y as isize + dy, xx as isize + dx);
                            if nz >= 0 && ny >= 0 && nx >= 0 && (nz as usize) < d && (ny as usize) < h && (nx as usize) < w {
                                let src = (nz as usize * h + ny as usize) * w + nx as usize;
                                orow.slice_mut(ndarray::s![k * c..(k + 1) * c]).assign(&x.row(src));
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col3`].
pub fn col2im3(g: &ArrayView2<'_, f64>, grid: Shape3, c: usize) -> Array2<f64> {
    let [d, h, w] = grid;
    let mut out = Array2::zeros((d * h * w, c));
    for z in 0..d {
        for y in 0..h {
            for xx in 0..w {
                let row = (z * h + y) * w + xx;
                let grow = g.row(row);
                let mut k = 0;
                for dz in -1isize..=1 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (nz, ny, nx) = (z as isize + dz, y as isize + dy, xx as isize + dx);
                            if nz >= 0 && ny >= 0 && nx >= 0 && (nz as usize) < d && (ny as usize) < h && (nx as usize) < w {
                                let dst = (nz as usize * h + ny as usize) * w + nx as usize;
                                let mut orow = out.row_mut(dst);
                                orow += &grow.slice(ndarray::s![k * c..(k + 1) * c]);
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Row-wise L2 normalization; zero rows stay zero.
pub fn row_normalize(x: &ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
        norms.push(n);
    }
    (out, norms)
}

/// Per-voxel focal loss terms on the foreground probability `p` (column 0).
pub fn focal_terms(p: &ArrayView2<'_, f64>, target: &ArrayView2<'_, f64>, alpha: f64, gamma: f64, clamp: f64) -> (f64, Array2<f64>) {
    let n = p.len() as f64;
    let mut grad = Array2::zeros(p.raw_dim());
    let mut total = 0.0;
    Zip::from(&mut grad).and(p).and(target).for_each(|g, &pf, &y| {
        let fg = y != 0.0;
        let (pt, at, sign) = if fg { (pf, alpha, 1.0) } else { (1.0 - pf, 1.0 - alpha, -1.0) };
        let q = (1.0 - pt).max(0.0);
        let clamped = pt < clamp;
        let logp = pt.max(clamp).ln();
        let modulating = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        total += -at * modulating * logp;
        // d/dpt of -at * q^gamma * ln(pt)
        let dmod = if gamma == 0.0 || q == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
        let dlog = if clamped { 0.0 } else { 1.0 / pt };
        let dpt = -at * (dmod * logp + modulating * dlog);
        *g = sign * dpt / n;
    });
    (total / n, grad)
}

/// Soft dice loss `1 - (2 sum(p y) + eps) / (sum p + sum y + eps)` and its gradient.
pub fn dice_terms(p: &ArrayView2<'_, f64>, target: &ArrayView2<'_, f64>, eps: f64) -> (f64, Array2<f64>) {
    let inter: f64 = Zip::from(p).and(target).fold(0.0, |a, &x, &y| a + x * y);
    let denom = p.sum() + target.sum() + eps;
    let num = 2.0 * inter + eps;
    let loss = 1.0 - num / denom;
    let grad = Zip::from(target).map_collect(|&y| -(2.0 * y * denom - num) / (denom * denom));
    (loss, grad)
}

pub fn sum_rows(g: &ArrayView2<'_, f64>) -> Array2<f64> {
    g.sum_axis(Axis(0)).insert_axis(Axis(0))
}
