//! Layer kernels on NHWC activations flattened to `(batch * H * W, C)`
//! matrices. Convolutions are 3×3, stride 1, zero "same" padding, lowered
//! to GEMM through im2col with column order `(ky, kx, c_in)`.

use ndarray::{Array1, Array2, Axis, Zip};

/// im2col for a 3×3 same-padded convolution on a `grid × grid` map.
pub fn im2col(input: &Array2<f64>, batch: usize, grid: usize) -> Array2<f64> {
    let c = input.ncols();
    let hw = grid * grid;
    debug_assert_eq!(input.nrows(), batch * hw);
    let input = input.as_standard_layout();
    let src = input.as_slice().unwrap();
    let mut cols = Array2::<f64>::zeros((batch * hw, 9 * c));
    let dst = cols.as_slice_mut().unwrap();
    let width = 9 * c;
    for n in 0..batch {
        for y in 0..grid {
            for x in 0..grid {
                let row = n * hw + y * grid + x;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= grid as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= grid as isize {
                            continue;
                        }
                        let srow = n * hw + sy as usize * grid + sx as usize;
                        let k = ky * 3 + kx;
                        dst[row * width + k * c..row * width + (k + 1) * c]
                            .copy_from_slice(&src[srow * c..(srow + 1) * c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input map.
pub fn col2im(dcols: &Array2<f64>, batch: usize, grid: usize, channels: usize) -> Array2<f64> {
    let hw = grid * grid;
    let dcols = dcols.as_standard_layout();
    let src = dcols.as_slice().unwrap();
    let mut out = Array2::<f64>::zeros((batch * hw, channels));
    let dst = out.as_slice_mut().unwrap();
    let c = channels;
    let width = 9 * c;
    for n in 0..batch {
        for y in 0..grid {
            for x in 0..grid {
                let row = n * hw + y * grid + x;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= grid as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= grid as isize {
                            continue;
                        }
                        let srow = n * hw + sy as usize * grid + sx as usize;
                        let k = ky * 3 + kx;
                        let from = &src[row * width + k * c..row * width + (k + 1) * c];
                        let to = &mut dst[srow * c..(srow + 1) * c];
                        for (t, f) in to.iter_mut().zip(from) {
                            *t += f;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Multiplies `grad` in place by the LeakyReLU derivative at `pre`.
pub fn leaky_relu_backward(grad: &mut Array2<f64>, pre: &Array2<f64>, slope: f64) {
    Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g *= slope;
        }
    });
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Values kept from a training-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

/// Batch normalisation over rows with batch statistics.
pub fn batch_norm_train(
    z: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
    eps: f64,
) -> (Array2<f64>, BatchNormCache) {
    let rows = z.nrows() as f64;
    let mean = z.sum_axis(Axis(0)) / rows;
    let centered = z - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / rows;
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = centered * &inv_std;
    let y = &xhat * gamma + beta;
    (y, BatchNormCache { xhat, inv_std, batch_mean: mean, batch_var: var })
}

/// Batch normalisation with running statistics.
pub fn batch_norm_infer(
    z: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
    eps: f64,
) -> Array2<f64> {
    let inv_std = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
    (z - running_mean) * &inv_std * gamma + beta
}

/// Returns (dz, dgamma, dbeta) for a training-mode batch norm.
pub fn batch_norm_backward(dy: &Array2<f64>, gamma: &Array2<f64>, cache: &BatchNormCache) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let rows = dy.nrows() as f64;
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gamma;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    let dz = (dxhat * rows - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat) * &cache.inv_std / rows;
    (dz, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 3×3 same convolution, the oracle for the im2col lowering.
    fn conv_direct(input: &Array2<f64>, w: &Array2<f64>, batch: usize, grid: usize) -> Array2<f64> {
        let cin = input.ncols();
        let cout = w.ncols();
        let mut out = Array2::zeros((batch * grid * grid, cout));
        for n in 0..batch {
            for y in 0..grid as isize {
                for x in 0..grid as isize {
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, x + kx);
                                if sy < 0 || sx < 0 || sy >= grid as isize || sx >= grid as isize {
                                    continue;
                                }
                                for c in 0..cin {
                                    let k = ((ky + 1) * 3 + (kx + 1)) as usize;
                                    acc += input[[n * grid * grid + (sy as usize) * grid + sx as usize, c]] * w[[k * cin + c, o]];
                                }
                            }
                        }
                        out[[n * grid * grid + (y as usize) * grid + x as usize, o]] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(rows: usize, cols: usize, salt: u64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            let h = ((r as u64 * 7919 + c as u64 * 104_729 + salt) * 2_654_435_761) % 1000;
            h as f64 / 500.0 - 1.0
        })
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let (batch, grid, cin, cout) = (2, 8, 3, 4);
        let x = pseudo(batch * grid * grid, cin, 1);
        let w = pseudo(9 * cin, cout, 2);
        let fast = im2col(&x, batch, grid).dot(&w);
        let slow = conv_direct(&x, &w, batch, grid);
        assert!((fast - slow).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn col2im_is_the_adjoint() {
        // <im2col(x), g> == <x, col2im(g)>
        let (batch, grid, c) = (2, 8, 3);
        let x = pseudo(batch * grid * grid, c, 3);
        let g = pseudo(batch * grid * grid, 9 * c, 4);
        let lhs = (&im2col(&x, batch, grid) * &g).sum();
        let rhs = (&x * &col2im(&g, batch, grid, c)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn batch_norm_normalises_columns() {
        let z = pseudo(64, 5, 9);
        let gamma = Array2::ones((1, 5));
        let beta = Array2::zeros((1, 5));
        let (y, _) = batch_norm_train(&z, &gamma, &beta, 1e-12);
        for col in y.columns() {
            assert!(col.mean().unwrap().abs() < 1e-12);
            assert!((col.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
