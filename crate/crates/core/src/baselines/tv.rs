//! Smoothed isotropic total variation with forward differences and
//! replicate boundary, plus its exact gradient.

use crate::real::Real;

#[inline]
fn diffs<T: Real>(data: &[T], dims: [usize; 3], i: usize, j: usize, k: usize) -> (T, T, T) {
    let [nx, ny, nz] = dims;
    let idx = (k * ny + j) * nx + i;
    let v = data[idx];
    // Replicate boundary: the forward difference across the far face is 0.
    let gx = if i + 1 < nx { data[idx + 1] - v } else { T::zero() };
    let gy = if j + 1 < ny { data[idx + nx] - v } else { T::zero() };
    let gz = if k + 1 < nz { data[idx + nx * ny] - v } else { T::zero() };
    (gx, gy, gz)
}

/// TV(x) = sum_v sqrt(gx^2 + gy^2 + gz^2 + eps^2).
pub fn tv_value<T: Real>(data: &[T], dims: [usize; 3], eps: T) -> T {
    let [nx, ny, nz] = dims;
    let mut acc = T::zero();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let (gx, gy, gz) = diffs(data, dims, i, j, k);
                acc = acc + (gx * gx + gy * gy + gz * gz + eps * eps).sqrt();
            }
        }
    }
    acc
}

/// Exact gradient of [`tv_value`].
pub fn tv_grad<T: Real>(data: &[T], dims: [usize; 3], eps: T) -> Vec<T> {
    tv_value_grad(data, dims, eps).1
}

pub fn tv_value_grad<T: Real>(data: &[T], dims: [usize; 3], eps: T) -> (T, Vec<T>) {
    let [nx, ny, nz] = dims;
    let mut grad = vec![T::zero(); data.len()];
    let mut value = T::zero();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = (k * ny + j) * nx + i;
                let (gx, gy, gz) = diffs(data, dims, i, j, k);
                let phi = (gx * gx + gy * gy + gz * gz + eps * eps).sqrt();
                value = value + phi;
                // d phi_v / d x_v collects -g for each live difference;
                // each forward neighbor receives +g/phi from this voxel's
                // term.
                let inv = T::one() / phi;
                if i + 1 < nx {
                    grad[idx] = grad[idx] - gx * inv;
                    grad[idx + 1] = grad[idx + 1] + gx * inv;
                }
                if j + 1 < ny {
                    grad[idx] = grad[idx] - gy * inv;
                    grad[idx + nx] = grad[idx + nx] + gy * inv;
                }
                if k + 1 < nz {
                    grad[idx] = grad[idx] - gz * inv;
                    grad[idx + nx * ny] = grad[idx + nx * ny] + gz * inv;
                }
            }
        }
    }
    (value, grad)
}
