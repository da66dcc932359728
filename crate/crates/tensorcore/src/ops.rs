//! Patch extraction shared by convolution and transposed convolution.
//!
//! A "grid" position `(gy, gx)` covers source pixels
//! `(gy·stride + ky − pad, gx·stride + kx − pad)` for `ky, kx < kernel`.
//! [`gather`] copies those pixels into rows, [`scatter`] is its adjoint.

use crate::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct PatchGeom {
    pub batch: usize,
    pub src_h: usize,
    pub src_w: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeom {
    pub fn row_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn rows(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }

    #[inline]
    fn src_coord(&self, g: usize, k: usize, limit: usize) -> Option<usize> {
        let v = (g * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }
}

pub(crate) fn gather<T: Scalar>(src: &[T], g: &PatchGeom) -> Vec<T> {
    let c = g.channels;
    let row_len = g.row_len();
    let mut cols = vec![T::zero(); g.rows() * row_len];
    for b in 0..g.batch {
        let src_b = &src[b * g.src_h * g.src_w * c..(b + 1) * g.src_h * g.src_w * c];
        for gy in 0..g.grid_h {
            for gx in 0..g.grid_w {
                let row = ((b * g.grid_h + gy) * g.grid_w + gx) * row_len;
                for ky in 0..g.kernel {
                    let Some(y) = g.src_coord(gy, ky, g.src_h) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(x) = g.src_coord(gx, kx, g.src_w) else {
                            continue;
                        };
                        let dst = row + (ky * g.kernel + kx) * c;
                        let s = (y * g.src_w + x) * c;
                        cols[dst..dst + c].copy_from_slice(&src_b[s..s + c]);
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn scatter<T: Scalar>(cols: &[T], g: &PatchGeom, dst: &mut [T]) {
    let c = g.channels;
    let row_len = g.row_len();
    for b in 0..g.batch {
        let dst_b = &mut dst[b * g.src_h * g.src_w * c..(b + 1) * g.src_h * g.src_w * c];
        for gy in 0..g.grid_h {
            for gx in 0..g.grid_w {
                let row = ((b * g.grid_h + gy) * g.grid_w + gx) * row_len;
                for ky in 0..g.kernel {
                    let Some(y) = g.src_coord(gy, ky, g.src_h) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(x) = g.src_coord(gx, kx, g.src_w) else {
                            continue;
                        };
                        let src = row + (ky * g.kernel + kx) * c;
                        let d = (y * g.src_w + x) * c;
                        for (o, v) in dst_b[d..d + c].iter_mut().zip(&cols[src..src + c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_is_adjoint_of_gather() {
        // <gather(x), y> == <x, scatter(y)>
        let g = PatchGeom {
            batch: 2,
            src_h: 5,
            src_w: 4,
            channels: 3,
            grid_h: 3,
            grid_w: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 5 * 4 * 3).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let y: Vec<f64> = (0..g.rows() * g.row_len()).map(|i| ((i * 5 % 11) as f64) * 0.5).collect();
        let gx = gather(&x, &g);
        let mut sy = vec![0.0; x.len()];
        scatter(&y, &g, &mut sy);
        let lhs: f64 = gx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&sy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
