//! Patch unfolding shared by convolution and transposed convolution.
//!
//! `im2col` and `col2im` are adjoint: for any `x` and `cols`,
//! `<im2col(x), cols> == <x, col2im(cols)>`.

use crate::Scalar;

/// Sliding-window geometry over a `[C, H, W]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Number of window positions (columns of the unfolded matrix).
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the unfolded matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride - padding + kj`
    /// falls inside the map.
    fn valid_columns(&self, kj: usize, ow: usize) -> (usize, usize) {
        let shift = kj as isize - self.padding as isize;
        let s = self.stride as isize;
        // smallest ox with ox * s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest ox with ox * s + shift <= width - 1
        let last = self.width as isize - 1 - shift;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(ow as isize) };
        (lo.min(ow as isize) as usize, hi.max(lo) as usize)
    }

    /// Unfolds `input` (`[C, H, W]`) into `cols` (`[C*k*k, positions]`).
    pub fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        debug_assert_eq!(input.len(), self.channels * self.height * self.width);
        debug_assert_eq!(cols.len(), self.patch_len() * self.positions());
        let (oh, ow) = (self.out_height(), self.out_width());
        let npos = oh * ow;
        let pad = self.padding as isize;
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    let (lo, hi) = self.valid_columns(kj, ow);
                    let x0 = (lo * self.stride + kj) as isize - pad;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize - pad + ki as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.height as isize || lo >= hi {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[x0 as usize..x0 as usize + (hi - lo)]);
                        } else {
                            for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[x0 as usize + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `cols` back into `output` (`[C, H, W]`), accumulating overlaps.
    /// `output` is overwritten.
    pub fn col2im<T: Scalar>(&self, cols: &[T], output: &mut [T]) {
        debug_assert_eq!(output.len(), self.channels * self.height * self.width);
        debug_assert_eq!(cols.len(), self.patch_len() * self.positions());
        output.fill(T::zero());
        let (oh, ow) = (self.out_height(), self.out_width());
        let npos = oh * ow;
        let pad = self.padding as isize;
        for c in 0..self.channels {
            let plane = &mut output[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let src = &cols[row * npos..(row + 1) * npos];
                    let (lo, hi) = self.valid_columns(kj, ow);
                    if lo >= hi {
                        continue;
                    }
                    let x0 = ((lo * self.stride + kj) as isize - pad) as usize;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize - pad + ki as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        let vals = &src[oy * ow + lo..oy * ow + hi];
                        if self.stride == 1 {
                            for (d, &v) in line[x0..x0 + vals.len()].iter_mut().zip(vals) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in vals.iter().enumerate() {
                                line[x0 + j * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
