//! im2col lowering for 2-D cross-correlation.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh > height + 2 * pad || kw > width + 2 * pad {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    /// Rows of the lowered matrix: one per (channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1, stride-1, unpadded kernel reads the input matrix as-is.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output positions `o` along one axis whose tap `o * stride + k - pad`
    /// lands inside `0..extent`, as a half-open range.
    fn span(&self, k: usize, out: usize, extent: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o*s + k >= pad
        let lo = self.pad.saturating_sub(k).div_ceil(s);
        // largest o with o*s + k - pad < extent
        let hi = if extent + self.pad > k {
            ((extent + self.pad - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Lowers one image `[C, H, W]` into `cols` of shape `[C*kh*kw, out_h*out_w]`.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let hw = g.height * g.width;
    let (ow, ol, s) = (g.out_w, g.out_len(), g.stride);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &image[c * hw..(c + 1) * hw];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.span(ky, g.out_h, g.height);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.span(kx, ow, g.width);
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(oy * s + ky - g.pad) * g.width..];
                    d[..xlo].fill(T::zero());
                    d[xhi..].fill(T::zero());
                    let x0 = xlo * s + kx - g.pad;
                    if s == 1 {
                        d[xlo..xhi].copy_from_slice(&src[x0..x0 + xhi - xlo]);
                    } else {
                        for (i, v) in d[xlo..xhi].iter_mut().enumerate() {
                            *v = src[x0 + i * s];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into `image`.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let hw = g.height * g.width;
    let (ow, ol, s) = (g.out_w, g.out_len(), g.stride);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut image[c * hw..(c + 1) * hw];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.span(ky, g.out_h, g.height);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.span(kx, ow, g.width);
                let src = &cols[row * ol..(row + 1) * ol];
                row += 1;
                if xlo >= xhi {
                    continue;
                }
                let x0 = xlo * s + kx - g.pad;
                for oy in ylo..yhi {
                    let d = &mut plane[(oy * s + ky - g.pad) * g.width..];
                    let sr = &src[oy * ow + xlo..oy * ow + xhi];
                    if s == 1 {
                        let d = &mut d[x0..x0 + sr.len()];
                        d.iter_mut().zip(sr).for_each(|(d, &v)| *d += v);
                    } else {
                        for (i, &v) in sr.iter().enumerate() {
                            d[x0 + i * s] += v;
                        }
                    }
                }
            }
        }
    }
}
