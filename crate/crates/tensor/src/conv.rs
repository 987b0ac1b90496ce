use crate::gemm::gemm;
use crate::{Op, Tensor};

/// How out-of-bounds input pixels are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    /// Clamp to the nearest edge pixel.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub mode: Padding,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            mode: Padding::Zeros,
        }
    }
}

impl Conv2dOpts {
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            mode: Padding::Zeros,
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Geometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub opts: Conv2dOpts,
}

impl Geometry {
    pub fn new(x: &[usize], w: &[usize], opts: Conv2dOpts) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW, got {x:?}");
        assert_eq!(w.len(), 4, "conv2d weight must be OIHW, got {w:?}");
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?}, weight {w:?}");
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        let s = opts.stride.max(1);
        assert!(h + 2 * opts.padding >= kh && wd + 2 * opts.padding >= kw, "kernel larger than input");
        Self {
            cin: x[1],
            h,
            w: wd,
            kh,
            kw,
            ho: (h + 2 * opts.padding - kh) / s + 1,
            wo: (wd + 2 * opts.padding - kw) / s + 1,
            opts,
        }
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let s = self.opts.stride.max(1);
        let p = self.opts.padding as isize;
        let iy = (oy * s + i) as isize - p;
        let ix = (ox * s + j) as isize - p;
        match self.opts.mode {
            Padding::Zeros => {
                if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                    None
                } else {
                    Some((iy as usize, ix as usize))
                }
            }
            Padding::Replicate => Some((
                iy.clamp(0, self.h as isize - 1) as usize,
                ix.clamp(0, self.w as isize - 1) as usize,
            )),
        }
    }
}

pub(crate) fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let sp = g.spatial_out();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * sp..][..sp];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        row[oy * g.wo + ox] = match g.source(oy, ox, i, j) {
                            Some((iy, ix)) => plane[iy * g.w + ix],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    let sp = g.spatial_out();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * sp..][..sp];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((iy, ix)) = g.source(oy, ox, i, j) {
                            plane[iy * g.w + ix] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D convolution of an NCHW input with an OIHW kernel.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, opts: Conv2dOpts) -> Tensor {
        let g = Geometry::new(self.shape(), weight.shape(), opts);
        let batch = self.dim(0);
        let cout = weight.dim(0);
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[cout], "conv2d bias shape mismatch");
        }
        let (k, sp) = (g.k(), g.spatial_out());
        let mut cols = vec![0.0; k * sp];
        let mut out = vec![0.0; batch * cout * sp];
        let x = self.data();
        for n in 0..batch {
            im2col(&x[n * g.cin * g.h * g.w..], &g, &mut cols);
            let dst = &mut out[n * cout * sp..(n + 1) * cout * sp];
            gemm(cout, k, sp, weight.data(), false, &cols, false, dst, false);
            if let Some(b) = bias {
                for (o, row) in dst.chunks_mut(sp).enumerate() {
                    let bv = b.data()[o];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Tensor::from_op(
            out,
            vec![batch, cout, g.ho, g.wo],
            Op::Conv2d {
                x: self.clone(),
                w: weight.clone(),
                b: bias.cloned(),
                opts,
            },
        )
    }
}
