//! Direct 3D convolution kernels over `[C, D, H, W]` volumes.
//!
//! The same axis plan drives the forward pass and both adjoints so that the
//! three loops visit identical (output, input, tap) triples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero padding applied before and after every spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub before: usize,
    pub after: usize,
}

impl Padding {
    pub const fn new(before: usize, after: usize) -> Self {
        Self { before, after }
    }

    /// Symmetric padding that preserves extents at stride 1.
    pub const fn same(kernel: usize) -> Self {
        Self::new((kernel - 1) / 2, (kernel - 1) / 2)
    }

    /// One voxel before, two after on every axis.
    pub const fn asymmetric() -> Self {
        Self::new(1, 2)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AxisPlan {
    pub input: usize,
    pub output: usize,
    /// Valid output range `[lo, hi)` per kernel tap.
    pub ranges: Vec<(usize, usize)>,
    pub stride: usize,
    pub before: usize,
}

impl AxisPlan {
    pub fn new(input: usize, kernel: usize, stride: usize, pad: Padding) -> Result<Self> {
        let padded = input + pad.before + pad.after;
        if stride == 0 || padded < kernel {
            return Err(Error::shape(
                "conv3d",
                format!("extent {input} with padding {pad:?} too small for kernel {kernel} stride {stride}"),
            ));
        }
        let output = (padded - kernel) / stride + 1;
        let ranges = (0..kernel)
            .map(|tap| {
                let lo = if tap >= pad.before {
                    0
                } else {
                    (pad.before - tap).div_ceil(stride)
                };
                let hi = (input + pad.before - tap).div_ceil(stride).min(output);
                (lo.min(hi), hi)
            })
            .collect();
        Ok(Self {
            input,
            output,
            ranges,
            stride,
            before: pad.before,
        })
    }

    #[inline]
    fn source(&self, out: usize, tap: usize) -> usize {
        out * self.stride + tap - self.before
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvPlan {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub axes: [AxisPlan; 3],
}

impl ConvPlan {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        pad: Padding,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::shape(
                "conv3d",
                format!("input must be [C,D,H,W], got {input_shape:?}"),
            ));
        }
        if kernel_shape.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("kernel must be [Co,Ci,k,k,k], got {kernel_shape:?}"),
            ));
        }
        let k = kernel_shape[2];
        if kernel_shape[3] != k || kernel_shape[4] != k || !(k == 1 || k == 3) {
            return Err(Error::shape(
                "conv3d",
                format!("kernel spatial extent must be 1 or 3 on every axis, got {kernel_shape:?}"),
            ));
        }
        if kernel_shape[1] != input_shape[0] {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "input has {} channels but kernel expects {}",
                    input_shape[0], kernel_shape[1]
                ),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidArgument(format!("conv3d stride {stride} not in {{1,2}}")));
        }
        Ok(Self {
            c_in: input_shape[0],
            c_out: kernel_shape[0],
            kernel: k,
            axes: [
                AxisPlan::new(input_shape[1], k, stride, pad)?,
                AxisPlan::new(input_shape[2], k, stride, pad)?,
                AxisPlan::new(input_shape[3], k, stride, pad)?,
            ],
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.c_out,
            self.axes[0].output,
            self.axes[1].output,
            self.axes[2].output,
        ]
    }

    fn in_volume(&self) -> usize {
        self.axes.iter().map(|a| a.input).product()
    }

    fn out_volume(&self) -> usize {
        self.axes.iter().map(|a| a.output).product()
    }

    /// Visit every (co, ci, tap) with its weight index and run `row` over each
    /// contiguous output row: `row(weight_idx, out_row_start, in_row_start, len)`.
    #[inline]
    fn for_each_row(&self, mut row: impl FnMut(usize, usize, usize, usize, usize)) {
        let k = self.kernel;
        let [pd, ph, pw] = &self.axes;
        let (ih_len, iw_len) = (ph.input, pw.input);
        let (oh_len, ow_len) = (ph.output, pw.output);
        let in_vol = self.in_volume();
        let out_vol = self.out_volume();
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                let in_base = ci * in_vol;
                let out_base = co * out_vol;
                for kd in 0..k {
                    let (ld, hd) = pd.ranges[kd];
                    for kh in 0..k {
                        let (lh, hh) = ph.ranges[kh];
                        for kw in 0..k {
                            let (lw, hw) = pw.ranges[kw];
                            if lw >= hw {
                                continue;
                            }
                            let widx = (((co * self.c_in + ci) * k + kd) * k + kh) * k + kw;
                            let iw0 = pw.source(lw, kw);
                            for od in ld..hd {
                                let id = pd.source(od, kd);
                                for oh in lh..hh {
                                    let ih = ph.source(oh, kh);
                                    let o = out_base + (od * oh_len + oh) * ow_len + lw;
                                    let i = in_base + (id * ih_len + ih) * iw_len + iw0;
                                    row(widx, o, i, hw - lw, pw.stride);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.c_out * self.out_volume()];
        self.for_each_row(|widx, o, i, len, stride| {
            let w = kernel[widx];
            let dst = &mut out[o..o + len];
            if stride == 1 {
                for (d, s) in dst.iter_mut().zip(&input[i..i + len]) {
                    *d += w * s;
                }
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += w * input[i + j * stride];
                }
            }
        });
        out
    }

    pub fn backward_input(&self, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.c_in * self.in_volume()];
        self.for_each_row(|widx, o, i, len, stride| {
            let w = kernel[widx];
            let src = &grad_out[o..o + len];
            if stride == 1 {
                for (d, s) in grad_in[i..i + len].iter_mut().zip(src) {
                    *d += w * s;
                }
            } else {
                for (j, s) in src.iter().enumerate() {
                    grad_in[i + j * stride] += w * s;
                }
            }
        });
        grad_in
    }

    pub fn backward_kernel(&self, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
        let k = self.kernel;
        let mut grad_k = vec![0.0; self.c_out * self.c_in * k * k * k];
        self.for_each_row(|widx, o, i, len, stride| {
            let src = &grad_out[o..o + len];
            let acc: f64 = if stride == 1 {
                src.iter().zip(&input[i..i + len]).map(|(g, x)| g * x).sum()
            } else {
                src.iter()
                    .enumerate()
                    .map(|(j, g)| g * input[i + j * stride])
                    .sum()
            };
            grad_k[widx] += acc;
        });
        grad_k
    }
}
