//! 2D convolution over NHWC tensors via im2col + GEMM, and the modality-axis
//! 3D convolution used by the co-learning units.
//!
//! Kernels use the cross-correlation convention (no flip). Weights are laid
//! out `[k, k, cin, cout]`, so a flattened kernel is directly the `[K, cout]`
//! right-hand operand of the GEMM with `K = k * k * cin`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub kernel: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let (batch, height, width, cin) = x.dims4()?;
        let (kh, kw, wcin, cout) = match w.shape() {
            &[a, b, c, d] => (a, b, c, d),
            s => {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel must be [k,k,cin,cout], got {s:?}"),
                ))
            }
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be square with odd size, got {kh}x{kw}"),
            ));
        }
        if wcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input has {cin} channels but kernel expects {wcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        let k = kh;
        let (out_height, out_width, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = height.div_ceil(stride);
                let ow = width.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + k).saturating_sub(height);
                let pad_w = ((ow - 1) * stride + k).saturating_sub(width);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if height < k || width < k {
                    return Err(Error::dim(
                        "conv2d",
                        format!("valid padding needs input >= {k}, got {height}x{width}"),
                    ));
                }
                ((height - k) / stride + 1, (width - k) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeometry {
            batch,
            height,
            width,
            cin,
            kernel: k,
            cout,
            stride,
            pad_top,
            pad_left,
            out_height,
            out_width,
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    /// 1x1 stride-1 convolutions need no unfolding.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Input row/column for output coordinate `o` and kernel offset `k`, if in bounds.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let kk = g.patch_len();
    let mut col = vec![0.0f32; g.rows() * kk];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let dst = &mut col[row * kk..(row + 1) * kk];
                for ky in 0..g.kernel {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.height) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.width) else {
                            continue;
                        };
                        let src = ((b * g.height + iy) * g.width + ix) * g.cin;
                        let off = (ky * g.kernel + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    col
}

fn col2im(col: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let kk = g.patch_len();
    let mut x = vec![0.0f32; g.batch * g.height * g.width * g.cin];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let src = &col[row * kk..(row + 1) * kk];
                for ky in 0..g.kernel {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.height) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.width) else {
                            continue;
                        };
                        let dst = ((b * g.height + iy) * g.width + ix) * g.cin;
                        let off = (ky * g.kernel + kx) * g.cin;
                        for (d, s) in x[dst..dst + g.cin].iter_mut().zip(&src[off..off + g.cin]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

/// `c[m, n] = beta * c + a[m, k] * b[k, n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the asserted slice extents cover every index the kernel touches
    // for the given dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
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
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x, w, stride, padding)?;
    if bias.len() != g.cout {
        return Err(Error::dim(
            "conv2d",
            format!("bias has {} entries, kernel has {} outputs", bias.len(), g.cout),
        ));
    }
    let m = g.rows();
    let mut out = Vec::with_capacity(m * g.cout);
    for _ in 0..m {
        out.extend_from_slice(bias.data());
    }
    let kk = g.patch_len();
    if g.is_pointwise() {
        gemm(m, kk, g.cout, x.data(), (kk, 1), w.data(), (g.cout, 1), 1.0, &mut out);
    } else {
        let col = im2col(x.data(), &g);
        gemm(m, kk, g.cout, &col, (kk, 1), w.data(), (g.cout, 1), 1.0, &mut out);
    }
    Tensor::new([g.batch, g.out_height, g.out_width, g.cout], out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x, w, stride, padding)?;
    let m = g.rows();
    let kk = g.patch_len();
    let go = grad_out.data();
    if go.len() != m * g.cout {
        return Err(Error::dim("conv2d_backward", "gradient shape mismatch"));
    }

    let mut db = vec![0.0f64; g.cout];
    for row in go.chunks_exact(g.cout) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v as f64;
        }
    }

    let mut dw = vec![0.0f32; kk * g.cout];
    let dx = if g.is_pointwise() {
        gemm(kk, m, g.cout, x.data(), (1, kk), go, (g.cout, 1), 0.0, &mut dw);
        let mut dx = vec![0.0f32; m * kk];
        gemm(m, g.cout, kk, go, (g.cout, 1), w.data(), (1, g.cout), 0.0, &mut dx);
        dx
    } else {
        let col = im2col(x.data(), &g);
        gemm(kk, m, g.cout, &col, (1, kk), go, (g.cout, 1), 0.0, &mut dw);
        drop(col);
        let mut dcol = vec![0.0f32; m * kk];
        gemm(m, g.cout, kk, go, (g.cout, 1), w.data(), (1, g.cout), 0.0, &mut dcol);
        col2im(&dcol, &g)
    };

    Ok(ConvGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weight: Tensor::new(w.shape().to_vec(), dw)?,
        bias: Tensor::new([g.cout], db.into_iter().map(|v| v as f32).collect())?,
    })
}

/// Validates a `[b,h,w,m,c]` input against a `[k,k,m,c,cout]` kernel and
/// returns the equivalent rank-4 views used by the 2D kernel.
pub(crate) fn modality_views(x: &Tensor, w: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, h, wd, m, c) = match x.shape() {
        &[b, h, wd, m, c] => (b, h, wd, m, c),
        s => {
            return Err(Error::dim(
                "conv3d_modality",
                format!("input must be [b,h,w,m,c], got {s:?}"),
            ))
        }
    };
    let (k1, k2, wm, wc, cout) = match w.shape() {
        &[k1, k2, wm, wc, cout] => (k1, k2, wm, wc, cout),
        s => {
            return Err(Error::dim(
                "conv3d_modality",
                format!("kernel must be [k,k,m,c,cout], got {s:?}"),
            ))
        }
    };
    if m != 2 {
        return Err(Error::dim(
            "conv3d_modality",
            format!("expected 2 stacked modalities, got {m}"),
        ));
    }
    if wm != m {
        return Err(Error::dim(
            "conv3d_modality",
            format!("input has {m} modalities but kernel spans {wm}"),
        ));
    }
    if wc != c {
        return Err(Error::dim(
            "conv3d_modality",
            format!("input has {c} channels but kernel expects {wc}"),
        ));
    }
    Ok((vec![b, h, wd, m * c], vec![k1, k2, m * c, cout]))
}

/// 3D convolution over a stacked `[b,h,w,m,c]` tensor with spatial "same"
/// padding and no padding on the modality axis. The kernel spans the whole
/// modality axis, so that axis is contracted away and the result is
/// `[b,h,w,cout]`.
pub fn conv3d_modality_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (xs, ws) = modality_views(x, w)?;
    let x4 = x.clone().reshape(xs)?;
    let w4 = w.clone().reshape(ws)?;
    conv2d_forward(&x4, &w4, bias, 1, Padding::Same)
}

pub fn conv3d_modality_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let (xs, ws) = modality_views(x, w)?;
    let x4 = x.clone().reshape(xs)?;
    let w4 = w.clone().reshape(ws)?;
    let grads = conv2d_backward(&x4, &w4, grad_out, 1, Padding::Same)?;
    Ok(ConvGrads {
        input: grads.input.reshape(x.shape().to_vec())?,
        weight: grads.weight.reshape(w.shape().to_vec())?,
        bias: grads.bias,
    })
}
