//! Pooling, nearest-neighbour upsampling and channel stacking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2x2 / stride-2 max pooling. Returns the pooled tensor and, for every output
/// element, the flat input index that produced it (first maximum in row-major
/// window order).
pub fn max_pool2d_forward(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(
            "max_pool2d",
            format!("spatial extent {h}x{w} is not even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut argmax = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((bi * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = xd[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    Ok((Tensor::new([b, oh, ow, c], out)?, argmax))
}

pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling: `out[y][x] = in[y / 2][x / 2]`.
pub fn upsample_nearest_forward(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((bi * h + oy / 2) * w + ox / 2) * c;
                out.extend_from_slice(&xd[src..src + c]);
            }
        }
    }
    Tensor::new([b, oh, ow, c], out)
}

pub fn upsample_nearest_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (b, oh, ow, c) = grad_out.dims4()?;
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros([b, h, w, c]);
    let d = dx.data_mut();
    let g = grad_out.data();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((bi * h + oy / 2) * w + ox / 2) * c;
                let src = ((bi * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    d[dst + ch] += g[src + ch];
                }
            }
        }
    }
    Ok(dx)
}

/// Concatenates two tensors along their last axis, `a` first.
pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::dim(
            "concat_channels",
            format!("leading extents of {sa:?} and {sb:?} differ"),
        ));
    }
    let c1 = *sa.last().unwrap();
    let c2 = *sb.last().unwrap();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks_exact(c1).zip(b.data().chunks_exact(c2)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = c1 + c2;
    Tensor::new(shape, data)
}

/// Stacks two `[b,h,w,c]` maps into `[b,h,w,2,c]` (first argument at modality
/// index 0). In row-major order this is the same buffer as the channel
/// concatenation, which the modality convolution relies on.
pub fn stack_modality(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = a.dims4()?;
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "stack_modality",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    concat_last(a, b)?.reshape([n, h, w, 2, c])
}
