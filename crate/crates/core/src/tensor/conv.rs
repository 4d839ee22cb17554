use super::{gemm, Tensor};
use crate::error::{DrnetError, Result};

/// Static shape information for one 2-d convolution (cross-correlation, no kernel flip).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        op: &'static str,
        [channels, height, width]: [usize; 3],
        filters: usize,
        [kernel_h, kernel_w]: [usize; 2],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(DrnetError::shape(op, "stride must be >= 1"));
        }
        if filters == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(DrnetError::shape(
                op,
                format!("filters and kernel extents must be positive, got {filters}x{kernel_h}x{kernel_w}"),
            ));
        }
        let padded_h = height + 2 * padding;
        let padded_w = width + 2 * padding;
        if padded_h < kernel_h || padded_w < kernel_w {
            return Err(DrnetError::shape(
                op,
                format!("kernel {kernel_h}x{kernel_w} larger than padded input {padded_h}x{padded_w}"),
            ));
        }
        Ok(ConvGeometry {
            channels,
            height,
            width,
            filters,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (padded_h - kernel_h) / stride + 1,
            out_w: (padded_w - kernel_w) / stride + 1,
        })
    }

    fn from_operands(
        op: &'static str,
        input: &Tensor,
        weights: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<(usize, Self)> {
        let [n, c, h, w] = input.dims4(op)?;
        let [k, wc, kh, kw] = weights.dims4(op)?;
        if wc != c {
            return Err(DrnetError::shape(
                op,
                format!("input has {c} channels but weights expect {wc}"),
            ));
        }
        Ok((n, ConvGeometry::new(op, [c, h, w], k, [kh, kw], stride, padding)?))
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.filters, self.out_h, self.out_w]
    }

    pub fn param_count(&self) -> usize {
        self.filters * self.patch_len() + self.filters
    }
}

/// Unfold the listed channels of one sample into a `[channels*kh*kw, out_h*out_w]` matrix.
fn im2col(sample: &[f64], g: &ConvGeometry, channels: &[usize], cols: &mut [f64]) {
    let area = g.out_area();
    let plane = g.height * g.width;
    let mut row = 0;
    for &c in channels {
        let src = &sample[c * plane..(c + 1) * plane];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Accumulate a `[channels*kh*kw, out_h*out_w]` matrix back onto one input sample.
fn col2im(cols: &[f64], g: &ConvGeometry, dst: &mut [f64]) {
    let area = g.out_area();
    let plane = g.height * g.width;
    let mut row = 0;
    for c in 0..g.channels {
        let plane_dst = &mut dst[c * plane..(c + 1) * plane];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane_dst[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[N,K,H',W']` with `H' = (H + 2p - kh) / s + 1`.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (_, g) = ConvGeometry::from_operands("conv2d_forward", input, weights, stride, padding)?;
    check_bias("conv2d_forward", bias, g.filters)?;
    Ok(conv2d_forward_subset(input, weights.data(), bias.data(), &g, None, None)?.0)
}

/// Convolution restricted to `in_channels` and `out_channels`; `None` means all.
///
/// Unlisted output channels are left as zero maps (bias not applied) and
/// unlisted input channels contribute nothing. Returns the output together
/// with the number of multiply-accumulates performed.
pub(crate) fn conv2d_forward_subset(
    input: &Tensor,
    weights: &[f64],
    bias: &[f64],
    g: &ConvGeometry,
    in_channels: Option<&[usize]>,
    out_channels: Option<&[usize]>,
) -> Result<(Tensor, u64)> {
    let [n, c, h, w] = input.dims4("conv2d_forward")?;
    if [c, h, w] != [g.channels, g.height, g.width] {
        return Err(DrnetError::shape(
            "conv2d_forward",
            format!(
                "input sample is {c}x{h}x{w}, layer expects {}x{}x{}",
                g.channels, g.height, g.width
            ),
        ));
    }
    let all_in: Vec<usize>;
    let ins = match in_channels {
        Some(list) => list,
        None => {
            all_in = (0..g.channels).collect();
            &all_in
        }
    };
    let all_out: Vec<usize>;
    let outs = match out_channels {
        Some(list) => list,
        None => {
            all_out = (0..g.filters).collect();
            &all_out
        }
    };

    let taps = g.kernel_h * g.kernel_w;
    let patch = ins.len() * taps;
    let area = g.out_area();
    let mut out = Tensor::zeros(g.out_shape(n));
    if outs.is_empty() {
        return Ok((out, 0));
    }

    // Reduced filter bank: rows = kept filters, columns = kept input channels.
    let full = ins.len() == g.channels && outs.len() == g.filters;
    let reduced: Vec<f64>;
    let bank: &[f64] = if full {
        weights
    } else {
        let mut buf = Vec::with_capacity(outs.len() * patch);
        for &k in outs {
            let filter = &weights[k * g.patch_len()..(k + 1) * g.patch_len()];
            for &ci in ins {
                buf.extend_from_slice(&filter[ci * taps..(ci + 1) * taps]);
            }
        }
        reduced = buf;
        &reduced
    };

    let mut cols = vec![0.0; patch * area];
    let mut block = vec![0.0; outs.len() * area];
    let sample_out = g.filters * area;
    for s in 0..n {
        let dst = &mut out.data_mut()[s * sample_out..(s + 1) * sample_out];
        if patch > 0 {
            im2col(input.sample(s), g, ins, &mut cols);
            gemm(
                outs.len(),
                patch,
                area,
                bank,
                (patch as isize, 1),
                &cols,
                (area as isize, 1),
                0.0,
                &mut block,
                (area as isize, 1),
            );
        } else {
            block.fill(0.0);
        }
        for (row, &k) in outs.iter().enumerate() {
            let b = bias[k];
            let src = &block[row * area..(row + 1) * area];
            for (d, &v) in dst[k * area..(k + 1) * area].iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    let macs = (n * outs.len() * patch * area) as u64;
    Ok((out, macs))
}

/// Gradients of [`conv2d_forward`] with respect to each operand.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let (_, g) = ConvGeometry::from_operands("conv2d_backward", input, weights, stride, padding)?;
    let (gi, gp) = conv2d_backward_with(grad_out, input, weights.data(), &g, true, true)?;
    let (gw, gb) = gp.expect("parameter gradients requested");
    Ok(ConvGrads {
        input: gi.expect("input gradient requested"),
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::from_vec(gb),
    })
}

/// Backward pass computing only the requested gradients.
///
/// Returns `(grad_input, Some((grad_weights_flat, grad_bias)))`.
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward_with(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &[f64],
    g: &ConvGeometry,
    need_input: bool,
    need_params: bool,
) -> Result<(Option<Tensor>, Option<(Vec<f64>, Vec<f64>)>)> {
    let n = input.batch();
    if grad_out.shape() != g.out_shape(n).as_slice() {
        return Err(DrnetError::shape(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} differs from forward output shape {:?}",
                grad_out.shape(),
                g.out_shape(n)
            ),
        ));
    }
    let patch = g.patch_len();
    let area = g.out_area();
    let all: Vec<usize> = (0..g.channels).collect();
    let mut cols = vec![0.0; patch * area];
    let mut grad_cols = vec![0.0; patch * area];
    let mut grad_input = need_input.then(|| Tensor::zeros(input.shape().to_vec()));
    let mut grad_w = vec![0.0; if need_params { g.filters * patch } else { 0 }];
    let mut grad_b = vec![0.0; if need_params { g.filters } else { 0 }];
    let in_len = g.channels * g.height * g.width;

    for s in 0..n {
        let gout = grad_out.sample(s);
        if need_params {
            for (k, gb) in grad_b.iter_mut().enumerate() {
                *gb += gout[k * area..(k + 1) * area].iter().sum::<f64>();
            }
            im2col(input.sample(s), g, &all, &mut cols);
            // grad_w[K, patch] += gout[K, area] * cols^T
            gemm(
                g.filters,
                area,
                patch,
                gout,
                (area as isize, 1),
                &cols,
                (1, area as isize),
                1.0,
                &mut grad_w,
                (patch as isize, 1),
            );
        }
        if let Some(gi) = grad_input.as_mut() {
            // grad_cols[patch, area] = W^T * gout
            gemm(
                patch,
                g.filters,
                area,
                weights,
                (1, patch as isize),
                gout,
                (area as isize, 1),
                0.0,
                &mut grad_cols,
                (area as isize, 1),
            );
            col2im(
                &grad_cols,
                g,
                &mut gi.data_mut()[s * in_len..(s + 1) * in_len],
            );
        }
    }
    Ok((grad_input, need_params.then_some((grad_w, grad_b))))
}

fn check_bias(op: &'static str, bias: &Tensor, filters: usize) -> Result<()> {
    if bias.len() != filters {
        return Err(DrnetError::shape(
            op,
            format!("bias has {} values for {filters} filters", bias.len()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct 7-loop cross-correlation.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
        let [n, c, h, wd] = x.dims4("t").unwrap();
        let [k, _, kh, kw] = w.dims4("t").unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; n * k * oh * ow];
        for ni in 0..n {
            for ki in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[ki];
                        for ci in 0..c {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (oy * s + dy) as isize - p as isize;
                                    let ix = (ox * s + dx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((ki * c + ci) * kh + dy) * kw + dx];
                                    }
                                }
                            }
                        }
                        out[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        t(&[n, k, oh, ow], &out)
    }

    #[test]
    fn scalar_case() {
        let out = conv2d_forward(&t(&[1, 1, 1, 1], &[5.0]), &t(&[1, 1, 1, 1], &[2.0]), &t(&[1], &[1.0]), 1, 0).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn two_by_two_sum() {
        let out = conv2d_forward(
            &t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]),
            &t(&[1, 1, 2, 2], &[1.0; 4]),
            &t(&[1], &[0.0]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = t(&[1, 1, 3, 3], &[1.0, -2.0, 3.0, 4.5, 5.0, 6.0, -7.0, 8.0, 9.0]);
        let out = conv2d_forward(&x, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn scalar_backward() {
        let grads = conv2d_backward(
            &t(&[1, 1, 1, 1], &[1.0]),
            &t(&[1, 1, 1, 1], &[5.0]),
            &t(&[1, 1, 1, 1], &[2.0]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(grads.input.data(), &[2.0]);
        assert_eq!(grads.weights.data(), &[5.0]);
        assert_eq!(grads.bias.data(), &[1.0]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = t(&[1, 2, 3, 3], &(0..18).map(|v| v as f64 * 0.3 - 2.0).collect::<Vec<_>>());
        let w = t(&[2, 2, 2, 2], &(0..16).map(|v| v as f64 * 0.1).collect::<Vec<_>>());
        let grads = conv2d_backward(&Tensor::zeros(vec![1, 2, 2, 2]), &x, &w, 1, 0).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_with_stride_and_padding() {
        let x = t(&[2, 3, 5, 4], &(0..120).map(|v| ((v * 37) % 11) as f64 - 5.0).collect::<Vec<_>>());
        let w = t(&[4, 3, 3, 2], &(0..72).map(|v| ((v * 13) % 7) as f64 * 0.25 - 0.7).collect::<Vec<_>>());
        let b = t(&[4], &[0.5, -1.0, 0.0, 2.0]);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 2), (3, 0)] {
            let fast = conv2d_forward(&x, &w, &b, s, p).unwrap();
            let slow = naive_conv(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "s={s} p={p}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn subset_zeroes_dropped_outputs_and_skips_dropped_inputs() {
        let x = t(&[1, 3, 4, 4], &(0..48).map(|v| (v as f64).sin()).collect::<Vec<_>>());
        let w = t(&[4, 3, 3, 3], &(0..108).map(|v| (v as f64 * 0.7).cos()).collect::<Vec<_>>());
        let b = t(&[4], &[0.1, 0.2, 0.3, 0.4]);
        let g = ConvGeometry::new("t", [3, 4, 4], 4, [3, 3], 1, 1).unwrap();
        let (sub, macs) =
            conv2d_forward_subset(&x, w.data(), b.data(), &g, Some(&[0, 2]), Some(&[1, 3])).unwrap();
        assert_eq!(macs, (2 * 2 * 9 * 16) as u64);

        // Oracle: zero the dropped input channel and run the dense kernel.
        let mut xz = x.clone();
        xz.data_mut()[16..32].fill(0.0);
        let dense = conv2d_forward(&xz, &w, &b, 1, 1).unwrap();
        for k in 0..4 {
            for i in 0..16 {
                let got = sub.data()[k * 16 + i];
                if k == 1 || k == 3 {
                    assert!((got - dense.data()[k * 16 + i]).abs() < 1e-12);
                } else {
                    assert_eq!(got, 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let err = conv2d_forward(
            &Tensor::zeros(vec![1, 2, 3, 3]),
            &Tensor::zeros(vec![1, 3, 1, 1]),
            &Tensor::zeros(vec![1]),
            1,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
        assert!(conv2d_forward(
            &Tensor::zeros(vec![1, 1, 3, 3]),
            &Tensor::zeros(vec![1, 1, 1, 1]),
            &Tensor::zeros(vec![1]),
            0,
            0
        )
        .is_err());
    }
}
