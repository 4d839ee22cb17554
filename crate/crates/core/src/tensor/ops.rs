use super::{gemm, Tensor};
use crate::error::{DrnetError, Result};

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(DrnetError::shape(
            "relu_backward",
            format!("grad {:?} vs input {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}

/// Flat input offsets of the element selected by each pooling window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Max-pooling with a square window. Ties resolve to the first maximum in row-major order.
pub fn maxpool2d_forward(input: &Tensor, size: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    let [n, c, h, w] = input.dims4("maxpool2d_forward")?;
    if size == 0 || stride == 0 || size > h || size > w {
        return Err(DrnetError::shape(
            "maxpool2d_forward",
            format!("window {size} stride {stride} does not fit a {h}x{w} map"),
        ));
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = x[best_idx];
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward(grad_out: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad_out.len() != indices.argmax.len() {
        return Err(DrnetError::shape(
            "maxpool2d_backward",
            format!(
                "grad has {} values, pooling produced {}",
                grad_out.len(),
                indices.argmax.len()
            ),
        ));
    }
    let mut grad = Tensor::zeros(indices.input_shape.clone());
    let dst = grad.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(&indices.argmax) {
        dst[i] += g;
    }
    Ok(grad)
}

/// `out[N,O] = input[N,I] * weights[O,I]^T + bias[O]`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, i] = input.dims2("dense_forward")?;
    let [o, wi] = weights.dims2("dense_forward")?;
    if wi != i || bias.len() != o {
        return Err(DrnetError::shape(
            "dense_forward",
            format!(
                "input has {i} features, weights are {o}x{wi}, bias has {}",
                bias.len()
            ),
        ));
    }
    let mut out = vec![0.0; n * o];
    gemm(
        n,
        i,
        o,
        input.data(),
        (i as isize, 1),
        weights.data(),
        (1, i as isize),
        0.0,
        &mut out,
        (o as isize, 1),
    );
    for row in out.chunks_exact_mut(o) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::new(vec![n, o], out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(grad_out: &Tensor, input: &Tensor, weights: &Tensor) -> Result<DenseGrads> {
    let [n, i] = input.dims2("dense_backward")?;
    let [o, wi] = weights.dims2("dense_backward")?;
    if wi != i || grad_out.shape() != [n, o] {
        return Err(DrnetError::shape(
            "dense_backward",
            format!(
                "grad {:?}, input {:?}, weights {:?}",
                grad_out.shape(),
                input.shape(),
                weights.shape()
            ),
        ));
    }
    let g = grad_out.data();
    let mut gx = vec![0.0; n * i];
    gemm(n, o, i, g, (o as isize, 1), weights.data(), (i as isize, 1), 0.0, &mut gx, (i as isize, 1));
    let mut gw = vec![0.0; o * i];
    gemm(o, n, i, g, (1, o as isize), input.data(), (i as isize, 1), 0.0, &mut gw, (i as isize, 1));
    let mut gb = vec![0.0; o];
    for row in g.chunks_exact(o) {
        for (b, v) in gb.iter_mut().zip(row) {
            *b += v;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n, i], gx)?,
        weights: Tensor::new(vec![o, i], gw)?,
        bias: Tensor::from_vec(gb),
    })
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(softmax(logits))` via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}
