use super::{GatedNetwork, Layer};
use crate::error::{DrnetError, Result};
use crate::tensor::{
    conv2d_backward_with, conv2d_forward_subset, dense_backward, dense_forward, maxpool2d_backward,
    maxpool2d_forward, relu_backward, relu_forward, PoolIndices, Tensor,
};

/// Intermediates retained by a forward pass for the matching backward pass.
#[derive(Debug, Default)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    /// Post-ReLU maps before gate scaling, at gated activation layers.
    ungated: Vec<Option<Tensor>>,
    pools: Vec<Option<PoolIndices>>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    /// d loss / d gate, summed over the batch. Present when gates were supplied.
    pub gates: Option<Vec<f64>>,
    /// Same order as [`GatedNetwork::params`].
    pub params: Option<Vec<Tensor>>,
}

impl GatedNetwork {
    /// Plain forward pass, no gates involved.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.run(x, None, None)
    }

    /// Forward pass with every conv channel's post-ReLU map scaled by its gate.
    pub fn forward_gated(&self, x: &Tensor, gates: &[f64]) -> Result<Tensor> {
        self.check_input(x)?;
        self.check_gates(gates)?;
        self.run(x, Some(gates), None)
    }

    /// As [`forward_gated`](Self::forward_gated) (or [`forward`](Self::forward)
    /// when `gates` is `None`), retaining what [`backward`](Self::backward) needs.
    pub fn forward_cached(&self, x: &Tensor, gates: Option<&[f64]>) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        if let Some(g) = gates {
            self.check_gates(g)?;
        }
        let mut cache = ForwardCache::default();
        let out = self.run(x, gates, Some(&mut cache))?;
        Ok((out, cache))
    }

    fn gate_slot_at(&self, layer: usize) -> Option<&super::GateSlot> {
        self.gate_map.iter().find(|s| s.activation_layer == layer)
    }

    fn run(&self, x: &Tensor, gates: Option<&[f64]>, mut cache: Option<&mut ForwardCache>) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pool_idx = None;
            let mut ungated = None;
            let next = match layer {
                Layer::Conv2d(c) => {
                    conv2d_forward_subset(&cur, c.weights.data(), c.bias.data(), &c.geometry, None, None)?.0
                }
                Layer::Relu => {
                    let mut out = relu_forward(&cur);
                    if let (Some(g), Some(slot)) = (gates, self.gate_slot_at(i)) {
                        if cache.is_some() {
                            ungated = Some(out.clone());
                        }
                        scale_channels(&mut out, &g[slot.range.clone()]);
                    }
                    out
                }
                Layer::MaxPool2d { size, stride } => {
                    let (out, idx) = maxpool2d_forward(&cur, *size, *stride)?;
                    pool_idx = Some(idx);
                    out
                }
                Layer::Flatten => {
                    let n = cur.batch();
                    let f = cur.len() / n;
                    cur.clone().reshape(vec![n, f])?
                }
                Layer::Dense(d) => dense_forward(&cur, &d.weights, &d.bias)?,
            };
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(std::mem::replace(&mut cur, next));
                c.ungated.push(ungated);
                c.pools.push(pool_idx);
            } else {
                cur = next;
            }
        }
        Ok(cur)
    }

    /// Back-propagates `grad_logits` through a cached forward pass.
    ///
    /// `gates` must be the vector the cached pass used. Parameter gradients are
    /// only computed when `need_params` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        gates: Option<&[f64]>,
        grad_logits: Tensor,
        need_params: bool,
    ) -> Result<Gradients> {
        if cache.inputs.len() != self.layers.len() {
            return Err(DrnetError::invalid("forward cache does not belong to this network"));
        }
        let mut gate_grads = gates.map(|g| vec![0.0; g.len()]);
        let mut param_grads: Vec<Tensor> = Vec::new();
        let mut grad = grad_logits;
        // Layers below the first gate need no input gradient unless parameters are trained.
        let first_needed = if need_params {
            0
        } else {
            self.gate_map.first().map_or(0, |s| s.activation_layer)
        };
        for i in (first_needed..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            grad = match &self.layers[i] {
                Layer::Dense(d) => {
                    let g = dense_backward(&grad, input, &d.weights)?;
                    if need_params {
                        param_grads.push(g.bias);
                        param_grads.push(g.weights);
                    }
                    g.input
                }
                Layer::Flatten => grad.reshape(input.shape().to_vec())?,
                Layer::MaxPool2d { .. } => {
                    let idx = cache.pools[i].as_ref().expect("pool indices cached");
                    maxpool2d_backward(&grad, idx)?
                }
                Layer::Relu => {
                    if let (Some(g), Some(slot)) = (gates, self.gate_slot_at(i)) {
                        let ungated = cache.ungated[i].as_ref().expect("ungated map cached");
                        let acc = gate_grads.as_mut().expect("gate grads allocated");
                        accumulate_gate_grads(&grad, ungated, &mut acc[slot.range.clone()]);
                        scale_channels(&mut grad, &g[slot.range.clone()]);
                    }
                    relu_backward(&grad, input)?
                }
                Layer::Conv2d(c) => {
                    let (gi, gp) =
                        conv2d_backward_with(&grad, input, c.weights.data(), &c.geometry, i > 0, need_params)?;
                    if let Some((gw, gb)) = gp {
                        param_grads.push(Tensor::from_vec(gb));
                        param_grads.push(Tensor::new(c.weights.shape().to_vec(), gw)?);
                    }
                    match gi {
                        Some(gi) => gi,
                        None => break,
                    }
                }
            };
        }
        param_grads.reverse();
        Ok(Gradients {
            gates: gate_grads,
            params: need_params.then_some(param_grads),
        })
    }
}

/// Multiplies channel `c` of every sample in an `[N,C,H,W]` tensor by `scale[c]`.
pub(crate) fn scale_channels(t: &mut Tensor, scale: &[f64]) {
    let channels = scale.len();
    let plane = t.len() / (t.batch() * channels);
    for (j, chunk) in t.data_mut().chunks_exact_mut(plane).enumerate() {
        let s = scale[j % channels];
        for v in chunk {
            *v *= s;
        }
    }
}

/// `acc[c] += sum over samples and positions of grad * ungated` for channel `c`.
fn accumulate_gate_grads(grad: &Tensor, ungated: &Tensor, acc: &mut [f64]) {
    let channels = acc.len();
    let plane = grad.len() / (grad.batch() * channels);
    for (j, (g, r)) in grad
        .data()
        .chunks_exact(plane)
        .zip(ungated.data().chunks_exact(plane))
        .enumerate()
    {
        acc[j % channels] += g.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::super::Architecture;
    use super::*;
    use crate::tensor::softmax;

    fn net() -> GatedNetwork {
        GatedNetwork::init(Architecture::mnist5(), 11).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let data = (0..784)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 1000.0)
            .collect();
        Tensor::new(vec![1, 1, 28, 28], data).unwrap()
    }

    #[test]
    fn all_ones_gates_are_bitwise_identity() {
        let net = net();
        let ones = vec![1.0; 56];
        for s in 0..3 {
            let x = image(s);
            assert_eq!(net.forward(&x).unwrap(), net.forward_gated(&x, &ones).unwrap());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = net();
        let x = image(5);
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let net = GatedNetwork::zeros(Architecture::mnist5()).unwrap();
        let logits = net.forward(&image(1)).unwrap();
        let first = logits.data()[0];
        assert!(logits.data().iter().all(|&v| v == first));
        for p in softmax(logits.data()) {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gates_leave_only_dense_biases() {
        let mut net = net();
        for t in net.params_mut() {
            if t.shape().len() == 1 {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.01 * (i as f64 + 1.0);
                }
            }
        }
        let logits = net.forward_gated(&image(2), &[0.0; 56]).unwrap();
        // Oracle: dense2(relu(dense1(0))) = W2 relu(b1) + b2.
        let p = net.params();
        let (w2, b1, b2) = (p[8], p[7], p[9]);
        for o in 0..10 {
            let mut want = b2.data()[o];
            for h in 0..64 {
                want += w2.data()[o * 64 + h] * b1.data()[h].max(0.0);
            }
            assert!((logits.data()[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn doubled_gate_equals_doubled_channel() {
        let net = net();
        let x = image(3);
        let mut gates = vec![1.0; 56];
        gates[10] = 2.0; // conv layer 1, channel 2
        let gated = net.forward_gated(&x, &gates).unwrap();

        // Dense recompute: run layer by layer, doubling channel 2 after the second ReLU.
        let mut cur = x;
        for (i, layer) in net.layers().iter().enumerate() {
            cur = match layer {
                Layer::Conv2d(c) => {
                    crate::tensor::conv2d_forward(&cur, &c.weights, &c.bias, c.geometry.stride, c.geometry.padding)
                        .unwrap()
                }
                Layer::Relu => {
                    let mut r = relu_forward(&cur);
                    if i == 4 {
                        let plane = 14 * 14;
                        for v in &mut r.data_mut()[2 * plane..3 * plane] {
                            *v *= 2.0;
                        }
                    }
                    r
                }
                Layer::MaxPool2d { size, stride } => maxpool2d_forward(&cur, *size, *stride).unwrap().0,
                Layer::Flatten => {
                    let n = cur.len();
                    cur.reshape(vec![1, n]).unwrap()
                }
                Layer::Dense(d) => dense_forward(&cur, &d.weights, &d.bias).unwrap(),
            };
        }
        for (a, b) in gated.data().iter().zip(cur.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_affine_in_single_gate() {
        // Downstream ReLUs make the map piecewise affine, so the three points
        // stay close enough to share one activation pattern.
        let net = net();
        let x = image(4);
        for gate in [3, 12, 30, 55] {
            let mut gates = vec![1.0; 56];
            let mut at = |v: f64| {
                gates[gate] = v;
                net.forward_gated(&x, &gates).unwrap().into_data()
            };
            let (a, b, c) = (at(0.999), at(1.0), at(1.001));
            for k in 0..10 {
                let mid = (a[k] + c[k]) / 2.0;
                assert!((b[k] - mid).abs() <= 1e-9, "gate {gate} logit {k}: {} vs {}", b[k], mid);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = net();
        assert!(net.forward(&Tensor::zeros(vec![1, 1, 27, 28])).is_err());
        assert!(net.forward_gated(&image(0), &[1.0; 55]).is_err());
    }
}
