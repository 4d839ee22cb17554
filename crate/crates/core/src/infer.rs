//! Inference that skips masked-out conv channels entirely.
//!
//! A skipped channel's filter is never evaluated and its output map is zero,
//! which is what a zero gate would produce. The next conv layer also drops the
//! skipped channels from its input side.

use crate::error::{DrnetError, Result};
use crate::model::{GatedNetwork, Layer};
use crate::reconstruct::CombinedCiv;
use crate::tensor::{conv2d_forward_subset, dense_forward, maxpool2d_forward, relu_forward, softmax, Tensor};

/// Output of a masked forward pass plus the multiply-accumulates it cost.
#[derive(Clone, Debug)]
pub struct MaskedOutput {
    pub logits: Tensor,
    pub macs: u64,
    /// Multiply-accumulates of the unmasked network on the same input.
    pub full_macs: u64,
}

fn check_mask(net: &GatedNetwork, mask: &[bool]) -> Result<()> {
    if mask.len() != net.total_gated_channels() {
        return Err(DrnetError::invalid(format!(
            "mask has {} entries, network has {} gated channels",
            mask.len(),
            net.total_gated_channels()
        )));
    }
    Ok(())
}

/// Forward pass running only the channels set in `mask`.
pub fn masked_forward(net: &GatedNetwork, x: &Tensor, civ: &CombinedCiv) -> Result<Tensor> {
    Ok(masked_forward_counted(net, x, &civ.mask)?.logits)
}

pub fn masked_forward_counted(net: &GatedNetwork, x: &Tensor, mask: &[bool]) -> Result<MaskedOutput> {
    check_mask(net, mask)?;
    net.check_input(x)?;
    let mut cur = x.clone();
    // Channels of `cur` still live, when `cur` is a conv-derived feature map.
    let mut live: Option<Vec<usize>> = None;
    let mut macs = 0u64;
    let mut full_macs = 0u64;
    for (i, layer) in net.layers().iter().enumerate() {
        cur = match layer {
            Layer::Conv2d(c) => {
                let slot = net
                    .gate_map()
                    .iter()
                    .find(|s| s.conv_layer == i)
                    .expect("every conv layer is gated");
                let keep: Vec<usize> = slot.range.clone().filter(|&j| mask[j]).map(|j| j - slot.range.start).collect();
                let outs = (keep.len() < slot.channels()).then_some(keep.as_slice());
                let ins = live.as_deref().filter(|l| l.len() < c.geometry.channels);
                let (out, m) = conv2d_forward_subset(&cur, c.weights.data(), c.bias.data(), &c.geometry, ins, outs)?;
                macs += m;
                full_macs += (cur.batch() * c.geometry.filters * c.geometry.patch_len() * c.geometry.out_area()) as u64;
                live = Some(keep);
                out
            }
            Layer::Relu => relu_forward(&cur),
            Layer::MaxPool2d { size, stride } => maxpool2d_forward(&cur, *size, *stride)?.0,
            Layer::Flatten => {
                live = None;
                let n = cur.batch();
                let f = cur.len() / n;
                cur.reshape(vec![n, f])?
            }
            Layer::Dense(d) => {
                let m = (cur.batch() * d.weights.len()) as u64;
                macs += m;
                full_macs += m;
                dense_forward(&cur, &d.weights, &d.bias)?
            }
        };
    }
    Ok(MaskedOutput {
        logits: cur,
        macs,
        full_macs,
    })
}

/// Softmax restricted to `class_set`: renormalized over the set, zero elsewhere.
pub fn masked_softmax(logits: &[f64], class_set: &[usize]) -> Result<Vec<f64>> {
    if class_set.is_empty() {
        return Err(DrnetError::invalid("class set is empty"));
    }
    let mut seen = vec![false; logits.len()];
    for &c in class_set {
        match seen.get_mut(c) {
            None => {
                return Err(DrnetError::invalid(format!(
                    "class {c} outside {} logits",
                    logits.len()
                )))
            }
            Some(true) => return Err(DrnetError::invalid(format!("class {c} listed twice"))),
            Some(s) => *s = true,
        }
    }
    let picked: Vec<f64> = class_set.iter().map(|&c| logits[c]).collect();
    let mut out = vec![0.0; logits.len()];
    for (&c, p) in class_set.iter().zip(softmax(&picked)) {
        out[c] = p;
    }
    Ok(out)
}

/// Highest-scoring class among `class_set`; ties go to the earliest listed.
pub fn argmax_in_set(logits: &[f64], class_set: &[usize]) -> usize {
    let mut best = class_set[0];
    for &c in &class_set[1..] {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

/// Channel and parameter counts for one layer under a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: &'static str,
    pub total_channels: usize,
    pub running_channels: usize,
    pub total_params: usize,
    pub running_params: usize,
}

/// Size of the sub-network a mask selects.
///
/// Dense layers are always counted in full, even when some of their inputs are
/// zero because the conv channel feeding them is skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub total_channels: usize,
    pub running_channels: usize,
    pub total_params: usize,
    pub running_params: usize,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    pub fn channel_fraction(&self) -> f64 {
        self.running_channels as f64 / self.total_channels as f64
    }

    pub fn param_fraction(&self) -> f64 {
        self.running_params as f64 / self.total_params as f64
    }

    /// Plain-text table.
    pub fn table(&self) -> String {
        let mut s = String::from("dense layers counted in full\n");
        s.push_str(&format!(
            "{:>5}  {:<8} {:>9} {:>9} {:>9} {:>9}\n",
            "layer", "kind", "channels", "running", "params", "running"
        ));
        for l in &self.per_layer {
            s.push_str(&format!(
                "{:>5}  {:<8} {:>9} {:>9} {:>9} {:>9}\n",
                l.layer, l.kind, l.total_channels, l.running_channels, l.total_params, l.running_params
            ));
        }
        s.push_str(&format!(
            "total           {:>9} {:>9} {:>9} {:>9}\n",
            self.total_channels, self.running_channels, self.total_params, self.running_params
        ));
        s.push_str(&format!(
            "running fraction: channels {:.4}, params {:.4}\n",
            self.channel_fraction(),
            self.param_fraction()
        ));
        s
    }
}

pub fn cost_report(net: &GatedNetwork, mask: &[bool]) -> Result<CostReport> {
    check_mask(net, mask)?;
    let mut per_layer = Vec::new();
    let mut live_in: Option<usize> = None;
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Conv2d(c) => {
                let slot = net.gate_map().iter().find(|s| s.conv_layer == i).expect("gated conv");
                let g = &c.geometry;
                let running = mask[slot.range.clone()].iter().filter(|&&m| m).count();
                let ins = live_in.unwrap_or(g.channels);
                per_layer.push(LayerCost {
                    layer: i,
                    kind: "conv2d",
                    total_channels: g.filters,
                    running_channels: running,
                    total_params: g.param_count(),
                    running_params: running * ins * g.kernel_h * g.kernel_w + running,
                });
                live_in = Some(running);
            }
            Layer::Dense(d) => {
                let p = d.weights.len() + d.bias.len();
                per_layer.push(LayerCost {
                    layer: i,
                    kind: "dense",
                    total_channels: 0,
                    running_channels: 0,
                    total_params: p,
                    running_params: p,
                });
            }
            Layer::Flatten => live_in = None,
            _ => {}
        }
    }
    Ok(CostReport {
        total_channels: mask.len(),
        running_channels: mask.iter().filter(|&&m| m).count(),
        total_params: per_layer.iter().map(|l| l.total_params).sum(),
        running_params: per_layer.iter().map(|l| l.running_params).sum(),
        per_layer,
    })
}
