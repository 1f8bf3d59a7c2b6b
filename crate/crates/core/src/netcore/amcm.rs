//! Appearance-motion co-attention: a co-attention gate that scales each
//! modality by a learned scalar score, followed by motion-guided spatial and
//! channel attention with a residual connection.

use crate::error::{Error, Result};
use crate::netcore::conv::{ring_conv2d, ring_conv2d_backward, Conv2d};
use crate::netcore::tensor::{sigmoid, softmax, Tensor};

/// Gate conv `2 × (C_a + C_m) × 3 × 3`, spatial 1×1 conv `1 × C_m`,
/// channel 1×1 conv `C_a × C_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmcmParams {
    pub gate: Conv2d,
    pub spatial: Conv2d,
    pub channel: Conv2d,
}

impl AmcmParams {
    pub fn zeros(c_a: usize, c_m: usize) -> Self {
        AmcmParams {
            gate: Conv2d::zeros(2, c_a + c_m, 3, 3),
            spatial: Conv2d::zeros(1, c_m, 1, 1),
            channel: Conv2d::zeros(c_a, c_a, 1, 1),
        }
    }

    pub fn appearance_channels(&self) -> usize {
        self.channel.weight.shape()[0]
    }

    pub fn motion_channels(&self) -> usize {
        self.spatial.weight.shape()[1]
    }
}

/// Activations of the co-attention gate.
#[derive(Debug, Clone)]
pub struct GateForward {
    pub g_a: f64,
    pub g_m: f64,
    pub gated_a: Tensor,
    pub gated_m: Tensor,
    appearance: Tensor,
    motion: Tensor,
    concat: Tensor,
    scores: Tensor,
}

pub fn coattention_gate(fa: &Tensor, fm: &Tensor, p: &AmcmParams) -> Result<GateForward> {
    let (c_a, h, w) = fa.chw()?;
    let (c_m, hm, wm) = fm.chw()?;
    if (h, w) != (hm, wm) {
        return Err(Error::Shape(format!(
            "appearance {h}x{w} vs motion {hm}x{wm}"
        )));
    }
    if c_a != p.appearance_channels() || c_m != p.motion_channels() {
        return Err(Error::Shape(format!(
            "features have {c_a}+{c_m} channels, params expect {}+{}",
            p.appearance_channels(),
            p.motion_channels()
        )));
    }
    let concat = Tensor::concat_channels(&[fa, fm])?;
    let scores = ring_conv2d(&concat, &p.gate.weight, &p.gate.bias)?.map(sigmoid);
    let n = (h * w) as f64;
    let g_a = scores.plane(0).iter().sum::<f64>() / n;
    let g_m = scores.plane(1).iter().sum::<f64>() / n;
    Ok(GateForward {
        g_a,
        g_m,
        gated_a: fa.scale(g_a),
        gated_m: fm.scale(g_m),
        appearance: fa.clone(),
        motion: fm.clone(),
        concat,
        scores,
    })
}

#[derive(Debug, Clone)]
pub struct GateGrads {
    pub appearance: Tensor,
    pub motion: Tensor,
    pub gate: Conv2d,
}

pub fn coattention_gate_backward(
    fwd: &GateForward,
    d_gated_a: &Tensor,
    d_gated_m: &Tensor,
    p: &AmcmParams,
) -> Result<GateGrads> {
    let (c_a, h, w) = fwd.appearance.chw()?;
    let n = (h * w) as f64;
    let dg_a = d_gated_a.dot(&fwd.appearance)?;
    let dg_m = d_gated_m.dot(&fwd.motion)?;
    let mut d_pre = Tensor::zeros(&[2, h, w]);
    for (c, dg) in [(0, dg_a), (1, dg_m)] {
        let s = fwd.scores.plane(c);
        for (d, &sv) in d_pre.plane_mut(c).iter_mut().zip(s) {
            *d = dg / n * sv * (1.0 - sv);
        }
    }
    let conv = ring_conv2d_backward(&fwd.concat, &p.gate.weight, &d_pre)?;
    let split = c_a * h * w;
    let mut appearance = d_gated_a.scale(fwd.g_a);
    for (a, b) in appearance.data_mut().iter_mut().zip(&conv.input.data()[..split]) {
        *a += b;
    }
    let mut motion = d_gated_m.scale(fwd.g_m);
    for (a, b) in motion.data_mut().iter_mut().zip(&conv.input.data()[split..]) {
        *a += b;
    }
    Ok(GateGrads {
        appearance,
        motion,
        gate: Conv2d {
            weight: conv.weight,
            bias: conv.bias,
        },
    })
}

/// Activations of the motion-guided attention block.
#[derive(Debug, Clone)]
pub struct AttentionForward {
    pub output: Tensor,
    /// `Sigmoid(Conv1x1(G_m))`, shape `1 × h × w`.
    pub spatial_map: Tensor,
    /// Softmax over channels scaled by `C_a`.
    pub channel_weights: Vec<f64>,
    gated_a: Tensor,
    gated_m: Tensor,
    salient: Tensor,
    pooled: Vec<f64>,
    softmax: Vec<f64>,
}

pub fn motion_guided_attention(
    gated_a: &Tensor,
    gated_m: &Tensor,
    p: &AmcmParams,
) -> Result<AttentionForward> {
    let (c_a, h, w) = gated_a.chw()?;
    let (_, hm, wm) = gated_m.chw()?;
    if (h, w) != (hm, wm) || c_a != p.appearance_channels() {
        return Err(Error::Shape(format!(
            "attention inputs {:?} / {:?} do not match params",
            gated_a.shape(),
            gated_m.shape()
        )));
    }
    let spatial_map = ring_conv2d(gated_m, &p.spatial.weight, &p.spatial.bias)?.map(sigmoid);
    let map = spatial_map.plane(0);
    let mut salient = gated_a.clone();
    for c in 0..c_a {
        for (x, &m) in salient.plane_mut(c).iter_mut().zip(map) {
            *x *= m;
        }
    }
    let n = (h * w) as f64;
    let pooled: Vec<f64> = (0..c_a)
        .map(|c| salient.plane(c).iter().sum::<f64>() / n)
        .collect();
    let cw = p.channel.weight.data();
    let logits: Vec<f64> = (0..c_a)
        .map(|o| p.channel.bias.data()[o] + (0..c_a).map(|i| cw[o * c_a + i] * pooled[i]).sum::<f64>())
        .collect();
    let softmax = softmax(&logits);
    let channel_weights: Vec<f64> = softmax.iter().map(|s| s * c_a as f64).collect();
    let mut output = gated_a.clone();
    for c in 0..c_a {
        let wc = channel_weights[c];
        for (o, &s) in output.plane_mut(c).iter_mut().zip(salient.plane(c)) {
            *o += s * wc;
        }
    }
    Ok(AttentionForward {
        output,
        spatial_map,
        channel_weights,
        gated_a: gated_a.clone(),
        gated_m: gated_m.clone(),
        salient,
        pooled,
        softmax,
    })
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub gated_a: Tensor,
    pub gated_m: Tensor,
    pub spatial: Conv2d,
    pub channel: Conv2d,
}

pub fn motion_guided_attention_backward(
    fwd: &AttentionForward,
    d_out: &Tensor,
    p: &AmcmParams,
) -> Result<AttentionGrads> {
    let (c_a, h, w) = fwd.gated_a.chw()?;
    if d_out.shape() != fwd.output.shape() {
        return Err(Error::Shape(format!(
            "upstream {:?} vs output {:?}",
            d_out.shape(),
            fwd.output.shape()
        )));
    }
    let n = (h * w) as f64;
    let ca = c_a as f64;

    // Channel weights w_c = C·softmax(z)_c.
    let d_weights: Vec<f64> = (0..c_a)
        .map(|c| {
            d_out
                .plane(c)
                .iter()
                .zip(fwd.salient.plane(c))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let s_dot: f64 = fwd.softmax.iter().zip(&d_weights).map(|(s, d)| s * d).sum();
    let d_logits: Vec<f64> = (0..c_a)
        .map(|i| ca * fwd.softmax[i] * (d_weights[i] - s_dot))
        .collect();
    let cw = p.channel.weight.data();
    let channel = Conv2d {
        weight: Tensor::from_fn(&[c_a, c_a, 1, 1], |k| d_logits[k / c_a] * fwd.pooled[k % c_a]),
        bias: Tensor::from_vec(&[c_a], d_logits.clone())?,
    };
    let d_pooled: Vec<f64> = (0..c_a)
        .map(|i| (0..c_a).map(|o| cw[o * c_a + i] * d_logits[o]).sum())
        .collect();

    // G' feeds the output directly and through the pooled vector.
    let map = fwd.spatial_map.plane(0);
    let mut gated_a = d_out.clone();
    let mut d_map = vec![0.0; h * w];
    for c in 0..c_a {
        let wc = fwd.channel_weights[c];
        let dp = d_pooled[c] / n;
        let ga = fwd.gated_a.plane(c);
        let dout = d_out.plane(c);
        let dga = gated_a.plane_mut(c);
        for x in 0..h * w {
            let d_salient = dout[x] * wc + dp;
            dga[x] += d_salient * map[x];
            d_map[x] += d_salient * ga[x];
        }
    }
    let d_pre = Tensor::from_fn(&[1, h, w], |x| d_map[x] * map[x] * (1.0 - map[x]));
    let conv = ring_conv2d_backward(&fwd.gated_m, &p.spatial.weight, &d_pre)?;
    Ok(AttentionGrads {
        gated_a,
        gated_m: conv.input,
        spatial: Conv2d {
            weight: conv.weight,
            bias: conv.bias,
        },
        channel,
    })
}

/// Gate activations plus attention activations of one AMCM pass.
#[derive(Debug, Clone)]
pub struct AmcmForward {
    pub gate: GateForward,
    pub attention: AttentionForward,
}

/// Inspection record of one AMCM pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AmcmAux {
    pub g_a: f64,
    pub g_m: f64,
    pub spatial_map: Tensor,
    pub channel_weights: Vec<f64>,
}

impl AmcmForward {
    pub fn output(&self) -> &Tensor {
        &self.attention.output
    }

    pub fn aux(&self) -> AmcmAux {
        AmcmAux {
            g_a: self.gate.g_a,
            g_m: self.gate.g_m,
            spatial_map: self.attention.spatial_map.clone(),
            channel_weights: self.attention.channel_weights.clone(),
        }
    }
}

pub fn amcm_forward(fa: &Tensor, fm: &Tensor, p: &AmcmParams) -> Result<AmcmForward> {
    let gate = coattention_gate(fa, fm, p)?;
    let attention = motion_guided_attention(&gate.gated_a, &gate.gated_m, p)?;
    Ok(AmcmForward { gate, attention })
}

#[derive(Debug, Clone)]
pub struct AmcmGrads {
    pub appearance: Tensor,
    pub motion: Tensor,
    pub params: AmcmParams,
}

pub fn amcm_backward(fwd: &AmcmForward, d_out: &Tensor, p: &AmcmParams) -> Result<AmcmGrads> {
    let att = motion_guided_attention_backward(&fwd.attention, d_out, p)?;
    let gate = coattention_gate_backward(&fwd.gate, &att.gated_a, &att.gated_m, p)?;
    Ok(AmcmGrads {
        appearance: gate.appearance,
        motion: gate.motion,
        params: AmcmParams {
            gate: gate.gate,
            spatial: att.spatial,
            channel: att.channel,
        },
    })
}
