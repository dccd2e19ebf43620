//! Small differentiable occupancy head.
//!
//! BEV queries `(h, w, c)` are decoded per cell by a two-layer tanh MLP
//! into a voxel volume `(h, w, z, ch_v)`, refined by a three-level 3D UNet
//! (encoder features at 1/2, 1/4 and 1/8 resolution, a bottleneck
//! convolution at 1/8, and a mirrored decoder with skip concatenation),
//! and mapped to per-voxel class logits by a linear classifier. Training
//! loss is `ce * CE + dice * Dice`; [`backward`] returns exact gradients
//! for every parameter.

pub mod gradcheck;
pub mod layers;
pub mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::grid::{LabelGrid, VoxelMask};
use layers::{
    add_assign, avg_pool2, avg_pool2_backward, concat, split, tanh_backward, tanh_in_place,
    upsample2, upsample2_backward, Conv3d,
};
pub use loss::{ce_loss, dice_loss, total_loss, LossWeights};

/// UNet input spatial dims must be divisible by this.
pub const UNET_FACTOR: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BevQueryGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl BevQueryGrid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || data.len() != h * w * c {
            return Err(OccError::Shape(format!(
                "bev grid {h}x{w}x{c} with {} values",
                data.len()
            )));
        }
        Ok(BevQueryGrid { h, w, c, data })
    }

    pub fn random(h: usize, w: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BevQueryGrid {
            h,
            w,
            c,
            data: (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let o = (x * self.w + y) * self.c;
        &self.data[o..o + self.c]
    }
}

/// Dense `(h, w, z, ch)` features, channel innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureVolume {
    pub h: usize,
    pub w: usize,
    pub z: usize,
    pub ch: usize,
    pub data: Vec<f64>,
}

impl VoxelFeatureVolume {
    pub fn new(h: usize, w: usize, z: usize, ch: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || z == 0 || ch == 0 || data.len() != h * w * z * ch {
            return Err(OccError::Shape(format!(
                "volume {h}x{w}x{z}x{ch} with {} values",
                data.len()
            )));
        }
        Ok(VoxelFeatureVolume { h, w, z, ch, data })
    }

    pub fn zeros(h: usize, w: usize, z: usize, ch: usize) -> Self {
        VoxelFeatureVolume {
            h,
            w,
            z,
            ch,
            data: vec![0.0; h * w * z * ch],
        }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w * self.z
    }

    /// Offset of the first channel of cell `(a, b, c)`.
    pub fn cell_index(&self, a: usize, b: usize, c: usize) -> usize {
        ((a * self.w + b) * self.z + c) * self.ch
    }

    pub fn at(&self, a: usize, b: usize, c: usize, k: usize) -> f64 {
        self.data[self.cell_index(a, b, c) + k]
    }
}

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub bev_channels: usize,
    pub hidden: usize,
    /// Height cells produced per BEV cell.
    pub z: usize,
    /// Channels per decoded voxel.
    pub ch_v: usize,
    /// Encoder widths at full, 1/2 and 1/4 resolution, then the bottleneck.
    pub unet_widths: [usize; 4],
    pub ch_out: usize,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            bev_channels: 4,
            hidden: 6,
            z: 8,
            ch_v: 1,
            unet_widths: [2, 3, 3, 4],
            ch_out: 2,
            num_classes: 18,
        }
    }
}

impl HeadConfig {
    fn validate(&self) -> Result<()> {
        let sizes = [
            self.bev_channels,
            self.hidden,
            self.z,
            self.ch_v,
            self.ch_out,
            self.num_classes,
        ];
        if sizes.iter().chain(&self.unet_widths).any(|&s| s == 0) {
            return Err(OccError::invalid("head config", format!("{self:?} has a zero size")));
        }
        Ok(())
    }
}

/// Two-layer per-cell MLP `c -> hidden -> z * ch_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub c_in: usize,
    pub hidden: usize,
    pub z: usize,
    pub ch_v: usize,
    /// `[hidden][c_in]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[z * ch_v][hidden]`, output row `k * ch_v + ch` feeds height `k`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(c_in: usize, hidden: usize, z: usize, ch_v: usize) -> Self {
        let out = z * ch_v;
        Mlp {
            c_in,
            hidden,
            z,
            ch_v,
            w1: vec![0.0; hidden * c_in],
            b1: vec![0.0; hidden],
            w2: vec![0.0; out * hidden],
            b2: vec![0.0; out],
        }
    }

    fn out_dim(&self) -> usize {
        self.z * self.ch_v
    }

    fn hidden_act(&self, q: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.c_in..(j + 1) * self.c_in];
                (self.b1[j] + row.iter().zip(q).map(|(w, x)| w * x).sum::<f64>()).tanh()
            })
            .collect()
    }

    fn decode_cell(&self, hidden: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w2[r * self.hidden..(r + 1) * self.hidden];
            *o = self.b2[r] + row.iter().zip(hidden).map(|(w, a)| w * a).sum::<f64>();
        }
    }

    /// Accumulates this cell's parameter gradients; returns `dL/dq`.
    pub fn backward_cell(&self, q: &[f64], d_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let act = self.hidden_act(q);
        let mut d_hidden = vec![0.0; self.hidden];
        for (r, &g) in d_out.iter().enumerate() {
            grad.b2[r] += g;
            for j in 0..self.hidden {
                grad.w2[r * self.hidden + j] += g * act[j];
                d_hidden[j] += g * self.w2[r * self.hidden + j];
            }
        }
        let mut d_q = vec![0.0; self.c_in];
        for j in 0..self.hidden {
            let d_pre = d_hidden[j] * (1.0 - act[j] * act[j]);
            grad.b1[j] += d_pre;
            for i in 0..self.c_in {
                grad.w1[j * self.c_in + i] += d_pre * q[i];
                d_q[i] += d_pre * self.w1[j * self.c_in + i];
            }
        }
        d_q
    }
}

/// Encoder convs at 1, 1/2, 1/4, bottleneck at 1/8, decoder back up.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet3d {
    pub enc1: Conv3d,
    pub enc2: Conv3d,
    pub enc3: Conv3d,
    pub bottleneck: Conv3d,
    pub dec3: Conv3d,
    pub dec2: Conv3d,
    pub dec1: Conv3d,
}

impl UNet3d {
    pub fn zeros(ch_in: usize, widths: [usize; 4], ch_out: usize) -> Self {
        let [c1, c2, c3, cb] = widths;
        UNet3d {
            enc1: Conv3d::zeros(ch_in, c1),
            enc2: Conv3d::zeros(c1, c2),
            enc3: Conv3d::zeros(c2, c3),
            bottleneck: Conv3d::zeros(c3, cb),
            dec3: Conv3d::zeros(cb + c3, c3),
            dec2: Conv3d::zeros(c3 + c2, c2),
            dec1: Conv3d::zeros(c2 + c1, ch_out),
        }
    }

    fn convs(&self) -> [(&'static str, &Conv3d); 7] {
        [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("enc3", &self.enc3),
            ("bottleneck", &self.bottleneck),
            ("dec3", &self.dec3),
            ("dec2", &self.dec2),
            ("dec1", &self.dec1),
        ]
    }

    fn convs_mut(&mut self) -> [&mut Conv3d; 7] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.enc3,
            &mut self.bottleneck,
            &mut self.dec3,
            &mut self.dec2,
            &mut self.dec1,
        ]
    }

    pub fn ch_in(&self) -> usize {
        self.enc1.cin
    }

    pub fn ch_out(&self) -> usize {
        self.dec1.cout
    }
}

/// Per-voxel linear map `ch_in -> num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub ch_in: usize,
    pub num_classes: usize,
    /// `[num_classes][ch_in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Classifier {
    pub fn zeros(ch_in: usize, num_classes: usize) -> Self {
        Classifier {
            ch_in,
            num_classes,
            weight: vec![0.0; num_classes * ch_in],
            bias: vec![0.0; num_classes],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub mlp: Mlp,
    pub unet: UNet3d,
    pub classifier: Classifier,
    pub loss_weights: LossWeights,
}

/// Gradients of the loss with respect to every trainable tensor, plus the
/// BEV input.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub mlp: Mlp,
    pub unet: UNet3d,
    pub classifier: Classifier,
    pub bev: Vec<f64>,
}

/// A named, shaped, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn tensor_views<'a>(
    mlp: &'a Mlp,
    unet: &'a UNet3d,
    cls: &'a Classifier,
) -> Vec<(String, Vec<usize>, &'a [f64])> {
    let mut out = vec![
        ("mlp.w1".to_string(), vec![mlp.hidden, mlp.c_in], mlp.w1.as_slice()),
        ("mlp.b1".to_string(), vec![mlp.hidden], mlp.b1.as_slice()),
        ("mlp.w2".to_string(), vec![mlp.z, mlp.ch_v, mlp.hidden], mlp.w2.as_slice()),
        ("mlp.b2".to_string(), vec![mlp.z, mlp.ch_v], mlp.b2.as_slice()),
    ];
    for (name, conv) in unet.convs() {
        out.push((
            format!("unet.{name}.weight"),
            vec![conv.cout, conv.cin, 3, 3, 3],
            conv.weight.as_slice(),
        ));
        out.push((format!("unet.{name}.bias"), vec![conv.cout], conv.bias.as_slice()));
    }
    out.push((
        "cls.weight".to_string(),
        vec![cls.num_classes, cls.ch_in],
        cls.weight.as_slice(),
    ));
    out.push(("cls.bias".to_string(), vec![cls.num_classes], cls.bias.as_slice()));
    out
}

fn tensor_views_mut<'a>(
    mlp: &'a mut Mlp,
    unet: &'a mut UNet3d,
    cls: &'a mut Classifier,
) -> Vec<&'a mut [f64]> {
    let mut out: Vec<&'a mut [f64]> = vec![&mut mlp.w1, &mut mlp.b1, &mut mlp.w2, &mut mlp.b2];
    for conv in unet.convs_mut() {
        out.push(&mut conv.weight);
        out.push(&mut conv.bias);
    }
    out.push(&mut cls.weight);
    out.push(&mut cls.bias);
    out
}

impl HeadParams {
    pub fn zeros(cfg: &HeadConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(HeadParams {
            mlp: Mlp::zeros(cfg.bev_channels, cfg.hidden, cfg.z, cfg.ch_v),
            unet: UNet3d::zeros(cfg.ch_v, cfg.unet_widths, cfg.ch_out),
            classifier: Classifier::zeros(cfg.ch_out, cfg.num_classes),
            loss_weights: LossWeights::default(),
        })
    }

    /// Every parameter drawn uniformly from `[-scale, scale]`, reproducibly.
    pub fn random(cfg: &HeadConfig, seed: u64, scale: f64) -> Result<Self> {
        let mut p = HeadParams::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.gen_range(-scale..=scale));
        }
        Ok(p)
    }

    pub fn config(&self) -> HeadConfig {
        let u = &self.unet;
        HeadConfig {
            bev_channels: self.mlp.c_in,
            hidden: self.mlp.hidden,
            z: self.mlp.z,
            ch_v: self.mlp.ch_v,
            unet_widths: [u.enc1.cout, u.enc2.cout, u.enc3.cout, u.bottleneck.cout],
            ch_out: u.dec1.cout,
            num_classes: self.classifier.num_classes,
        }
    }

    /// Trainable tensors in a fixed order, shared with [`HeadGrads`].
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        tensor_views(&self.mlp, &self.unet, &self.classifier)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        tensor_views_mut(&mut self.mlp, &mut self.unet, &mut self.classifier)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// Trainable tensors followed by `loss_weights` as a length-2 tensor.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect();
        out.push(NamedTensor {
            name: "loss_weights".into(),
            shape: vec![2],
            data: vec![self.loss_weights.ce, self.loss_weights.dice],
        });
        out
    }

    /// Rebuilds parameters from [`HeadParams::to_named_tensors`] output;
    /// sizes are inferred from the tensor shapes.
    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| OccError::invalid("head parameters", format!("missing {name}")))
        };
        let dim = |name: &str, axis: usize| -> Result<usize> {
            find(name)?.shape.get(axis).copied().ok_or_else(|| {
                OccError::invalid("head parameters", format!("{name} has rank < {}", axis + 1))
            })
        };
        let cfg = HeadConfig {
            bev_channels: dim("mlp.w1", 1)?,
            hidden: dim("mlp.w1", 0)?,
            z: dim("mlp.w2", 0)?,
            ch_v: dim("mlp.w2", 1)?,
            unet_widths: [
                dim("unet.enc1.weight", 0)?,
                dim("unet.enc2.weight", 0)?,
                dim("unet.enc3.weight", 0)?,
                dim("unet.bottleneck.weight", 0)?,
            ],
            ch_out: dim("unet.dec1.weight", 0)?,
            num_classes: dim("cls.weight", 0)?,
        };
        let mut params = HeadParams::zeros(&cfg)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if tensors.len() != expected.len() + 1 {
            return Err(OccError::invalid(
                "head parameters",
                format!("{} tensors, expected {}", tensors.len(), expected.len() + 1),
            ));
        }
        for ((name, shape), slot) in expected.iter().zip(params.tensors_mut()) {
            let t = find(name)?;
            if &t.shape != shape || t.data.len() != slot.len() {
                return Err(OccError::invalid(
                    "head parameters",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape),
                ));
            }
            slot.copy_from_slice(&t.data);
        }
        let lw = find("loss_weights")?;
        if lw.data.len() != 2 {
            return Err(OccError::invalid("head parameters", "loss_weights needs 2 values"));
        }
        params.loss_weights = LossWeights::new(lw.data[0], lw.data[1])?;
        Ok(params)
    }
}

impl HeadGrads {
    fn zeros_like(p: &HeadParams, bev_len: usize) -> Self {
        let cfg = p.config();
        HeadGrads {
            mlp: Mlp::zeros(cfg.bev_channels, cfg.hidden, cfg.z, cfg.ch_v),
            unet: UNet3d::zeros(cfg.ch_v, cfg.unet_widths, cfg.ch_out),
            classifier: Classifier::zeros(cfg.ch_out, cfg.num_classes),
            bev: vec![0.0; bev_len],
        }
    }

    /// Same order as [`HeadParams::tensors`].
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        tensor_views(&self.mlp, &self.unet, &self.classifier)
    }
}

/// Per-cell decode of BEV queries into `(h, w, z, ch_v)`.
pub fn mlp_decode(q: &BevQueryGrid, params: &HeadParams) -> Result<VoxelFeatureVolume> {
    let mlp = &params.mlp;
    if q.c != mlp.c_in {
        return Err(OccError::Shape(format!(
            "bev channels {} vs mlp input {}",
            q.c, mlp.c_in
        )));
    }
    let mut out = VoxelFeatureVolume::zeros(q.h, q.w, mlp.z, mlp.ch_v);
    let col = mlp.out_dim();
    for x in 0..q.h {
        for y in 0..q.w {
            let act = mlp.hidden_act(q.cell(x, y));
            let o = (x * q.w + y) * col;
            mlp.decode_cell(&act, &mut out.data[o..o + col]);
        }
    }
    Ok(out)
}

/// Activations kept for the backward pass.
struct UNetTrace {
    x: VoxelFeatureVolume,
    e1: VoxelFeatureVolume,
    p1: VoxelFeatureVolume,
    e2: VoxelFeatureVolume,
    p2: VoxelFeatureVolume,
    e3: VoxelFeatureVolume,
    p3: VoxelFeatureVolume,
    b: VoxelFeatureVolume,
    c3: VoxelFeatureVolume,
    g3: VoxelFeatureVolume,
    c2: VoxelFeatureVolume,
    g2: VoxelFeatureVolume,
    c1: VoxelFeatureVolume,
    g1: VoxelFeatureVolume,
}

fn conv_tanh(conv: &Conv3d, x: &VoxelFeatureVolume) -> VoxelFeatureVolume {
    let mut y = conv.forward(x);
    tanh_in_place(&mut y);
    y
}

fn unet_trace(v: &VoxelFeatureVolume, unet: &UNet3d) -> Result<UNetTrace> {
    if v.ch != unet.ch_in() {
        return Err(OccError::Shape(format!(
            "volume channels {} vs unet input {}",
            v.ch,
            unet.ch_in()
        )));
    }
    if [v.h, v.w, v.z].iter().any(|d| d % UNET_FACTOR != 0) {
        return Err(OccError::Shape(format!(
            "volume {}x{}x{} not divisible by {UNET_FACTOR}",
            v.h, v.w, v.z
        )));
    }
    let e1 = conv_tanh(&unet.enc1, v);
    let p1 = avg_pool2(&e1);
    let e2 = conv_tanh(&unet.enc2, &p1);
    let p2 = avg_pool2(&e2);
    let e3 = conv_tanh(&unet.enc3, &p2);
    let p3 = avg_pool2(&e3);
    let b = conv_tanh(&unet.bottleneck, &p3);
    let c3 = concat(&upsample2(&b), &e3);
    let g3 = conv_tanh(&unet.dec3, &c3);
    let c2 = concat(&upsample2(&g3), &e2);
    let g2 = conv_tanh(&unet.dec2, &c2);
    let c1 = concat(&upsample2(&g2), &e1);
    let g1 = conv_tanh(&unet.dec1, &c1);
    Ok(UNetTrace {
        x: v.clone(),
        e1,
        p1,
        e2,
        p2,
        e3,
        p3,
        b,
        c3,
        g3,
        c2,
        g2,
        c1,
        g1,
    })
}

pub fn unet3d_forward(v: &VoxelFeatureVolume, params: &HeadParams) -> Result<VoxelFeatureVolume> {
    Ok(unet_trace(v, &params.unet)?.g1)
}

fn unet_backward(
    unet: &UNet3d,
    t: &UNetTrace,
    d_out: &VoxelFeatureVolume,
    grad: &mut UNet3d,
) -> VoxelFeatureVolume {
    let d = tanh_backward(&t.g1, d_out);
    let (d_up, mut d_e1) = split(&unet.dec1.backward(&t.c1, &d, &mut grad.dec1), t.g2.ch);
    let d_g2 = upsample2_backward(&d_up);

    let d = tanh_backward(&t.g2, &d_g2);
    let (d_up, mut d_e2) = split(&unet.dec2.backward(&t.c2, &d, &mut grad.dec2), t.g3.ch);
    let d_g3 = upsample2_backward(&d_up);

    let d = tanh_backward(&t.g3, &d_g3);
    let (d_up, mut d_e3) = split(&unet.dec3.backward(&t.c3, &d, &mut grad.dec3), t.b.ch);
    let d_b = upsample2_backward(&d_up);

    let d = tanh_backward(&t.b, &d_b);
    let d_p3 = unet.bottleneck.backward(&t.p3, &d, &mut grad.bottleneck);
    add_assign(&mut d_e3, &avg_pool2_backward(&d_p3));

    let d = tanh_backward(&t.e3, &d_e3);
    let d_p2 = unet.enc3.backward(&t.p2, &d, &mut grad.enc3);
    add_assign(&mut d_e2, &avg_pool2_backward(&d_p2));

    let d = tanh_backward(&t.e2, &d_e2);
    let d_p1 = unet.enc2.backward(&t.p1, &d, &mut grad.enc2);
    add_assign(&mut d_e1, &avg_pool2_backward(&d_p1));

    let d = tanh_backward(&t.e1, &d_e1);
    unet.enc1.backward(&t.x, &d, &mut grad.enc1)
}

/// Per-voxel logits `W f + b`, returned as a volume with `num_classes`
/// channels.
pub fn classify(v: &VoxelFeatureVolume, params: &HeadParams) -> Result<VoxelFeatureVolume> {
    let cls = &params.classifier;
    if v.ch != cls.ch_in {
        return Err(OccError::Shape(format!(
            "feature channels {} vs classifier input {}",
            v.ch, cls.ch_in
        )));
    }
    let k = cls.num_classes;
    let mut out = VoxelFeatureVolume::zeros(v.h, v.w, v.z, k);
    for (f, logits) in v.data.chunks_exact(v.ch).zip(out.data.chunks_exact_mut(k)) {
        for (c, l) in logits.iter_mut().enumerate() {
            let row = &cls.weight[c * cls.ch_in..(c + 1) * cls.ch_in];
            *l = cls.bias[c] + row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>();
        }
    }
    Ok(out)
}

/// `classify(unet3d_forward(mlp_decode(q)))`.
pub fn forward(q: &BevQueryGrid, params: &HeadParams) -> Result<VoxelFeatureVolume> {
    let v = mlp_decode(q, params)?;
    let u = unet3d_forward(&v, params)?;
    classify(&u, params)
}

/// Total loss of the full head on one instance, weighted by
/// `params.loss_weights`.
pub fn loss(
    q: &BevQueryGrid,
    gt: &LabelGrid,
    mask: Option<&VoxelMask>,
    params: &HeadParams,
) -> Result<f64> {
    total_loss(&forward(q, params)?, gt, mask, params.loss_weights)
}

/// Test hooks for perturbing the backward pass (used to confirm that the
/// gradient checks catch a wrong gradient).
#[doc(hidden)]
#[derive(Debug, Clone, Copy)]
pub struct BackwardHooks {
    pub dice_grad_scale: f64,
}

impl Default for BackwardHooks {
    fn default() -> Self {
        BackwardHooks {
            dice_grad_scale: 1.0,
        }
    }
}

/// Loss value and gradients of the total loss with respect to every
/// parameter and the BEV input.
pub fn backward(
    q: &BevQueryGrid,
    gt: &LabelGrid,
    mask: Option<&VoxelMask>,
    params: &HeadParams,
) -> Result<(f64, HeadGrads)> {
    backward_with(q, gt, mask, params, &BackwardHooks::default())
}

#[doc(hidden)]
pub fn backward_with(
    q: &BevQueryGrid,
    gt: &LabelGrid,
    mask: Option<&VoxelMask>,
    params: &HeadParams,
    hooks: &BackwardHooks,
) -> Result<(f64, HeadGrads)> {
    let volume = mlp_decode(q, params)?;
    let trace = unet_trace(&volume, &params.unet)?;
    let logits = classify(&trace.g1, params)?;

    let lw = params.loss_weights;
    let mut value = 0.0;
    let mut d_logits = vec![0.0; logits.data.len()];
    if lw.ce != 0.0 {
        let (l, g) = loss::ce_loss_grad(&logits, gt, mask)?;
        value += lw.ce * l;
        d_logits.iter_mut().zip(&g).for_each(|(d, g)| *d += lw.ce * g);
    }
    if lw.dice != 0.0 {
        let (l, g) = loss::dice_loss_grad(&logits, gt)?;
        value += lw.dice * l;
        let s = lw.dice * hooks.dice_grad_scale;
        d_logits.iter_mut().zip(&g).for_each(|(d, g)| *d += s * g);
    }

    let mut grads = HeadGrads::zeros_like(params, q.data.len());

    // classifier
    let cls = &params.classifier;
    let feats = &trace.g1;
    let mut d_feat = VoxelFeatureVolume::zeros(feats.h, feats.w, feats.z, feats.ch);
    let k = cls.num_classes;
    for ((f, dl), df) in feats
        .data
        .chunks_exact(feats.ch)
        .zip(d_logits.chunks_exact(k))
        .zip(d_feat.data.chunks_exact_mut(feats.ch))
    {
        for (c, &g) in dl.iter().enumerate() {
            grads.classifier.bias[c] += g;
            for i in 0..cls.ch_in {
                grads.classifier.weight[c * cls.ch_in + i] += g * f[i];
                df[i] += g * cls.weight[c * cls.ch_in + i];
            }
        }
    }

    let d_volume = unet_backward(&params.unet, &trace, &d_feat, &mut grads.unet);

    let col = params.mlp.out_dim();
    for x in 0..q.h {
        for y in 0..q.w {
            let cell = x * q.w + y;
            let d_q = params.mlp.backward_cell(
                q.cell(x, y),
                &d_volume.data[cell * col..(cell + 1) * col],
                &mut grads.mlp,
            );
            grads.bev[cell * q.c..(cell + 1) * q.c].copy_from_slice(&d_q);
        }
    }
    Ok((value, grads))
}
