//! Parameter layout and the building blocks of the U-Net.

use autograd::{Graph, ParamTag, Var};
use rand::Rng;

/// Location of one parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Uniform(f64),
    Const(f64),
}

/// Deterministic allocation of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    entries: Vec<(String, Slot, Init)>,
    len: usize,
}

impl ParamLayout {
    pub(crate) fn alloc(&mut self, name: String, shape: Vec<usize>, init: Init) -> Slot {
        let slot = Slot {
            offset: self.len,
            shape,
        };
        self.len += slot.len();
        self.entries.push((name, slot.clone(), init));
        slot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn names(&self) -> impl Iterator<Item = (&str, &Slot)> {
        self.entries.iter().map(|(n, s, _)| (n.as_str(), s))
    }

    pub(crate) fn initialize(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (_, slot, init) in &self.entries {
            let dst = &mut out[slot.offset..slot.offset + slot.len()];
            match *init {
                Init::Uniform(bound) => dst.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound)),
                Init::Const(c) => dst.iter_mut().for_each(|v| *v = c),
            }
        }
        out
    }
}

/// Graph plus the parameter vector the graph reads from.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub params: &'a [f64],
    pub tag: ParamTag,
}

impl Ctx<'_> {
    pub fn p(&mut self, slot: &Slot) -> Var {
        self.g.param(self.tag, self.params, slot.offset, &slot.shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: Slot,
    b: Option<Slot>,
    stride: usize,
    pad: usize,
    groups: usize,
}

pub(crate) struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            stride: 1,
            pad: k / 2,
            groups: 1,
            bias: true,
        }
    }
}

impl Conv {
    pub(crate) fn new(layout: &mut ParamLayout, name: &str, s: ConvSpec) -> Self {
        let fan_in = (s.cin / s.groups) * s.k * s.k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = layout.alloc(format!("{name}.weight"), vec![s.cout, s.cin / s.groups, s.k, s.k], Init::Uniform(bound));
        let b = s
            .bias
            .then(|| layout.alloc(format!("{name}.bias"), vec![s.cout], Init::Uniform(bound)));
        Self {
            w,
            b,
            stride: s.stride,
            pad: s.pad,
            groups: s.groups,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(&self.w);
        let b = self.b.as_ref().map(|b| cx.p(b));
        cx.g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }
}

/// Transposed convolution `k=4, stride=2, pad=1`: doubles spatial size.
#[derive(Clone, Debug)]
pub struct Upsample {
    w: Slot,
    b: Slot,
}

impl Upsample {
    pub(crate) fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / ((cout * 16) as f64).sqrt();
        Self {
            w: layout.alloc(format!("{name}.weight"), vec![cin, cout, 4, 4], Init::Uniform(bound)),
            b: layout.alloc(format!("{name}.bias"), vec![cout], Init::Uniform(bound)),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(&self.w);
        let b = cx.p(&self.b);
        cx.g.conv_transpose2d(x, w, Some(b), 2, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: Slot,
    b: Slot,
}

impl Linear {
    pub(crate) fn new(layout: &mut ParamLayout, name: &str, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            w: layout.alloc(format!("{name}.weight"), vec![dout, din], Init::Uniform(bound)),
            b: layout.alloc(format!("{name}.bias"), vec![dout], Init::Uniform(bound)),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(&self.w);
        let b = cx.p(&self.b);
        cx.g.linear(x, w, Some(b))
    }
}

/// Layer norm over channels.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    g: Slot,
    b: Slot,
}

impl ChannelNorm {
    pub(crate) fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        Self {
            g: layout.alloc(format!("{name}.g"), vec![dim], Init::Const(1.0)),
            b: layout.alloc(format!("{name}.b"), vec![dim], Init::Const(0.0)),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let g = cx.p(&self.g);
        let b = cx.p(&self.b);
        cx.g.channel_layer_norm(x, g, b)
    }
}

/// Depthwise 7x7, additive time conditioning, optional norm, two 3x3
/// convolutions with an expansion in between, residual.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    time: Option<Linear>,
    ds_conv: Conv,
    norm: Option<ChannelNorm>,
    conv1: Conv,
    conv2: Conv,
    res_conv: Option<Conv>,
}

impl ConvNextBlock {
    pub(crate) fn new(
        layout: &mut ParamLayout,
        name: &str,
        dim: usize,
        dim_out: usize,
        time_dim: Option<usize>,
        mult: usize,
        norm: bool,
    ) -> Self {
        let time = time_dim.map(|td| Linear::new(layout, &format!("{name}.time"), td, dim));
        let ds_conv = Conv::new(
            layout,
            &format!("{name}.ds_conv"),
            ConvSpec {
                groups: dim,
                ..ConvSpec::new(dim, dim, 7)
            },
        );
        let norm = norm.then(|| ChannelNorm::new(layout, &format!("{name}.norm"), dim));
        let conv1 = Conv::new(layout, &format!("{name}.conv1"), ConvSpec::new(dim, dim_out * mult, 3));
        let conv2 = Conv::new(layout, &format!("{name}.conv2"), ConvSpec::new(dim_out * mult, dim_out, 3));
        let res_conv = (dim != dim_out).then(|| Conv::new(layout, &format!("{name}.res"), ConvSpec::new(dim, dim_out, 1)));
        Self {
            time,
            ds_conv,
            norm,
            conv1,
            conv2,
            res_conv,
        }
    }

    /// `time_act` is `gelu(time_embedding)`, shape `[n, time_dim]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, time_act: Option<Var>) -> Var {
        let mut h = self.ds_conv.forward(cx, x);
        if let (Some(lin), Some(t)) = (&self.time, time_act) {
            let cond = lin.forward(cx, t);
            h = cx.g.add_per_sample(h, cond);
        }
        if let Some(n) = &self.norm {
            h = n.forward(cx, h);
        }
        h = self.conv1.forward(cx, h);
        h = cx.g.gelu(h);
        h = self.conv2.forward(cx, h);
        let skip = match &self.res_conv {
            Some(r) => r.forward(cx, x),
            None => x,
        };
        cx.g.add(h, skip)
    }
}

/// `x + to_out(linear_attention(norm(x)))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    prenorm: ChannelNorm,
    to_qkv: Conv,
    to_out: Conv,
    out_norm: ChannelNorm,
    heads: usize,
    dim_head: usize,
}

impl AttentionBlock {
    pub(crate) fn new(layout: &mut ParamLayout, name: &str, dim: usize, heads: usize, dim_head: usize) -> Self {
        let hidden = heads * dim_head;
        Self {
            prenorm: ChannelNorm::new(layout, &format!("{name}.prenorm"), dim),
            to_qkv: Conv::new(
                layout,
                &format!("{name}.to_qkv"),
                ConvSpec {
                    bias: false,
                    ..ConvSpec::new(dim, 3 * hidden, 1)
                },
            ),
            to_out: Conv::new(layout, &format!("{name}.to_out"), ConvSpec::new(hidden, dim, 1)),
            out_norm: ChannelNorm::new(layout, &format!("{name}.out_norm"), dim),
            heads,
            dim_head,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let hidden = self.heads * self.dim_head;
        let h = self.prenorm.forward(cx, x);
        let qkv = self.to_qkv.forward(cx, h);
        let q = cx.g.slice_channels(qkv, 0, hidden);
        let k = cx.g.slice_channels(qkv, hidden, hidden);
        let v = cx.g.slice_channels(qkv, 2 * hidden, hidden);
        let q = cx.g.scale(q, (self.dim_head as f64).powf(-0.5));
        let k = cx.g.spatial_softmax(k);
        let a = cx.g.linear_attention(q, k, v, self.heads);
        let o = self.to_out.forward(cx, a);
        let o = self.out_norm.forward(cx, o);
        cx.g.add(x, o)
    }
}

#[derive(Clone, Debug)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_dim: Option<usize>,
    pub heads: usize,
    pub dim_head: usize,
    pub convnext_mult: usize,
}

#[derive(Clone, Debug)]
struct DownStage {
    block1: ConvNextBlock,
    block2: ConvNextBlock,
    attn: AttentionBlock,
    down: Option<Conv>,
}

#[derive(Clone, Debug)]
struct UpStage {
    block1: ConvNextBlock,
    block2: ConvNextBlock,
    attn: AttentionBlock,
    up: Upsample,
}

#[derive(Clone, Debug)]
struct TimeMlp {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

/// ConvNext U-Net with linear attention at every stage.
///
/// The shallowest stage's skip feeds nothing on the way up, so the decoder
/// has one stage fewer than the encoder.
#[derive(Clone, Debug)]
pub struct UNet {
    time: Option<TimeMlp>,
    downs: Vec<DownStage>,
    mid1: ConvNextBlock,
    mid_attn: AttentionBlock,
    mid2: ConvNextBlock,
    ups: Vec<UpStage>,
    final_block: ConvNextBlock,
    final_conv: Conv,
    levels: usize,
}

impl UNet {
    pub(crate) fn new(layout: &mut ParamLayout, prefix: &str, s: &UNetSpec) -> Self {
        let time = s.time_dim.map(|d| TimeMlp {
            dim: d,
            l1: Linear::new(layout, &format!("{prefix}time.l1"), d, 4 * d),
            l2: Linear::new(layout, &format!("{prefix}time.l2"), 4 * d, d),
        });
        let td = s.time_dim;
        let mut dims = vec![s.in_channels];
        dims.extend(s.channel_multipliers.iter().map(|m| m * s.base_channels));
        let pairs: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        let n = pairs.len();
        let mut downs = Vec::with_capacity(n);
        for (i, &(din, dout)) in pairs.iter().enumerate() {
            let name = format!("{prefix}down{i}");
            downs.push(DownStage {
                block1: ConvNextBlock::new(layout, &format!("{name}.block1"), din, dout, td, s.convnext_mult, i != 0),
                block2: ConvNextBlock::new(layout, &format!("{name}.block2"), dout, dout, td, s.convnext_mult, true),
                attn: AttentionBlock::new(layout, &format!("{name}.attn"), dout, s.heads, s.dim_head),
                down: (i + 1 < n).then(|| {
                    Conv::new(
                        layout,
                        &format!("{name}.down"),
                        ConvSpec {
                            stride: 2,
                            pad: 1,
                            ..ConvSpec::new(dout, dout, 4)
                        },
                    )
                }),
            });
        }
        let mid = *dims.last().unwrap();
        let mid1 = ConvNextBlock::new(layout, &format!("{prefix}mid1"), mid, mid, td, s.convnext_mult, true);
        let mid_attn = AttentionBlock::new(layout, &format!("{prefix}mid_attn"), mid, s.heads, s.dim_head);
        let mid2 = ConvNextBlock::new(layout, &format!("{prefix}mid2"), mid, mid, td, s.convnext_mult, true);
        let mut ups = Vec::with_capacity(n.saturating_sub(1));
        for (i, &(din, dout)) in pairs[1..].iter().rev().enumerate() {
            let name = format!("{prefix}up{i}");
            ups.push(UpStage {
                block1: ConvNextBlock::new(layout, &format!("{name}.block1"), 2 * dout, din, td, s.convnext_mult, true),
                block2: ConvNextBlock::new(layout, &format!("{name}.block2"), din, din, td, s.convnext_mult, true),
                attn: AttentionBlock::new(layout, &format!("{name}.attn"), din, s.heads, s.dim_head),
                up: Upsample::new(layout, &format!("{name}.up"), din, din),
            });
        }
        let top = dims[1];
        let final_block = ConvNextBlock::new(layout, &format!("{prefix}final_block"), top, top, td, s.convnext_mult, true);
        let final_conv = Conv::new(layout, &format!("{prefix}final_conv"), ConvSpec::new(top, s.out_channels, 1));
        Self {
            time,
            downs,
            mid1,
            mid_attn,
            mid2,
            ups,
            final_block,
            final_conv,
            levels: n,
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn time_dim(&self) -> Option<usize> {
        self.time.as_ref().map(|t| t.dim)
    }

    /// `temb` is the raw sinusoidal embedding `[n, time_dim]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, temb: Option<Var>) -> Var {
        let time_act = match (&self.time, temb) {
            (Some(mlp), Some(e)) => {
                let h = mlp.l1.forward(cx, e);
                let h = cx.g.gelu(h);
                let h = mlp.l2.forward(cx, h);
                Some(cx.g.gelu(h))
            }
            _ => None,
        };
        let mut h = x;
        let mut skips = Vec::with_capacity(self.downs.len());
        for st in &self.downs {
            h = st.block1.forward(cx, h, time_act);
            h = st.block2.forward(cx, h, time_act);
            h = st.attn.forward(cx, h);
            skips.push(h);
            if let Some(d) = &st.down {
                h = d.forward(cx, h);
            }
        }
        h = self.mid1.forward(cx, h, time_act);
        h = self.mid_attn.forward(cx, h);
        h = self.mid2.forward(cx, h, time_act);
        for st in &self.ups {
            let skip = skips.pop().expect("one skip per decoder stage");
            h = cx.g.concat_channels(&[h, skip]);
            h = st.block1.forward(cx, h, time_act);
            h = st.block2.forward(cx, h, time_act);
            h = st.attn.forward(cx, h);
            h = st.up.forward(cx, h);
        }
        h = self.final_block.forward(cx, h, time_act);
        self.final_conv.forward(cx, h)
    }
}
