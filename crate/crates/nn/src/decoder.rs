//! Decoder heads: UNet, FPN, Linknet and PSPNet. Each returns pre-softmax
//! class scores at input resolution.

use rand::Rng;

use crate::graph::Var;
use crate::layers::{Act, Conv, ConvBnAct};
use crate::params::{Ctx, Init};
use crate::real::Real;

/// Upsample by 2, concatenate the skip, two 3x3 conv blocks.
#[derive(Clone, Debug)]
struct UNetBlock {
    conv1: ConvBnAct,
    conv2: ConvBnAct,
}

#[derive(Clone, Debug)]
pub struct UNetDecoder {
    blocks: Vec<UNetBlock>,
    head: Conv,
}

impl UNetDecoder {
    /// `enc` lists encoder channels finest first; `widths` lists decoder
    /// widths coarsest first (one per stride-2 step).
    pub fn new<R: Rng>(init: &mut Init<R>, enc: [usize; 5], widths: &[usize], classes: usize) -> Self {
        assert_eq!(widths.len(), 5);
        let mut cin = enc[4];
        let mut blocks = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let skip = if i < 4 { enc[3 - i] } else { 0 };
            blocks.push(UNetBlock {
                conv1: ConvBnAct::new(init, &format!("decoder.block{i}.conv1"), cin + skip, w, 3, 1, 1, Act::Relu),
                conv2: ConvBnAct::new(init, &format!("decoder.block{i}.conv2"), w, w, 3, 1, 1, Act::Relu),
            });
            cin = w;
        }
        let head = Conv::new(init, "head", cin, classes, 3, 1, 1, true);
        Self { blocks, head }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, feats: &[Var]) -> Var {
        let mut x = feats[4];
        for (i, block) in self.blocks.iter().enumerate() {
            x = ctx.graph.upsample_nearest(x, 2);
            if i < 4 {
                x = ctx.graph.concat(&[x, feats[3 - i]]);
            }
            x = block.conv1.forward(ctx, x);
            x = block.conv2.forward(ctx, x);
        }
        self.head.forward(ctx, x)
    }
}

/// 1x1 reduce, upsample by 2 with a 3x3 conv, 1x1 expand.
#[derive(Clone, Debug)]
struct LinknetBlock {
    reduce: ConvBnAct,
    up: ConvBnAct,
    expand: ConvBnAct,
}

#[derive(Clone, Debug)]
pub struct LinknetDecoder {
    blocks: Vec<LinknetBlock>,
    head: Conv,
}

impl LinknetDecoder {
    pub fn new<R: Rng>(init: &mut Init<R>, enc: [usize; 5], prefinal: usize, classes: usize) -> Self {
        let mut blocks = Vec::new();
        for i in 0..5 {
            let cin = enc[4 - i];
            let cout = if i < 4 { enc[3 - i] } else { prefinal };
            let mid = (cin / 4).max(1);
            blocks.push(LinknetBlock {
                reduce: ConvBnAct::new(init, &format!("decoder.block{i}.reduce"), cin, mid, 1, 1, 1, Act::Relu),
                up: ConvBnAct::new(init, &format!("decoder.block{i}.up"), mid, mid, 3, 1, 1, Act::Relu),
                expand: ConvBnAct::new(init, &format!("decoder.block{i}.expand"), mid, cout, 1, 1, 1, Act::Relu),
            });
        }
        let head = Conv::new(init, "head", prefinal, classes, 3, 1, 1, true);
        Self { blocks, head }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, feats: &[Var]) -> Var {
        let mut x = feats[4];
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.reduce.forward(ctx, x);
            x = ctx.graph.upsample_nearest(x, 2);
            x = block.up.forward(ctx, x);
            x = block.expand.forward(ctx, x);
            if i < 4 {
                x = ctx.graph.add(x, feats[3 - i]);
            }
        }
        self.head.forward(ctx, x)
    }
}

#[derive(Clone, Debug)]
pub struct FpnDecoder {
    lateral: Vec<Conv>,
    /// Per pyramid level, conv blocks each followed by a 2x upsample except
    /// on the finest level.
    seg: Vec<Vec<ConvBnAct>>,
    head: Conv,
}

impl FpnDecoder {
    pub fn new<R: Rng>(init: &mut Init<R>, enc: [usize; 5], pyramid: usize, segmentation: usize, classes: usize) -> Self {
        // Levels from stride 32 down to stride 4.
        let lateral = (0..4)
            .map(|i| Conv::new(init, &format!("decoder.lateral{i}"), enc[4 - i], pyramid, 1, 1, 1, true))
            .collect();
        let seg = (0..4)
            .map(|i| {
                let n = (3 - i).max(1);
                (0..n)
                    .map(|j| {
                        let cin = if j == 0 { pyramid } else { segmentation };
                        ConvBnAct::new(init, &format!("decoder.seg{i}.{j}"), cin, segmentation, 3, 1, 1, Act::Relu)
                    })
                    .collect()
            })
            .collect();
        let head = Conv::new(init, "head", segmentation, classes, 3, 1, 1, true);
        Self { lateral, seg, head }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, feats: &[Var]) -> Var {
        let mut pyramid = Vec::new();
        let mut p = self.lateral[0].forward(ctx, feats[4]);
        pyramid.push(p);
        for i in 1..4 {
            let up = ctx.graph.upsample_nearest(p, 2);
            let lat = self.lateral[i].forward(ctx, feats[4 - i]);
            p = ctx.graph.add(up, lat);
            pyramid.push(p);
        }
        let mut merged: Option<Var> = None;
        for (i, (level, blocks)) in pyramid.into_iter().zip(&self.seg).enumerate() {
            let mut x = level;
            for block in blocks {
                x = block.forward(ctx, x);
                if i < 3 {
                    let (h, w) = (ctx.graph.value(x).h(), ctx.graph.value(x).w());
                    x = ctx.graph.resize_bilinear(x, h * 2, w * 2);
                }
            }
            merged = Some(match merged {
                Some(m) => ctx.graph.add(m, x),
                None => x,
            });
        }
        let x = self.head.forward(ctx, merged.expect("four levels"));
        let (h, w) = (ctx.graph.value(x).h(), ctx.graph.value(x).w());
        ctx.graph.resize_bilinear(x, h * 4, w * 4)
    }
}

pub const PSP_BINS: [usize; 4] = [1, 2, 3, 6];

#[derive(Clone, Debug)]
pub struct PspDecoder {
    branches: Vec<ConvBnAct>,
    fuse: ConvBnAct,
    head: Conv,
}

impl PspDecoder {
    /// `cin` is the channel count of the stride-8 feature.
    pub fn new<R: Rng>(init: &mut Init<R>, cin: usize, out: usize, classes: usize) -> Self {
        let branch = (cin / PSP_BINS.len()).max(1);
        let branches = PSP_BINS
            .iter()
            .map(|b| ConvBnAct::new(init, &format!("decoder.pool{b}"), cin, branch, 1, 1, 1, Act::Relu))
            .collect();
        let fuse = ConvBnAct::new(init, "decoder.fuse", cin + branch * PSP_BINS.len(), out, 1, 1, 1, Act::Relu);
        let head = Conv::new(init, "head", out, classes, 3, 1, 1, true);
        Self { branches, fuse, head }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, feats: &[Var]) -> Var {
        let x = feats[2];
        let (h, w) = (ctx.graph.value(x).h(), ctx.graph.value(x).w());
        let mut parts = vec![x];
        for (bins, branch) in PSP_BINS.iter().zip(&self.branches) {
            let p = ctx.graph.adaptive_avg_pool(x, *bins, *bins);
            let p = branch.forward(ctx, p);
            parts.push(ctx.graph.resize_bilinear(p, h, w));
        }
        let y = ctx.graph.concat(&parts);
        let y = self.fuse.forward(ctx, y);
        let y = self.head.forward(ctx, y);
        ctx.graph.resize_bilinear(y, h * 8, w * 8)
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    UNet(UNetDecoder),
    Fpn(FpnDecoder),
    Linknet(LinknetDecoder),
    Psp(PspDecoder),
}

impl Decoder {
    /// Number of encoder feature maps the decoder consumes.
    pub fn depth(&self) -> usize {
        match self {
            Decoder::Psp(_) => 3,
            _ => 5,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, feats: &[Var]) -> Var {
        match self {
            Decoder::UNet(d) => d.forward(ctx, feats),
            Decoder::Fpn(d) => d.forward(ctx, feats),
            Decoder::Linknet(d) => d.forward(ctx, feats),
            Decoder::Psp(d) => d.forward(ctx, feats),
        }
    }
}
