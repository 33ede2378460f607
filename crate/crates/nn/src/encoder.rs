//! Feature extractors returning maps at strides 2, 4, 8, 16 and 32.

use rand::Rng;

use crate::graph::Var;
use crate::layers::{Act, Conv, ConvBnAct};
use crate::params::{Ctx, Init};
use crate::real::Real;

pub const SMALL_WIDTHS: [usize; 4] = [24, 48, 96, 160];
const SMALL_STEM: usize = 16;

/// Plain CNN: stride-2 stem, then four stages of a strided and an unstrided
/// 3x3 conv.
#[derive(Clone, Debug)]
pub struct SmallEncoder {
    stem: ConvBnAct,
    stages: Vec<[ConvBnAct; 2]>,
}

impl SmallEncoder {
    pub fn new<R: Rng>(init: &mut Init<R>, in_channels: usize) -> Self {
        let stem = ConvBnAct::new(init, "encoder.stem", in_channels, SMALL_STEM, 3, 2, 1, Act::Relu);
        let mut cin = SMALL_STEM;
        let stages = SMALL_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let s = [
                    ConvBnAct::new(init, &format!("encoder.stage{i}.0"), cin, w, 3, 2, 1, Act::Relu),
                    ConvBnAct::new(init, &format!("encoder.stage{i}.1"), w, w, 3, 1, 1, Act::Relu),
                ];
                cin = w;
                s
            })
            .collect();
        Self { stem, stages }
    }

    pub fn channels() -> [usize; 5] {
        [SMALL_STEM, SMALL_WIDTHS[0], SMALL_WIDTHS[1], SMALL_WIDTHS[2], SMALL_WIDTHS[3]]
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, depth: usize) -> Vec<Var> {
        let mut feats = vec![self.stem.forward(ctx, x)];
        for stage in self.stages.iter().take(depth - 1) {
            let y = stage[0].forward(ctx, *feats.last().expect("stem"));
            feats.push(stage[1].forward(ctx, y));
        }
        feats
    }
}

/// `(expand ratio, kernel, stride, out channels, repeats)` per stage.
pub const B3_STAGES: [(usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 24, 2),
    (6, 3, 2, 32, 3),
    (6, 5, 2, 48, 3),
    (6, 3, 2, 96, 5),
    (6, 5, 1, 136, 5),
    (6, 5, 2, 232, 6),
    (6, 3, 1, 384, 2),
];
const B3_STEM: usize = 40;
const SE_RATIO: f64 = 0.25;
/// Stage index whose output is taken as the stride-4, 8, 16 and 32 feature.
const B3_TAPS: [usize; 4] = [1, 2, 4, 6];

/// Squeeze-and-excitation: global pool, reduce, expand, sigmoid gate.
#[derive(Clone, Debug)]
struct SqueezeExcite {
    reduce: Conv,
    expand: Conv,
}

impl SqueezeExcite {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let s = ctx.graph.adaptive_avg_pool(x, 1, 1);
        let s = self.reduce.forward(ctx, s);
        let s = ctx.graph.silu(s);
        let s = self.expand.forward(ctx, s);
        let s = ctx.graph.sigmoid(s);
        ctx.graph.scale_channels(x, s)
    }
}

/// Inverted residual block with depthwise conv and squeeze-and-excitation.
#[derive(Clone, Debug)]
struct MbConv {
    expand: Option<ConvBnAct>,
    depthwise: ConvBnAct,
    se: SqueezeExcite,
    project: ConvBnAct,
    residual: bool,
}

impl MbConv {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(init: &mut Init<R>, name: &str, cin: usize, cout: usize, expand: usize, k: usize, stride: usize) -> Self {
        let mid = cin * expand;
        let squeezed = ((cin as f64 * SE_RATIO) as usize).max(1);
        Self {
            expand: (expand != 1).then(|| ConvBnAct::new(init, &format!("{name}.expand"), cin, mid, 1, 1, 1, Act::Silu)),
            depthwise: ConvBnAct::new(init, &format!("{name}.depthwise"), mid, mid, k, stride, mid, Act::Silu),
            se: SqueezeExcite {
                reduce: Conv::new(init, &format!("{name}.se.reduce"), mid, squeezed, 1, 1, 1, true),
                expand: Conv::new(init, &format!("{name}.se.expand"), squeezed, mid, 1, 1, 1, true),
            },
            project: ConvBnAct::new(init, &format!("{name}.project"), mid, cout, 1, 1, 1, Act::Identity),
            residual: stride == 1 && cin == cout,
        }
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.forward(ctx, y);
        }
        y = self.depthwise.forward(ctx, y);
        y = self.se.forward(ctx, y);
        y = self.project.forward(ctx, y);
        if self.residual {
            y = ctx.graph.add(y, x);
        }
        y
    }
}

/// EfficientNet-B3 body (no classification head, no stochastic depth).
#[derive(Clone, Debug)]
pub struct EfficientNetB3 {
    stem: ConvBnAct,
    stages: Vec<Vec<MbConv>>,
}

impl EfficientNetB3 {
    pub fn new<R: Rng>(init: &mut Init<R>, in_channels: usize) -> Self {
        let stem = ConvBnAct::new(init, "encoder.stem", in_channels, B3_STEM, 3, 2, 1, Act::Silu);
        let mut cin = B3_STEM;
        let mut stages = Vec::new();
        for (si, &(e, k, s, cout, reps)) in B3_STAGES.iter().enumerate() {
            let blocks = (0..reps)
                .map(|bi| {
                    let stride = if bi == 0 { s } else { 1 };
                    let block = MbConv::new(init, &format!("encoder.stage{si}.{bi}"), cin, cout, e, k, stride);
                    cin = cout;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        Self { stem, stages }
    }

    pub fn channels() -> [usize; 5] {
        [B3_STEM, B3_STAGES[B3_TAPS[0]].3, B3_STAGES[B3_TAPS[1]].3, B3_STAGES[B3_TAPS[2]].3, B3_STAGES[B3_TAPS[3]].3]
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, depth: usize) -> Vec<Var> {
        let mut y = self.stem.forward(ctx, x);
        let mut feats = vec![y];
        for (si, stage) in self.stages.iter().enumerate() {
            if feats.len() >= depth {
                break;
            }
            for block in stage {
                y = block.forward(ctx, y);
            }
            if B3_TAPS.contains(&si) {
                feats.push(y);
            }
        }
        feats
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Small(SmallEncoder),
    EfficientNetB3(EfficientNetB3),
}

impl Encoder {
    /// The first `depth` feature maps, finest first.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, depth: usize) -> Vec<Var> {
        match self {
            Encoder::Small(e) => e.forward(ctx, x, depth),
            Encoder::EfficientNetB3(e) => e.forward(ctx, x, depth),
        }
    }
}
