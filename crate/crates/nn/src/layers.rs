//! Convolution, batch-norm and activation building blocks.

use rand::Rng;

use crate::graph::{ParamId, Var};
use crate::params::{Ctx, Init, ParamKind};
use crate::real::Real;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Identity,
    Relu,
    Silu,
}

impl Act {
    pub fn apply<T: Real>(self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        match self {
            Act::Identity => x,
            Act::Relu => ctx.graph.relu(x),
            Act::Silu => ctx.graph.silu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Conv {
    /// Square `k x k` kernel with "same"-style padding `k / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, bias: bool) -> Self {
        let w = init.kaiming(&format!("{name}.weight"), [cout, cin / groups, k, k]);
        let b = bias.then(|| init.constant(&format!("{name}.bias"), cout, 0.0, ParamKind::Weight));
        Self {
            w,
            b,
            stride,
            pad: k / 2,
            groups,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.param(self.w);
        let b = self.b.map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl BatchNorm {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, c: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.weight"), c, 1.0, ParamKind::Weight),
            beta: init.constant(&format!("{name}.bias"), c, 0.0, ParamKind::Weight),
            mean: init.constant(&format!("{name}.running_mean"), c, 0.0, ParamKind::Buffer),
            var: init.constant(&format!("{name}.running_var"), c, 1.0, ParamKind::Buffer),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let store = ctx.store;
        ctx.graph.batch_norm(
            x,
            gamma,
            beta,
            (self.mean, store.get(self.mean)),
            (self.var, store.get(self.var)),
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

/// Bias-free convolution, batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    conv: Conv,
    bn: BatchNorm,
    act: Act,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, act: Act) -> Self {
        Self {
            conv: Conv::new(init, &format!("{name}.conv"), cin, cout, k, stride, groups, false),
            bn: BatchNorm::new(init, &format!("{name}.bn"), cout),
            act,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, y);
        self.act.apply(ctx, y)
    }
}
