//! EfficientNetV2-S: a 3×3 stride-2 stem, three Fused-MBConv stages, three
//! MBConv stages with squeeze-and-excitation, and a 1×1 conv to 1280 features.
//! BatchNorm (eps 1e-3) and SiLU throughout.
//!
//! Parameter names follow the torchvision state-dict layout.

use crate::layers::{
    ActKind, Activation, BatchNorm2d, Conv2d, DepthwiseConv2d, DropPath, Init, Initializer,
    SqueezeExcite, TrainCtx,
};
use crate::param::{HasParams, Param};
use crate::tensor::Tensor;

const BN_EPS: f32 = 1e-3;
pub(crate) const FEATURE_CHANNELS: usize = 1280;
pub(crate) const HEAD_NAME: &str = "classifier.1";
pub(crate) const STEM_WEIGHT: &str = "features.0.0.weight";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BlockKind {
    FusedMbConv,
    MbConv,
}

/// One stage: block kind, expansion ratio, stride of the first block, input
/// channels, output channels, number of blocks. Kernels are 3×3 everywhere.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StageSpec {
    pub kind: BlockKind,
    pub expand: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
    pub layers: usize,
}

pub(crate) const STAGES: [StageSpec; 6] = [
    StageSpec {
        kind: BlockKind::FusedMbConv,
        expand: 1,
        stride: 1,
        cin: 24,
        cout: 24,
        layers: 2,
    },
    StageSpec {
        kind: BlockKind::FusedMbConv,
        expand: 4,
        stride: 2,
        cin: 24,
        cout: 48,
        layers: 4,
    },
    StageSpec {
        kind: BlockKind::FusedMbConv,
        expand: 4,
        stride: 2,
        cin: 48,
        cout: 64,
        layers: 4,
    },
    StageSpec {
        kind: BlockKind::MbConv,
        expand: 4,
        stride: 2,
        cin: 64,
        cout: 128,
        layers: 6,
    },
    StageSpec {
        kind: BlockKind::MbConv,
        expand: 6,
        stride: 1,
        cin: 128,
        cout: 160,
        layers: 9,
    },
    StageSpec {
        kind: BlockKind::MbConv,
        expand: 6,
        stride: 2,
        cin: 160,
        cout: 256,
        layers: 15,
    },
];
pub(crate) const STEM_CHANNELS: usize = 24;

#[derive(Debug, Clone)]
enum AnyConv {
    Dense(Conv2d),
    Depthwise(DepthwiseConv2d),
}

/// Convolution (no bias) → BatchNorm → optional SiLU.
#[derive(Debug, Clone)]
struct ConvBnAct {
    conv: AnyConv,
    bn: BatchNorm2d,
    act: Option<Activation>,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    fn dense(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        act: bool,
        init: &mut Initializer,
    ) -> Self {
        let conv = Conv2d::new(
            &format!("{name}.0"),
            cin,
            cout,
            kernel,
            stride,
            kernel / 2,
            false,
            Init::KaimingFanOut,
            init,
        );
        Self {
            conv: AnyConv::Dense(conv),
            bn: BatchNorm2d::new(&format!("{name}.1"), cout, BN_EPS),
            act: act.then(|| Activation::new(ActKind::Silu)),
        }
    }

    fn depthwise(name: &str, channels: usize, stride: usize, init: &mut Initializer) -> Self {
        let conv = DepthwiseConv2d::new(
            &format!("{name}.0"),
            channels,
            3,
            stride,
            1,
            false,
            Init::KaimingFanOut,
            init,
        );
        Self {
            conv: AnyConv::Depthwise(conv),
            bn: BatchNorm2d::new(&format!("{name}.1"), channels, BN_EPS),
            act: Some(Activation::new(ActKind::Silu)),
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let h = match &self.conv {
            AnyConv::Dense(c) => c.infer(x),
            AnyConv::Depthwise(c) => c.infer(x),
        };
        let h = self.bn.infer(&h);
        match &self.act {
            Some(a) => a.infer(&h),
            None => h,
        }
    }

    fn forward(&mut self, x: &Tensor, ctx: &TrainCtx<'_>) -> Tensor {
        let h = match &mut self.conv {
            AnyConv::Dense(c) => c.forward(x),
            AnyConv::Depthwise(c) => c.forward(x),
        };
        let h = self.bn.forward(&h, ctx.frozen_norm_stats);
        match &mut self.act {
            Some(a) => a.forward(&h),
            None => h,
        }
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = match &mut self.act {
            Some(a) => a.backward(g),
            None => g.clone(),
        };
        let g = self.bn.backward(&g);
        match &mut self.conv {
            AnyConv::Dense(c) => c.backward(&g),
            AnyConv::Depthwise(c) => c.backward(&g),
        }
    }
}

impl HasParams for ConvBnAct {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        match &self.conv {
            AnyConv::Dense(c) => c.collect(out),
            AnyConv::Depthwise(c) => c.collect(out),
        }
        self.bn.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match &mut self.conv {
            AnyConv::Dense(c) => c.collect_mut(out),
            AnyConv::Depthwise(c) => c.collect_mut(out),
        }
        self.bn.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
struct Block {
    expand: Option<ConvBnAct>,
    depthwise: Option<ConvBnAct>,
    se: Option<SqueezeExcite>,
    project: ConvBnAct,
    residual: bool,
    drop_path: DropPath,
}

impl Block {
    fn new(
        name: &str,
        spec: &StageSpec,
        cin: usize,
        stride: usize,
        drop_path: f32,
        init: &mut Initializer,
    ) -> Self {
        let hidden = cin * spec.expand;
        let residual = stride == 1 && cin == spec.cout;
        let b = |i: usize| format!("{name}.block.{i}");
        let (expand, depthwise, se, project) = match spec.kind {
            BlockKind::FusedMbConv if spec.expand == 1 => (
                None,
                None,
                None,
                ConvBnAct::dense(&b(0), cin, spec.cout, 3, stride, true, init),
            ),
            BlockKind::FusedMbConv => (
                Some(ConvBnAct::dense(&b(0), cin, hidden, 3, stride, true, init)),
                None,
                None,
                ConvBnAct::dense(&b(1), hidden, spec.cout, 1, 1, false, init),
            ),
            BlockKind::MbConv => (
                Some(ConvBnAct::dense(&b(0), cin, hidden, 1, 1, true, init)),
                Some(ConvBnAct::depthwise(&b(1), hidden, stride, init)),
                Some(SqueezeExcite::new(&b(2), hidden, (cin / 4).max(1), init)),
                ConvBnAct::dense(&b(3), hidden, spec.cout, 1, 1, false, init),
            ),
        };
        Self {
            expand,
            depthwise,
            se,
            project,
            residual,
            drop_path: DropPath::new(drop_path),
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = match &self.expand {
            Some(e) => e.infer(x),
            None => x.clone(),
        };
        if let Some(dw) = &self.depthwise {
            h = dw.infer(&h);
        }
        if let Some(se) = &self.se {
            h = se.infer(&h);
        }
        let h = self.project.infer(&h);
        if self.residual {
            x + &h
        } else {
            h
        }
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut TrainCtx<'_>) -> Tensor {
        let mut h = match &mut self.expand {
            Some(e) => e.forward(x, ctx),
            None => x.clone(),
        };
        if let Some(dw) = &mut self.depthwise {
            h = dw.forward(&h, ctx);
        }
        if let Some(se) = &mut self.se {
            h = se.forward(&h);
        }
        let h = self.project.forward(&h, ctx);
        if self.residual {
            let branch = self.drop_path.forward(h, ctx);
            x + &branch
        } else {
            h
        }
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let dbranch = if self.residual {
            self.drop_path.backward(g.clone())
        } else {
            g.clone()
        };
        let mut dh = self.project.backward(&dbranch);
        if let Some(se) = &mut self.se {
            dh = se.backward(&dh);
        }
        if let Some(dw) = &mut self.depthwise {
            dh = dw.backward(&dh);
        }
        if let Some(e) = &mut self.expand {
            dh = e.backward(&dh);
        }
        if self.residual {
            dh.add_assign(g);
        }
        dh
    }
}

impl HasParams for Block {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        if let Some(e) = &self.expand {
            e.collect(out);
        }
        if let Some(d) = &self.depthwise {
            d.collect(out);
        }
        if let Some(s) = &self.se {
            s.collect(out);
        }
        self.project.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        if let Some(e) = &mut self.expand {
            e.collect_mut(out);
        }
        if let Some(d) = &mut self.depthwise {
            d.collect_mut(out);
        }
        if let Some(s) = &mut self.se {
            s.collect_mut(out);
        }
        self.project.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EfficientNetV2 {
    stem: ConvBnAct,
    blocks: Vec<Block>,
    top: ConvBnAct,
}

impl EfficientNetV2 {
    pub fn new(in_channels: usize, drop_path_rate: f32, init: &mut Initializer) -> Self {
        let stem = ConvBnAct::dense("features.0", in_channels, STEM_CHANNELS, 3, 2, true, init);
        let total: usize = STAGES.iter().map(|s| s.layers).sum();
        let mut blocks = Vec::with_capacity(total);
        for (s, spec) in STAGES.iter().enumerate() {
            for j in 0..spec.layers {
                let (cin, stride) = if j == 0 {
                    (spec.cin, spec.stride)
                } else {
                    (spec.cout, 1)
                };
                let rate = drop_path_rate * blocks.len() as f32 / total as f32;
                blocks.push(Block::new(
                    &format!("features.{}.{j}", s + 1),
                    spec,
                    cin,
                    stride,
                    rate,
                    init,
                ));
            }
        }
        let last = STAGES[STAGES.len() - 1].cout;
        let top = ConvBnAct::dense(
            &format!("features.{}", STAGES.len() + 1),
            last,
            FEATURE_CHANNELS,
            1,
            1,
            true,
            init,
        );
        Self { stem, blocks, top }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = self.stem.infer(x);
        for b in &self.blocks {
            h = b.infer(&h);
        }
        self.top.infer(&h)
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut TrainCtx<'_>) -> Tensor {
        let mut h = self.stem.forward(x, ctx);
        for b in &mut self.blocks {
            h = b.forward(&h, ctx);
        }
        self.top.forward(&h, ctx)
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut g = self.top.backward(g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        self.stem.backward(&g)
    }
}

impl HasParams for EfficientNetV2 {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.stem.collect(out);
        for b in &self.blocks {
            b.collect(out);
        }
        self.top.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.stem.collect_mut(out);
        for b in &mut self.blocks {
            b.collect_mut(out);
        }
        self.top.collect_mut(out);
    }
}
