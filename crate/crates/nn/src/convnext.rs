//! ConvNeXt-S: a patchify stem, four stages of depthwise-7×7 inverted
//! bottleneck blocks (depths 3/3/27/3, widths 96/192/384/768) joined by
//! LayerNorm + 2×2 strided downsampling convolutions.
//!
//! Parameter names follow the torchvision state-dict layout so published
//! weights can be mapped one-to-one.

use crate::layers::{
    ActKind, Activation, Conv2d, DepthwiseConv2d, DropPath, Init, Initializer, LayerNorm, TrainCtx,
};
use crate::param::{HasParams, Param, ParamKind};
use crate::tensor::Tensor;

pub(crate) const DEPTHS: [usize; 4] = [3, 3, 27, 3];
pub(crate) const WIDTHS: [usize; 4] = [96, 192, 384, 768];
const LN_EPS: f32 = 1e-6;
const LAYER_SCALE_INIT: f32 = 1e-6;
const WEIGHT_STD: f32 = 0.02;

pub(crate) const FEATURE_CHANNELS: usize = 768;
pub(crate) const HEAD_NAME: &str = "classifier.2";
pub(crate) const STEM_WEIGHT: &str = "features.0.0.weight";

#[derive(Debug, Clone)]
struct Block {
    dwconv: DepthwiseConv2d,
    norm: LayerNorm,
    pw1: Conv2d,
    act: Activation,
    pw2: Conv2d,
    layer_scale: Param,
    drop_path: DropPath,
    /// Branch output before the layer scale, kept for the scale gradient.
    cache: Option<Tensor>,
}

impl Block {
    fn new(name: &str, dim: usize, drop_path: f32, init: &mut Initializer) -> Self {
        let trunc = Init::TruncNormal(WEIGHT_STD);
        Self {
            dwconv: DepthwiseConv2d::new(
                &format!("{name}.block.0"),
                dim,
                7,
                1,
                3,
                true,
                trunc,
                init,
            ),
            norm: LayerNorm::new(&format!("{name}.block.2"), dim, LN_EPS),
            pw1: Conv2d::linear(&format!("{name}.block.3"), dim, 4 * dim, trunc, init),
            act: Activation::new(ActKind::Gelu),
            pw2: Conv2d::linear(&format!("{name}.block.5"), 4 * dim, dim, trunc, init),
            layer_scale: Param::filled(
                format!("{name}.layer_scale"),
                &[dim, 1, 1],
                ParamKind::NoDecay,
                LAYER_SCALE_INIT,
            ),
            drop_path: DropPath::new(drop_path),
            cache: None,
        }
    }

    fn scale(&self, mut t: Tensor) -> Tensor {
        let c = t.channels();
        for row in t.data_mut().chunks_exact_mut(c) {
            for (v, &g) in row.iter_mut().zip(&self.layer_scale.value) {
                *v *= g;
            }
        }
        t
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let h = self.dwconv.infer(x);
        let h = self.norm.infer(&h);
        let h = self.act.infer(&self.pw1.infer(&h));
        let h = self.scale(self.pw2.infer(&h));
        x + &h
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut TrainCtx<'_>) -> Tensor {
        let h = self.dwconv.forward(x);
        let h = self.norm.forward(&h);
        let h = self.pw1.forward(&h);
        let h = self.act.forward(&h);
        let h = self.pw2.forward(&h);
        let scaled = self.scale(h.clone());
        self.cache = Some(h);
        let branch = self.drop_path.forward(scaled, ctx);
        x + &branch
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let pre_scale = self
            .cache
            .take()
            .expect("convnext block: backward without forward");
        let dbranch = self.drop_path.backward(g.clone());
        let c = dbranch.channels();
        for (grow, hrow) in dbranch
            .data()
            .chunks_exact(c)
            .zip(pre_scale.data().chunks_exact(c))
        {
            for ch in 0..c {
                self.layer_scale.grad[ch] += grow[ch] * hrow[ch];
            }
        }
        let dh = self.scale(dbranch);
        let dh = self.pw2.backward(&dh);
        let dh = self.act.backward(&dh);
        let dh = self.pw1.backward(&dh);
        let dh = self.norm.backward(&dh);
        let mut dx = self.dwconv.backward(&dh);
        dx.add_assign(g);
        dx
    }
}

impl HasParams for Block {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.dwconv.collect(out);
        self.norm.collect(out);
        self.pw1.collect(out);
        self.pw2.collect(out);
        out.push(&self.layer_scale);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.dwconv.collect_mut(out);
        self.norm.collect_mut(out);
        self.pw1.collect_mut(out);
        self.pw2.collect_mut(out);
        out.push(&mut self.layer_scale);
    }
}

#[derive(Debug, Clone)]
struct Downsample {
    norm: LayerNorm,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvNext {
    stem: Conv2d,
    stem_norm: LayerNorm,
    downsamples: Vec<Downsample>,
    stages: Vec<Vec<Block>>,
    final_norm: LayerNorm,
}

impl ConvNext {
    pub fn new(in_channels: usize, drop_path_rate: f32, init: &mut Initializer) -> Self {
        let trunc = Init::TruncNormal(WEIGHT_STD);
        let stem = Conv2d::new(
            "features.0.0",
            in_channels,
            WIDTHS[0],
            4,
            4,
            0,
            true,
            trunc,
            init,
        );
        let stem_norm = LayerNorm::new("features.0.1", WIDTHS[0], LN_EPS);
        let total: usize = DEPTHS.iter().sum();
        let mut block_id = 0;
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for (s, (&depth, &dim)) in DEPTHS.iter().zip(&WIDTHS).enumerate() {
            if s > 0 {
                let idx = 2 * s;
                downsamples.push(Downsample {
                    norm: LayerNorm::new(&format!("features.{idx}.0"), WIDTHS[s - 1], LN_EPS),
                    conv: Conv2d::new(
                        &format!("features.{idx}.1"),
                        WIDTHS[s - 1],
                        dim,
                        2,
                        2,
                        0,
                        true,
                        trunc,
                        init,
                    ),
                });
            }
            let stage_idx = 2 * s + 1;
            let blocks = (0..depth)
                .map(|j| {
                    // linearly increasing stochastic-depth rate over all blocks
                    let rate = drop_path_rate * block_id as f32 / (total - 1) as f32;
                    block_id += 1;
                    Block::new(&format!("features.{stage_idx}.{j}"), dim, rate, init)
                })
                .collect();
            stages.push(blocks);
        }
        Self {
            stem,
            stem_norm,
            downsamples,
            stages,
            final_norm: LayerNorm::new("classifier.0", FEATURE_CHANNELS, LN_EPS),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = self.stem_norm.infer(&self.stem.infer(x));
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                let ds = &self.downsamples[s - 1];
                h = ds.conv.infer(&ds.norm.infer(&h));
            }
            for block in blocks {
                h = block.infer(&h);
            }
        }
        self.final_norm.infer(&h)
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut TrainCtx<'_>) -> Tensor {
        let h = self.stem.forward(x);
        let mut h = self.stem_norm.forward(&h);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            if s > 0 {
                let ds = &mut self.downsamples[s - 1];
                h = ds.norm.forward(&h);
                h = ds.conv.forward(&h);
            }
            for block in blocks.iter_mut() {
                h = block.forward(&h, ctx);
            }
        }
        self.final_norm.forward(&h)
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut g = self.final_norm.backward(g);
        for s in (0..self.stages.len()).rev() {
            for block in self.stages[s].iter_mut().rev() {
                g = block.backward(&g);
            }
            if s > 0 {
                let ds = &mut self.downsamples[s - 1];
                g = ds.conv.backward(&g);
                g = ds.norm.backward(&g);
            }
        }
        let g = self.stem_norm.backward(&g);
        self.stem.backward(&g)
    }
}

impl HasParams for ConvNext {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.stem.collect(out);
        self.stem_norm.collect(out);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                self.downsamples[s - 1].norm.collect(out);
                self.downsamples[s - 1].conv.collect(out);
            }
            for b in blocks {
                b.collect(out);
            }
        }
        self.final_norm.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.stem.collect_mut(out);
        self.stem_norm.collect_mut(out);
        let mut downsamples = self.downsamples.iter_mut();
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            if s > 0 {
                let ds = downsamples.next().expect("one downsample per later stage");
                ds.norm.collect_mut(out);
                ds.conv.collect_mut(out);
            }
            for b in blocks {
                b.collect_mut(out);
            }
        }
        self.final_norm.collect_mut(out);
    }
}
