//! Layers with explicit forward/backward passes.
//!
//! Each layer offers three entry points:
//! * `infer(&self, x)`: eval-mode output, no state touched;
//! * `forward(&mut self, x, ctx)`: train-mode output, caching what backward needs;
//! * `backward(&mut self, grad)`: accumulates parameter gradients and returns
//!   the gradient with respect to the cached input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::{self, gemm, Window};
use crate::param::{HasParams, Param, ParamKind};
use crate::tensor::Tensor;

/// Randomness and switches for one train-mode forward pass.
pub(crate) struct TrainCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    /// Normalize with running statistics even in train mode.
    pub frozen_norm_stats: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    TruncNormal(f32),
    KaimingFanOut,
    Uniform(f32),
}

/// Source of initial parameter values. A placeholder initializer fills zeros
/// without consuming randomness, for models about to be overwritten by a
/// checkpoint.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    placeholder: bool,
}

impl Initializer {
    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            placeholder: false,
        }
    }

    pub fn placeholder() -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
            placeholder: true,
        }
    }

    pub fn values(&mut self, init: Init, shape: &[usize]) -> Vec<f32> {
        let len: usize = shape.iter().product();
        if self.placeholder {
            return vec![0.0; len];
        }
        let rng = &mut self.rng;
        match init {
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0f32, std).expect("std is positive");
                (0..len)
                    .map(|_| loop {
                        let v = normal.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::KaimingFanOut => {
                // fan_out = out_channels * receptive field
                let fan_out = shape[0] * shape[2..].iter().product::<usize>();
                let std = (2.0 / fan_out as f32).sqrt();
                let normal = Normal::new(0.0f32, std).expect("std is positive");
                (0..len).map(|_| normal.sample(rng)).collect()
            }
            Init::Uniform(bound) => (0..len).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }
}

fn take_cache<T>(slot: &mut Option<T>, layer: &str) -> T {
    slot.take()
        .unwrap_or_else(|| panic!("{layer}: backward without train-mode forward"))
}

// ---------------------------------------------------------------------------
// Dense convolution (groups = 1), including pointwise and linear maps.

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    cin: usize,
    cout: usize,
    win: Window,
    cache: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        init_src: &mut Initializer,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        let weight = Param::new(
            format!("{name}.weight"),
            &shape,
            ParamKind::Weight,
            init_src.values(init, &shape),
        );
        Self {
            weight,
            bias: bias
                .then(|| Param::filled(format!("{name}.bias"), &[cout], ParamKind::NoDecay, 0.0)),
            cin,
            cout,
            win: Window {
                kernel,
                stride,
                pad,
            },
            cache: None,
        }
    }

    /// A fully connected layer; weights use the `[out, in]` shape convention.
    pub fn linear(
        name: &str,
        cin: usize,
        cout: usize,
        init: Init,
        init_src: &mut Initializer,
    ) -> Self {
        let shape = [cout, cin];
        let weight = Param::new(
            format!("{name}.weight"),
            &shape,
            ParamKind::Weight,
            init_src.values(init, &[cout, cin, 1, 1]),
        );
        Self {
            weight,
            bias: Some(Param::filled(
                format!("{name}.bias"),
                &[cout],
                ParamKind::NoDecay,
                0.0,
            )),
            cin,
            cout,
            win: Window {
                kernel: 1,
                stride: 1,
                pad: 0,
            },
            cache: None,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.win
            == (Window {
                kernel: 1,
                stride: 1,
                pad: 0,
            })
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let (n, h, w, c) = x.dims();
        assert_eq!(c, self.cin, "{}: channel mismatch", self.weight.name());
        let (ho, wo) = (self.win.output_size(h), self.win.output_size(w));
        let mut out = Tensor::zeros(n, ho, wo, self.cout);
        let rows = n * ho * wo;
        if let Some(bias) = &self.bias {
            for row in out.data_mut().chunks_exact_mut(self.cout) {
                row.copy_from_slice(&bias.value);
            }
        }
        let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
        if self.is_pointwise() {
            gemm(
                rows,
                self.cin,
                self.cout,
                x.data(),
                false,
                &self.weight.value,
                true,
                out.data_mut(),
                beta,
            );
        } else {
            let k = self.win.kernel;
            let (col, _, _) = ops::im2col(x.data(), x.dims(), self.win);
            let wcl = ops::kernel_to_channels_last(&self.weight.value, self.cout, self.cin, k);
            gemm(
                rows,
                k * k * self.cin,
                self.cout,
                &col,
                false,
                &wcl,
                true,
                out.data_mut(),
                beta,
            );
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.infer(x);
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = take_cache(&mut self.cache, self.weight.name());
        let (_, ho, wo, _) = g.dims();
        let rows = g.rows();
        if let Some(bias) = &mut self.bias {
            ops::accumulate_column_sums(g.data(), self.cout, &mut bias.grad);
        }
        if self.is_pointwise() {
            // dW[cout, cin] += gᵀ · x
            gemm(
                self.cout,
                rows,
                self.cin,
                g.data(),
                true,
                x.data(),
                false,
                &mut self.weight.grad,
                1.0,
            );
            let mut dx = x.same_shape_zeros();
            gemm(
                rows,
                self.cout,
                self.cin,
                g.data(),
                false,
                &self.weight.value,
                false,
                dx.data_mut(),
                0.0,
            );
            dx
        } else {
            let k = self.win.kernel;
            let kk = k * k * self.cin;
            let (col, _, _) = ops::im2col(x.data(), x.dims(), self.win);
            let mut dwcl = vec![0.0; self.cout * kk];
            gemm(
                self.cout,
                rows,
                kk,
                g.data(),
                true,
                &col,
                false,
                &mut dwcl,
                0.0,
            );
            ops::accumulate_kernel_from_channels_last(
                &dwcl,
                &mut self.weight.grad,
                self.cout,
                self.cin,
                k,
            );
            let wcl = ops::kernel_to_channels_last(&self.weight.value, self.cout, self.cin, k);
            let mut dcol = vec![0.0; rows * kk];
            gemm(
                rows,
                self.cout,
                kk,
                g.data(),
                false,
                &wcl,
                false,
                &mut dcol,
                0.0,
            );
            let dx = ops::col2im(&dcol, x.dims(), self.win, ho, wo);
            let (n, h, w, c) = x.dims();
            Tensor::from_nhwc(n, h, w, c, dx).expect("col2im preserves input shape")
        }
    }
}

impl HasParams for Conv2d {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

// ---------------------------------------------------------------------------
// Depthwise convolution (groups = channels).

#[derive(Debug, Clone)]
pub(crate) struct DepthwiseConv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    channels: usize,
    win: Window,
    cache: Option<Tensor>,
}

impl DepthwiseConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        init_src: &mut Initializer,
    ) -> Self {
        let shape = [channels, 1, kernel, kernel];
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                &shape,
                ParamKind::Weight,
                init_src.values(init, &shape),
            ),
            bias: bias.then(|| {
                Param::filled(format!("{name}.bias"), &[channels], ParamKind::NoDecay, 0.0)
            }),
            channels,
            win: Window {
                kernel,
                stride,
                pad,
            },
            cache: None,
        }
    }

    /// Kernel as `[k, k, channels]` so the inner loop runs over contiguous channels.
    fn taps(&self) -> Vec<f32> {
        let k2 = self.win.kernel * self.win.kernel;
        let mut taps = vec![0.0; k2 * self.channels];
        for ch in 0..self.channels {
            for t in 0..k2 {
                taps[t * self.channels + ch] = self.weight.value[ch * k2 + t];
            }
        }
        taps
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let (n, h, w, c) = x.dims();
        assert_eq!(c, self.channels);
        let k = self.win.kernel;
        let (ho, wo) = (self.win.output_size(h), self.win.output_size(w));
        let taps = self.taps();
        let mut out = Tensor::zeros(n, ho, wo, c);
        let xd = x.data();
        let od = out.data_mut();
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = &mut od[((b * ho + oy) * wo + ox) * c..][..c];
                    if let Some(bias) = &self.bias {
                        o.copy_from_slice(&bias.value);
                    }
                    for ky in 0..k {
                        let iy = (oy * self.win.stride + ky) as isize - self.win.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.win.stride + kx) as isize - self.win.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = &xd[((b * h + iy as usize) * w + ix as usize) * c..][..c];
                            let t = &taps[(ky * k + kx) * c..][..c];
                            for ((o, &xv), &tv) in o.iter_mut().zip(xi).zip(t) {
                                *o += xv * tv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.infer(x);
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = take_cache(&mut self.cache, self.weight.name());
        let (n, h, w, c) = x.dims();
        let (_, ho, wo, _) = g.dims();
        let k = self.win.kernel;
        let taps = self.taps();
        let mut dtaps = vec![0.0f32; taps.len()];
        let mut dx = x.same_shape_zeros();
        let xd = x.data();
        let gd = g.data();
        let dxd = dx.data_mut();
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = &gd[((b * ho + oy) * wo + ox) * c..][..c];
                    for ky in 0..k {
                        let iy = (oy * self.win.stride + ky) as isize - self.win.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.win.stride + kx) as isize - self.win.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let base = ((b * h + iy as usize) * w + ix as usize) * c;
                            let t = (ky * k + kx) * c;
                            let xi = &xd[base..base + c];
                            let dxi = &mut dxd[base..base + c];
                            let tv = &taps[t..t + c];
                            let dt = &mut dtaps[t..t + c];
                            for ch in 0..c {
                                dxi[ch] += go[ch] * tv[ch];
                                dt[ch] += go[ch] * xi[ch];
                            }
                        }
                    }
                }
            }
        }
        let k2 = k * k;
        for ch in 0..c {
            for t in 0..k2 {
                self.weight.grad[ch * k2 + t] += dtaps[t * c + ch];
            }
        }
        if let Some(bias) = &mut self.bias {
            ops::accumulate_column_sums(gd, c, &mut bias.grad);
        }
        dx
    }
}

impl HasParams for DepthwiseConv2d {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

// ---------------------------------------------------------------------------
// LayerNorm over the channel axis at every spatial position.

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
    eps: f32,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl LayerNorm {
    pub fn new(name: &str, channels: usize, eps: f32) -> Self {
        Self {
            weight: Param::filled(
                format!("{name}.weight"),
                &[channels],
                ParamKind::NoDecay,
                1.0,
            ),
            bias: Param::filled(format!("{name}.bias"), &[channels], ParamKind::NoDecay, 0.0),
            eps,
            cache: None,
        }
    }

    /// Returns the normalized (pre-affine) tensor and per-row inverse std.
    fn normalize(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        let c = x.channels();
        let mut xhat = x.clone();
        let mut rstd = Vec::with_capacity(x.rows());
        for row in xhat.data_mut().chunks_exact_mut(c) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + self.eps as f64).sqrt();
            for v in row.iter_mut() {
                *v = ((*v as f64 - mean) * r) as f32;
            }
            rstd.push(r as f32);
        }
        (xhat, rstd)
    }

    fn affine(&self, xhat: &Tensor) -> Tensor {
        let c = xhat.channels();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for ((v, &g), &b) in row.iter_mut().zip(&self.weight.value).zip(&self.bias.value) {
                *v = *v * g + b;
            }
        }
        out
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let (xhat, _) = self.normalize(x);
        self.affine(&xhat)
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (xhat, rstd) = self.normalize(x);
        let out = self.affine(&xhat);
        self.cache = Some((xhat, rstd));
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let (xhat, rstd) = take_cache(&mut self.cache, self.weight.name());
        let c = g.channels();
        let mut dx = g.same_shape_zeros();
        let mut dxhat = vec![0.0f32; c];
        for (((grow, xrow), dxrow), &r) in g
            .data()
            .chunks_exact(c)
            .zip(xhat.data().chunks_exact(c))
            .zip(dx.data_mut().chunks_exact_mut(c))
            .zip(&rstd)
        {
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for ch in 0..c {
                self.weight.grad[ch] += grow[ch] * xrow[ch];
                self.bias.grad[ch] += grow[ch];
                dxhat[ch] = grow[ch] * self.weight.value[ch];
                sum_d += dxhat[ch] as f64;
                sum_dx += (dxhat[ch] * xrow[ch]) as f64;
            }
            let mean_d = (sum_d / c as f64) as f32;
            let mean_dx = (sum_dx / c as f64) as f32;
            for ch in 0..c {
                dxrow[ch] = r * (dxhat[ch] - mean_d - xrow[ch] * mean_dx);
            }
        }
        dx
    }
}

impl HasParams for LayerNorm {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// BatchNorm over (batch, height, width) for every channel.

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
    eps: f32,
    momentum: f32,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    rstd: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize, eps: f32) -> Self {
        Self {
            weight: Param::filled(
                format!("{name}.weight"),
                &[channels],
                ParamKind::NoDecay,
                1.0,
            ),
            bias: Param::filled(format!("{name}.bias"), &[channels], ParamKind::NoDecay, 0.0),
            running_mean: Param::filled(
                format!("{name}.running_mean"),
                &[channels],
                ParamKind::Buffer,
                0.0,
            ),
            running_var: Param::filled(
                format!("{name}.running_var"),
                &[channels],
                ParamKind::Buffer,
                1.0,
            ),
            eps,
            momentum: 0.1,
            cache: None,
        }
    }

    fn apply(&self, x: &Tensor, mean: &[f32], rstd: &[f32]) -> (Tensor, Tensor) {
        let c = x.channels();
        let mut xhat = x.clone();
        for row in xhat.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                row[ch] = (row[ch] - mean[ch]) * rstd[ch];
            }
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                row[ch] = row[ch] * self.weight.value[ch] + self.bias.value[ch];
            }
        }
        (xhat, out)
    }

    fn running_rstd(&self) -> Vec<f32> {
        self.running_var
            .value
            .iter()
            .map(|&v| 1.0 / (v + self.eps).sqrt())
            .collect()
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.apply(x, &self.running_mean.value, &self.running_rstd())
            .1
    }

    pub fn forward(&mut self, x: &Tensor, frozen_stats: bool) -> Tensor {
        let c = x.channels();
        let m = x.rows();
        if frozen_stats || m < 2 {
            let rstd = self.running_rstd();
            let (xhat, out) = self.apply(x, &self.running_mean.value.clone(), &rstd);
            self.cache = Some(BnCache {
                xhat,
                rstd,
                batch_stats: false,
            });
            return out;
        }
        let mut mean = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for ch in 0..c {
                mean[ch] += row[ch] as f64;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for ch in 0..c {
                var[ch] += (row[ch] as f64 - mean[ch]).powi(2);
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
        let mean32: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let rstd: Vec<f32> = biased
            .iter()
            .map(|&v| (1.0 / (v + self.eps as f64).sqrt()) as f32)
            .collect();
        let mom = self.momentum;
        for ch in 0..c {
            let unbiased = (var[ch] / (m - 1) as f64) as f32;
            self.running_mean.value[ch] =
                (1.0 - mom) * self.running_mean.value[ch] + mom * mean32[ch];
            self.running_var.value[ch] = (1.0 - mom) * self.running_var.value[ch] + mom * unbiased;
        }
        let (xhat, out) = self.apply(x, &mean32, &rstd);
        self.cache = Some(BnCache {
            xhat,
            rstd,
            batch_stats: true,
        });
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let BnCache {
            xhat,
            rstd,
            batch_stats,
        } = take_cache(&mut self.cache, self.weight.name());
        let c = g.channels();
        let m = g.rows() as f64;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for (grow, xrow) in g.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
            for ch in 0..c {
                sum_g[ch] += grow[ch] as f64;
                sum_gx[ch] += (grow[ch] * xrow[ch]) as f64;
            }
        }
        for ch in 0..c {
            self.weight.grad[ch] += sum_gx[ch] as f32;
            self.bias.grad[ch] += sum_g[ch] as f32;
        }
        let mut dx = g.same_shape_zeros();
        for ((grow, xrow), dxrow) in g
            .data()
            .chunks_exact(c)
            .zip(xhat.data().chunks_exact(c))
            .zip(dx.data_mut().chunks_exact_mut(c))
        {
            for ch in 0..c {
                let scale = self.weight.value[ch] * rstd[ch];
                dxrow[ch] = if batch_stats {
                    scale * (grow[ch] - (sum_g[ch] / m) as f32 - xrow[ch] * (sum_gx[ch] / m) as f32)
                } else {
                    scale * grow[ch]
                };
            }
        }
        dx
    }
}

impl HasParams for BatchNorm2d {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([
            &self.weight,
            &self.bias,
            &self.running_mean,
            &self.running_var,
        ]);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
        out.push(&mut self.running_mean);
        out.push(&mut self.running_var);
    }
}

// ---------------------------------------------------------------------------
// Pointwise activations.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ActKind {
    Gelu,
    Silu,
}

#[derive(Debug, Clone)]
pub(crate) struct Activation {
    kind: ActKind,
    cache: Option<Tensor>,
}

impl Activation {
    pub fn new(kind: ActKind) -> Self {
        Self { kind, cache: None }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        match self.kind {
            ActKind::Gelu => x.map(ops::gelu),
            ActKind::Silu => x.map(ops::silu),
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.infer(x);
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut x = take_cache(&mut self.cache, "activation");
        let d = match self.kind {
            ActKind::Gelu => ops::gelu_grad,
            ActKind::Silu => ops::silu_grad,
        };
        for (xv, &gv) in x.data_mut().iter_mut().zip(g.data()) {
            *xv = gv * d(*xv);
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation gate: x · sigmoid(fc2(silu(fc1(avgpool(x))))).

#[derive(Debug, Clone)]
pub(crate) struct SqueezeExcite {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    act: Activation,
    cache: Option<(Tensor, Tensor)>,
}

impl SqueezeExcite {
    pub fn new(name: &str, channels: usize, squeeze: usize, init_src: &mut Initializer) -> Self {
        Self {
            fc1: Conv2d::new(
                &format!("{name}.fc1"),
                channels,
                squeeze,
                1,
                1,
                0,
                true,
                Init::KaimingFanOut,
                init_src,
            ),
            fc2: Conv2d::new(
                &format!("{name}.fc2"),
                squeeze,
                channels,
                1,
                1,
                0,
                true,
                Init::KaimingFanOut,
                init_src,
            ),
            act: Activation::new(ActKind::Silu),
            cache: None,
        }
    }

    fn pool(x: &Tensor) -> Tensor {
        let (n, h, w, c) = x.dims();
        let mut pooled = Tensor::zeros(n, 1, 1, c);
        let inv = 1.0 / (h * w) as f32;
        for (b, sample) in x.data().chunks_exact(h * w * c).enumerate() {
            let p = &mut pooled.data_mut()[b * c..][..c];
            ops::accumulate_column_sums(sample, c, p);
            p.iter_mut().for_each(|v| *v *= inv);
        }
        pooled
    }

    fn scale(x: &Tensor, gate: &Tensor) -> Tensor {
        let (_, h, w, c) = x.dims();
        let mut out = x.clone();
        for (sample, s) in out
            .data_mut()
            .chunks_exact_mut(h * w * c)
            .zip(gate.data().chunks_exact(c))
        {
            for row in sample.chunks_exact_mut(c) {
                for (v, &sv) in row.iter_mut().zip(s) {
                    *v *= sv;
                }
            }
        }
        out
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let s = self
            .fc2
            .infer(&self.act.infer(&self.fc1.infer(&Self::pool(x))));
        Self::scale(x, &s.map(ops::sigmoid))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let a = self.fc1.forward(&Self::pool(x));
        let a = self.act.forward(&a);
        let gate = self.fc2.forward(&a).map(ops::sigmoid);
        let out = Self::scale(x, &gate);
        self.cache = Some((x.clone(), gate));
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let (x, gate) = take_cache(&mut self.cache, "squeeze-excite");
        let (n, h, w, c) = x.dims();
        let mut dgate = Tensor::zeros(n, 1, 1, c);
        for ((gs, xs), dg) in g
            .data()
            .chunks_exact(h * w * c)
            .zip(x.data().chunks_exact(h * w * c))
            .zip(dgate.data_mut().chunks_exact_mut(c))
        {
            for (grow, xrow) in gs.chunks_exact(c).zip(xs.chunks_exact(c)) {
                for ch in 0..c {
                    dg[ch] += grow[ch] * xrow[ch];
                }
            }
        }
        for (d, &s) in dgate.data_mut().iter_mut().zip(gate.data()) {
            *d *= s * (1.0 - s);
        }
        let da = self.act.backward(&self.fc2.backward(&dgate));
        let dpooled = self.fc1.backward(&da);
        let mut dx = Self::scale(g, &gate);
        let inv = 1.0 / (h * w) as f32;
        for (sample, dp) in dx
            .data_mut()
            .chunks_exact_mut(h * w * c)
            .zip(dpooled.data().chunks_exact(c))
        {
            for row in sample.chunks_exact_mut(c) {
                for (v, &d) in row.iter_mut().zip(dp) {
                    *v += d * inv;
                }
            }
        }
        dx
    }
}

impl HasParams for SqueezeExcite {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.fc1.collect(out);
        self.fc2.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.fc1.collect_mut(out);
        self.fc2.collect_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Stochastic depth on a residual branch: each sample's branch is dropped with
// probability `rate` and surviving branches are rescaled by 1 / (1 − rate).

#[derive(Debug, Clone)]
pub(crate) struct DropPath {
    pub rate: f32,
    mask: Option<Vec<f32>>,
}

impl DropPath {
    pub fn new(rate: f32) -> Self {
        Self { rate, mask: None }
    }

    pub fn forward(&mut self, mut branch: Tensor, ctx: &mut TrainCtx<'_>) -> Tensor {
        if self.rate <= 0.0 {
            self.mask = None;
            return branch;
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f32> = (0..branch.batch())
            .map(|_| {
                if ctx.rng.random::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let per_sample = branch.data().len() / branch.batch();
        for (sample, &m) in branch.data_mut().chunks_exact_mut(per_sample).zip(&mask) {
            sample.iter_mut().for_each(|v| *v *= m);
        }
        self.mask = Some(mask);
        branch
    }

    pub fn backward(&mut self, mut g: Tensor) -> Tensor {
        if let Some(mask) = self.mask.take() {
            let per_sample = g.data().len() / g.batch();
            for (sample, &m) in g.data_mut().chunks_exact_mut(per_sample).zip(&mask) {
                sample.iter_mut().for_each(|v| *v *= m);
            }
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Classification head: global max pool → dropout → linear map to one logit.

#[derive(Debug, Clone)]
pub(crate) struct MaxPoolHead {
    pub fc: Conv2d,
    dropout: f32,
    cache: Option<HeadCache>,
}

#[derive(Debug, Clone)]
struct HeadCache {
    dims: (usize, usize, usize, usize),
    argmax: Vec<usize>,
    mask: Vec<f32>,
}

impl MaxPoolHead {
    pub fn new(
        name: &str,
        channels: usize,
        dropout: f32,
        init: Init,
        init_src: &mut Initializer,
    ) -> Self {
        Self {
            fc: Conv2d::linear(name, channels, 1, init, init_src),
            dropout,
            cache: None,
        }
    }

    /// Global max over spatial positions; returns `[n, 1, 1, c]` and flat argmax indices.
    fn pool(x: &Tensor) -> (Tensor, Vec<usize>) {
        let (n, h, w, c) = x.dims();
        let mut pooled = Tensor::zeros(n, 1, 1, c);
        let mut argmax = vec![0usize; n * c];
        for b in 0..n {
            let sample = &x.data()[b * h * w * c..][..h * w * c];
            let p = &mut pooled.data_mut()[b * c..][..c];
            let am = &mut argmax[b * c..][..c];
            p.copy_from_slice(&sample[..c]);
            for (i, row) in sample.chunks_exact(c).enumerate().skip(1) {
                for ch in 0..c {
                    // strict comparison keeps the first maximum
                    if row[ch] > p[ch] {
                        p[ch] = row[ch];
                        am[ch] = i;
                    }
                }
            }
        }
        (pooled, argmax)
    }

    pub fn infer(&self, x: &Tensor) -> Vec<f32> {
        let (pooled, _) = Self::pool(x);
        self.fc.infer(&pooled).into_data()
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut TrainCtx<'_>) -> Vec<f32> {
        let (mut pooled, argmax) = Self::pool(x);
        let keep = 1.0 - self.dropout;
        let mask: Vec<f32> = if self.dropout > 0.0 {
            (0..pooled.data().len())
                .map(|_| {
                    if ctx.rng.random::<f32>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        } else {
            vec![1.0; pooled.data().len()]
        };
        for (v, &m) in pooled.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let logits = self.fc.forward(&pooled).into_data();
        self.cache = Some(HeadCache {
            dims: x.dims(),
            argmax,
            mask,
        });
        logits
    }

    pub fn backward(&mut self, dlogits: &[f32]) -> Tensor {
        let HeadCache { dims, argmax, mask } = take_cache(&mut self.cache, "head");
        let (n, h, w, c) = dims;
        let g = Tensor::from_nhwc(n, 1, 1, 1, dlogits.to_vec()).expect("one logit per sample");
        let mut dpooled = self.fc.backward(&g);
        for (v, &m) in dpooled.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let mut dx = Tensor::zeros(n, h, w, c);
        for b in 0..n {
            for ch in 0..c {
                let pos = argmax[b * c + ch];
                dx.data_mut()[(b * h * w + pos) * c + ch] += dpooled.data()[b * c + ch];
            }
        }
        dx
    }
}

impl HasParams for MaxPoolHead {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.fc.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.fc.collect_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn init() -> Initializer {
        Initializer::seeded(7)
    }

    fn random_tensor(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * h * w * c)
            .map(|_| r.random_range(-1.0f32..1.0))
            .collect();
        Tensor::from_nhwc(n, h, w, c, data).unwrap()
    }

    /// Scalar probe loss L = Σ y · r for a fixed random r, so dL/dy = r.
    fn probe(y: &Tensor, r: &[f32]) -> f64 {
        y.data()
            .iter()
            .zip(r)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum()
    }

    /// Checks d(probe ∘ f)/dx from `backward` against central differences on a few inputs.
    fn check_input_grad(
        x: &Tensor,
        mut fwd: impl FnMut(&Tensor) -> Tensor,
        analytic: &Tensor,
        r: &[f32],
        tol: f64,
    ) {
        let step = 1e-2f32;
        for idx in (0..x.data().len()).step_by((x.data().len() / 17).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[idx] += step;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= step;
            let fd = (probe(&fwd(&xp), r) - probe(&fwd(&xm), r)) / (2.0 * step as f64);
            let an = analytic.data()[idx] as f64;
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                "input grad {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn probe_weights(n: usize, seed: u64) -> Vec<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for &(k, s, p) in &[(1, 1, 0), (3, 2, 1), (2, 2, 0), (4, 4, 0)] {
            let mut conv = Conv2d::new(
                "c",
                3,
                4,
                k,
                s,
                p,
                true,
                Init::TruncNormal(0.3),
                &mut init(),
            );
            let x = random_tensor(2, 8, 8, 3, 1);
            let y = conv.forward(&x);
            let r = probe_weights(y.data().len(), 2);
            let g = Tensor::from_nhwc(y.dims().0, y.dims().1, y.dims().2, y.dims().3, r.clone())
                .unwrap();
            let dx = conv.backward(&g);
            let frozen = conv.clone();
            check_input_grad(&x, |t| frozen.infer(t), &dx, &r, 2e-3);
            // weight gradient, a handful of entries
            for idx in (0..conv.weight.len()).step_by(7) {
                let mut cp = frozen.clone();
                cp.weight.value[idx] += 1e-2;
                let mut cm = frozen.clone();
                cm.weight.value[idx] -= 1e-2;
                let fd = (probe(&cp.infer(&x), &r) - probe(&cm.infer(&x), &r)) / 2e-2;
                let an = conv.weight.grad[idx] as f64;
                assert!(
                    (fd - an).abs() < 2e-3 * (1.0 + fd.abs()),
                    "k={k} w[{idx}]: {fd} vs {an}"
                );
            }
            let bias_fd: f64 = r.chunks_exact(4).map(|row| row[1] as f64).sum();
            assert!((bias_fd - conv.bias.as_ref().unwrap().grad[1] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn depthwise_gradients_match_finite_differences() {
        let mut dw =
            DepthwiseConv2d::new("d", 5, 3, 2, 1, true, Init::TruncNormal(0.3), &mut init());
        let x = random_tensor(2, 7, 6, 5, 3);
        let y = dw.forward(&x);
        let r = probe_weights(y.data().len(), 4);
        let (n, h, w, c) = y.dims();
        let dx = dw.backward(&Tensor::from_nhwc(n, h, w, c, r.clone()).unwrap());
        let frozen = dw.clone();
        check_input_grad(&x, |t| frozen.infer(t), &dx, &r, 2e-3);
        for idx in 0..dw.weight.len() {
            let mut cp = frozen.clone();
            cp.weight.value[idx] += 1e-2;
            let mut cm = frozen.clone();
            cm.weight.value[idx] -= 1e-2;
            let fd = (probe(&cp.infer(&x), &r) - probe(&cm.infer(&x), &r)) / 2e-2;
            assert!((fd - dw.weight.grad[idx] as f64).abs() < 2e-3 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut ln = LayerNorm::new("ln", 6, 1e-6);
        ln.weight.value = probe_weights(6, 9).iter().map(|v| v + 1.5).collect();
        let x = random_tensor(2, 3, 3, 6, 5);
        let y = ln.forward(&x);
        let r = probe_weights(y.data().len(), 6);
        let (n, h, w, c) = y.dims();
        let dx = ln.backward(&Tensor::from_nhwc(n, h, w, c, r.clone()).unwrap());
        let frozen = ln.clone();
        check_input_grad(&x, |t| frozen.infer(t), &dx, &r, 5e-3);
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut bn = BatchNorm2d::new("bn", 4, 1e-3);
        bn.weight.value = vec![0.5, 1.5, -1.0, 2.0];
        let x = random_tensor(3, 4, 4, 4, 8);
        let y = bn.forward(&x, false);
        let r = probe_weights(y.data().len(), 10);
        let (n, h, w, c) = y.dims();
        let dx = bn.backward(&Tensor::from_nhwc(n, h, w, c, r.clone()).unwrap());
        let template = BatchNorm2d::new("bn", 4, 1e-3);
        let weights = bn.weight.value.clone();
        check_input_grad(
            &x,
            |t| {
                let mut b = template.clone();
                b.weight.value = weights.clone();
                b.forward(t, false)
            },
            &dx,
            &r,
            5e-3,
        );
    }

    #[test]
    fn batch_norm_frozen_matches_infer() {
        let mut bn = BatchNorm2d::new("bn", 3, 1e-3);
        bn.running_mean.value = vec![0.1, -0.2, 0.3];
        bn.running_var.value = vec![0.5, 2.0, 1.0];
        let x = random_tensor(2, 3, 3, 3, 11);
        assert_eq!(bn.forward(&x, true), bn.infer(&x));
        assert_eq!(bn.running_mean.value, vec![0.1, -0.2, 0.3]);
    }

    #[test]
    fn squeeze_excite_gradients_match_finite_differences() {
        let mut se = SqueezeExcite::new("se", 6, 2, &mut init());
        let x = random_tensor(2, 4, 3, 6, 12);
        let y = se.forward(&x);
        let r = probe_weights(y.data().len(), 13);
        let (n, h, w, c) = y.dims();
        let dx = se.backward(&Tensor::from_nhwc(n, h, w, c, r.clone()).unwrap());
        let frozen = se.clone();
        check_input_grad(&x, |t| frozen.infer(t), &dx, &r, 3e-3);
    }

    #[test]
    fn head_gradients_route_through_argmax() {
        let mut head = MaxPoolHead::new("head", 4, 0.0, Init::TruncNormal(0.5), &mut init());
        let x = random_tensor(2, 3, 3, 4, 14);
        let mut r = rng();
        let mut ctx = TrainCtx {
            rng: &mut r,
            frozen_norm_stats: false,
        };
        let logits = head.forward(&x, &mut ctx);
        assert_eq!(logits, head.infer(&x));
        let dx = head.backward(&[1.0, -2.0]);
        let frozen = head.clone();
        let r = [1.0f32, -2.0];
        check_input_grad(
            &x,
            |t| {
                let l = frozen.infer(t);
                Tensor::from_nhwc(2, 1, 1, 1, l).unwrap()
            },
            &dx,
            &r,
            1e-3,
        );
    }

    #[test]
    fn drop_path_zeroes_or_rescales_whole_samples() {
        let mut dp = DropPath::new(0.5);
        let mut r = rng();
        let mut ctx = TrainCtx {
            rng: &mut r,
            frozen_norm_stats: false,
        };
        let x = Tensor::from_nhwc(16, 1, 2, 1, vec![1.0; 32]).unwrap();
        let y = dp.forward(x, &mut ctx);
        for sample in y.data().chunks_exact(2) {
            assert_eq!(sample[0], sample[1]);
            assert!(sample[0] == 0.0 || sample[0] == 2.0);
        }
    }
}
