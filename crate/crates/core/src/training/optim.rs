//! Learning-rate schedule, soft-label BCE, and SGD with momentum.

use mammo_nn::{Param, ParamKind};

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let total = total.max(1);
    let t = t.min(total);
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn soft_target(label: u8, soft_positive: f64) -> f64 {
    if label == 1 {
        soft_positive
    } else {
        0.0
    }
}

/// Per-sample BCE on the logit scale: `max(z,0) − z·ỹ + ln(1 + e^{−|z|})`.
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// Mean soft-label binary cross-entropy over the batch.
pub fn bce_soft_loss(logits: &[f64], labels: &[u8], soft_positive: f64) -> f64 {
    assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return 0.0;
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| bce_with_logit(z, soft_target(y, soft_positive)))
        .sum();
    sum / logits.len() as f64
}

/// d(mean loss)/d(logit) = (σ(z) − ỹ) / B.
pub fn bce_soft_loss_grad(logits: &[f64], labels: &[u8], soft_positive: f64) -> Vec<f64> {
    assert_eq!(logits.len(), labels.len());
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (sigmoid(z) - soft_target(y, soft_positive)) / n)
        .collect()
}

/// Minimum attainable per-sample loss for target `ỹ`.
pub fn bce_minimum(target: f64) -> f64 {
    let xlogx = |v: f64| if v > 0.0 { v * v.ln() } else { 0.0 };
    -(xlogx(target) + xlogx(1.0 - target))
}

/// SGD with heavy-ball momentum; L2 weight decay on conv/linear weights only.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v ← μv + (g + λw)`, `w ← w − lr·v`.
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| {
                    if p.is_trainable() {
                        vec![0.0; p.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect();
        }
        assert_eq!(
            self.velocity.len(),
            params.len(),
            "parameter set changed between steps"
        );
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            if !p.is_trainable() {
                continue;
            }
            let wd = if p.kind() == ParamKind::Weight {
                self.weight_decay as f32
            } else {
                0.0
            };
            let Param { value, grad, .. } = p;
            for ((w, &g), vel) in value.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
                *vel = mu * *vel + g + wd * *w;
                *w -= lr * *vel;
            }
        }
    }
}
