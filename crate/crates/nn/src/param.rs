/// How the optimizer and checkpoint code treat a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution / linear kernels; subject to weight decay.
    Weight,
    /// Biases, normalization affines and layer scales; trained without decay.
    NoDecay,
    /// Running statistics; saved in checkpoints, never touched by the optimizer.
    Buffer,
}

/// A named array of model state with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub(crate) fn new(
        name: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        value: Vec<f32>,
    ) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len(), "param value does not match its shape");
        let grad = if kind == ParamKind::Buffer {
            Vec::new()
        } else {
            vec![0.0; len]
        };
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
            value,
            grad,
        }
    }

    pub(crate) fn filled(
        name: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        fill: f32,
    ) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, kind, vec![fill; len])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    /// Zeroes the gradient, reallocating it after [`Param::release_grad`].
    pub fn zero_grad(&mut self) {
        if self.is_trainable() && self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Frees the gradient buffer; the next [`Param::zero_grad`] restores it.
    pub fn release_grad(&mut self) {
        self.grad = Vec::new();
    }
}

/// Uniform access to every [`Param`] of a layer tree, in a fixed order.
pub(crate) trait HasParams {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);
}
