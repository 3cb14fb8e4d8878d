use rand::Rng;

/// How the optimizer treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Ordinary real-valued weight; subject to weight decay.
    Weight,
    /// Latent weight behind a binarized conv; clamped to [-1, 1] after each step.
    LatentBinary,
    /// Thresholds, shifts and slopes of the activation family; never decayed.
    Shift,
    /// Hyper-function FC weights and biases; never decayed.
    Hyper,
    /// Running statistics; serialized but not trained.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::LatentBinary)
    }
}

/// A flat parameter buffer with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn filled(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Param {
            dims: dims.to_vec(),
            data: vec![value; len],
            grad: vec![0.0; len],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Param::filled(dims, 0.0)
    }

    pub fn uniform(dims: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut p = Param::zeros(dims);
        for v in &mut p.data {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn from_data(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        let grad = vec![0.0; data.len()];
        Param {
            dims: dims.to_vec(),
            data,
            grad,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn accumulate(&mut self, grad: &[f64]) {
        debug_assert_eq!(grad.len(), self.grad.len());
        for (g, d) in self.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Visitor over every named parameter of a layer tree.
pub type ParamVisitor<'a> = dyn FnMut(&str, ParamKind, &mut Param) + 'a;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
