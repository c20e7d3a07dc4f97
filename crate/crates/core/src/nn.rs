//! Small building blocks shared by the head: linear maps, the residual-block
//! MLP and layer normalization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::parameters;
use crate::params::Bindable;
use crate::tensor::Tensor;

/// Uniform in `[−1/√fan_in, 1/√fan_in]`.
pub fn init_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound))
}

pub fn init_gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, sigma: f64) -> Tensor {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    Tensor::from_fn(rows, cols, |_, _| normal.sample(rng))
}

parameters! {
    /// Two linear layers with a ReLU between them: `relu(x W₁ + b₁) W₂ + b₂`.
    pub struct MlpParams / MlpVars {
        pub w1: Tensor,
        pub b1: Tensor,
        pub w2: Tensor,
        pub b2: Tensor,
    }
}

impl MlpParams {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Self {
            w1: init_weight(rng, dim, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: init_weight(rng, hidden, dim),
            b2: Tensor::zeros(1, dim),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(dim, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, dim),
            b2: Tensor::zeros(1, dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    fn validate(&self) -> Result<()> {
        let (d, h) = self.w1.shape();
        self.b1.ensure_shape(1, h, "mlp b1")?;
        self.w2.ensure_shape(h, self.w2.cols(), "mlp w2")?;
        self.b2.ensure_shape(1, self.w2.cols(), "mlp b2")?;
        if self.w2.cols() != d {
            return Err(Error::shape("mlp output width must equal its input width"));
        }
        Ok(())
    }
}

impl MlpVars {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add_row(h, self.b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, self.w2)?;
        g.add_row(o, self.b2)
    }
}

/// Residual-block MLP of one hidden layer.
pub fn mlp_apply(params: &MlpParams, x: &Tensor) -> Result<Tensor> {
    params.validate()?;
    if x.cols() != params.input_dim() {
        return Err(Error::shape(format!(
            "mlp input width {} does not match {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    let xi = g.constant(x.clone());
    let out = vars.apply(&mut g, xi)?;
    Ok(g.value(out).clone())
}

parameters! {
    /// Learnable scale and shift applied after per-row normalization.
    pub struct LayerNormParams / LayerNormVars {
        pub scale: Tensor,
        pub shift: Tensor,
    }
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: Tensor::filled(1, dim, 1.0),
            shift: Tensor::zeros(1, dim),
        }
    }
}

impl LayerNormVars {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, Some(self.scale), Some(self.shift))
    }
}
