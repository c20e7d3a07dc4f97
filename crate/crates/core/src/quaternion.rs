//! Quaternion algebra and Hamilton-product linear layers.
//!
//! A `d`-wide feature row is read as a quaternion whose four components are
//! the contiguous column slices `[0,d/4)`, `[d/4,d/2)`, `[d/2,3d/4)`,
//! `[3d/4,d)`. A quaternion weight `W = R + iI + jJ + kK` with `(d/4)×(d/4)`
//! real components acts on it through the real `d×d` block matrix
//!
//! ```text
//! [ R  -I  -J  -K ]
//! [ I   R  -K   J ]
//! [ J   K   R  -I ]
//! [ K  -J   I   R ]
//! ```
//!
//! which stores a quarter of the weights of a dense layer of the same width.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::init_weight;
use crate::parameters;
use crate::params::Bindable;
use crate::tensor::Tensor;

/// `(component, sign)` of each block of the real Hamilton matrix.
/// Components are indexed `R=0, I=1, J=2, K=3`.
pub const HAMILTON_LAYOUT: [[(usize, f64); 4]; 4] = [
    [(0, 1.0), (1, -1.0), (2, -1.0), (3, -1.0)],
    [(1, 1.0), (0, 1.0), (3, -1.0), (2, 1.0)],
    [(2, 1.0), (3, 1.0), (0, 1.0), (1, -1.0)],
    [(3, 1.0), (2, -1.0), (1, 1.0), (0, 1.0)],
];

pub(crate) fn assemble_hamilton(blocks: [&Tensor; 4]) -> Result<Tensor> {
    let q = blocks[0].rows();
    for b in blocks {
        b.ensure_shape(q, q, "quaternion weight component")?;
    }
    let d = 4 * q;
    let mut out = Tensor::zeros(d, d);
    for (br, row) in HAMILTON_LAYOUT.iter().enumerate() {
        for (bc, &(comp, sign)) in row.iter().enumerate() {
            let b = blocks[comp];
            for r in 0..q {
                for c in 0..q {
                    out.set(br * q + r, bc * q + c, sign * b.get(r, c));
                }
            }
        }
    }
    Ok(out)
}

parameters! {
    /// Quaternion linear layer over `d = 4q` features.
    pub struct QuaternionLinearParams / QuaternionLinearVars {
        pub w_r: Tensor,
        pub w_i: Tensor,
        pub w_j: Tensor,
        pub w_k: Tensor,
        /// Real `1×d` bias added after the product.
        pub bias: Option<Tensor>,
    }
}

fn quarter(dim: usize) -> Result<usize> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "quaternion width must be a positive multiple of 4, got {dim}"
        )));
    }
    Ok(dim / 4)
}

impl QuaternionLinearParams {
    /// Components uniform in `±1/√d`, zero bias.
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Result<Self> {
        let q = quarter(dim)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let mut comp = || Tensor::from_fn(q, q, |_, _| rng.random_range(-bound..=bound));
        Ok(Self {
            w_r: comp(),
            w_i: comp(),
            w_j: comp(),
            w_k: comp(),
            bias: Some(Tensor::zeros(1, dim)),
        })
    }

    /// The real unit quaternion `W = 1`, no bias.
    pub fn identity(dim: usize) -> Result<Self> {
        Self::pure(dim, 0)
    }

    /// `W` equal to one basis element (`0=1, 1=i, 2=j, 3=k`) times the identity.
    pub fn pure(dim: usize, component: usize) -> Result<Self> {
        let q = quarter(dim)?;
        let mut w = [
            Tensor::zeros(q, q),
            Tensor::zeros(q, q),
            Tensor::zeros(q, q),
            Tensor::zeros(q, q),
        ];
        w[component] = Tensor::identity(q);
        let [w_r, w_i, w_j, w_k] = w;
        Ok(Self {
            w_r,
            w_i,
            w_j,
            w_k,
            bias: None,
        })
    }

    pub fn dim(&self) -> usize {
        4 * self.w_r.rows()
    }

    /// Number of weight scalars (bias excluded).
    pub fn weight_count(&self) -> usize {
        self.w_r.len() + self.w_i.len() + self.w_j.len() + self.w_k.len()
    }

    fn validate(&self) -> Result<()> {
        let q = self.w_r.rows();
        if q == 0 {
            return Err(Error::invalid("empty quaternion layer"));
        }
        for w in [&self.w_r, &self.w_i, &self.w_j, &self.w_k] {
            w.ensure_shape(q, q, "quaternion component")?;
        }
        if let Some(b) = &self.bias {
            b.ensure_shape(1, 4 * q, "quaternion bias")?;
        }
        Ok(())
    }
}

impl QuaternionLinearVars {
    pub fn apply(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        let m = g.hamilton([self.w_r, self.w_i, self.w_j, self.w_k])?;
        let out = g.matmul_t(h, m)?;
        match self.bias {
            Some(b) => g.add_row(out, b),
            None => Ok(out),
        }
    }
}

/// The real `d×d` matrix of the layer's quaternion weight.
pub fn hamilton_block_matrix(p: &QuaternionLinearParams) -> Result<Tensor> {
    p.validate()?;
    assemble_hamilton([&p.w_r, &p.w_i, &p.w_j, &p.w_k])
}

/// `h · Hᵀ (+ bias)` through the assembled block matrix.
pub fn quaternion_linear(p: &QuaternionLinearParams, h: &Tensor) -> Result<Tensor> {
    p.validate()?;
    if h.cols() != p.dim() {
        return Err(Error::shape(format!(
            "quaternion layer of width {} applied to {} columns",
            p.dim(),
            h.cols()
        )));
    }
    let mut g = Graph::inference();
    let vars = p.bind(&mut g);
    let x = g.constant(h.clone());
    let out = vars.apply(&mut g, x)?;
    Ok(g.value(out).clone())
}

/// Same product computed component by component, without assembling the
/// block matrix.
pub fn quaternion_linear_blockwise(p: &QuaternionLinearParams, h: &Tensor) -> Result<Tensor> {
    p.validate()?;
    let parts = quaternion_split(h)?;
    let comps = [&p.w_r, &p.w_i, &p.w_j, &p.w_k];
    let mut outs = Vec::with_capacity(4);
    for row in HAMILTON_LAYOUT {
        let mut acc = Tensor::zeros(h.rows(), p.w_r.rows());
        for (part, (comp, sign)) in parts.iter().zip(row) {
            let prod = part.matmul_t(comps[comp])?;
            for (a, v) in acc.data_mut().iter_mut().zip(prod.data()) {
                *a += sign * v;
            }
        }
        outs.push(acc);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    let mut out = Tensor::concat_cols(&refs)?;
    if let Some(b) = &p.bias {
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Splits `C×d` features into real, i, j and k parts of width `d/4`.
pub fn quaternion_split(f: &Tensor) -> Result<[Tensor; 4]> {
    let q = quarter(f.cols())?;
    Ok(std::array::from_fn(|k| f.slice_cols(k * q, (k + 1) * q)))
}

/// Inverse of [`quaternion_split`].
pub fn quaternion_concat(parts: &[Tensor; 4]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_cols(&refs)
}

parameters! {
    /// Pre-projection followed by two stacked quaternion layers.
    pub struct QsmParams / QsmVars {
        pub w_q: Tensor,
        pub layer1: QuaternionLinearParams,
        pub layer2: QuaternionLinearParams,
    }
}

impl QsmParams {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Result<Self> {
        quarter(dim)?;
        Ok(Self {
            w_q: init_weight(rng, dim, dim),
            layer1: QuaternionLinearParams::new(rng, dim)?,
            layer2: QuaternionLinearParams::new(rng, dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }
}

impl QsmVars {
    /// `relu(Q₂(relu(Q₁(F))))` for an already-projected `F`.
    pub fn synthesize(&self, g: &mut Graph, f_mp: NodeId) -> Result<NodeId> {
        let h = self.layer1.apply(g, f_mp)?;
        let h = g.relu(h);
        let h = self.layer2.apply(g, h)?;
        Ok(g.relu(h))
    }

    /// `(t_ca + t_ka + x0) W_Q`, then the two quaternion layers.
    pub fn forward(
        &self,
        g: &mut Graph,
        t_ca: Option<NodeId>,
        t_ka: Option<NodeId>,
        x0: NodeId,
    ) -> Result<NodeId> {
        let f_mp = combine_and_project(g, t_ca, t_ka, x0, self.w_q)?;
        self.synthesize(g, f_mp)
    }
}

/// `(Σ present terms + x0 broadcast) · W`. At least one label term is required
/// to fix the number of rows.
pub(crate) fn combine_and_project(
    g: &mut Graph,
    t_ca: Option<NodeId>,
    t_ka: Option<NodeId>,
    x0: NodeId,
    w: NodeId,
) -> Result<NodeId> {
    let base = match (t_ca, t_ka) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => {
            return Err(Error::DegenerateConfig(
                "synthesis needs at least one label semantics term".into(),
            ))
        }
    };
    let s = g.add_row(base, x0)?;
    g.matmul(s, w)
}

/// Unified label representations from context-aware and knowledge-aware
/// embeddings guided by the global visual feature.
pub fn qsm_forward(p: &QsmParams, t_ca: &Tensor, t_ka: &Tensor, x0: &Tensor) -> Result<Tensor> {
    let d = p.dim();
    quarter(d)?;
    if t_ca.cols() != d || t_ka.shape() != t_ca.shape() || x0.shape() != (1, d) {
        return Err(Error::shape(format!(
            "qsm inputs t_ca {:?}, t_ka {:?}, x0 {:?} for width {d}",
            t_ca.shape(),
            t_ka.shape(),
            x0.shape()
        )));
    }
    p.layer1.validate()?;
    p.layer2.validate()?;
    let mut g = Graph::inference();
    let vars = p.bind(&mut g);
    let a = g.constant(t_ca.clone());
    let b = g.constant(t_ka.clone());
    let x = g.constant(x0.clone());
    let out = vars.forward(&mut g, Some(a), Some(b), x)?;
    Ok(g.value(out).clone())
}
