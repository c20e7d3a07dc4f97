//! Cross-modal attention, the gate mechanism, and the two gated alignment
//! directions (visual-to-semantic and semantic-to-visual).
//!
//! Both directions run the same kernel, [`GatedAttentionVars::apply`], with
//! the roles of the query side and the attended context swapped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{init_weight, LayerNormParams, MlpParams};
use crate::parameters;
use crate::params::Bindable;
use crate::tensor::Tensor;

parameters! {
    /// Cross-modal attention carries a single projection, on the query.
    pub struct CmaParams / CmaVars {
        pub w_e: Tensor,
    }
}

impl CmaParams {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            w_e: init_weight(rng, dim, dim),
        }
    }
}

impl CmaVars {
    /// Returns `(softmax((E W_E) Zᵀ / √d) Z, attention)`.
    pub fn apply(&self, g: &mut Graph, e: NodeId, z: NodeId) -> Result<(NodeId, NodeId)> {
        let (k, d) = g.shape(z);
        if k == 0 {
            return Err(Error::invalid("cross-modal attention needs at least one key"));
        }
        if g.shape(e).1 != d {
            return Err(Error::shape("cma query and key widths differ"));
        }
        let q = g.matmul(e, self.w_e)?;
        let s = g.matmul_t(q, z)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let a = g.softmax_rows(s, 1.0)?;
        let out = g.matmul(a, z)?;
        Ok((out, a))
    }
}

/// Attends each row of `e` over the rows of `z`. Returns the output and the
/// `N×K` attention matrix.
pub fn cma_with_attention(e: &Tensor, z: &Tensor, p: &CmaParams) -> Result<(Tensor, Tensor)> {
    let d = z.cols();
    p.w_e.ensure_shape(d, d, "W_E")?;
    let mut g = Graph::inference();
    let vars = p.bind(&mut g);
    let (ei, zi) = (g.constant(e.clone()), g.constant(z.clone()));
    let (out, a) = vars.apply(&mut g, ei, zi)?;
    Ok((g.value(out).clone(), g.value(a).clone()))
}

pub fn cma(e: &Tensor, z: &Tensor, p: &CmaParams) -> Result<Tensor> {
    cma_with_attention(e, z, p).map(|(o, _)| o)
}

parameters! {
    /// `W_f, W_g : 4d×d`, `b_f, b_g : 1×d`.
    pub struct GateParams / GateVars {
        pub w_f: Tensor,
        pub w_g: Tensor,
        pub b_f: Tensor,
        pub b_g: Tensor,
    }
}

impl GateParams {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            w_f: init_weight(rng, 4 * dim, dim),
            w_g: init_weight(rng, 4 * dim, dim),
            b_f: Tensor::zeros(1, dim),
            b_g: Tensor::zeros(1, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            w_f: Tensor::zeros(4 * dim, dim),
            w_g: Tensor::zeros(4 * dim, dim),
            b_f: Tensor::zeros(1, dim),
            b_g: Tensor::zeros(1, dim),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        self.w_f.ensure_shape(4 * dim, dim, "W_f")?;
        self.w_g.ensure_shape(4 * dim, dim, "W_g")?;
        self.b_f.ensure_shape(1, dim, "b_f")?;
        self.b_g.ensure_shape(1, dim, "b_g")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateNodes {
    /// Gated output `v⊙f + (1−v)⊙U`.
    pub output: NodeId,
    /// Modulated input `f`.
    pub modulated: NodeId,
    /// Gate vector `v`.
    pub gate: NodeId,
}

impl GateVars {
    pub fn apply(&self, g: &mut Graph, p: NodeId, u: NodeId) -> Result<GateNodes> {
        let diff = g.sub(p, u)?;
        let prod = g.mul(p, u)?;
        let cat = g.concat_cols(&[p, u, diff, prod])?;
        let f = g.matmul(cat, self.w_f)?;
        let f = g.add_row(f, self.b_f)?;
        let f = g.tanh(f);
        let v = g.matmul(cat, self.w_g)?;
        let v = g.add_row(v, self.b_g)?;
        let v = g.sigmoid(v);
        // U + v⊙(f − U)
        let fu = g.sub(f, u)?;
        let mix = g.mul(v, fu)?;
        let out = g.add(u, mix)?;
        Ok(GateNodes {
            output: out,
            modulated: f,
            gate: v,
        })
    }
}

/// Result of [`gate`]: gated output, modulated input and gate vector.
#[derive(Clone, Debug)]
pub struct GateOutput {
    pub g: Tensor,
    pub f: Tensor,
    pub v: Tensor,
}

pub fn gate(p_in: &Tensor, u: &Tensor, params: &GateParams) -> Result<GateOutput> {
    if p_in.shape() != u.shape() {
        return Err(Error::shape(format!(
            "gate inputs {:?} and {:?}",
            p_in.shape(),
            u.shape()
        )));
    }
    params.validate(u.cols())?;
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    let (pi, ui) = (g.constant(p_in.clone()), g.constant(u.clone()));
    let n = vars.apply(&mut g, pi, ui)?;
    Ok(GateOutput {
        g: g.value(n.output).clone(),
        f: g.value(n.modulated).clone(),
        v: g.value(n.gate).clone(),
    })
}

parameters! {
    /// One gated attention direction: pre-norm CMA on the query side, gate,
    /// then a pre-norm residual MLP.
    pub struct GatedAttentionParams / GatedAttentionVars {
        pub cma: CmaParams,
        pub ln_query: LayerNormParams,
        pub gate: GateParams,
        pub ln_mlp: LayerNormParams,
        pub mlp: MlpParams,
    }
}

impl GatedAttentionParams {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            cma: CmaParams::new(rng, dim),
            ln_query: LayerNormParams::new(dim),
            gate: GateParams::new(rng, dim),
            ln_mlp: LayerNormParams::new(dim),
            mlp: MlpParams::new(rng, dim, dim),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GatedAttentionNodes {
    /// CMA output.
    pub attended: NodeId,
    pub attention: NodeId,
    /// Gate output (or `attended + U` with the gate disabled).
    pub gated: NodeId,
    pub gate: Option<NodeId>,
    /// `MLP(gated) + gated`.
    pub output: NodeId,
}

impl GatedAttentionVars {
    /// `P = CMA(U, Z)`, `G = g(P, U)`, `out = MLP(G) + G`.
    ///
    /// With `use_gate == false` the gate is replaced by `G = P + U`.
    pub fn apply(
        &self,
        g: &mut Graph,
        u: NodeId,
        z: NodeId,
        use_gate: bool,
    ) -> Result<GatedAttentionNodes> {
        let q = self.ln_query.apply(g, u)?;
        let (attended, attention) = self.cma.apply(g, q, z)?;
        let (gated, gate) = if use_gate {
            let n = self.gate.apply(g, attended, u)?;
            (n.output, Some(n.gate))
        } else {
            (g.add(attended, u)?, None)
        };
        let h = self.ln_mlp.apply(g, gated)?;
        let m = self.mlp.apply(g, h)?;
        let output = g.add(m, gated)?;
        Ok(GatedAttentionNodes {
            attended,
            attention,
            gated,
            gate,
            output,
        })
    }
}

/// Ablation switches for the alignment stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdmaFlags {
    pub v2s: bool,
    pub s2v: bool,
    pub gate: bool,
}

impl Default for GdmaFlags {
    fn default() -> Self {
        Self {
            v2s: true,
            s2v: true,
            gate: true,
        }
    }
}

parameters! {
    pub struct GdmaParams / GdmaVars {
        pub v2s: GatedAttentionParams,
        pub s2v: GatedAttentionParams,
    }
}

impl GdmaParams {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            v2s: GatedAttentionParams::new(rng, dim),
            s2v: GatedAttentionParams::new(rng, dim),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GdmaNodes {
    /// Label features for the global branch.
    pub t_g: NodeId,
    /// Category centers.
    pub t_fn: NodeId,
    /// Refined patch features.
    pub x_fn: NodeId,
    pub v2s: Option<GatedAttentionNodes>,
    pub s2v: Option<GatedAttentionNodes>,
}

impl GdmaVars {
    /// Both directions read the same `(T_uf, X)`; a disabled direction
    /// passes its input through.
    pub fn apply(&self, g: &mut Graph, t_uf: NodeId, x: NodeId, flags: GdmaFlags) -> Result<GdmaNodes> {
        let v2s = if flags.v2s {
            Some(self.v2s.apply(g, t_uf, x, flags.gate)?)
        } else {
            None
        };
        let s2v = if flags.s2v {
            Some(self.s2v.apply(g, x, t_uf, flags.gate)?)
        } else {
            None
        };
        Ok(GdmaNodes {
            t_g: v2s.map_or(t_uf, |n| n.gated),
            t_fn: v2s.map_or(t_uf, |n| n.output),
            x_fn: s2v.map_or(x, |n| n.output),
            v2s,
            s2v,
        })
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "feature widths {} and {} differ",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Gated visual-to-semantic attention: returns `(T_g, T_fn)`.
pub fn gdma_v2s(t_uf: &Tensor, x: &Tensor, p: &GatedAttentionParams, use_gate: bool) -> Result<(Tensor, Tensor)> {
    check_pair(t_uf, x)?;
    let mut g = Graph::inference();
    let vars = p.bind(&mut g);
    let (t, xi) = (g.constant(t_uf.clone()), g.constant(x.clone()));
    let n = vars.apply(&mut g, t, xi, use_gate)?;
    Ok((g.value(n.gated).clone(), g.value(n.output).clone()))
}

/// Gated semantic-to-visual attention: returns `X_fn`.
pub fn gdma_s2v(x: &Tensor, t_uf: &Tensor, p: &GatedAttentionParams, use_gate: bool) -> Result<Tensor> {
    check_pair(t_uf, x)?;
    let mut g = Graph::inference();
    let vars = p.bind(&mut g);
    let (xi, t) = (g.constant(x.clone()), g.constant(t_uf.clone()));
    let n = vars.apply(&mut g, xi, t, use_gate)?;
    Ok(g.value(n.output).clone())
}

/// `(T_g, T_fn, X_fn)` for the given ablation flags.
pub fn gdma_apply(t_uf: &Tensor, x: &Tensor, p: &GdmaParams, flags: GdmaFlags) -> Result<(Tensor, Tensor, Tensor)> {
    check_pair(t_uf, x)?;
    let mut g = Graph::inference();
    let vars = p.bind(&mut g);
    let (t, xi) = (g.constant(t_uf.clone()), g.constant(x.clone()));
    let n = vars.apply(&mut g, t, xi, flags)?;
    Ok((
        g.value(n.t_g).clone(),
        g.value(n.t_fn).clone(),
        g.value(n.x_fn).clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::gradcheck::random_tensor;
    use crate::nn::MlpParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Direct exp/sum attention.
    fn cma_oracle(e: &Tensor, z: &Tensor, w: &Tensor) -> Tensor {
        let d = z.cols();
        let q = Tensor::from_fn(e.rows(), d, |r, c| (0..d).map(|k| e.get(r, k) * w.get(k, c)).sum());
        Tensor::from_fn(e.rows(), d, |r, c| {
            let logits: Vec<f64> = (0..z.rows())
                .map(|j| (0..d).map(|k| q.get(r, k) * z.get(j, k)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let total: f64 = logits.iter().map(|l| l.exp()).sum();
            (0..z.rows()).map(|j| logits[j].exp() / total * z.get(j, c)).sum()
        })
    }

    fn layer_norm_oracle(x: &Tensor, ln: &LayerNormParams) -> Tensor {
        let d = x.cols() as f64;
        Tensor::from_fn(x.rows(), x.cols(), |r, c| {
            let row = x.row(r);
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            (row[c] - mu) / (var + 1e-5).sqrt() * ln.scale.get(0, c) + ln.shift.get(0, c)
        })
    }

    fn gate_oracle(p: &Tensor, u: &Tensor, gp: &GateParams) -> Tensor {
        let d = u.cols();
        Tensor::from_fn(u.rows(), d, |r, c| {
            let feat = |k: usize| {
                let (a, b) = (p.get(r, k % d), u.get(r, k % d));
                match k / d {
                    0 => a,
                    1 => b,
                    2 => a - b,
                    _ => a * b,
                }
            };
            let f = ((0..4 * d).map(|k| feat(k) * gp.w_f.get(k, c)).sum::<f64>() + gp.b_f.get(0, c)).tanh();
            let v = sigmoid((0..4 * d).map(|k| feat(k) * gp.w_g.get(k, c)).sum::<f64>() + gp.b_g.get(0, c));
            v * f + (1.0 - v) * u.get(r, c)
        })
    }

    fn mlp_residual_oracle(x: &Tensor, ln: &LayerNormParams, m: &MlpParams) -> Tensor {
        let h = layer_norm_oracle(x, ln);
        let dh = m.w1.cols();
        Tensor::from_fn(x.rows(), x.cols(), |r, c| {
            let mut acc = m.b2.get(0, c);
            for k in 0..dh {
                let hid: f64 = (0..x.cols()).map(|i| h.get(r, i) * m.w1.get(i, k)).sum::<f64>() + m.b1.get(0, k);
                acc += hid.max(0.0) * m.w2.get(k, c);
            }
            acc + x.get(r, c)
        })
    }

    fn chained_oracle(u: &Tensor, z: &Tensor, p: &GatedAttentionParams) -> (Tensor, Tensor) {
        let q = layer_norm_oracle(u, &p.ln_query);
        let att = cma_oracle(&q, z, &p.cma.w_e);
        let gated = gate_oracle(&att, u, &p.gate);
        let out = mlp_residual_oracle(&gated, &p.ln_mlp, &p.mlp);
        (gated, out)
    }

    fn randomized(rng: &mut ChaCha8Rng, d: usize) -> GatedAttentionParams {
        let mut p = GatedAttentionParams::new(rng, d);
        p.ln_query.scale = random_tensor(rng, 1, d, 1.0);
        p.ln_query.shift = random_tensor(rng, 1, d, 0.3);
        p.ln_mlp.scale = random_tensor(rng, 1, d, 1.0);
        p.gate.b_f = random_tensor(rng, 1, d, 0.3);
        p.gate.b_g = random_tensor(rng, 1, d, 0.3);
        p.mlp.b1 = random_tensor(rng, 1, d, 0.3);
        p
    }

    #[test]
    fn single_key_returns_that_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CmaParams::new(&mut rng, 4);
        let z = Tensor::row_vector(vec![0.5, -1.0, 2.0, 0.25]);
        let e = random_tensor(&mut rng, 3, 4, 1.0);
        let out = cma(&e, &z, &p).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), z.row(0));
        }
    }

    #[test]
    fn zero_projection_gives_mean_of_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = CmaParams {
            w_e: Tensor::zeros(4, 4),
        };
        let z = random_tensor(&mut rng, 5, 4, 1.0);
        let out = cma(&random_tensor(&mut rng, 2, 4, 1.0), &z, &p).unwrap();
        let mean = z.column_mean();
        for r in 0..2 {
            for (a, b) in out.row(r).iter().zip(mean.row(0)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cma_matches_scalar_oracle_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = CmaParams {
                w_e: random_tensor(&mut rng, 4, 4, 1.0),
            };
            let e = random_tensor(&mut rng, 2, 4, 1.0);
            let z = random_tensor(&mut rng, 3, 4, 1.0);
            let (out, a) = cma_with_attention(&e, &z, &p).unwrap();
            assert!(close(&out, &cma_oracle(&e, &z, &p.w_e), 1e-12));
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cma_needs_keys() {
        let p = CmaParams {
            w_e: Tensor::zeros(4, 4),
        };
        assert!(cma(&Tensor::zeros(1, 4), &Tensor::zeros(0, 4), &p).is_err());
    }

    #[test]
    fn zero_gate_halves_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_tensor(&mut rng, 3, 4, 1.0);
        let u = random_tensor(&mut rng, 3, 4, 1.0);
        let out = gate(&p, &u, &GateParams::zeros(4)).unwrap();
        assert_eq!(out.f, Tensor::zeros(3, 4));
        assert!(out.v.data().iter().all(|&v| v == 0.5));
        assert_eq!(out.g, u.scaled(0.5));
    }

    #[test]
    fn saturated_gate_selects_f_or_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut gp = GateParams::new(&mut rng, 4);
            let p = random_tensor(&mut rng, 3, 4, 1.0);
            let u = random_tensor(&mut rng, 3, 4, 1.0);
            gp.b_g = Tensor::filled(1, 4, 50.0);
            let open = gate(&p, &u, &gp).unwrap();
            assert!(open.g.zip_map(&open.f, |a, b| a - b).max_abs() < 1e-10);
            gp.b_g = Tensor::filled(1, 4, -50.0);
            let closed = gate(&p, &u, &gp).unwrap();
            assert!(closed.g.zip_map(&u, |a, b| a - b).max_abs() < 1e-10);
        }
    }

    #[test]
    fn gate_output_is_a_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let mut gp = GateParams::new(&mut rng, 4);
            gp.b_g = random_tensor(&mut rng, 1, 4, 2.0);
            let p = random_tensor(&mut rng, 5, 4, 2.0);
            let u = random_tensor(&mut rng, 5, 4, 2.0);
            let out = gate(&p, &u, &gp).unwrap();
            for k in 0..out.g.len() {
                let (gv, fv, uv) = (out.g.data()[k], out.f.data()[k], u.data()[k]);
                assert!(gv >= fv.min(uv) - 1e-12 && gv <= fv.max(uv) + 1e-12);
                assert!(gv.abs() <= 1f64.max(uv.abs()) + 1e-12);
            }
            assert!(close(&out.g, &gate_oracle(&p, &u, &gp), 1e-12));
        }
    }

    #[test]
    fn gate_shape_mismatch() {
        assert!(gate(&Tensor::zeros(2, 4), &Tensor::zeros(3, 4), &GateParams::zeros(4)).is_err());
    }

    #[test]
    fn v2s_residual_transparency_and_closed_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = GatedAttentionParams::new(&mut rng, 8);
        p.mlp = MlpParams::zeros(8, 8);
        let t = random_tensor(&mut rng, 3, 8, 1.0);
        let x = random_tensor(&mut rng, 5, 8, 1.0);
        let (t_g, t_fn) = gdma_v2s(&t, &x, &p, true).unwrap();
        assert_eq!(t_g, t_fn);

        p.gate.b_g = Tensor::filled(1, 8, -50.0);
        let (_, t_fn) = gdma_v2s(&t, &x, &p, true).unwrap();
        assert!(close(&t_fn, &t, 1e-10));
        let x_fn = gdma_s2v(&x, &t, &p, true).unwrap();
        assert!(close(&x_fn, &x, 1e-10));
    }

    #[test]
    fn s2v_single_semantic_row_is_attended_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = GatedAttentionParams::new(&mut rng, 4);
        p.cma.w_e = Tensor::zeros(4, 4);
        let t = Tensor::row_vector(vec![1.0, 2.0, -1.0, 0.5]);
        let x = random_tensor(&mut rng, 6, 4, 1.0);
        let mut g = Graph::inference();
        let vars = p.bind(&mut g);
        let (xi, ti) = (g.constant(x), g.constant(t.clone()));
        let n = vars.apply(&mut g, xi, ti, true).unwrap();
        let att = g.value(n.attended);
        for r in 0..6 {
            assert_eq!(att.row(r), t.row(0));
        }
    }

    #[test]
    fn directions_match_chained_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let p = randomized(&mut rng, 4);
            let t = random_tensor(&mut rng, 2, 4, 1.0);
            let x = random_tensor(&mut rng, 3, 4, 1.0);
            let (t_g, t_fn) = gdma_v2s(&t, &x, &p, true).unwrap();
            let (og, ofn) = chained_oracle(&t, &x, &p);
            assert!(close(&t_g, &og, 1e-12));
            assert!(close(&t_fn, &ofn, 1e-12));
            // Same kernel with roles swapped.
            let x_fn = gdma_s2v(&x, &t, &p, true).unwrap();
            assert!(close(&x_fn, &chained_oracle(&x, &t, &p).1, 1e-12));
        }
    }

    #[test]
    fn gdma_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = GdmaParams::new(&mut rng, 8);
        let t = random_tensor(&mut rng, 3, 8, 1.0);
        let x = random_tensor(&mut rng, 4, 8, 1.0);
        let none = GdmaFlags {
            v2s: false,
            s2v: false,
            gate: true,
        };
        let (a, b, c) = gdma_apply(&t, &x, &p, none).unwrap();
        assert_eq!((a, b, c), (t.clone(), t.clone(), x.clone()));

        let v_only = GdmaFlags {
            s2v: false,
            ..GdmaFlags::default()
        };
        assert_eq!(gdma_apply(&t, &x, &p, v_only).unwrap().2, x);

        let (t_g, t_fn, x_fn) = gdma_apply(&t, &x, &p, GdmaFlags::default()).unwrap();
        let (eg, efn) = gdma_v2s(&t, &x, &p.v2s, true).unwrap();
        assert_eq!((t_g, t_fn), (eg, efn));
        assert_eq!(x_fn, gdma_s2v(&x, &t, &p.s2v, true).unwrap());
    }

    #[test]
    fn disabled_gate_is_plain_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = GatedAttentionParams::new(&mut rng, 4);
        p.mlp = MlpParams::zeros(4, 4);
        let t = random_tensor(&mut rng, 2, 4, 1.0);
        let x = random_tensor(&mut rng, 3, 4, 1.0);
        let (t_g, _) = gdma_v2s(&t, &x, &p, false).unwrap();
        let q = layer_norm_oracle(&t, &p.ln_query);
        let want = cma_oracle(&q, &x, &p.cma.w_e).zip_map(&t, |a, b| a + b);
        assert!(close(&t_g, &want, 1e-12));
    }
}
