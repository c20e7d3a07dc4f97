//! The full recognition head: prompting, synthesis, gated alignment,
//! regional aggregation and the global branch, for one image at a time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{aggregate, asymmetric_loss_node, global_logits, Prediction};
use crate::autodiff::{Graph, NodeId};
use crate::config::{ModelConfig, Synthesis};
use crate::data::{FeatureBundle, LabelSemantics};
use crate::error::{Error, Result};
use crate::gated::GdmaParams;
use crate::nn::{init_gaussian, init_weight, MlpParams};
use crate::parameters;
use crate::params::{Bindable, Frozen};
use crate::prompting::{encode_labels, DsfParams, TextEncoderParams, PROMPT_TOKEN_SIGMA};
use crate::quaternion::{combine_and_project, QsmParams};
use crate::tensor::Tensor;

parameters! {
    /// Every tensor of the head. Parts a configuration does not use are
    /// `None`.
    pub struct SspaParams / SspaVars {
        /// Learnable prompt tokens, `L × d_tok`.
        pub prompt_tokens: Option<Tensor>,
        pub dsf: Option<DsfParams>,
        /// `W_Q` for the summation, MLP and template-baseline paths.
        pub proj: Option<Tensor>,
        pub qsm: Option<QsmParams>,
        /// Real MLP synthesis with hidden width `d/2`.
        pub synth_mlp: Option<MlpParams>,
        /// `3d × d` map of the concatenation variant.
        pub concat: Option<Tensor>,
        pub gdma: GdmaParams,
        /// `log τ` of the soft aggregator, `1×1`.
        pub log_tau: Option<Tensor>,
        pub text: Frozen<TextEncoderParams>,
    }
}

impl SspaParams {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let dt = cfg.token_dim();
        // Stand-in for a pretrained text encoder aligned with the visual
        // space: identity when the widths agree.
        let text = if dt == d {
            TextEncoderParams { proj: Tensor::identity(d) }
        } else {
            TextEncoderParams::new(&mut rng, dt, d)
        };
        let ssp = cfg.ssp;
        let prompt_tokens = cfg
            .uses_prompts()
            .then(|| init_gaussian(&mut rng, cfg.prompt_tokens, dt, PROMPT_TOKEN_SIGMA));
        let dsf = cfg.uses_dsf().then(|| DsfParams::new(&mut rng, d));
        let proj = (!ssp || matches!(cfg.synthesis, Synthesis::Sum | Synthesis::Mlp))
            .then(|| init_weight(&mut rng, d, d));
        let qsm = if ssp && cfg.synthesis == Synthesis::Qsm {
            Some(QsmParams::new(&mut rng, d)?)
        } else {
            None
        };
        let synth_mlp = (ssp && cfg.synthesis == Synthesis::Mlp).then(|| MlpParams::new(&mut rng, d, d / 2));
        let concat = (ssp && cfg.synthesis == Synthesis::Concat).then(|| init_weight(&mut rng, 3 * d, d));
        let gdma = GdmaParams::new(&mut rng, d);
        let log_tau = (cfg.branch.uses_regional() && cfg.aggregator == crate::aggregation::Aggregator::Soft)
            .then(|| Tensor::zeros(1, 1));
        Ok(Self {
            prompt_tokens,
            dsf,
            proj,
            qsm,
            synth_mlp,
            concat,
            gdma,
            log_tau,
            text: Frozen(text),
        })
    }

    /// Current soft-aggregator temperature.
    pub fn tau(&self) -> Option<f64> {
        self.log_tau.as_ref().map(|t| t.get(0, 0).exp())
    }
}

impl SspaParams {
    /// Loads parameters saved as JSON and checks that their layout matches
    /// what `cfg` builds.
    pub fn load(path: &std::path::Path, cfg: &ModelConfig) -> Result<Self> {
        let p: SspaParams = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let want = SspaParams::new(cfg)?;
        let shapes = |p: &SspaParams| p.tensors().iter().map(|t| t.shape()).collect::<Vec<_>>();
        if shapes(&p) != shapes(&want) || p.text.0.proj.shape() != want.text.0.proj.shape() {
            return Err(Error::Format(format!(
                "{} does not hold parameters for this model config",
                path.display()
            )));
        }
        Ok(p)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

fn missing(what: &str) -> Error {
    Error::invalid(format!("parameters lack {what} required by the config"))
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub t_uf: NodeId,
    pub p_g: Option<NodeId>,
    pub p_r: Option<NodeId>,
    /// `M×C` regional logits.
    pub regional: Option<NodeId>,
    pub gamma: Option<NodeId>,
    pub gate_v2s: Option<NodeId>,
    pub gate_s2v: Option<NodeId>,
    pub loss: Option<NodeId>,
}

/// Builds one image's forward pass, and its loss when `labels` is given.
pub fn build(
    g: &mut Graph,
    cfg: &ModelConfig,
    vars: &SspaVars,
    sample: &FeatureBundle,
    sem: &LabelSemantics,
    labels: Option<&[f64]>,
) -> Result<ForwardNodes> {
    let (c, d) = (cfg.categories, cfg.dim);
    sample.x0.ensure_shape(1, d, "x0")?;
    if sample.x.cols() != d || sample.x.rows() == 0 {
        return Err(Error::shape(format!("patch features {:?} for width {d}", sample.x.shape())));
    }
    sem.t_ka.ensure_shape(c, d, "T_ka")?;
    sem.word_embeddings.ensure_shape(c, cfg.token_dim(), "word embeddings")?;

    let x0 = g.constant(sample.x0.clone());
    let x = g.constant(sample.x.clone());
    let words = g.constant(sem.word_embeddings.clone());
    let text_proj = vars.text.proj;

    let t_uf = if !cfg.ssp {
        let tpl = encode_labels(g, None, words, text_proj)?;
        g.matmul(tpl, vars.proj.ok_or_else(|| missing("W_Q"))?)?
    } else {
        let t_ca = if cfg.cap {
            let t_ln = encode_labels(g, vars.prompt_tokens, words, text_proj)?;
            match (cfg.dsf, vars.dsf) {
                (true, Some(dsf)) => Some(dsf.apply(g, t_ln, x)?),
                (true, None) => return Err(missing("DSF")),
                (false, _) => Some(t_ln),
            }
        } else {
            None
        };
        let t_k = if !cfg.kap {
            None
        } else if cfg.kap_llm {
            Some(g.constant(sem.t_ka.clone()))
        } else {
            Some(encode_labels(g, None, words, text_proj)?)
        };
        match cfg.synthesis {
            Synthesis::Qsm => vars.qsm.ok_or_else(|| missing("QSM"))?.forward(g, t_ca, t_k, x0)?,
            Synthesis::Sum => combine_and_project(g, t_ca, t_k, x0, vars.proj.ok_or_else(|| missing("W_Q"))?)?,
            Synthesis::Mlp => {
                let f = combine_and_project(g, t_ca, t_k, x0, vars.proj.ok_or_else(|| missing("W_Q"))?)?;
                let h = vars.synth_mlp.ok_or_else(|| missing("synthesis MLP"))?.apply(g, f)?;
                g.relu(h)
            }
            Synthesis::Concat => {
                if t_ca.is_none() && t_k.is_none() {
                    return Err(Error::DegenerateConfig("synthesis needs at least one label semantics term".into()));
                }
                let zeros = || Tensor::zeros(c, d);
                let a = match t_ca {
                    Some(n) => n,
                    None => g.constant(zeros()),
                };
                let b = match t_k {
                    Some(n) => n,
                    None => g.constant(zeros()),
                };
                let xb = g.broadcast_rows(x0, c)?;
                let cat = g.concat_cols(&[a, b, xb])?;
                g.matmul(cat, vars.concat.ok_or_else(|| missing("concat map"))?)?
            }
        }
    };

    let al = vars.gdma.apply(g, t_uf, x, cfg.gdma)?;

    let p_g = if cfg.branch.uses_global() {
        let l = global_logits(g, x0, al.t_g)?;
        Some(g.sigmoid(l))
    } else {
        None
    };
    let (p_r, regional, gamma) = if cfg.branch.uses_regional() {
        let r = g.matmul_t(al.x_fn, al.t_fn)?;
        let agg = aggregate(g, r, cfg.aggregator, vars.log_tau)?;
        (Some(g.sigmoid(agg.logits)), Some(r), agg.gamma)
    } else {
        (None, None, None)
    };

    let loss = match labels {
        None => None,
        Some(y) => {
            let mut total = None;
            if let Some(p) = p_g {
                total = Some(asymmetric_loss_node(g, p, y, &cfg.loss)?);
            }
            if let Some(p) = p_r {
                let lr = asymmetric_loss_node(g, p, y, &cfg.loss)?;
                let lr = g.scale(lr, cfg.loss.lambda);
                total = Some(match total {
                    Some(t) => g.add(t, lr)?,
                    None => lr,
                });
            }
            total
        }
    };

    Ok(ForwardNodes {
        t_uf,
        p_g,
        p_r,
        regional,
        gamma,
        gate_v2s: al.v2s.and_then(|n| n.gate),
        gate_s2v: al.s2v.and_then(|n| n.gate),
        loss,
    })
}

/// Prediction plus the intermediates used by inspection dumps.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub prediction: Prediction,
    /// `M×C` patch importances (soft aggregator only).
    pub gamma: Option<Tensor>,
    /// `C×d` gate vectors of the visual-to-semantic direction.
    pub gate_v2s: Option<Tensor>,
    /// `M×d` gate vectors of the semantic-to-visual direction.
    pub gate_s2v: Option<Tensor>,
}

fn row_values(g: &Graph, id: Option<NodeId>) -> Option<Vec<f64>> {
    id.map(|n| g.value(n).data().to_vec())
}

/// Evaluates the head on one image with frozen parameters.
pub fn forward(
    cfg: &ModelConfig,
    params: &SspaParams,
    sample: &FeatureBundle,
    sem: &LabelSemantics,
) -> Result<ForwardOutput> {
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    let n = build(&mut g, cfg, &vars, sample, sem, None)?;
    let prediction = Prediction::fuse(row_values(&g, n.p_g), row_values(&g, n.p_r))?;
    if prediction.p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("non-finite prediction".into()));
    }
    Ok(ForwardOutput {
        prediction,
        gamma: n.gamma.map(|id| g.value(id).clone()),
        gate_v2s: n.gate_v2s.map(|id| g.value(id).clone()),
        gate_s2v: n.gate_s2v.map(|id| g.value(id).clone()),
    })
}

/// Loss and parameter gradients (in [`Bindable::visit`] order) for one image.
pub fn loss_and_grad(
    cfg: &ModelConfig,
    params: &SspaParams,
    sample: &FeatureBundle,
    sem: &LabelSemantics,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let n = build(&mut g, cfg, &vars, sample, sem, Some(&sample.y))?;
    let loss = n.loss.ok_or_else(|| Error::DegenerateConfig("no loss branch".into()))?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("non-finite loss {value}")));
    }
    if !g.requires_grad(loss) {
        return Err(Error::DegenerateConfig("loss does not depend on any parameter".into()));
    }
    g.backward(loss)?;
    Ok((value, g.param_grads()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Branch;
    use crate::data::{gen_synthetic, SyntheticSpec};

    fn micro() -> (ModelConfig, crate::data::SyntheticData) {
        let spec = SyntheticSpec {
            categories: 3,
            patches: 4,
            dim: 8,
            n_train: 4,
            n_test: 1,
            label_density: 0.4,
            separation: 2.0,
            ..SyntheticSpec::default()
        };
        let cfg = ModelConfig {
            categories: 3,
            patches: 4,
            dim: 8,
            ..ModelConfig::default()
        };
        (cfg, gen_synthetic(&spec).unwrap())
    }

    #[test]
    fn global_only_prediction() {
        let (mut cfg, data) = micro();
        cfg.branch = Branch::Global;
        let p = SspaParams::new(&cfg).unwrap();
        assert!(p.log_tau.is_none());
        let out = forward(&cfg, &p, &data.train.samples[0], &data.semantics).unwrap();
        assert!(out.prediction.p_r.is_none());
        assert_eq!(Some(out.prediction.p.clone()), out.prediction.p_g);
    }

    #[test]
    fn zero_parameters_predict_one_half() {
        let (cfg, data) = micro();
        let mut p = SspaParams::new(&cfg).unwrap();
        p.visit_mut(&mut |t| *t = Tensor::zeros(t.rows(), t.cols()));
        let out = forward(&cfg, &p, &data.train.samples[0], &data.semantics).unwrap();
        assert!(out.prediction.p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn every_variant_runs_and_fuses() {
        let (base, data) = micro();
        for v in ["full", "baseline", "+SSP", "sum", "concat", "MLP", "V-to-S", "S-to-V", "w/o Gate",
                  "hard", "average", "R", "KAP", "CAP", "w/o LLM", "w/o DSF", "noise"] {
            let cfg = crate::config::apply_variant(&base, v).unwrap();
            let p = SspaParams::new(&cfg).unwrap();
            let out = forward(&cfg, &p, &data.train.samples[1], &data.semantics).unwrap();
            if let (Some(a), Some(b)) = (&out.prediction.p_g, &out.prediction.p_r) {
                for j in 0..3 {
                    assert_eq!(out.prediction.p[j], (a[j] + b[j]) / 2.0);
                }
            }
            let (loss, grads) = loss_and_grad(&cfg, &p, &data.train.samples[1], &data.semantics).unwrap();
            assert!(loss.is_finite() && loss > 0.0, "{v}");
            assert_eq!(grads.len(), p.tensors().len());
        }
    }

    #[test]
    fn mlp_synthesis_hidden_width() {
        let (base, _) = micro();
        let cfg = ModelConfig { synthesis: Synthesis::Mlp, ..base };
        let p = SspaParams::new(&cfg).unwrap();
        assert_eq!(p.synth_mlp.unwrap().w1.shape(), (8, 4));
    }
}
