//! The gradient-check suite behind `sspa grad-check`: every differentiable
//! building block, checked on randomized micro-shapes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, asymmetric_loss_node, global_logits, Aggregator, Branch, LossConfig};
use crate::autodiff::{Graph, NodeId};
use crate::config::{ModelConfig, Synthesis};
use crate::data::{FeatureBundle, LabelSemantics};
use crate::error::{Error, Result};
use crate::gated::{CmaParams, GateParams, GatedAttentionParams};
use crate::gradcheck::{check_graph_gradients, random_tensor, GradCheckReport, ListBinder};
use crate::model::{build, SspaParams};
use crate::nn::{LayerNormParams, MlpParams};
use crate::params::Bindable;
use crate::prompting::{encode_labels, DsfParams};
use crate::quaternion::{QsmParams, QuaternionLinearParams};
use crate::tensor::Tensor;

/// Relative error every op must stay below.
pub const TOLERANCE: f64 = 1e-4;
/// Instances closer than this to a kink are redrawn.
pub const MIN_KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 1000;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub op: String,
    pub instances: usize,
    /// Draws rejected for lying within [`MIN_KINK_MARGIN`] of a kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{:<4} {:<22} n={:<3} redrawn={:<3} max_rel_err={:.3e}\n",
                if e.passed { "ok" } else { "FAIL" },
                e.op,
                e.instances,
                e.redrawn,
                e.max_rel_error
            ));
        }
        s
    }
}

/// Micro-shape of one instance: `d ∈ {4, 8, 12, 16}`, `C ≤ 4`, `M ≤ 6`.
#[derive(Clone, Copy, Debug)]
struct Micro {
    d: usize,
    c: usize,
    m: usize,
}

fn micro(rng: &mut ChaCha8Rng) -> Micro {
    Micro {
        d: 4 * rng.random_range(1..=4),
        c: rng.random_range(1..=4),
        m: rng.random_range(1..=6),
    }
}

/// Adds Gaussian noise to every trainable tensor so that zero-initialized
/// biases and unit layer-norm scales are exercised off their init values.
fn perturb<P: Bindable>(p: &mut P, rng: &mut ChaCha8Rng, sigma: f64) {
    p.visit_mut(&mut |t| {
        let noise = random_tensor(rng, t.rows(), t.cols(), sigma);
        t.add_assign(&noise);
    });
}

fn owned<P: Bindable>(p: &P) -> Vec<Tensor> {
    p.tensors().into_iter().cloned().collect()
}

/// Checks a parameter struct together with extra data inputs. `f` gets the
/// bound parameters and the data nodes.
fn check_params<P, F>(params: &P, data: &[Tensor], f: F) -> Result<GradCheckReport>
where
    P: Bindable,
    F: Fn(&mut Graph, P::Vars, &[NodeId]) -> Result<NodeId>,
{
    let mut inputs = owned(params);
    let k = inputs.len();
    inputs.extend(data.iter().cloned());
    check_graph_gradients(&inputs, |g, ids| {
        let vars = params.bind(&mut ListBinder::new(g, &ids[..k]));
        f(g, vars, &ids[k..])
    })
}

type Case = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("softmax_rows", |r| {
            let s = micro(r);
            let t = r.random_range(0.3..3.0);
            check_graph_gradients(&[random_tensor(r, s.c, s.m, 1.0)], |g, x| g.softmax_rows(x[0], t))
        }),
        ("layer_norm", |r| {
            let s = micro(r);
            let mut ln = LayerNormParams::new(s.d);
            perturb(&mut ln, r, 0.3);
            check_params(&ln, &[random_tensor(r, s.c, s.d, 1.0)], |g, v, x| v.apply(g, x[0]))
        }),
        ("mlp", |r| {
            let s = micro(r);
            let mut p = MlpParams::new(r, s.d, s.d);
            perturb(&mut p, r, 0.1);
            check_params(&p, &[random_tensor(r, s.c, s.d, 1.0)], |g, v, x| v.apply(g, x[0]))
        }),
        ("cma", |r| {
            let s = micro(r);
            let p = CmaParams::new(r, s.d);
            let data = [random_tensor(r, s.c, s.d, 1.0), random_tensor(r, s.m, s.d, 1.0)];
            check_params(&p, &data, |g, v, x| v.apply(g, x[0], x[1]).map(|(o, _)| o))
        }),
        ("gate", |r| {
            let s = micro(r);
            let mut p = GateParams::new(r, s.d);
            perturb(&mut p, r, 0.1);
            let data = [random_tensor(r, s.c, s.d, 1.0), random_tensor(r, s.c, s.d, 1.0)];
            check_params(&p, &data, |g, v, x| v.apply(g, x[0], x[1]).map(|n| n.output))
        }),
        ("quaternion_linear", |r| {
            let s = micro(r);
            let mut p = QuaternionLinearParams::new(r, s.d)?;
            perturb(&mut p, r, 0.1);
            check_params(&p, &[random_tensor(r, s.c, s.d, 1.0)], |g, v, x| v.apply(g, x[0]))
        }),
        ("qsm", |r| {
            let s = micro(r);
            let mut p = QsmParams::new(r, s.d)?;
            perturb(&mut p, r, 0.1);
            let data = [
                random_tensor(r, s.c, s.d, 1.0),
                random_tensor(r, s.c, s.d, 1.0),
                random_tensor(r, 1, s.d, 1.0),
            ];
            check_params(&p, &data, |g, v, x| v.forward(g, Some(x[0]), Some(x[1]), x[2]))
        }),
        ("text_encoder", |r| {
            let s = micro(r);
            let l = r.random_range(1..=4);
            let dt = 4 * r.random_range(1..=4);
            let data = [
                random_tensor(r, l, dt, 0.5),
                random_tensor(r, s.c, dt, 1.0),
                random_tensor(r, dt, s.d, 0.5),
            ];
            check_graph_gradients(&data, |g, x| encode_labels(g, Some(x[0]), x[1], x[2]))
        }),
        ("dsf", |r| {
            let s = micro(r);
            let mut p = DsfParams::new(r, s.d);
            perturb(&mut p, r, 0.1);
            let data = [random_tensor(r, s.c, s.d, 1.0), random_tensor(r, s.m, s.d, 1.0)];
            check_params(&p, &data, |g, v, x| v.apply(g, x[0], x[1]))
        }),
        ("gdma_v2s", |r| {
            let s = micro(r);
            let mut p = GatedAttentionParams::new(r, s.d);
            perturb(&mut p, r, 0.1);
            let data = [random_tensor(r, s.c, s.d, 1.0), random_tensor(r, s.m, s.d, 1.0)];
            check_params(&p, &data, |g, v, x| v.apply(g, x[0], x[1], true).map(|n| n.output))
        }),
        ("gdma_s2v", |r| {
            let s = micro(r);
            let mut p = GatedAttentionParams::new(r, s.d);
            perturb(&mut p, r, 0.1);
            let data = [random_tensor(r, s.m, s.d, 1.0), random_tensor(r, s.c, s.d, 1.0)];
            check_params(&p, &data, |g, v, x| v.apply(g, x[0], x[1], true).map(|n| n.output))
        }),
        ("soft_aggregate", |r| {
            let s = micro(r);
            let data = [random_tensor(r, s.m, s.c, 2.0), random_tensor(r, 1, 1, 0.5)];
            check_graph_gradients(&data, |g, x| aggregate(g, x[0], Aggregator::Soft, Some(x[1])).map(|a| a.logits))
        }),
        ("hard_aggregate", |r| {
            let s = micro(r);
            let data = [random_tensor(r, s.m, s.c, 2.0)];
            check_graph_gradients(&data, |g, x| aggregate(g, x[0], Aggregator::Hard, None).map(|a| a.logits))
        }),
        ("average_aggregate", |r| {
            let s = micro(r);
            let data = [random_tensor(r, s.m, s.c, 2.0)];
            check_graph_gradients(&data, |g, x| aggregate(g, x[0], Aggregator::Average, None).map(|a| a.logits))
        }),
        ("global_branch", |r| {
            let s = micro(r);
            let data = [random_tensor(r, 1, s.d, 1.0), random_tensor(r, s.c, s.d, 1.0)];
            check_graph_gradients(&data, |g, x| {
                let l = global_logits(g, x[0], x[1])?;
                Ok(g.sigmoid(l))
            })
        }),
        ("asymmetric_loss", |r| {
            let s = micro(r);
            let y: Vec<f64> = (0..s.c).map(|_| r.random_range(0..2) as f64).collect();
            let cfg = LossConfig {
                gamma_plus: r.random_range(0.0..1.0),
                gamma_minus: r.random_range(1.0..4.0),
                lambda: 1.0,
            };
            check_graph_gradients(&[random_tensor(r, 1, s.c, 2.0)], move |g, x| {
                let p = g.sigmoid(x[0]);
                asymmetric_loss_node(g, p, &y, &cfg)
            })
        }),
        ("full_head_loss", full_head),
    ]
}

/// Total loss of the whole head on a micro-instance, with respect to every
/// trainable tensor, the aggregator temperature included.
fn full_head(r: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (c, m, d) = (3, 4, 8);
    let branch = [Branch::Both, Branch::Regional, Branch::Global][r.random_range(0..3)];
    let cfg = ModelConfig {
        categories: c,
        patches: m,
        dim: d,
        prompt_tokens: 2,
        synthesis: Synthesis::Qsm,
        aggregator: Aggregator::Soft,
        branch,
        loss: LossConfig {
            gamma_plus: 0.0,
            gamma_minus: 2.0,
            lambda: r.random_range(0.5..1.5),
        },
        seed: r.random(),
        ..ModelConfig::default()
    };
    let mut params = SspaParams::new(&cfg)?;
    perturb(&mut params, r, 0.1);
    let sample = FeatureBundle {
        x0: random_tensor(r, 1, d, 1.0),
        x: random_tensor(r, m, d, 1.0),
        y: (0..c).map(|j| (j % 2) as f64).collect(),
    };
    let sem = LabelSemantics {
        t_ka: random_tensor(r, c, d, 1.0),
        word_embeddings: random_tensor(r, c, d, 1.0),
    };
    check_params(&params, &[], |g, v, _| {
        let n = build(g, &cfg, &v, &sample, &sem, Some(&sample.y))?;
        n.loss.ok_or_else(|| Error::DegenerateConfig("no loss branch".into()))
    })
}

/// Names of the ops in the suite, in run order.
pub fn op_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs `instances` random checks per op. `only` restricts the run to one op.
pub fn run_suite(instances: usize, seed: u64, only: Option<&str>) -> Result<SuiteReport> {
    if instances == 0 {
        return Err(Error::invalid("grad-check needs at least one instance per op"));
    }
    let selected: Vec<_> = cases().into_iter().filter(|(n, _)| only.is_none_or(|o| o == *n)).collect();
    if selected.is_empty() {
        return Err(Error::invalid(format!("unknown op {:?}", only.unwrap_or_default())));
    }
    let mut entries = Vec::new();
    for (k, (op, case)) in selected.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut worst: f64 = 0.0;
        let (mut done, mut redrawn) = (0, 0);
        while done < instances {
            let rep = case(&mut rng)?;
            if rep.kink_margin < MIN_KINK_MARGIN {
                redrawn += 1;
                if redrawn > MAX_REDRAWS {
                    return Err(Error::invalid(format!("{op}: no instance away from kinks")));
                }
                continue;
            }
            worst = worst.max(rep.max_rel_error);
            done += 1;
        }
        entries.push(SuiteEntry {
            op: op.to_string(),
            instances,
            redrawn,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(SuiteReport {
        tolerance: TOLERANCE,
        entries,
    })
}
