use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sspa_core::aggregation::Prediction;
use sspa_core::autodiff::softmax_rows;
use sspa_core::data::{read_bundle, write_bundle, Dataset, FeatureBundle};
use sspa_core::gated::{cma_with_attention, gate, CmaParams, GateParams};
use sspa_core::gradcheck::random_tensor;
use sspa_core::prompting::{assemble_description, parse_description, render_llm_prompt, LlmPromptTemplate};
use sspa_core::Tensor;

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), cols in 1usize..12, scale in 0.1..30.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = softmax_rows(&random_tensor(&mut rng, 8, cols, scale), 1.0).unwrap();
        for r in 0..8 {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), n_e in 1usize..6, n_z in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let mut p = CmaParams::new(&mut rng, d);
        p.w_e = random_tensor(&mut rng, d, d, 1.0);
        let e = random_tensor(&mut rng, n_e, d, 2.0);
        let z = random_tensor(&mut rng, n_z, d, 2.0);
        let (_, attn) = cma_with_attention(&e, &z, &p).unwrap();
        prop_assert_eq!(attn.shape(), (n_e, n_z));
        for r in 0..n_e {
            prop_assert!((attn.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gate_output_is_bounded(seed in any::<u64>(), scale in 0.1..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let mut gp = GateParams::new(&mut rng, d);
        gp.b_g = random_tensor(&mut rng, 1, d, scale);
        gp.b_f = random_tensor(&mut rng, 1, d, scale);
        let p = random_tensor(&mut rng, 3, d, scale);
        let u = random_tensor(&mut rng, 3, d, scale);
        let o = gate(&p, &u, &gp).unwrap();
        for i in 0..o.g.len() {
            let (g, f, uu) = (o.g.data()[i], o.f.data()[i], u.data()[i]);
            prop_assert!(g >= f.min(uu) - 1e-15 && g <= f.max(uu) + 1e-15);
            prop_assert!(g.abs() <= 1f64.max(uu.abs()) + 1e-15);
        }
    }

    #[test]
    fn fusion_is_the_branch_mean(a in prop::collection::vec(0.0..1.0f64, 1..10), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = random_tensor(&mut rng, 1, a.len(), 1.0).data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let p = Prediction::fuse(Some(a.clone()), Some(b.clone())).unwrap();
        for j in 0..a.len() {
            prop_assert_eq!(p.p[j], (a[j] + b[j]) / 2.0);
        }
    }

    #[test]
    fn prompts_name_the_category_once(name in "[a-z]{3,10}( [a-z]{3,10})?") {
        let category = format!("qx{name}");
        let t = LlmPromptTemplate::natural_images();
        let a = render_llm_prompt(&t, &category).unwrap();
        prop_assert_eq!(&a, &render_llm_prompt(&t, &category).unwrap());
        prop_assert_eq!(a.matches(category.as_str()).count(), 1);
    }

    #[test]
    fn descriptions_parse_back(text in "[A-Za-z][A-Za-z ,]{0,40}", category in "[a-z]{1,12}") {
        let d = assemble_description(&text, &category);
        prop_assert_eq!(&d, &assemble_description(&text, &category));
        let (llm, cat) = parse_description(&d.full_text).unwrap();
        prop_assert_eq!(llm, d.llm_text);
        prop_assert_eq!(cat, category);
    }

    #[test]
    fn bundles_round_trip(seed in any::<u64>(), c in 1usize..5, m in 1usize..5, d in 1usize..6, n in 0usize..5, with_t in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // f32-representable values so the round trip is exact.
        let mut draw = |r, k| random_tensor(&mut rng, r, k, 1.0).map(|v| f64::from(v as f32));
        let samples = (0..n)
            .map(|i| FeatureBundle { x0: draw(1, d), x: draw(m, d), y: (0..c).map(|j| ((i + j) % 2) as f64).collect() })
            .collect();
        let t_ka = with_t.then(|| draw(c, d));
        let data = Dataset { categories: c, patches: m, dim: d, samples, t_ka };
        let mut bytes = Vec::new();
        write_bundle(&mut bytes, &data).unwrap();
        prop_assert_eq!(bytes.len(), 24 + n * 4 * (d + m * d + c) + if with_t { 1 + 4 * c * d } else { 0 });
        prop_assert_eq!(read_bundle(&mut bytes.as_slice()).unwrap(), data);
    }
}

#[test]
fn zero_gate_is_half_way() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = random_tensor(&mut rng, 2, 4, 1.0);
    let o = gate(&random_tensor(&mut rng, 2, 4, 1.0), &u, &GateParams::zeros(4)).unwrap();
    assert_eq!(o.g, u.map(|v| v / 2.0));
    assert_eq!(o.v, Tensor::filled(2, 4, 0.5));
}
