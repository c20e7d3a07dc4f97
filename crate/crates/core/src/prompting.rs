//! Label semantics before synthesis.
//!
//! Knowledge-aware prompting builds LLM prompts and the final per-category
//! description strings; the descriptions are produced offline and stored in a
//! JSON cache. Context-aware prompting prepends learnable tokens to each
//! category word embedding, encodes them with a small frozen text encoder,
//! and filters the result against the image's patch features (DSF).

use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::gated::CmaParams;
use crate::nn::{init_gaussian, init_weight, LayerNormParams, MlpParams};
use crate::parameters;
use crate::params::Bindable;
use crate::tensor::Tensor;

pub use crate::data::{load_label_semantics, Manifest};

pub const DEFAULT_PROMPT_TOKENS: usize = 4;
pub const PROMPT_TOKEN_SIGMA: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionExample {
    pub category: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmPromptTemplate {
    pub domain_description: String,
    pub in_context_examples: Vec<DescriptionExample>,
    pub answer_constraints: String,
    /// Placeholder replaced by the category name in the query line.
    pub category_slot: String,
    pub query: String,
}

impl LlmPromptTemplate {
    /// Template for everyday natural images.
    pub fn natural_images() -> Self {
        Self {
            domain_description: "You are an expert in describing objects that appear in everyday \
                                 photographs. For a given category, describe its typical shape, size \
                                 and colors, and the objects or scenes it usually appears with."
                .into(),
            in_context_examples: vec![
                DescriptionExample {
                    category: "airplane".into(),
                    description: "Airplane is a large aircraft with wings, engines, and jet or \
                                  propeller engines, often seen in the sky or airports"
                        .into(),
                },
                DescriptionExample {
                    category: "fork".into(),
                    description: "Fork is a small metal or plastic utensil with a handle and several \
                                  thin prongs, often seen on a dining table next to a plate or knife"
                        .into(),
                },
            ],
            answer_constraints: "Answer with a single sentence that starts with the category name. \
                                 Do not add a final period or any other text."
                .into(),
            category_slot: "{category}".into(),
            query: "Category: {category}\nDescription:".into(),
        }
    }
}

/// Renders the prompt for one category: domain description, in-context
/// examples, answer constraints, then the query.
pub fn render_llm_prompt(t: &LlmPromptTemplate, category: &str) -> Result<String> {
    let category = category.trim();
    if category.is_empty() {
        return Err(Error::invalid("category name is empty"));
    }
    if t.category_slot.is_empty() || !t.query.contains(&t.category_slot) {
        return Err(Error::invalid("query has no category slot"));
    }
    let mut out = String::new();
    out.push_str(t.domain_description.trim());
    out.push_str("\n\n");
    if !t.in_context_examples.is_empty() {
        out.push_str("Examples:\n");
        for ex in &t.in_context_examples {
            out.push_str(&format!("Category: {}\nDescription: {}\n", ex.category, ex.description));
        }
        out.push('\n');
    }
    out.push_str(t.answer_constraints.trim());
    out.push_str("\n\n");
    out.push_str(&t.query.replacen(&t.category_slot, category, 1));
    Ok(out)
}

/// A category description `D_j = "{llm_text}. A photo of a {category}."`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryDescription {
    #[serde(rename = "category")]
    pub category_name: String,
    pub llm_text: String,
    pub full_text: String,
}

const PHOTO_SENTENCE: &str = ". A photo of a ";

/// Strips surrounding whitespace and trailing periods from an LLM answer.
pub fn normalize_llm_text(text: &str) -> String {
    text.trim().trim_end_matches('.').trim_end().to_string()
}

pub fn assemble_description(llm_text: &str, category: &str) -> CategoryDescription {
    let llm_text = normalize_llm_text(llm_text);
    if llm_text.is_empty() {
        warn!("empty LLM description for category {category:?}");
    }
    CategoryDescription {
        full_text: format!("{llm_text}{PHOTO_SENTENCE}{category}."),
        category_name: category.to_string(),
        llm_text,
    }
}

/// Inverse of [`assemble_description`]: recovers `(llm_text, category)`.
pub fn parse_description(full_text: &str) -> Result<(String, String)> {
    let body = full_text
        .strip_suffix('.')
        .ok_or_else(|| Error::Format(format!("description does not end with a period: {full_text:?}")))?;
    let at = body
        .rfind(PHOTO_SENTENCE)
        .ok_or_else(|| Error::Format(format!("description lacks the photo sentence: {full_text:?}")))?;
    Ok((
        body[..at].to_string(),
        body[at + PHOTO_SENTENCE.len()..].to_string(),
    ))
}

impl CategoryDescription {
    pub fn validate(&self) -> Result<()> {
        let expected = assemble_description(&self.llm_text, &self.category_name);
        if expected.full_text != self.full_text {
            return Err(Error::Format(format!(
                "full_text for {:?} does not match its llm_text",
                self.category_name
            )));
        }
        Ok(())
    }
}

pub fn save_description_cache(path: &Path, items: &[CategoryDescription]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(items)?)?;
    Ok(())
}

pub fn load_description_cache(path: &Path) -> Result<Vec<CategoryDescription>> {
    let items: Vec<CategoryDescription> = serde_json::from_str(&fs::read_to_string(path)?)?;
    for it in &items {
        it.validate()?;
    }
    Ok(items)
}

/// Learnable prompt tokens shared by all categories plus the fixed category
/// word embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    /// `L × d_tok`; `L` may be zero.
    pub tokens: Tensor,
    /// `C × d_tok`.
    pub word_embeddings: Tensor,
}

impl PromptBank {
    pub fn new<R: Rng>(rng: &mut R, len: usize, word_embeddings: Tensor) -> Self {
        let tokens = init_gaussian(rng, len, word_embeddings.cols(), PROMPT_TOKEN_SIGMA);
        Self {
            tokens,
            word_embeddings,
        }
    }
}

parameters! {
    /// The frozen projection of the toy text encoder, `d_tok × d`.
    pub struct TextEncoderParams / TextEncoderVars {
        pub proj: Tensor,
    }
}

impl TextEncoderParams {
    pub fn new<R: Rng>(rng: &mut R, token_dim: usize, dim: usize) -> Self {
        Self {
            proj: init_weight(rng, token_dim, dim),
        }
    }
}

/// Encodes every category: row `j` is `LN(mean(p¹..pᴸ, c_j)) · proj`.
///
/// `tokens` is `None` for the plain template path (no prompt tokens).
pub fn encode_labels(
    g: &mut Graph,
    tokens: Option<NodeId>,
    word_embeddings: NodeId,
    proj: NodeId,
) -> Result<NodeId> {
    let pooled = match tokens {
        Some(p) if g.shape(p).0 > 0 => {
            let len = g.shape(p).0 as f64;
            let psum = g.col_mean(p);
            let psum = g.scale(psum, len);
            let s = g.add_row(word_embeddings, psum)?;
            g.scale(s, 1.0 / (len + 1.0))
        }
        _ => word_embeddings,
    };
    let normed = g.layer_norm(pooled, None, None)?;
    g.matmul(normed, proj)
}

/// Text feature of one category under the toy encoder, as a `1×d` row.
pub fn toy_text_encode(bank: &PromptBank, category_index: usize, enc: &TextEncoderParams) -> Result<Tensor> {
    let c = bank.word_embeddings.rows();
    if category_index >= c {
        return Err(Error::invalid(format!(
            "category index {category_index} out of range for {c} categories"
        )));
    }
    let dt = bank.word_embeddings.cols();
    if bank.tokens.cols() != dt || enc.proj.rows() != dt {
        return Err(Error::shape("prompt token, word embedding and projection widths differ"));
    }
    let mut g = Graph::inference();
    let p = g.constant(bank.tokens.clone());
    let w = g.constant(bank.word_embeddings.gather_rows(&[category_index]));
    let proj = g.constant(enc.proj.clone());
    let out = encode_labels(&mut g, Some(p), w, proj)?;
    Ok(g.value(out).clone())
}

parameters! {
    /// Dynamic semantic filtering: cross-modal attention of the label
    /// features over the patches, then a residual MLP.
    pub struct DsfParams / DsfVars {
        pub cma: CmaParams,
        pub ln_query: LayerNormParams,
        pub ln_mlp: LayerNormParams,
        pub mlp: MlpParams,
    }
}

impl DsfParams {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            cma: CmaParams::new(rng, dim),
            ln_query: LayerNormParams::new(dim),
            ln_mlp: LayerNormParams::new(dim),
            mlp: MlpParams::new(rng, dim, dim),
        }
    }
}

impl DsfVars {
    /// `T̂ = CMA(T_ln, X) + T_ln`, `T_ca = MLP(T̂) + T̂`.
    pub fn apply(&self, g: &mut Graph, t_ln: NodeId, x: NodeId) -> Result<NodeId> {
        if g.shape(x).0 == 0 {
            return Err(Error::invalid("empty visual context"));
        }
        let q = self.ln_query.apply(g, t_ln)?;
        let (att, _) = self.cma.apply(g, q, x)?;
        let hat = g.add(att, t_ln)?;
        let h = self.ln_mlp.apply(g, hat)?;
        let m = self.mlp.apply(g, h)?;
        g.add(m, hat)
    }
}

/// Context-aware label features `T_ca` from `T_ln` and the patch features.
pub fn cap_forward(t_ln: &Tensor, x: &Tensor, p: &DsfParams) -> Result<Tensor> {
    if x.rows() == 0 {
        return Err(Error::invalid("empty visual context"));
    }
    if t_ln.cols() != x.cols() {
        return Err(Error::shape("label and patch feature widths differ"));
    }
    let mut g = Graph::inference();
    let vars = p.bind(&mut g);
    let (t, xi) = (g.constant(t_ln.clone()), g.constant(x.clone()));
    let out = vars.apply(&mut g, t, xi)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prompt_sections_in_order() {
        let t = LlmPromptTemplate::natural_images();
        let s = render_llm_prompt(&t, "keyboard").unwrap();
        assert_eq!(s.matches("keyboard").count(), 1);
        let pos = |needle: &str| s.find(needle).unwrap();
        assert!(pos("expert") < pos("Examples:"));
        assert!(pos("Examples:") < pos("single sentence"));
        assert!(pos("single sentence") < pos("Category: keyboard"));
        assert!(s.ends_with("Category: keyboard\nDescription:"));
        assert_eq!(s, render_llm_prompt(&t, "keyboard").unwrap());
    }

    #[test]
    fn prompt_without_examples() {
        let mut t = LlmPromptTemplate::natural_images();
        t.in_context_examples.clear();
        let s = render_llm_prompt(&t, "dog").unwrap();
        assert!(!s.contains("Examples:"));
        assert_eq!(
            s,
            format!(
                "{}\n\n{}\n\nCategory: dog\nDescription:",
                t.domain_description, t.answer_constraints
            )
        );
        assert!(render_llm_prompt(&t, "  ").is_err());
    }

    #[test]
    fn airplane_description() {
        let d = assemble_description("Airplane is a large aircraft with wings", "airplane");
        assert_eq!(
            d.full_text,
            "Airplane is a large aircraft with wings. A photo of a airplane."
        );
        let (text, cat) = parse_description(&d.full_text).unwrap();
        assert_eq!((text.as_str(), cat.as_str()), ("Airplane is a large aircraft with wings", "airplane"));
    }

    #[test]
    fn degenerate_and_normalized_descriptions() {
        assert_eq!(assemble_description("", "dog").full_text, ". A photo of a dog.");
        assert_eq!(assemble_description("A cat sits.  ", "cat").llm_text, "A cat sits");
        assert!(parse_description("no photo sentence.").is_err());
    }

    #[test]
    fn description_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desc.json");
        let items = vec![
            assemble_description("Dog is a furry animal", "dog"),
            assemble_description("Car is a vehicle", "car"),
        ];
        save_description_cache(&path, &items).unwrap();
        let raw = fs::read_to_string(&path).unwrap();
        assert!(raw.contains("\"category\": \"dog\""));
        assert_eq!(load_description_cache(&path).unwrap(), items);

        fs::write(&path, r#"[{"category":"dog","llm_text":"x","full_text":"y"}]"#).unwrap();
        assert!(load_description_cache(&path).is_err());
    }

    fn encode_oracle(tokens: &Tensor, word: &[f64], proj: &Tensor) -> Vec<f64> {
        let l = tokens.rows();
        let dt = word.len();
        let pooled: Vec<f64> = (0..dt)
            .map(|k| ((0..l).map(|i| tokens.get(i, k)).sum::<f64>() + word[k]) / (l + 1) as f64)
            .collect();
        let mu = pooled.iter().sum::<f64>() / dt as f64;
        let var = pooled.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / dt as f64;
        let normed: Vec<f64> = pooled.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect();
        (0..proj.cols())
            .map(|c| (0..dt).map(|k| normed[k] * proj.get(k, c)).sum())
            .collect()
    }

    #[test]
    fn toy_encoder_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let words = random_tensor(&mut rng, 3, 8, 1.0);
        let enc = TextEncoderParams::new(&mut rng, 8, 8);

        let empty = PromptBank::new(&mut rng, 0, words.clone());
        let got = toy_text_encode(&empty, 1, &enc).unwrap();
        let want = encode_oracle(&empty.tokens, words.row(1), &enc.proj);
        assert!(got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));

        let v = random_tensor(&mut rng, 1, 8, 1.0);
        let same = PromptBank {
            tokens: Tensor::concat_rows(&[&v, &v, &v, &v]).unwrap(),
            word_embeddings: Tensor::concat_rows(&[&v, &v]).unwrap(),
        };
        let got = toy_text_encode(&same, 0, &enc).unwrap();
        let want = encode_oracle(&Tensor::zeros(0, 8), v.row(0), &enc.proj);
        assert!(got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));

        let mut bank = PromptBank::new(&mut rng, 4, words);
        bank.tokens = random_tensor(&mut rng, 4, 8, 1.0);
        for j in 0..3 {
            let got = toy_text_encode(&bank, j, &enc).unwrap();
            let want = encode_oracle(&bank.tokens, bank.word_embeddings.row(j), &enc.proj);
            assert!(got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert!(toy_text_encode(&bank, 3, &enc).is_err());
    }

    #[test]
    fn cap_single_key_and_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = DsfParams::new(&mut rng, 4);
        p.cma.w_e = Tensor::zeros(4, 4);
        p.mlp = MlpParams::zeros(4, 4);
        let t = random_tensor(&mut rng, 2, 4, 1.0);

        let z = random_tensor(&mut rng, 1, 4, 1.0);
        let out = cap_forward(&t, &z, &p).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                assert_eq!(out.get(r, c), t.get(r, c) + z.get(0, c));
            }
        }

        let x = random_tensor(&mut rng, 5, 4, 1.0);
        let mean = x.column_mean();
        let out = cap_forward(&t, &x, &p).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                assert!((out.get(r, c) - t.get(r, c) - mean.get(0, c)).abs() < 1e-15);
            }
        }
        assert!(cap_forward(&t, &Tensor::zeros(0, 4), &p).is_err());
    }

    #[test]
    fn cap_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let mut p = DsfParams::new(&mut rng, 4);
            p.ln_query.scale = random_tensor(&mut rng, 1, 4, 1.0);
            p.ln_mlp.shift = random_tensor(&mut rng, 1, 4, 0.5);
            p.mlp.b1 = random_tensor(&mut rng, 1, 4, 0.5);
            let t = random_tensor(&mut rng, 2, 4, 1.0);
            let x = random_tensor(&mut rng, 3, 4, 1.0);

            let ln = |m: &Tensor, lp: &LayerNormParams| {
                Tensor::from_fn(m.rows(), 4, |r, c| {
                    let row = m.row(r);
                    let mu = row.iter().sum::<f64>() / 4.0;
                    let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
                    (row[c] - mu) / (var + 1e-5).sqrt() * lp.scale.get(0, c) + lp.shift.get(0, c)
                })
            };
            let q = ln(&t, &p.ln_query);
            let hat = Tensor::from_fn(2, 4, |r, c| {
                let qw: Vec<f64> = (0..4)
                    .map(|k| (0..4).map(|i| q.get(r, i) * p.cma.w_e.get(i, k)).sum())
                    .collect();
                let logits: Vec<f64> = (0..3)
                    .map(|j| (0..4).map(|k| qw[k] * x.get(j, k)).sum::<f64>() / 2.0)
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                (0..3).map(|j| logits[j].exp() / z * x.get(j, c)).sum::<f64>() + t.get(r, c)
            });
            let h = ln(&hat, &p.ln_mlp);
            let want = Tensor::from_fn(2, 4, |r, c| {
                let mut acc = p.mlp.b2.get(0, c) + hat.get(r, c);
                for k in 0..4 {
                    let hid: f64 = (0..4).map(|i| h.get(r, i) * p.mlp.w1.get(i, k)).sum::<f64>() + p.mlp.b1.get(0, k);
                    acc += hid.max(0.0) * p.mlp.w2.get(k, c);
                }
                acc
            });
            let got = cap_forward(&t, &x, &p).unwrap();
            assert!(got.zip_map(&want, |a, b| a - b).max_abs() < 1e-12);
        }
    }
}
