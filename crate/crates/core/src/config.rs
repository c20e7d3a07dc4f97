//! Run configuration: model flags, data source and training recipe, with
//! dotted-path overrides and named variants.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aggregation::{Aggregator, Branch, LossConfig};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::gated::GdmaFlags;
use crate::optim::{AdamWConfig, DEFAULT_EMA_DECAY};
use crate::prompting::DEFAULT_PROMPT_TOKENS;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Synthesis {
    Sum,
    Concat,
    Mlp,
    #[default]
    Qsm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub categories: usize,
    pub patches: usize,
    pub dim: usize,
    pub prompt_tokens: usize,
    /// Width of prompt tokens and word embeddings; `None` means `dim`.
    pub token_dim: Option<usize>,
    /// Split-and-synthesize prompting. Off gives the template baseline
    /// `T_uf = T_template W_Q`.
    pub ssp: bool,
    pub kap: bool,
    /// Knowledge-aware embeddings from LLM descriptions; off uses the
    /// plain-template encoding instead.
    pub kap_llm: bool,
    pub cap: bool,
    pub dsf: bool,
    pub synthesis: Synthesis,
    pub gdma: GdmaFlags,
    pub aggregator: Aggregator,
    pub branch: Branch,
    pub loss: LossConfig,
    /// Replace every semantic input with per-sample noise.
    pub semantic_noise: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            categories: 8,
            patches: 16,
            dim: 32,
            prompt_tokens: DEFAULT_PROMPT_TOKENS,
            token_dim: None,
            ssp: true,
            kap: true,
            kap_llm: true,
            cap: true,
            dsf: true,
            synthesis: Synthesis::Qsm,
            gdma: GdmaFlags::default(),
            aggregator: Aggregator::Soft,
            branch: Branch::Both,
            loss: LossConfig::default(),
            semantic_noise: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn token_dim(&self) -> usize {
        self.token_dim.unwrap_or(self.dim)
    }

    pub fn uses_prompts(&self) -> bool {
        self.ssp && self.cap
    }

    pub fn uses_dsf(&self) -> bool {
        self.uses_prompts() && self.dsf
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 || self.patches == 0 {
            return Err(Error::invalid("categories and patches must be positive"));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::invalid(format!("dim {} must be a positive multiple of 4", self.dim)));
        }
        if self.token_dim() == 0 {
            return Err(Error::invalid("token_dim must be positive"));
        }
        self.loss.validate()?;
        if self.ssp && !self.kap && !self.cap {
            return Err(Error::DegenerateConfig(
                "semantic prompting enabled with neither KAP nor CAP".into(),
            ));
        }
        if self.branch == Branch::Regional && self.loss.lambda == 0.0 {
            return Err(Error::DegenerateConfig(
                "regional branch only with lambda = 0 leaves no loss".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub ema_decay: f64,
    /// Caps the EMA decay at `(1 + t) / (10 + t)` after `t` steps.
    pub ema_warmup: bool,
    /// Evaluate the test split after every epoch (otherwise only at the end).
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            ema_decay: DEFAULT_EMA_DECAY,
            ema_warmup: true,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::invalid("optimizer constants out of range"));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("EMA decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    /// SSPA-FB training bundle; the synthetic generator is used when absent.
    pub train_path: Option<String>,
    pub test_path: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    /// Sets the model and synthetic-data seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.data.synthetic.seed = seed;
    }

    /// Applies `key=value` overrides to a fully populated config. The key is
    /// a dotted path that must already exist; the value is parsed as JSON,
    /// falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut v, o.as_ref())?;
        }
        serde_json::from_value(v).map_err(|e| Error::invalid(format!("override rejected: {e}")))
    }

    /// Model dims follow the synthetic spec unless files supply the data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        if self.data.train_path.is_none() {
            let s = &self.data.synthetic;
            let m = &self.model;
            if (s.categories, s.patches, s.dim) != (m.categories, m.patches, m.dim) {
                return Err(Error::invalid(format!(
                    "model (C={}, M={}, d={}) does not match data (C={}, M={}, d={})",
                    m.categories, m.patches, m.dim, s.categories, s.patches, s.dim
                )));
            }
        }
        Ok(())
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::invalid("empty override key"));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::invalid(format!("{key}: {part} is not inside an object")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::invalid(format!("unknown config key {key}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

/// Applies a named ablation variant to `base`.
pub fn apply_variant(base: &ModelConfig, name: &str) -> Result<ModelConfig> {
    let mut c = base.clone();
    let all_gdma = GdmaFlags::default();
    let no_gdma = GdmaFlags {
        v2s: false,
        s2v: false,
        gate: true,
    };
    match name {
        "full" | "+GDMA" => {
            c.ssp = true;
            c.gdma = all_gdma;
        }
        "baseline" => {
            c.ssp = false;
            c.gdma = no_gdma;
        }
        "+SSP" => {
            c.ssp = true;
            c.gdma = no_gdma;
        }
        "sum" => c.synthesis = Synthesis::Sum,
        "concat" => c.synthesis = Synthesis::Concat,
        "MLP" | "mlp" => c.synthesis = Synthesis::Mlp,
        "QSM" | "qsm" => c.synthesis = Synthesis::Qsm,
        "none" => c.gdma = GdmaFlags { gate: c.gdma.gate, ..no_gdma },
        "V-to-S" => c.gdma = GdmaFlags { v2s: true, s2v: false, gate: c.gdma.gate },
        "S-to-V" => c.gdma = GdmaFlags { v2s: false, s2v: true, gate: c.gdma.gate },
        "both" => c.gdma = GdmaFlags { v2s: true, s2v: true, gate: c.gdma.gate },
        "w/o Gate" | "no-gate" => c.gdma.gate = false,
        "w/ Gate" | "gate" => c.gdma.gate = true,
        "soft" => c.aggregator = Aggregator::Soft,
        "hard" => c.aggregator = Aggregator::Hard,
        "average" => c.aggregator = Aggregator::Average,
        "G" => c.branch = Branch::Global,
        "R" => c.branch = Branch::Regional,
        "G+R" => c.branch = Branch::Both,
        "KAP" => {
            (c.kap, c.kap_llm, c.cap, c.dsf) = (true, true, false, false);
        }
        "CAP" => {
            (c.kap, c.cap, c.dsf) = (false, true, true);
        }
        "w/o LLM" => {
            (c.kap, c.kap_llm, c.cap, c.dsf) = (true, false, true, true);
        }
        "w/o DSF" => {
            (c.kap, c.kap_llm, c.cap, c.dsf) = (true, true, true, false);
        }
        "KAP+CAP" => {
            (c.kap, c.kap_llm, c.cap, c.dsf) = (true, true, true, true);
        }
        "noise" => {
            c.semantic_noise = true;
            c.branch = Branch::Global;
        }
        _ => {
            // Composite variants such as "R/hard".
            if let Some((a, b)) = name.split_once('/') {
                if !a.is_empty() && !b.is_empty() {
                    return apply_variant(&apply_variant(base, a)?, b);
                }
            }
            return Err(Error::invalid(format!("unknown variant {name:?}")));
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_reject_unknown_keys() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = serde_json::from_str(r#"{"train":{"epochs":3}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.model, ModelConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model":{"bogus":1}}"#).is_err());
        c.validate().unwrap();
    }

    #[test]
    fn training_constants() {
        let t = TrainConfig::default();
        assert_eq!((t.epochs, t.batch_size), (30, 32));
        assert_eq!(t.optimizer.lr, 1e-4);
        assert_eq!(t.ema_decay, 0.9997);
        let m = ModelConfig::default();
        assert_eq!(m.prompt_tokens, 4);
        assert_eq!((m.loss.gamma_plus, m.loss.gamma_minus, m.loss.lambda), (0.0, 2.0, 1.0));
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&["model.synthesis=mlp", "train.optimizer.lr=0.5", "model.branch=G+R"])
            .unwrap();
        assert_eq!(c.model.synthesis, Synthesis::Mlp);
        assert_eq!(c.train.optimizer.lr, 0.5);
        assert!(RunConfig::default().with_overrides(&["model.nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["model.dim"]).is_err());
        assert!(RunConfig::default().with_overrides(&["model.synthesis=quaternion"]).is_err());
    }

    #[test]
    fn degenerate_configs() {
        let c = ModelConfig {
            kap: false,
            cap: false,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::DegenerateConfig(_))));
        let c = ModelConfig {
            branch: Branch::Regional,
            loss: LossConfig { lambda: 0.0, ..LossConfig::default() },
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::DegenerateConfig(_))));
        let c = ModelConfig { dim: 30, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn variants() {
        let base = ModelConfig::default();
        assert!(!apply_variant(&base, "baseline").unwrap().ssp);
        let r = apply_variant(&base, "R/hard").unwrap();
        assert_eq!((r.branch, r.aggregator), (Branch::Regional, Aggregator::Hard));
        assert!(apply_variant(&base, "mystery").is_err());
        assert!(apply_variant(&base, "R/").is_err());
    }
}
