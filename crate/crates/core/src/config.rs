//! Plain-text `key=value` configuration.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Later assignments override earlier ones, which is how command
//! line overrides are layered on top of a file. Unknown keys are rejected.
//! [`Config::to_text`] writes every key in a fixed order and parses back to
//! an identical value.

use crate::dem::DemOrder;
use crate::error::{Error, Result};
use crate::metrics::SignificanceTest;
use crate::model::ModelConfig;
use crate::nn::Upsample;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub test: SignificanceTest,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            test: SignificanceTest::Wilcoxon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_list<V: std::str::FromStr, const N: usize>(key: &str, value: &str) -> Result<[V; N]>
where
    V::Err: std::fmt::Display,
{
    let items = value
        .split(',')
        .map(|s| parse_value::<V>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    let got = items.len();
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` expects {N} comma-separated values, got {got}")))
}

fn join<V: std::fmt::Display>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits `key=value`, trimming both sides.
pub fn split_assignment(line: &str) -> Result<(&str, &str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
    Ok((k.trim(), v.trim()))
}

fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("backbone.channels", join(&m.backbone.channels)),
        ("backbone.blocks_per_stage", m.backbone.blocks_per_stage.to_string()),
        ("model.height", m.input_size.0.to_string()),
        ("model.width", m.input_size.1.to_string()),
        ("model.decoder_width", m.decoder_width.to_string()),
        ("model.reduction", m.reduction.to_string()),
        ("model.upsample", m.upsample.to_string()),
        ("dem.order", m.dem_order.to_string()),
        ("dem.eca_kernel", m.eca_kernel.to_string()),
        ("fam.dim", m.fam_dim.to_string()),
        ("fam.heads", m.fam_heads.to_string()),
        ("fam.local_window", m.local_window.to_string()),
        ("fam.pool_size", m.pool_size.to_string()),
        ("fam.dropout", m.fam_dropout.to_string()),
        ("fam.scale", m.fam_scale.to_string()),
    ]
}

fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "backbone.channels" => m.backbone.channels = parse_list(key, v)?,
        "backbone.blocks_per_stage" => m.backbone.blocks_per_stage = parse_value(key, v)?,
        "model.height" => m.input_size.0 = parse_value(key, v)?,
        "model.width" => m.input_size.1 = parse_value(key, v)?,
        "model.decoder_width" => m.decoder_width = parse_value(key, v)?,
        "model.reduction" => m.reduction = parse_value(key, v)?,
        "model.upsample" => m.upsample = parse_value::<Upsample>(key, v)?,
        "dem.order" => m.dem_order = parse_value::<DemOrder>(key, v)?,
        "dem.eca_kernel" => m.eca_kernel = parse_value(key, v)?,
        "fam.dim" => m.fam_dim = parse_value(key, v)?,
        "fam.heads" => m.fam_heads = parse_value(key, v)?,
        "fam.local_window" => m.local_window = parse_value(key, v)?,
        "fam.pool_size" => m.pool_size = parse_value(key, v)?,
        "fam.dropout" => m.fam_dropout = parse_value(key, v)?,
        "fam.scale" => m.fam_scale = parse_value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl Config {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-scale model with default training settings.
    pub fn full() -> Self {
        Config {
            model: ModelConfig::full(),
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_assignment(line).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if set_model(&mut self.model, key, v)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "train.lr" => t.lr = parse_value(key, v)?,
            "train.batch" => t.batch = parse_value(key, v)?,
            "train.max_epochs" => t.max_epochs = parse_value(key, v)?,
            "train.patience" => t.patience = parse_value(key, v)?,
            "train.seed" => t.seed = parse_value(key, v)?,
            "train.weights" => t.weights = parse_list(key, v)?,
            "train.max_steps" => {
                let n: usize = parse_value(key, v)?;
                t.max_steps = (n > 0).then_some(n);
            }
            "train.augment" => t.augment = parse_value(key, v)?,
            "train.arbitrary_rotation" => t.arbitrary_rotation = parse_value(key, v)?,
            "train.validate_on_train" => t.validate_on_train = parse_value(key, v)?,
            "eval.threshold" => self.eval.threshold = parse_value(key, v)?,
            "eval.test" => self.eval.test = parse_value::<SignificanceTest>(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config(format!("eval.threshold {} outside [0,1]", self.eval.threshold)));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let mut e = model_entries(&self.model);
        e.extend([
            ("train.lr", t.lr.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.weights", join(&t.weights)),
            ("train.max_steps", t.max_steps.unwrap_or(0).to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.arbitrary_rotation", t.arbitrary_rotation.to_string()),
            ("train.validate_on_train", t.validate_on_train.to_string()),
            ("eval.threshold", self.eval.threshold.to_string()),
            ("eval.test", self.eval.test.to_string()),
        ]);
        e
    }

    pub fn to_text(&self) -> String {
        render(&self.entries())
    }
}

fn render(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// The model keys only, as stored inside checkpoints.
pub fn model_to_text(m: &ModelConfig) -> String {
    render(&model_entries(m))
}

/// Parses text holding model keys only.
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = split_assignment(line)?;
        if !set_model(&mut m, k, v)? {
            return Err(Error::Config(format!("unknown model key `{k}`")));
        }
    }
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = Config::full();
        c.train.lr = 3.5e-4;
        c.train.max_steps = Some(12);
        c.train.weights = [1.0, 0.5, 0.25, 2.0, 0.0];
        c.model.dem_order = DemOrder::GateBeforeFuse;
        c.model.upsample = Upsample::Nearest;
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        assert_eq!(model_from_text(&model_to_text(&c.model)).unwrap(), c.model);
    }

    #[test]
    fn later_lines_override_and_comments_skip() {
        let c = Config::parse("# desk\ntrain.lr = 0.1\n\ntrain.lr=0.2\nbackbone.channels=8,8,8,8\n").unwrap();
        assert_eq!(c.train.lr, 0.2);
        assert_eq!(c.model.backbone.channels, [8, 8, 8, 8]);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(Config::parse("train.learning_rate=1").unwrap_err().to_string().contains("unknown key"));
        assert!(Config::parse("train.lr").is_err());
        assert!(Config::parse("backbone.channels=1,2,3").is_err());
        assert!(Config::parse("fam.scale=maybe").is_err());
        assert!(model_from_text("train.lr=1").is_err());
    }
}
