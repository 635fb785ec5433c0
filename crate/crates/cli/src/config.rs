//! Flat `key=value` run configuration.
//!
//! Every key has a default; files and `--set` overrides may only name known
//! keys. The effective configuration renders back in a fixed key order and
//! parses to the same settings, so a run's `config.echo` can be fed to later
//! commands.

use moonlite::losses::SftWeights;
use moonlite::model::{FireConfig, FusionConfig, ModelConfig};
use moonlite::rl::RewardWeights;
use moonlite::train::{RlConfig, SftConfig};
use moonlite::Dataset;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{origin}: expected `key=value`, got `{line}`")]
    Syntax { origin: String, line: String },
    #[error("config key `{key}`: cannot parse `{value}` as {expected}")]
    Value {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config key `{key}`: {msg}")]
    Invalid { key: &'static str, msg: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Keys in echo order with their defaults.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "7"),
    ("reasoning", "true"),
    ("model.vision_width", "32"),
    ("model.vision_layers", "4"),
    ("model.d_model", "64"),
    ("model.dec_layers", "6"),
    ("model.ffn", "128"),
    ("model.max_len", "160"),
    ("fusion.enabled", "true"),
    ("fusion.heads", "4"),
    ("fusion.dim", "256"),
    ("fire.enabled", "true"),
    ("fire.injection_pairs", "2:1,3:2"),
    ("fire.early_layer", "1"),
    ("fire.deep_layer", "4"),
    ("sft.w_img", "1.0"),
    ("sft.w_txt", "0.3"),
    ("sft.w_mm", "0.1"),
    ("sft.w_ntp", "0.01"),
    ("sft.temperature", "0.07"),
    ("sft.batch_size", "8"),
    ("sft.lr", "0.002"),
    ("sft.steps", "1000"),
    ("sft.ckpt_every", "100"),
    ("rl.G", "8"),
    ("rl.clip", "0.2"),
    ("rl.lmax", "96"),
    ("rl.w1", "0.5"),
    ("rl.w2", "0.3"),
    ("rl.w3", "1.0"),
    ("rl.w4", "1.0"),
    ("rl.alpha_q", "0.2"),
    ("rl.tau_q", "4"),
    ("rl.lambda1", "0.1"),
    ("rl.lambda2", "1.0"),
    ("rl.lr", "0.0002"),
    ("rl.steps", "200"),
    ("rl.queries", "4"),
    ("rl.temperature", "1.0"),
    ("rl.scorer", "f1"),
    ("rl.scorer_cmd", ""),
    ("rl.ckpt_every", "50"),
    ("eval.pool", "64"),
];

/// Raw key/value pairs over the defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(_, v)| v.to_string()).collect(),
        }
    }
}

fn slot(key: &str) -> Result<usize> {
    DEFAULTS
        .iter()
        .position(|(k, _)| *k == key)
        .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))
}

fn split_pair<'a>(origin: &str, line: &'a str) -> Result<(&'a str, &'a str)> {
    line.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| ConfigError::Syntax {
            origin: origin.to_string(),
            line: line.to_string(),
        })
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let i = slot(key)?;
        self.values[i] = value.to_string();
        Ok(())
    }

    /// Applies a `key=value` string such as a `--set` argument.
    pub fn apply(&mut self, pair: &str) -> Result<()> {
        let (k, v) = split_pair("--set", pair)?;
        self.set(k, v)
    }

    /// Applies every line of a config file; blank lines and `#` comments are
    /// skipped.
    pub fn apply_text(&mut self, origin: &str, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_pair(&format!("{origin}:{}", n + 1), line)?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        Ok(&self.values[slot(key)?])
    }

    /// Every key with its effective value, one per line.
    pub fn echo(&self) -> String {
        DEFAULTS
            .iter()
            .zip(&self.values)
            .map(|((k, _), v)| format!("{k}={v}\n"))
            .collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, expected: &'static str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| ConfigError::Value {
            key: key.to_string(),
            value: v.to_string(),
            expected,
        })
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "a non-negative integer")
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse(key, "a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ConfigError::Value {
                key: key.to_string(),
                value: self.get(key)?.to_string(),
                expected: "a finite number",
            })
        }
    }

    fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key, "true or false")
    }

    fn pairs(&self, key: &str) -> Result<Vec<(usize, usize)>> {
        let v = self.get(key)?;
        let bad = || ConfigError::Value {
            key: key.to_string(),
            value: v.to_string(),
            expected: "comma-separated `map:layer` pairs",
        };
        v.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|p| {
                let (a, b) = p.split_once(':').ok_or_else(bad)?;
                Ok((
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                ))
            })
            .collect()
    }

    /// Typed settings; model input sizes come from the dataset.
    pub fn settings(&self, ds: &Dataset) -> Result<Settings> {
        let seed: u64 = self.parse("seed", "a non-negative integer")?;
        let reasoning = self.bool("reasoning")?;
        let (patches, patch_dim) = ds.patch_shape();
        let model = ModelConfig {
            vocab_size: ds.vocab.len(),
            patches,
            patch_dim,
            vision_width: self.usize("model.vision_width")?,
            vision_layers: self.usize("model.vision_layers")?,
            d_model: self.usize("model.d_model")?,
            dec_layers: self.usize("model.dec_layers")?,
            ffn: self.usize("model.ffn")?,
            max_len: self.usize("model.max_len")?,
            reasoning,
            fire: FireConfig {
                enabled: self.bool("fire.enabled")?,
                injection_pairs: self.pairs("fire.injection_pairs")?,
                early_layer: self.usize("fire.early_layer")?,
                deep_layer: self.usize("fire.deep_layer")?,
            },
            fusion: FusionConfig {
                enabled: self.bool("fusion.enabled")?,
                heads: self.usize("fusion.heads")?,
                dim: self.usize("fusion.dim")?,
            },
            seed,
        };
        let tau = self.f64("sft.temperature")?;
        if tau <= 0.0 {
            return Err(ConfigError::Invalid {
                key: "sft.temperature",
                msg: "must be positive".into(),
            });
        }
        let sft = SftConfig {
            weights: SftWeights {
                w_img: self.f64("sft.w_img")?,
                w_txt: self.f64("sft.w_txt")?,
                w_mm: self.f64("sft.w_mm")?,
                w_ntp: self.f64("sft.w_ntp")?,
                temperature: tau,
            },
            batch_size: self.usize("sft.batch_size")?,
            lr: self.f64("sft.lr")?,
            steps: self.usize("sft.steps")?,
            reasoning,
            seed,
        };
        let rl = RlConfig {
            weights: RewardWeights {
                w: [
                    self.f64("rl.w1")?,
                    self.f64("rl.w2")?,
                    self.f64("rl.w3")?,
                    self.f64("rl.w4")?,
                ],
                alpha_q: self.f64("rl.alpha_q")?,
                tau_q: self.f64("rl.tau_q")?,
                lmax: self.usize("rl.lmax")?,
                lambda1: self.f64("rl.lambda1")?,
                lambda2: self.f64("rl.lambda2")?,
                clip: self.f64("rl.clip")?,
                group: self.usize("rl.G")?,
            },
            queries: self.usize("rl.queries")?,
            lr: self.f64("rl.lr")?,
            steps: self.usize("rl.steps")?,
            temperature: self.f64("rl.temperature")?,
            tau,
            reasoning,
            seed,
        };
        if rl.temperature.is_nan() || rl.temperature <= 0.0 {
            return Err(ConfigError::Invalid {
                key: "rl.temperature",
                msg: "must be positive".into(),
            });
        }
        let scorer = match self.get("rl.scorer")? {
            "f1" => ScorerChoice::F1,
            "external" => {
                let cmd = self.get("rl.scorer_cmd")?;
                if cmd.is_empty() {
                    return Err(ConfigError::Invalid {
                        key: "rl.scorer_cmd",
                        msg: "required when rl.scorer=external".into(),
                    });
                }
                ScorerChoice::External(PathBuf::from(cmd))
            }
            other => {
                return Err(ConfigError::Value {
                    key: "rl.scorer".into(),
                    value: other.into(),
                    expected: "f1 or external",
                })
            }
        };
        Ok(Settings {
            model,
            sft,
            rl,
            scorer,
            sft_ckpt_every: self.usize("sft.ckpt_every")?,
            rl_ckpt_every: self.usize("rl.ckpt_every")?,
            pool: self.usize("eval.pool")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScorerChoice {
    F1,
    External(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Settings {
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub scorer: ScorerChoice,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub sft_ckpt_every: usize,
    pub rl_ckpt_every: usize,
    pub pool: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use moonlite::attr::{GenConfig, Schema};

    fn dataset() -> Dataset {
        let cfg = GenConfig {
            products: 200,
            triplets: 10,
            ..GenConfig::default()
        };
        Dataset::generate(Schema::default_schema(), &cfg).unwrap()
    }

    #[test]
    fn defaults_match_library_defaults() {
        let s = Config::default().settings(&dataset()).unwrap();
        let d = ModelConfig::default();
        assert_eq!(s.model.d_model, d.d_model);
        assert_eq!(s.model.fire, d.fire);
        assert_eq!(s.model.fusion, d.fusion);
        assert_eq!(s.sft.weights, SftWeights::default());
        assert_eq!(s.rl.weights, RewardWeights::default());
        assert_eq!(s.scorer, ScorerChoice::F1);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = Config::default();
        c.apply("sft.steps=12").unwrap();
        c.apply(" fire.enabled = false ").unwrap();
        let mut d = Config::default();
        d.apply_text("echo", &c.echo()).unwrap();
        assert_eq!(c, d);
        assert!(c.echo().contains("\nsft.steps=12\n"));
        assert_eq!(c.echo().lines().count(), DEFAULTS.len());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = Config::default();
        assert!(matches!(
            c.apply("sft.step=3"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            c.apply("sft.steps"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(c.apply_text("f", "# comment\n\nseed=3\n").is_ok());
        assert!(matches!(
            c.apply_text("f", "seed=3\nbogus=1"),
            Err(ConfigError::UnknownKey(_))
        ));
        let ds = dataset();
        for bad in [
            "sft.lr=fast",
            "reasoning=yes",
            "fire.injection_pairs=2-1",
            "rl.scorer=llm",
            "rl.scorer=external",
            "sft.temperature=0",
        ] {
            let mut c = Config::default();
            c.apply(bad).unwrap();
            assert!(c.settings(&ds).is_err(), "{bad}");
        }
        let mut c = Config::default();
        c.apply("rl.scorer=external").unwrap();
        c.apply("rl.scorer_cmd=/bin/judge").unwrap();
        assert_eq!(
            c.settings(&ds).unwrap().scorer,
            ScorerChoice::External("/bin/judge".into())
        );
    }
}
