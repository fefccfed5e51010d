//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Recognised keys:
//!
//! | key | default |
//! |-----|---------|
//! | `preset` | `tiny` (`tiny` or `full`) |
//! | `variant` | `MSHT` |
//! | `variants` | all eight, comma separated (used by `ablate`) |
//! | `seed` | `0` |
//! | `learning_rate` | `6e-5` |
//! | `weight_decay` | `0.05` |
//! | `epochs` | `50` |
//! | `batch_size` | `8` |
//! | `final_lr_ratio` | `0.1` |
//! | `augment` | `true` |
//! | `class_weights` | none, else `positive,negative` |
//! | `data_root` | none: generate synthetic data |
//! | `normalize` | `none`, else `WIDTHxHEIGHT` applied on ingest |
//! | `synth_edge` | preset input edge |
//! | `synth_per_class` | `64` |
//! | `synth_blobs` | `8` |
//! | `synth_seed` | the run seed |
//! | `attention` | `simam` |
//! | `paper_literal_scaling` | `false` |
//! | `dropout` | `0` |
//! | `crop_edge` | `700` for `full`, the input edge otherwise |
//! | `max_rotation_deg` | `180` |
//! | `workers` | `1` |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use msht::datapipe::{AugmentConfig, SynthSpec};
use msht::trainer::{DataSource, ExperimentConfig, Hyperparams};
use msht::{ModelConfig, VARIANT_NAMES};

pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub preset: String,
    pub variant: String,
    pub variants: Vec<String>,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub data_root: Option<PathBuf>,
    pub normalize: Option<(u32, u32)>,
    pub synth_edge: Option<u32>,
    pub synth_per_class: usize,
    pub synth_blobs: usize,
    pub synth_seed: Option<u64>,
    pub attention: Option<String>,
    pub paper_literal_scaling: bool,
    pub dropout: f64,
    pub crop_edge: Option<u32>,
    pub max_rotation_deg: f64,
    pub workers: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            preset: "tiny".into(),
            variant: "MSHT".into(),
            variants: VARIANT_NAMES.iter().map(|s| s.to_string()).collect(),
            seed: DEFAULT_SEED,
            hyperparams: Hyperparams::default(),
            data_root: None,
            normalize: None,
            synth_edge: None,
            synth_per_class: 64,
            synth_blobs: 8,
            synth_seed: None,
            attention: None,
            paper_literal_scaling: false,
            dropout: 0.0,
            crop_edge: None,
            max_rotation_deg: 180.0,
            workers: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid value {value:?} for `{key}`, expected true or false")),
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let hp = &mut self.hyperparams;
        match key {
            "preset" => self.preset = value.to_string(),
            "variant" => self.variant = value.to_string(),
            "variants" => {
                self.variants = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "seed" => self.seed = parse(key, value)?,
            "learning_rate" => hp.learning_rate = parse(key, value)?,
            "weight_decay" => hp.weight_decay = parse(key, value)?,
            "epochs" => hp.epochs = parse(key, value)?,
            "batch_size" => hp.batch_size = parse(key, value)?,
            "final_lr_ratio" => hp.final_lr_ratio = parse(key, value)?,
            "augment" => hp.augment = parse_bool(key, value)?,
            "class_weights" => {
                let w: Vec<f64> = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_, _>>()?;
                if w.len() != 2 {
                    return Err("`class_weights` needs two values: positive,negative".into());
                }
                hp.class_weights = Some([w[0], w[1]]);
            }
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "normalize" => {
                self.normalize = if value == "none" {
                    None
                } else {
                    let (w, h) = value
                        .split_once('x')
                        .ok_or_else(|| format!("`normalize` expects WIDTHxHEIGHT or none, got {value:?}"))?;
                    Some((parse(key, w)?, parse(key, h)?))
                }
            }
            "synth_edge" => self.synth_edge = Some(parse(key, value)?),
            "synth_per_class" => self.synth_per_class = parse(key, value)?,
            "synth_blobs" => self.synth_blobs = parse(key, value)?,
            "synth_seed" => self.synth_seed = Some(parse(key, value)?),
            "attention" => self.attention = Some(value.to_string()),
            "paper_literal_scaling" => self.paper_literal_scaling = parse_bool(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "crop_edge" => self.crop_edge = Some(parse(key, value)?),
            "max_rotation_deg" => self.max_rotation_deg = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v.trim()).map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut s = Self::default();
        s.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(s)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), String> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| format!("override {o:?} is not key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, String> {
        let mut cfg = ModelConfig::preset(&self.preset).map_err(|e| e.to_string())?;
        if let Some(a) = &self.attention {
            cfg.fgd.attention = a.clone();
        }
        cfg.fgd.paper_literal_scaling = self.paper_literal_scaling;
        cfg.fgd.dropout = self.dropout;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn augment_config(&self, model: &ModelConfig) -> AugmentConfig {
        let edge = model.input_edge() as u32;
        let base = if self.preset == "full" { AugmentConfig::full() } else { AugmentConfig::for_edge(edge) };
        AugmentConfig {
            crop_edge: self.crop_edge.unwrap_or(base.crop_edge),
            resize_edge: edge,
            max_rotation_deg: self.max_rotation_deg,
            ..base
        }
    }

    pub fn synth_spec(&self, model: &ModelConfig) -> SynthSpec {
        let edge = self.synth_edge.unwrap_or(model.input_edge() as u32);
        SynthSpec::new(edge, self.synth_per_class, self.synth_blobs)
    }

    pub fn data_source(&self, model: &ModelConfig) -> DataSource {
        match &self.data_root {
            Some(root) => DataSource::Directory {
                root: root.clone(),
                normalize_to: self.normalize,
            },
            None => DataSource::Synth {
                spec: self.synth_spec(model),
                seed: self.synth_seed.unwrap_or(self.seed),
            },
        }
    }

    pub fn experiment(&self, variant: &str) -> Result<ExperimentConfig, String> {
        let model = self.model_config()?;
        Ok(ExperimentConfig {
            variant: variant.to_string(),
            augment: self.augment_config(&model),
            data: self.data_source(&model),
            hyperparams: Hyperparams { seed: self.seed, ..self.hyperparams.clone() },
            seed: self.seed,
            workers: self.workers.max(1),
            model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_text() {
        let mut s = Settings::default();
        s.apply_text("# desk scale\npreset = tiny\n\nlearning_rate=1e-3\nepochs = 3\naugment = false\nvariants = MSHT, No_ATT\n")
            .unwrap();
        assert_eq!(s.hyperparams.learning_rate, 1e-3);
        assert_eq!(s.hyperparams.epochs, 3);
        assert!(!s.hyperparams.augment);
        assert_eq!(s.variants, vec!["MSHT", "No_ATT"]);
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut s = Settings::default();
        assert!(s.apply_text("colour = red").unwrap_err().contains("unknown config key"));
        assert!(s.apply_text("epochs = many").unwrap_err().contains("line 1"));
        assert!(s.apply_text("epochs").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut s = Settings::default();
        s.apply_text("seed = 3\nepochs = 4").unwrap();
        s.apply_overrides(&["epochs=9".into()]).unwrap();
        assert_eq!((s.seed, s.hyperparams.epochs), (3, 9));
    }

    #[test]
    fn normalize_and_weights() {
        let mut s = Settings::default();
        s.set("normalize", "1390x1038").unwrap();
        assert_eq!(s.normalize, Some((1390, 1038)));
        s.set("normalize", "none").unwrap();
        assert_eq!(s.normalize, None);
        s.set("class_weights", "2.0,1.0").unwrap();
        assert_eq!(s.hyperparams.class_weights, Some([2.0, 1.0]));
        assert!(s.set("class_weights", "1").is_err());
    }

    #[test]
    fn tiny_defaults_use_input_edge() {
        let s = Settings::default();
        let m = s.model_config().unwrap();
        let a = s.augment_config(&m);
        assert_eq!((a.crop_edge, a.resize_edge), (64, 64));
        assert_eq!(s.synth_spec(&m).edge, 64);
    }
}
