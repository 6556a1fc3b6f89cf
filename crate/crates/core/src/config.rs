//! Run configuration: one JSON file plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::episodes::Protocol;
use crate::error::{Error, Result};
use crate::eval::{fingerprint, ExperimentSetup};
use crate::losses::LossWeights;
use crate::text::{generate, load_fewrel, Dataset, SyntheticSpec};
use crate::trainer::TrainConfig;

/// Overrides the output directory named in the config.
pub const OUTPUT_DIR_ENV: &str = "FEWSHOT_OUTPUT_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    #[default]
    Val,
    Test,
}

/// Where episodes come from. Either a synthetic spec or FewRel-format
/// files; relation lists restrict each side.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub eval_split: EvalSplit,
    pub train_relations: Option<Vec<String>>,
    pub eval_relations: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Defaults to the five reference cells at the configured temperature.
    pub grid: Option<Vec<LossWeights>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub preset: String,
    /// Padded sequence length; defaults to the longest marked example.
    pub max_len: Option<usize>,
    pub protocol: Protocol,
    pub n_episodes: usize,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            preset: "tiny".into(),
            max_len: None,
            protocol: Protocol::default(),
            n_episodes: 1000,
            train: TrainConfig::default(),
            seeds: vec![0],
            sweep: SweepConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Sets `path` (dot separated) in `root` to `raw`, read as JSON when it
/// parses and as a string otherwise.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{path}`")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(Error::Config(format!(
                    "override `{path}`: `{}` is not an object",
                    keys[..i].join(".")
                )))
            }
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

/// Splits `key=value`.
pub fn parse_override(arg: &str) -> Result<(&str, &str)> {
    arg.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not of the form key=value")))
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (when given), applies overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            apply_override(&mut value, k, v)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.max_len == Some(0) {
            return Err(Error::Config("max_len must be positive".into()));
        }
        let d = &self.data;
        match (&d.synthetic, &d.train) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("data: give either `synthetic` or `train`, not both".into()))
            }
            (None, None) => return Err(Error::Config("data: one of `synthetic` or `train` is required".into())),
            _ => {}
        }
        if let Some(spec) = &d.synthetic {
            spec.validate().map_err(|e| Error::Config(format!("data.synthetic: {e}")))?;
        }
        for (key, p) in [("data.train", &d.train), ("data.val", &d.val), ("data.test", &d.test)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("{key}: no such file {}", p.display())));
                }
            }
        }
        if let Some(grid) = &self.sweep.grid {
            if grid.is_empty() {
                return Err(Error::Config("sweep.grid is empty".into()));
            }
        }
        Ok(())
    }

    /// Output directory, with the environment variable taking precedence.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    /// Hash of everything that influences results (the output location is
    /// excluded so relocated runs compare equal).
    pub fn fingerprint(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        fingerprint(&c)
    }

    /// Meta-training and evaluation datasets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let (train_src, eval_src) = if let Some(spec) = &d.synthetic {
            let ds = generate(spec)?;
            (ds.clone(), ds)
        } else {
            let train_path = d.train.as_ref().expect("validated");
            let train = load_fewrel(train_path, None)?;
            let eval_path = match d.eval_split {
                EvalSplit::Val => d.val.as_ref(),
                EvalSplit::Test => d.test.as_ref(),
            };
            let eval = match eval_path {
                Some(p) => load_fewrel(p, Some(&train.vocab))?,
                None => train.clone(),
            };
            (train, eval)
        };
        let same_source = d.synthetic.is_some() || (d.val.is_none() && d.test.is_none());

        let ids: Vec<String> = train_src.relation_ids().iter().map(|s| s.to_string()).collect();
        let train_ids = match &d.train_relations {
            Some(list) => list.clone(),
            None if same_source => {
                let keep = d.eval_relations.as_ref();
                match keep {
                    Some(ev) => ids.iter().filter(|r| !ev.contains(r)).cloned().collect(),
                    None => ids[..ids.len().div_ceil(2)].to_vec(),
                }
            }
            None => ids.clone(),
        };
        let eval_ids = match &d.eval_relations {
            Some(list) => list.clone(),
            None if same_source => ids.iter().filter(|r| !train_ids.contains(r)).cloned().collect(),
            None => eval_src.relation_ids().iter().map(|s| s.to_string()).collect(),
        };
        if let Some(shared) = train_ids.iter().find(|r| eval_ids.contains(r)) {
            return Err(Error::Data(format!(
                "relation {shared} is in both the training and evaluation sets"
            )));
        }
        Ok((train_src.subset(&train_ids)?, eval_src.subset(&eval_ids)?))
    }

    pub fn setup(&self, seed: u64, train: &Dataset, eval: &Dataset) -> ExperimentSetup {
        let max_len = self
            .max_len
            .unwrap_or_else(|| train.max_marked_len().max(eval.max_marked_len()));
        ExperimentSetup {
            preset: self.preset.clone(),
            max_len,
            protocol: self.protocol,
            n_eval_episodes: self.n_episodes,
            train: TrainConfig {
                seed,
                ..self.train.clone()
            },
        }
    }
}
