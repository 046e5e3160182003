//! Flat key=value experiment configs with dotted sections.
//!
//! One line per setting (`train.iterations = 20000`), `#` comments, blank
//! lines ignored. Every key is validated against the schema below; unknown
//! keys are errors naming the key. The `instance.` section additionally
//! accepts arbitrary numeric parameters (`instance.alpha`, `instance.m`,
//! ...) which are forwarded to the instance registry.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pso_core::instances::InstanceParams;
use pso_core::surface::{Activation, NetworkSpec, OutputTransform, Topology, DEFAULT_LEAKY_SLOPE};
use pso_core::train::TrainConfig;

/// Parsed and validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelCfg,
    pub instance: InstanceCfg,
    pub data: DataCfg,
    pub down: DownCfg,
    pub train: TrainConfig<f64>,
    pub eval: EvalCfg,
    pub output: OutputCfg,
    /// FNV-1a hash of the canonical config text; stamped into checkpoints.
    pub hash: u64,
}

#[derive(Debug, Clone)]
pub struct ModelCfg {
    pub spec_template: NetworkSpec<f64>,
    pub zero_last_layer: bool,
}

#[derive(Debug, Clone)]
pub struct InstanceCfg {
    pub name: String,
    pub params: InstanceParams,
    pub wrap_bounded: bool,
    pub cut_up_at: Option<f64>,
    pub cut_down_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataKind {
    Columns,
    TransformedColumns,
}

#[derive(Debug, Clone)]
pub struct DataCfg {
    pub distribution: DataKind,
    pub dim: usize,
    pub dataset_size: usize,
    pub dataset_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DownCfg {
    UniformFit,
    GaussianFit,
    Explicit { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct EvalCfg {
    pub test_size: usize,
    pub eval_period: u64,
}

#[derive(Debug, Clone)]
pub struct OutputCfg {
    pub dir: PathBuf,
    pub csv: String,
    pub checkpoints: bool,
}

/// FNV-1a 64-bit hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Keys {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl Keys {
    fn take(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).cloned()
    }

    fn req(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| anyhow!("missing required config key `{key}`"))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow!("config key `{key}`: {e}")),
        }
    }

    fn parse_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn parse_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => bail!("config key `{key}`: expected true/false, got `{v}`"),
        }
    }

    fn parse_vec(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| anyhow!("config key `{key}`: {e}"))
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }
}

/// Parses config text; `path` only flavors error messages.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            anyhow!(
                "{}:{}: expected `key = value`, got `{line}`",
                path.display(),
                lineno + 1
            )
        })?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            bail!("{}: duplicate config key `{key}`", path.display());
        }
    }
    let hash = {
        // canonical text: sorted key=value lines
        let canon: String = map
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        fnv1a(canon.as_bytes())
    };
    let mut keys = Keys {
        map,
        used: Default::default(),
    };

    // -- model ------------------------------------------------------------
    let topology = match keys.req("model.topology")?.as_str() {
        "fully_connected" => Topology::FullyConnected {
            width: keys
                .parse::<usize>("model.width")?
                .ok_or_else(|| anyhow!("model.width is required for fully_connected"))?,
        },
        "block_diagonal" => {
            keys.take("model.width"); // ignored for bd, but not an unknown key
            Topology::BlockDiagonal {
                num_blocks: keys
                    .parse::<usize>("model.num_blocks")?
                    .ok_or_else(|| anyhow!("model.num_blocks is required for block_diagonal"))?,
                block_size: keys
                    .parse::<usize>("model.block_size")?
                    .ok_or_else(|| anyhow!("model.block_size is required for block_diagonal"))?,
            }
        }
        other => bail!("config key `model.topology`: unknown topology `{other}`"),
    };
    let activation = match keys.parse_or("model.activation", "leaky_relu".to_string())?.as_str() {
        "relu" => Activation::Relu,
        "leaky_relu" => Activation::LeakyRelu {
            slope: keys.parse_or("model.leaky_slope", DEFAULT_LEAKY_SLOPE)?,
        },
        "tanh" => Activation::Tanh,
        other => bail!("config key `model.activation`: unknown activation `{other}`"),
    };
    let output_transform = match keys
        .parse_or("model.output_transform", "identity".to_string())?
        .as_str()
    {
        "identity" => OutputTransform::Identity,
        "bounded" => OutputTransform::Bounded {
            h_min: keys
                .parse::<f64>("model.h_min")?
                .ok_or_else(|| anyhow!("model.h_min is required for bounded output"))?,
            h_max: keys
                .parse::<f64>("model.h_max")?
                .ok_or_else(|| anyhow!("model.h_max is required for bounded output"))?,
        },
        other => bail!("config key `model.output_transform`: unknown transform `{other}`"),
    };
    let data_dim = keys
        .parse::<usize>("data.dim")?
        .ok_or_else(|| anyhow!("missing required config key `data.dim`"))?;
    let model = ModelCfg {
        spec_template: NetworkSpec {
            input_dim: data_dim,
            topology,
            num_layers: keys
                .parse::<usize>("model.num_layers")?
                .ok_or_else(|| anyhow!("missing required config key `model.num_layers`"))?,
            activation,
            shortcuts: keys.parse_bool("model.shortcuts", false)?,
            output_transform,
        },
        zero_last_layer: keys.parse_bool("model.zero_last_layer", true)?,
    };
    model
        .spec_template
        .validate()
        .map_err(|e| anyhow!("model section: {e}"))?;

    // -- instance -----------------------------------------------------------
    let name = keys.req("instance.name")?;
    if !pso_core::instances::registry_names().contains(&name.as_str()) {
        bail!(
            "config key `instance.name`: unknown instance `{name}` (known: {})",
            pso_core::instances::registry_names().join(", ")
        );
    }
    let wrap_bounded = keys.parse_bool("instance.wrap_bounded", false)?;
    let cut_up_at = keys.parse::<f64>("instance.cut_up_at")?;
    let cut_down_at = keys.parse::<f64>("instance.cut_down_at")?;
    // remaining instance.* keys are numeric registry parameters
    let mut params = InstanceParams::new();
    let param_keys: Vec<String> = keys
        .map
        .keys()
        .filter(|k| k.starts_with("instance.") && !keys.used.contains(*k))
        .cloned()
        .collect();
    for k in param_keys {
        let v = keys.req(&k)?;
        let v: f64 = v
            .parse()
            .map_err(|e| anyhow!("config key `{k}`: expected a real number: {e}"))?;
        if k == "instance.alpha" && v <= 0.0 {
            bail!("config key `instance.alpha`: must be positive, got {v}");
        }
        params = params.set(k.trim_start_matches("instance."), v);
    }
    let instance = InstanceCfg {
        name,
        params,
        wrap_bounded,
        cut_up_at,
        cut_down_at,
    };

    // -- data ---------------------------------------------------------------
    let distribution = match keys.req("data.distribution")?.as_str() {
        "columns" => DataKind::Columns,
        "transformed_columns" => {
            if data_dim != 20 {
                bail!("config key `data.dim`: transformed_columns is 20-dimensional");
            }
            DataKind::TransformedColumns
        }
        other => bail!("config key `data.distribution`: unknown distribution `{other}`"),
    };
    let data = DataCfg {
        distribution,
        dim: data_dim,
        dataset_size: keys.parse_or("data.dataset_size", 100_000usize)?,
        dataset_path: keys.take("data.dataset_path").map(PathBuf::from),
    };

    // -- down ---------------------------------------------------------------
    let down = match keys.parse_or("down.kind", "uniform_fit".to_string())?.as_str() {
        "uniform_fit" => DownCfg::UniformFit,
        "gaussian_fit" => DownCfg::GaussianFit,
        "explicit" => {
            let lo = keys
                .parse_vec("down.lo")?
                .ok_or_else(|| anyhow!("down.lo is required for explicit down density"))?;
            let hi = keys
                .parse_vec("down.hi")?
                .ok_or_else(|| anyhow!("down.hi is required for explicit down density"))?;
            DownCfg::Explicit { lo, hi }
        }
        other => bail!("config key `down.kind`: unknown kind `{other}`"),
    };

    // -- eval (metric cadence lives here, feeding the train config) ---------
    let eval = EvalCfg {
        test_size: keys.parse_or("eval.test_size", 10_000usize)?,
        eval_period: keys.parse_or("eval.eval_period", 1_000u64)?,
    };

    // -- train --------------------------------------------------------------
    let defaults = TrainConfig::<f64>::default();
    let train = TrainConfig {
        iterations: keys.parse_or("train.iterations", defaults.iterations)?,
        batch_up: keys.parse_or("train.batch_up", defaults.batch_up)?,
        batch_down: keys.parse_or("train.batch_down", defaults.batch_down)?,
        lr0: keys.parse_or("train.lr0", defaults.lr0)?,
        warm_iters: keys.parse_or("train.warm_iters", defaults.warm_iters)?,
        lr_min: keys.parse_or("train.lr_min", defaults.lr_min)?,
        adam_beta1: keys.parse_or("train.adam_beta1", defaults.adam_beta1)?,
        adam_beta2: keys.parse_or("train.adam_beta2", defaults.adam_beta2)?,
        adam_eps: keys.parse_or("train.adam_eps", defaults.adam_eps)?,
        seed: keys.parse_or("train.seed", 0u64)?,
        augment_sigma: keys.parse_or("train.augment_sigma", 0.0f64)?,
        eval_period: eval.eval_period,
        checkpoint_period: keys.parse_or("train.checkpoint_period", 0u64)?,
        grad_clip: keys.parse::<f64>("train.grad_clip")?,
    };
    train.validate().map_err(|e| anyhow!("train section: {e}"))?;

    // -- output ---------------------------------------------------------------
    let output = OutputCfg {
        dir: PathBuf::from(keys.parse_or("output.dir", "out".to_string())?),
        csv: keys.parse_or("output.csv", "metrics.csv".to_string())?,
        checkpoints: keys.parse_bool("output.checkpoints", true)?,
    };

    // every remaining key is unknown
    let unknown: Vec<String> = keys
        .map
        .keys()
        .filter(|k| !keys.used.contains(*k))
        .cloned()
        .collect();
    if let Some(k) = unknown.first() {
        bail!("unknown config key `{k}`");
    }

    Ok(ExperimentConfig {
        model,
        instance,
        data,
        down,
        train,
        eval,
        output,
        hash,
    })
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text, path)
}
