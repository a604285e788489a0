//! Run configuration: a JSON file, overridden field by field by flags.

use std::path::{Path, PathBuf};

use clap::Args;
use relprune::attrib::IGConfig;
use relprune::graph::ComponentKind;
use relprune::lrp::CompositeConfig;
use relprune::prune::Attributor;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_PRESET: &str = "eps-all";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    /// Pool the reference samples are drawn from.
    pub data: Option<PathBuf>,
    /// Evaluation set; defaults to `data`.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    #[serde(default)]
    pub method: Option<String>,
    /// Inline JSON composite.
    #[serde(default)]
    pub composite: Option<serde_json::Value>,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub n_ref: Option<usize>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub ig_steps: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub target: Option<String>,
}

/// Flags shared by `prune`, `search` and `report`.
#[derive(Args, Clone, Debug, Default)]
pub struct RunFlags {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// NNIX model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// DSET file the reference samples are drawn from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// DSET evaluation file (default: --data).
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Comma-separated class subset, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    /// Attribution method: lrp, ig or random.
    #[arg(long)]
    pub method: Option<String>,
    /// Composite as inline JSON or a path to a JSON file.
    #[arg(long)]
    pub composite: Option<String>,
    /// Named composite preset.
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of pruning steps m.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Reference samples per class.
    #[arg(long)]
    pub n_ref: Option<usize>,
    /// Seeds as a list (`0,3,7`) or a half-open range (`0..20`).
    #[arg(long)]
    pub seeds: Option<String>,
    /// Seed every per-seed stream is derived from (default: 0).
    #[arg(long)]
    pub master_seed: Option<u64>,
    /// Integration steps for the ig method.
    #[arg(long)]
    pub ig_steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Component kind: filters, neurons or heads.
    #[arg(long)]
    pub target: Option<String>,
}

pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::User(format!("cannot parse seeds `{text}` (use `0,1,2` or `0..20`)"));
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..b).collect()
    } else {
        text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn read_json_arg(arg: &str) -> Result<serde_json::Value, CliError> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).map_err(|e| CliError::User(format!("cannot read composite `{arg}`: {e}")))?
    };
    serde_json::from_str(&text).map_err(|e| CliError::User(format!("composite is not valid JSON: {e}")))
}

impl RunConfig {
    pub fn load(flags: &RunFlags) -> Result<Self, CliError> {
        let mut cfg = match &flags.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::User(format!("cannot read config `{}`: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::User(format!("invalid config `{}`: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $(if let Some(v) = &flags.$f { cfg.$f = Some(v.clone()); })* };
        }
        over!(model, data, eval, classes, method, preset, steps, n_ref, master_seed, ig_steps, out, target);
        if let Some(s) = &flags.seeds {
            cfg.seeds = Some(parse_seeds(s)?);
        }
        if let Some(c) = &flags.composite {
            cfg.composite = Some(read_json_arg(c)?);
        }
        if cfg.composite.is_some() && cfg.preset.is_some() {
            return Err(CliError::User("give either a composite or a preset, not both".into()));
        }
        Ok(cfg)
    }

    pub fn model(&self) -> Result<&Path, CliError> {
        let p = self.model.as_deref().ok_or_else(|| CliError::User("no model given (--model)".into()))?;
        if !p.exists() {
            return Err(CliError::User(format!("model not found: {}", p.display())));
        }
        Ok(p)
    }

    pub fn data(&self) -> Result<&Path, CliError> {
        let p = self.data.as_deref().ok_or_else(|| CliError::User("no dataset given (--data)".into()))?;
        if !p.exists() {
            return Err(CliError::User(format!("dataset not found: {}", p.display())));
        }
        Ok(p)
    }

    pub fn eval(&self) -> Result<&Path, CliError> {
        match &self.eval {
            Some(p) if !p.exists() => Err(CliError::User(format!("evaluation dataset not found: {}", p.display()))),
            Some(p) => Ok(p),
            None => self.data(),
        }
    }

    pub fn out(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::User("no output directory given (--out)".into()))
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or(20)
    }

    pub fn n_ref(&self) -> usize {
        self.n_ref.unwrap_or(10)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![0])
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed.unwrap_or(0)
    }

    pub fn target(&self) -> Result<Option<ComponentKind>, CliError> {
        self.target.as_deref().map(|t| t.parse().map_err(CliError::from)).transpose()
    }

    /// Composite from inline JSON, a preset, or the default preset.
    pub fn composite(&self) -> Result<CompositeConfig, CliError> {
        match (&self.composite, &self.preset) {
            (Some(v), _) => Ok(CompositeConfig::from_json(&v.to_string())?),
            (None, Some(p)) => Ok(CompositeConfig::preset(p)?),
            (None, None) => Ok(CompositeConfig::preset(DEFAULT_PRESET)?),
        }
    }

    pub fn attributor(&self) -> Result<Attributor, CliError> {
        let magnitude = self.composite()?.magnitude;
        match self.method.as_deref().unwrap_or("lrp") {
            "lrp" => Ok(Attributor::Lrp(self.composite()?)),
            "ig" => Ok(Attributor::Ig { config: IGConfig::with_steps(self.ig_steps.unwrap_or(20)), magnitude }),
            "random" => Ok(Attributor::Random { seed: self.master_seed() }),
            other => Err(CliError::User(format!("unknown method `{other}` (expected lrp, ig or random)"))),
        }
    }
}
