//! Composite rule assignment: one rule per layer group, softmax handling and
//! the magnitude flag, with its JSON exchange format and named presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::rules::{Rule, RuleKind, SoftmaxHandler, DEFAULT_EPSILON, DEFAULT_GAMMA};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerGroup {
    #[serde(rename = "LLL")]
    Lll,
    #[serde(rename = "MLL")]
    Mll,
    #[serde(rename = "HLL")]
    Hll,
    #[serde(rename = "FCL")]
    Fcl,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 4] = [LayerGroup::Lll, LayerGroup::Mll, LayerGroup::Hll, LayerGroup::Fcl];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerGroup::Lll => "LLL",
            LayerGroup::Mll => "MLL",
            LayerGroup::Hll => "HLL",
            LayerGroup::Fcl => "FCL",
        }
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Constants shared by rules named without explicit parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConstants {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_alpha() -> f64 {
    2.0
}
fn default_beta() -> f64 {
    -1.0
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl Default for RuleConstants {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, alpha: 2.0, beta: -1.0, gamma: DEFAULT_GAMMA }
    }
}

/// Rule names accepted in composite files and on the command line.
pub const RULE_NAMES: [&str; 6] = ["basic", "epsilon", "alpha_beta", "ab21", "z_plus", "gamma"];

impl RuleConstants {
    /// Build a rule from its name, taking parameters from these constants.
    pub fn rule(&self, name: &str) -> Result<Rule> {
        match name {
            "basic" => Ok(Rule::basic()),
            "epsilon" | "eps" => Rule::epsilon(self.epsilon),
            "alpha_beta" => Rule::alpha_beta(self.alpha, self.beta),
            "ab21" => Ok(Rule::ab21()),
            "z_plus" | "zplus" => Ok(Rule::z_plus()),
            "gamma" => Rule::gamma(self.gamma),
            other => Err(invalid(format!("unknown rule `{other}`"))),
        }
    }
}

impl FromStr for SoftmaxHandler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cp_lrp" => Ok(SoftmaxHandler::CpLrp),
            "attnlrp_dtd" => Ok(SoftmaxHandler::AttnlrpDtd),
            "attnlrp_zplus" => Ok(SoftmaxHandler::AttnlrpZplus),
            other => Err(invalid(format!("unknown softmax handler `{other}`"))),
        }
    }
}

/// The attribution hyperparameters: a rule per layer group, the softmax
/// handler (attention graphs only) and whether component scores use absolute
/// relevance.
///
/// `projection` and `conv` optionally override the group rule for attention
/// Q/K/V/O projections and convolutions respectively.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CompositeJson", into = "CompositeJson")]
pub struct CompositeConfig {
    pub groups: [Rule; 4],
    pub softmax: Option<SoftmaxHandler>,
    pub magnitude: bool,
    pub projection: Option<Rule>,
    pub conv: Option<Rule>,
}

impl CompositeConfig {
    pub fn new(groups: [Rule; 4], softmax: Option<SoftmaxHandler>, magnitude: bool) -> Self {
        Self { groups, softmax, magnitude, projection: None, conv: None }
    }

    pub fn uniform(rule: Rule, softmax: Option<SoftmaxHandler>, magnitude: bool) -> Self {
        Self::new([rule; 4], softmax, magnitude)
    }

    pub fn rule(&self, group: LayerGroup) -> &Rule {
        &self.groups[group.index()]
    }

    /// Drop the softmax handler on graphs without attention, and default it to
    /// CP-LRP where one is needed but missing.
    pub fn fit_to(mut self, graph: &Graph) -> Self {
        if graph.contains_softmax() {
            self.softmax.get_or_insert(SoftmaxHandler::CpLrp);
        } else {
            self.softmax = None;
        }
        self
    }

    /// A handler must be set exactly when the graph contains a softmax.
    pub fn validate_for(&self, graph: &Graph) -> Result<()> {
        match (graph.contains_softmax(), self.softmax) {
            (true, None) => Err(invalid("graph contains softmax attention but no softmax handler is set")),
            (false, Some(h)) => Err(invalid(format!("softmax handler `{h}` set for a graph without softmax"))),
            _ => Ok(()),
        }
    }

    /// Compact identifier, e.g. `epsilon/epsilon/z_plus/ab21/attnlrp_dtd/mag`.
    pub fn label(&self) -> String {
        let mut parts: Vec<String> = self.groups.iter().map(rule_label).collect();
        if let Some(h) = self.softmax {
            parts.push(h.to_string());
        }
        if let Some(p) = &self.projection {
            parts.push(format!("proj:{}", rule_label(p)));
        }
        if let Some(c) = &self.conv {
            parts.push(format!("conv:{}", rule_label(c)));
        }
        parts.push(if self.magnitude { "mag" } else { "signed" }.into());
        parts.join("/")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("composite serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Look up a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        let eps = Rule::eps();
        let zp = Rule::z_plus();
        let gamma = Rule::gamma(DEFAULT_GAMMA)?;
        let cfg = match name {
            "yeom" => Self::uniform(zp, Some(SoftmaxHandler::AttnlrpZplus), false),
            "faithful-cnn" => Self::new([eps, eps, eps, zp], Some(SoftmaxHandler::AttnlrpZplus), false),
            "faithful-vit" => {
                let mut c = Self::uniform(Rule::gamma(0.05)?, Some(SoftmaxHandler::AttnlrpZplus), false);
                c.conv = Some(gamma);
                c.projection = Some(eps);
                c
            }
            "eps-all" | "ours-cnn" => Self::uniform(eps, Some(SoftmaxHandler::AttnlrpDtd), true),
            "ours-vit-heads" => Self::new([eps, eps, zp, Rule::ab21()], Some(SoftmaxHandler::AttnlrpDtd), true),
            "ours-vit-linear" => Self::new([eps, Rule::ab21(), gamma, gamma], Some(SoftmaxHandler::CpLrp), true),
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        Ok(cfg)
    }
}

/// Names accepted by [`CompositeConfig::preset`].
pub const PRESET_NAMES: [&str; 7] =
    ["yeom", "faithful-cnn", "faithful-vit", "eps-all", "ours-cnn", "ours-vit-heads", "ours-vit-linear"];

fn rule_label(rule: &Rule) -> String {
    let defaults = RuleConstants::default();
    let plain = defaults.rule(rule.name()).ok();
    if plain.as_ref() == Some(rule) {
        rule.name().to_string()
    } else {
        match rule.kind() {
            RuleKind::Epsilon => format!("epsilon({})", rule.epsilon_value()),
            RuleKind::Gamma => format!("gamma({})", rule.gamma_value()),
            RuleKind::AlphaBeta => format!("alpha_beta({};{})", rule.alpha(), rule.beta()),
            _ => rule.name().to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RuleSpec {
    Name(String),
    Full {
        rule: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epsilon: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
}

impl RuleSpec {
    fn resolve(&self, constants: &RuleConstants) -> Result<Rule> {
        match self {
            RuleSpec::Name(name) => constants.rule(name),
            RuleSpec::Full { rule, epsilon, alpha, beta, gamma } => {
                let local = RuleConstants {
                    epsilon: epsilon.unwrap_or(constants.epsilon),
                    alpha: alpha.unwrap_or(constants.alpha),
                    beta: beta.unwrap_or(constants.beta),
                    gamma: gamma.unwrap_or(constants.gamma),
                };
                local.rule(rule)
            }
        }
    }

    fn of(rule: &Rule) -> Self {
        let defaults = RuleConstants::default();
        if defaults.rule(rule.name()).ok().as_ref() == Some(rule) {
            return RuleSpec::Name(rule.name().to_string());
        }
        let (mut epsilon, mut alpha, mut beta, mut gamma) = (None, None, None, None);
        match rule.kind() {
            RuleKind::Epsilon => epsilon = Some(rule.epsilon_value()),
            RuleKind::AlphaBeta => {
                alpha = Some(rule.alpha());
                beta = Some(rule.beta());
            }
            RuleKind::Gamma => gamma = Some(rule.gamma_value()),
            _ => {}
        }
        RuleSpec::Full { rule: rule.name().to_string(), epsilon, alpha, beta, gamma }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompositeJson {
    #[serde(rename = "LLL")]
    lll: RuleSpec,
    #[serde(rename = "MLL")]
    mll: RuleSpec,
    #[serde(rename = "HLL")]
    hll: RuleSpec,
    #[serde(rename = "FCL")]
    fcl: RuleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    softmax: Option<String>,
    #[serde(default)]
    magnitude: bool,
    #[serde(default)]
    constants: RuleConstants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    projection: Option<RuleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conv: Option<RuleSpec>,
}

impl TryFrom<CompositeJson> for CompositeConfig {
    type Error = Error;

    fn try_from(j: CompositeJson) -> Result<Self> {
        let c = &j.constants;
        Ok(CompositeConfig {
            groups: [j.lll.resolve(c)?, j.mll.resolve(c)?, j.hll.resolve(c)?, j.fcl.resolve(c)?],
            softmax: j.softmax.as_deref().map(str::parse).transpose()?,
            magnitude: j.magnitude,
            projection: j.projection.as_ref().map(|r| r.resolve(c)).transpose()?,
            conv: j.conv.as_ref().map(|r| r.resolve(c)).transpose()?,
        })
    }
}

impl From<CompositeConfig> for CompositeJson {
    fn from(c: CompositeConfig) -> Self {
        CompositeJson {
            lll: RuleSpec::of(&c.groups[0]),
            mll: RuleSpec::of(&c.groups[1]),
            hll: RuleSpec::of(&c.groups[2]),
            fcl: RuleSpec::of(&c.groups[3]),
            softmax: c.softmax.map(|h| h.as_str().to_string()),
            magnitude: c.magnitude,
            constants: RuleConstants::default(),
            projection: c.projection.as_ref().map(RuleSpec::of),
            conv: c.conv.as_ref().map(RuleSpec::of),
        }
    }
}
