//! Declarative run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use microrecon::descriptors::{Connectivity, CorrelationRule};
use microrecon::network::{DEFAULT_M_CAP, DEFAULT_WIDTH};
use microrecon::reconstructor::ReconConfig;
use microrecon::sa::AnnealConfig;
use microrecon::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub input: InputConfig,
    pub design: DesignConfig,
    pub train: TrainConfig,
    pub reconstruct: ReconConfig,
    pub evaluate: EvaluateConfig,
    pub sa: AnnealConfig,
    /// Output directory; `out` when absent.
    pub output: Option<PathBuf>,
}

/// One isotropic reference, or three orientation-labelled ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub reference: Option<PathBuf>,
    pub references: Option<OrientedPaths>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrientedPaths {
    pub xy: PathBuf,
    pub xz: PathBuf,
    pub yz: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    pub n: usize,
    pub m_cap: usize,
    /// Explicit depth; skips the design rule.
    pub m: Option<usize>,
    /// Largest S₂ lag analysed; half the smallest reference side when absent.
    pub max_lag: Option<usize>,
    pub correlation: CorrelationRule,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self { n: DEFAULT_WIDTH, m_cap: DEFAULT_M_CAP, m: None, max_lag: None, correlation: CorrelationRule::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalDescriptor {
    S2,
    Lineal,
    Cluster,
    Lpd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub descriptors: Vec<EvalDescriptor>,
    /// Largest lag; clipped to what every grid supports.
    pub max_lag: usize,
    pub connectivity: Connectivity,
    pub lpd_window: usize,
    pub lpd_bin_width: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            descriptors: vec![EvalDescriptor::S2, EvalDescriptor::Lineal, EvalDescriptor::Cluster, EvalDescriptor::Lpd],
            max_lag: 20,
            connectivity: Connectivity::Face,
            lpd_window: 8,
            lpd_bin_width: 0.02,
        }
    }
}

impl RunConfig {
    /// Parse and validate; every failure is a config error.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Semantic checks that need no input data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.input.reference.is_some() && self.input.references.is_some() {
            return bad("input: give either `reference` or `references`, not both".into());
        }
        if self.design.n == 0 || self.design.m_cap == 0 || self.design.m == Some(0) {
            return bad("design: n, m_cap and m must be at least 1".into());
        }
        let t = &self.train;
        if t.iterations == 0 || t.batch_size == 0 {
            return bad("train: iterations and batch_size must be at least 1".into());
        }
        t.adam.validate().map_err(|e| CliError::Config(format!("train.adam: {e}")))?;
        let r = &self.reconstruct;
        if r.dims.contains(&0) || r.sub_block.is_some_and(|b| b.contains(&0)) {
            return bad("reconstruct: dims and sub_block must be positive".into());
        }
        if r.porosity.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
            return bad("reconstruct: porosity must lie in [0, 1]".into());
        }
        let e = &self.evaluate;
        if e.lpd_window == 0 || !(e.lpd_bin_width > 0.0 && e.lpd_bin_width <= 1.0) {
            return bad("evaluate: lpd_window must be positive and lpd_bin_width in (0, 1]".into());
        }
        let s = &self.sa;
        if !(s.cooling > 0.0 && s.cooling < 1.0) {
            return bad("sa: cooling must lie in (0, 1)".into());
        }
        if s.initial_temperature.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
            return bad("sa: initial_temperature must be positive".into());
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Apply `--seed` to every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.reconstruct.seed = seed;
        self.sa.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [r#"{"bogus": 1}"#, r#"{"train": {"iters": 3}}"#, r#"{"train": {"adam": {"alpha": 1}}}"#, r#"{"sa": {"t0": 1}}"#] {
            assert!(matches!(RunConfig::from_json(doc), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn semantic_checks() {
        for doc in [
            r#"{"train": {"iterations": 0}}"#,
            r#"{"reconstruct": {"dims": [0, 4, 4]}}"#,
            r#"{"sa": {"cooling": 1.5}}"#,
            r#"{"input": {"reference": "a.pgm", "references": {"xy": "a", "xz": "b", "yz": "c"}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(CliError::Config(_))), "{doc}");
        }
    }
}
