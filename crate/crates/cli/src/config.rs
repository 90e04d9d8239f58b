//! Experiment configuration: a TOML file with a world, a guidance block,
//! seeds and run kinds. Everything is validated before any run starts.

use std::fmt;
use std::path::{Path, PathBuf};

use echo_core::{EchoError, GuidanceConfig, RunKind, World, WorldSpec};
use serde::{Deserialize, Serialize};

/// Percentiles `cmd_calibrate` turns into `delta1` / `delta2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    pub delta1_percentile: f64,
    pub delta2_percentile: f64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            delta1_percentile: 0.75,
            delta2_percentile: 0.5,
        }
    }
}

fn all_kinds() -> Vec<RunKind> {
    RunKind::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default = "all_kinds")]
    pub kinds: Vec<RunKind>,
    /// Zero all noise streams (initialization, student and teacher).
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Directory for cached reference bundles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_cache: Option<PathBuf>,
    #[serde(default)]
    pub calibration: CalibrationSpec,
    pub world: WorldSpec,
    #[serde(default)]
    pub guidance: GuidanceConfig,
}

/// A configuration problem, located by its dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn at(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

fn locate(prefix: &str, e: EchoError) -> ConfigError {
    match e {
        EchoError::InvalidParameter { name, reason } => at(format!("{prefix}.{name}"), reason),
        other => at(prefix, other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            // toml's own message carries line and column context
            let message = e.inner().message().to_string();
            at(path, message)
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| at("", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Checks every module precondition and builds the world. Returns the
    /// world and any non-fatal warnings.
    pub fn validate(&self) -> Result<(World, Vec<String>), ConfigError> {
        if self.seeds.is_empty() {
            return Err(at("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(at("seeds", "seeds must be distinct"));
        }
        if self.kinds.is_empty() {
            return Err(at("kinds", "at least one run kind is required"));
        }
        let mut kinds = self.kinds.clone();
        kinds.sort();
        if kinds.windows(2).any(|w| w[0] == w[1]) {
            return Err(at("kinds", "run kinds must be distinct"));
        }
        let c = &self.calibration;
        for (name, p) in [
            ("calibration.delta1_percentile", c.delta1_percentile),
            ("calibration.delta2_percentile", c.delta2_percentile),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(at(name, format!("{p} is outside [0, 1]")));
            }
        }
        if c.delta2_percentile > c.delta1_percentile {
            return Err(at("calibration.delta2_percentile", "must not exceed delta1_percentile"));
        }
        let warnings = self.guidance.validate().map_err(|e| locate("guidance", e))?;
        let world = World::build(&self.world).map_err(|e| locate("world", e))?;
        world.t_alpha(&self.guidance).map_err(|e| locate("guidance", e))?;
        world.student().map_err(|e| locate("world", e))?;
        Ok((world, warnings))
    }
}

/// Parses `--seeds`: a comma list (`1,2,5`), a half-open range (`0..20`),
/// or a mix (`0..3,10`).
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| format!("bad range start in `{part}`"))?;
            let b: u64 = b.trim().parse().map_err(|_| format!("bad range end in `{part}`"))?;
            if b <= a {
                return Err(format!("empty range `{part}`"));
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| format!("bad seed `{part}`"))?);
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        let cfg = ExperimentConfig {
            seeds: vec![0, 1],
            kinds: vec![RunKind::Echo],
            deterministic: false,
            out: None,
            bundle_cache: None,
            calibration: CalibrationSpec::default(),
            world: WorldSpec::benchmark(),
            guidance: GuidanceConfig::default(),
        };
        cfg.to_toml()
    }

    #[test]
    fn toml_roundtrip() {
        let text = minimal();
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.to_toml(), text);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_field_is_located() {
        let text = minimal().replace("[guidance]\n", "[guidance]\nlamda = 0.3\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.path.starts_with("guidance"), "{err}");
        assert!(err.message.contains("lamda"), "{err}");
    }

    #[test]
    fn wrong_type_is_located() {
        let text = minimal().replace("reference_seed = 2024", "reference_seed = \"x\"");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert_eq!(err.path, "world.reference_seed");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let mut cfg = ExperimentConfig::parse(&minimal()).unwrap();
        cfg.guidance.lambda = 1.5;
        assert_eq!(cfg.validate().unwrap_err().path, "guidance.lambda");

        let mut cfg = ExperimentConfig::parse(&minimal()).unwrap();
        cfg.guidance.t_alpha = Some(409);
        assert_eq!(cfg.validate().unwrap_err().path, "guidance.t_alpha");

        let mut cfg = ExperimentConfig::parse(&minimal()).unwrap();
        cfg.world.schedule.student_steps = 7;
        assert!(cfg.validate().unwrap_err().path.starts_with("world."));

        let mut cfg = ExperimentConfig::parse(&minimal()).unwrap();
        cfg.seeds = vec![1, 1];
        assert_eq!(cfg.validate().unwrap_err().path, "seeds");

        let mut cfg = ExperimentConfig::parse(&minimal()).unwrap();
        cfg.calibration.delta2_percentile = 0.9;
        assert_eq!(cfg.validate().unwrap_err().path, "calibration.delta2_percentile");
    }

    #[test]
    fn infinite_thresholds_in_toml() {
        let text = minimal().replace("delta1 = 0.0", "delta1 = \"inf\"");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.guidance.delta1, f64::INFINITY);
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3,7").unwrap(), vec![0, 1, 2, 7]);
        assert_eq!(parse_seeds("5").unwrap(), vec![5]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("a").is_err());
        assert!(parse_seeds("").is_err());
    }
}
