//! `key = value` run configuration.

use std::fmt::Write as _;

use commsynth::model::{ConvProblem, MachineSpec, ModelError};
use commsynth::optimizer::{CapacityMode, PermutationScope};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{field}: {reason}")]
    Validation { field: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    pub problem: ConvProblem,
    pub p: u64,
    pub m: u64,
    /// Needed only for simulation.
    pub m_d: Option<u64>,
    pub scope: PermutationScope,
    /// Also report the Ker term with `n_c` and the Case 1 partition without `1/p`.
    pub strict: bool,
    pub lower_bound: bool,
    pub element_width: u64,
    pub seed: u64,
    pub oracle_max_points: u64,
}

const PROBLEM_KEYS: [&str; 9] = ["Nb", "Nk", "Nc", "Nh", "Nw", "Nr", "Ns", "sigma_w", "sigma_h"];
const MACHINE_KEYS: [&str; 6] = ["P", "M", "MD", "element_width", "seed", "oracle_max_points"];

pub fn parse_scope(value: &str) -> Option<PermutationScope> {
    match value {
        "c-innermost" => Some(PermutationScope::CInnermost),
        "all" => Some(PermutationScope::All),
        _ => None,
    }
}

pub fn scope_name(scope: PermutationScope) -> &'static str {
    match scope {
        PermutationScope::CInnermost => "c-innermost",
        PermutationScope::All => "all",
    }
}

fn validation(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Validation { field: field.to_string(), reason: reason.into() }
}

fn model_error(e: ModelError) -> ConfigError {
    match e {
        ModelError::InvalidExtent { field, value } => {
            let key = match field {
                "n_b" => "Nb",
                "n_k" => "Nk",
                "n_c" => "Nc",
                "n_h" => "Nh",
                "n_w" => "Nw",
                "n_r" => "Nr",
                "n_s" => "Ns",
                other => other,
            };
            validation(key, format!("must be at least 1, got {value}"))
        }
        other => validation("machine", other.to_string()),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut nums: std::collections::BTreeMap<&str, u64> = Default::default();
        let mut scope = PermutationScope::default();
        let mut flags = (false, false);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError::Parse { line, reason: format!("expected key = value, got {content:?}") })?;
            let bad = |reason: String| ConfigError::Parse { line, reason };
            match key {
                "scope" => scope = parse_scope(value).ok_or_else(|| bad(format!("unknown scope {value:?}")))?,
                "strict" | "lower_bound" => {
                    let v = value.parse::<bool>().map_err(|_| bad(format!("{key} must be true or false")))?;
                    if key == "strict" {
                        flags.0 = v;
                    } else {
                        flags.1 = v;
                    }
                }
                k if PROBLEM_KEYS.contains(&k) || MACHINE_KEYS.contains(&k) => {
                    let v = value.parse::<u64>().map_err(|e| bad(format!("{key}: {e}")))?;
                    if nums.insert(k, v).is_some() {
                        return Err(bad(format!("duplicate key {key}")));
                    }
                }
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        let required = |k: &str| nums.get(k).copied().ok_or_else(|| validation(k, "required"));
        let with_default = |k: &str, d: u64| nums.get(k).copied().unwrap_or(d);
        let problem = ConvProblem::new(
            required("Nb")?,
            required("Nk")?,
            required("Nc")?,
            required("Nh")?,
            required("Nw")?,
            required("Nr")?,
            required("Ns")?,
            with_default("sigma_w", 1),
            with_default("sigma_h", 1),
        )
        .map_err(model_error)?;
        let cfg = RunConfig {
            problem,
            p: required("P")?,
            m: required("M")?,
            m_d: nums.get("MD").copied(),
            scope,
            strict: flags.0,
            lower_bound: flags.1,
            element_width: with_default("element_width", 4),
            seed: with_default("seed", 42),
            oracle_max_points: with_default("oracle_max_points", 10_000_000),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.p == 0 {
            return Err(validation("P", "must be at least 1"));
        }
        if self.element_width == 0 {
            return Err(validation("element_width", "must be at least 1"));
        }
        if let Some(md) = self.m_d {
            if md < self.m {
                return Err(validation("MD", format!("must be at least M = {}", self.m)));
            }
        }
        let machine = MachineSpec::new(self.p, self.m, self.m_d.unwrap_or(self.m)).map_err(model_error)?;
        machine.validate_for(&self.problem).map_err(|e| validation("M", e.to_string()))
    }

    /// Machine for planning; without `MD` the distributed capacity is unbounded.
    pub fn machine(&self) -> MachineSpec {
        MachineSpec { p: self.p, m: self.m, m_d: self.m_d.unwrap_or(u64::MAX) }
    }

    pub fn capacity_mode(&self) -> CapacityMode {
        if self.lower_bound {
            CapacityMode::LowerBound
        } else {
            CapacityMode::Effective
        }
    }

    /// Text that [`RunConfig::parse`] maps back to `self`.
    pub fn render(&self) -> String {
        let p = &self.problem;
        let mut s = String::new();
        for (k, v) in PROBLEM_KEYS
            .iter()
            .zip([p.n_b, p.n_k, p.n_c, p.n_h, p.n_w, p.n_r, p.n_s, p.sigma_w, p.sigma_h])
        {
            writeln!(s, "{k} = {v}").unwrap();
        }
        writeln!(s, "P = {}", self.p).unwrap();
        writeln!(s, "M = {}", self.m).unwrap();
        if let Some(md) = self.m_d {
            writeln!(s, "MD = {md}").unwrap();
        }
        writeln!(s, "scope = {}", scope_name(self.scope)).unwrap();
        writeln!(s, "strict = {}", self.strict).unwrap();
        writeln!(s, "lower_bound = {}", self.lower_bound).unwrap();
        writeln!(s, "element_width = {}", self.element_width).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "oracle_max_points = {}", self.oracle_max_points).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PROBLEM_A: &str = "Nb=2\nNk=8\nNc=8\nNh=8\nNw=8\nNr=3\nNs=3\nP=4\nM=256\nMD=4096\n";

    #[test]
    fn problem_a() {
        let cfg = RunConfig::parse(PROBLEM_A).unwrap();
        assert_eq!(cfg.problem, ConvProblem::unit_stride(2, 8, 8, 8, 8, 3, 3).unwrap());
        assert_eq!((cfg.p, cfg.m, cfg.m_d), (4, 256, Some(4096)));
        assert_eq!(cfg.element_width, 4);
        assert_eq!(cfg.scope, PermutationScope::CInnermost);
    }

    #[test]
    fn missing_key() {
        let text = PROBLEM_A.replace("Nk=8\n", "");
        assert_eq!(
            RunConfig::parse(&text),
            Err(ConfigError::Validation { field: "Nk".into(), reason: "required".into() })
        );
    }

    #[test]
    fn zero_stride() {
        let text = format!("{PROBLEM_A}sigma_w=0\n");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Validation { field, .. }) if field == "sigma_w"));
    }

    #[test]
    fn unknown_key_names_line() {
        let text = format!("# comment\n{PROBLEM_A}Nq = 3\n");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Parse { line: 12, .. })));
    }

    #[test]
    fn comments_and_spacing() {
        let text = PROBLEM_A.replace("Nb=2", "  Nb = 2   # batch");
        assert_eq!(RunConfig::parse(&text).unwrap().problem.n_b, 2);
    }
}
