//! Scenario configuration: TOML schema, defaults and validation.
//!
//! Unknown keys are rejected. Every reported problem carries the dotted key
//! path and, when it can be found, the 1-based line in the source text.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControllerConfig, RobotModel};
use crate::error::Error;
use crate::perception::SegmentationErrorModel;
use crate::phantom::{MotionProfile, PhantomConfig};
use crate::scanner::{NeedleShape, ScanGeometry, TimingModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Hold the needle at a constant distance above the moving retina.
    Track,
    /// Insert to a target depth, then compensate while injecting.
    Inject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeedleConfig {
    pub x_um: f64,
    pub y_um: f64,
    /// Initial tip height above the ILM.
    pub start_above_ilm_um: f64,
    pub diameter_um: f64,
    pub angle_deg: f64,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        let shape = NeedleShape::default();
        Self {
            x_um: 2000.0,
            y_um: 40.0,
            start_above_ilm_um: 300.0,
            diameter_um: shape.diameter_um,
            angle_deg: shape.angle_deg,
        }
    }
}

impl NeedleConfig {
    pub fn shape(&self) -> NeedleShape {
        NeedleShape {
            diameter_um: self.diameter_um,
            angle_deg: self.angle_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionProtocol {
    /// Target between ILM (0) and RPE (1).
    pub target_relative_depth: f64,
    /// Insertion speed in command units.
    pub insertion_speed_um_s: f64,
    pub volume_ml: f64,
    pub rate_ml_per_min: f64,
}

impl Default for InjectionProtocol {
    fn default() -> Self {
        Self {
            target_relative_depth: 0.5,
            insertion_speed_um_s: 1000.0,
            volume_ml: 0.1,
            rate_ml_per_min: 1.0,
        }
    }
}

impl InjectionProtocol {
    pub fn duration_s(&self) -> f64 {
        60.0 * self.volume_ml / self.rate_ml_per_min
    }
}

fn default_duration() -> f64 {
    60.0
}

fn default_sample_interval() -> f64 {
    0.01
}

fn default_integration_step() -> f64 {
    0.001
}

fn default_robot() -> RobotModel {
    RobotModel::paper()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval_s: f64,
    #[serde(default = "default_integration_step")]
    pub integration_step_s: f64,
    pub motion: MotionProfile,
    pub controller: ControllerConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub scan: ScanGeometry,
    #[serde(default)]
    pub timing: TimingModel,
    #[serde(default)]
    pub segmentation: SegmentationErrorModel,
    #[serde(default = "default_robot")]
    pub robot: RobotModel,
    #[serde(default)]
    pub needle: NeedleConfig,
    #[serde(default)]
    pub injection: InjectionProtocol,
}

impl ScenarioConfig {
    /// Tracking scenario with every other setting at its default.
    pub fn track(motion: MotionProfile, controller: ControllerConfig) -> Self {
        Self {
            kind: ScenarioKind::Track,
            label: None,
            duration_s: default_duration(),
            seed: 0,
            sample_interval_s: default_sample_interval(),
            integration_step_s: default_integration_step(),
            motion,
            controller,
            phantom: PhantomConfig::default(),
            scan: ScanGeometry::default(),
            timing: TimingModel::default(),
            segmentation: SegmentationErrorModel::default(),
            robot: default_robot(),
            needle: NeedleConfig::default(),
            injection: InjectionProtocol::default(),
        }
    }

    pub fn inject(motion: MotionProfile, controller: ControllerConfig) -> Self {
        Self {
            kind: ScenarioKind::Inject,
            ..Self::track(motion, controller)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Canonical TOML rendering; stable across runs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// All validation problems, without line information.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { issues })
        }
    }

    fn issues(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut range = |key: &str, msg: &str| {
            issues.push(ConfigIssue {
                key: key.to_string(),
                line: None,
                kind: IssueKind::OutOfRange,
                message: msg.to_string(),
            })
        };
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            range("duration_s", "must be finite and > 0");
        }
        if !(self.sample_interval_s > 0.0 && self.sample_interval_s.is_finite()) {
            range("sample_interval_s", "must be finite and > 0");
        }
        if !(self.integration_step_s > 0.0 && self.integration_step_s <= self.sample_interval_s) {
            range("integration_step_s", "must be > 0 and <= sample_interval_s");
        }
        let inj = &self.injection;
        if !(inj.target_relative_depth > 0.0 && inj.target_relative_depth < 1.0) {
            range("injection.target_relative_depth", "must lie strictly inside (0, 1)");
        }
        if !(inj.insertion_speed_um_s > 0.0) {
            range("injection.insertion_speed_um_s", "must be > 0");
        }
        if !(inj.volume_ml > 0.0) {
            range("injection.volume_ml", "must be > 0");
        }
        if !(inj.rate_ml_per_min > 0.0) {
            range("injection.rate_ml_per_min", "must be > 0");
        }
        if !(self.needle.start_above_ilm_um >= 0.0) {
            range("needle.start_above_ilm_um", "must be >= 0");
        }

        let sections: [(&str, Result<(), Error>); 7] = [
            ("motion", self.motion.validate()),
            ("controller", self.controller.validate()),
            ("phantom", self.phantom.validate()),
            ("scan", self.scan.validate()),
            ("timing", self.timing.validate()),
            ("segmentation", self.segmentation.validate()),
            ("robot", self.robot.validate()),
        ];
        for (section, result) in sections {
            if let Err(e) = result {
                let (name, reason) = match &e {
                    Error::InvalidParameter { name, reason } => (name.to_string(), reason.clone()),
                    other => (String::new(), other.to_string()),
                };
                let key = if name.contains(' ') || name.is_empty() {
                    section.to_string()
                } else {
                    format!("{section}.{name}")
                };
                range(&key, &reason);
            }
        }
        if let Err(Error::InvalidParameter { name, reason }) = self.needle.shape().validate() {
            range(&format!("needle.{name}"), &reason);
        }
        issues
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueKind {
    Syntax,
    UnknownKey,
    MissingKey,
    OutOfRange,
}

impl fmt::Display for IssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IssueKind::Syntax => "syntax error",
            IssueKind::UnknownKey => "unknown key",
            IssueKind::MissingKey => "missing required key",
            IssueKind::OutOfRange => "out of range",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    /// Dotted key path, e.g. `motion.amplitude_um`.
    pub key: String,
    pub line: Option<usize>,
    pub kind: IssueKind,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if self.key.is_empty() {
            write!(f, "{}: {}", self.kind, self.message)
        } else {
            write!(f, "`{}`: {}: {}", self.key, self.kind, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ConfigError {
    pub issues: Vec<ConfigIssue>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl ConfigError {
    pub fn single(issue: ConfigIssue) -> Self {
        Self { issues: vec![issue] }
    }

    /// Prefix every key with `context` (used for sweep runs).
    pub fn in_context(mut self, context: &str) -> Self {
        for issue in &mut self.issues {
            issue.message = format!("{context}: {}", issue.message);
        }
        self
    }
}

/// Parses and fully validates a scenario config.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let config: ScenarioConfig = toml::from_str(text).map_err(|e| from_toml_error(text, &e))?;
    config.validate().map_err(|mut err| {
        for issue in &mut err.issues {
            issue.line = find_key_line(text, &issue.key);
        }
        err
    })?;
    Ok(config)
}

pub(crate) fn from_toml_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let message = e.message().to_string();
    let span = e.span();
    let line = span.as_ref().map(|s| line_of(text, s.start));
    let table = line.map(|l| table_at_line(text, l)).unwrap_or_default();

    let (kind, field) = if let Some(field) = backticked(&message, "unknown field ") {
        (IssueKind::UnknownKey, Some(field))
    } else if let Some(field) = backticked(&message, "missing field ") {
        (IssueKind::MissingKey, Some(field))
    } else {
        (IssueKind::Syntax, None)
    };

    let key = match (kind, field) {
        (IssueKind::UnknownKey, Some(f)) => {
            // The span covers the offending key, which may itself be dotted.
            let raw = span
                .as_ref()
                .and_then(|s| text.get(s.clone()))
                .map(|s| s.trim().trim_matches('"').to_string())
                .filter(|s| s.ends_with(&f))
                .unwrap_or(f);
            join_key(&table, &raw)
        }
        (IssueKind::MissingKey, Some(f)) => {
            let scope = span
                .as_ref()
                .and_then(|s| text.get(s.clone()))
                .and_then(|s| header_name(s.trim()))
                .unwrap_or(table);
            join_key(&scope, &f)
        }
        _ => table,
    };
    let line = match kind {
        // Whole-document spans point at line 1; name the table line instead.
        IssueKind::MissingKey => find_table_line(text, key.rsplit_once('.').map(|p| p.0).unwrap_or("")),
        _ => line,
    };
    ConfigError::single(ConfigIssue {
        key,
        line,
        kind,
        message,
    })
}

fn backticked(message: &str, prefix: &str) -> Option<String> {
    let rest = &message[message.find(prefix)? + prefix.len()..];
    let rest = rest.strip_prefix('`')?;
    Some(rest[..rest.find('`')?].to_string())
}

fn join_key(table: &str, key: &str) -> String {
    if table.is_empty() {
        key.to_string()
    } else {
        format!("{table}.{key}")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn header_name(line: &str) -> Option<String> {
    let inner = line
        .strip_prefix("[[")
        .and_then(|l| l.split("]]").next())
        .or_else(|| line.strip_prefix('[').and_then(|l| l.split(']').next()))?;
    Some(inner.trim().to_string())
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Name of the table in force at `line` (1-based), empty for the root.
fn table_at_line(text: &str, line: usize) -> String {
    let mut table = String::new();
    for l in text.lines().take(line) {
        if let Some(name) = header_name(strip_comment(l)) {
            table = name;
        }
    }
    table
}

fn find_table_line(text: &str, table: &str) -> Option<usize> {
    if table.is_empty() {
        return None;
    }
    text.lines()
        .position(|l| header_name(strip_comment(l)).as_deref() == Some(table))
        .map(|i| i + 1)
}

/// Best-effort line lookup for a dotted key; understands `[table]` headers
/// and dotted keys at any level.
pub(crate) fn find_key_line(text: &str, key: &str) -> Option<usize> {
    let mut table = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if let Some(name) = header_name(line) {
            table = name;
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else {
            continue;
        };
        let local: String = lhs
            .split('.')
            .map(|p| p.trim().trim_matches('"'))
            .collect::<Vec<_>>()
            .join(".");
        if join_key(&table, &local) == key {
            return Some(i + 1);
        }
    }
    let (parent, _) = key.rsplit_once('.')?;
    find_table_line(text, parent).or_else(|| find_key_line(text, parent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanner::Jitter;

    const MINIMAL: &str = r#"
kind = "track"

[motion]
amplitude_um = 100

[controller]
speed_um_s = 800
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.kind, ScenarioKind::Track);
        assert_eq!(c.motion.period_s, 5.0);
        assert_eq!(c.timing.nominal_acquisition_s, 0.1);
        assert_eq!(c.timing.processing_overhead_s, 0.01);
        assert_eq!(c.timing.jitter, Jitter::Uniform { spread: 0.2 });
        assert_eq!(c.duration_s, 60.0);
        assert_eq!(c.scan.n_bscans, 5);
        assert_eq!(c.phantom.retina_thickness_um, 250.0);
        assert_eq!(c.robot, RobotModel::paper());
        assert_eq!(c.injection.duration_s(), 6.0);
    }

    #[test]
    fn negative_amplitude_names_key_and_line() {
        let text = MINIMAL.replace("amplitude_um = 100", "amplitude_um = -5");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.issues.len(), 1);
        let issue = &err.issues[0];
        assert_eq!(issue.kind, IssueKind::OutOfRange);
        assert_eq!(issue.key, "motion.amplitude_um");
        assert_eq!(issue.line, Some(5));
        assert!(err.to_string().contains("line 5"));
    }

    #[test]
    fn misspelled_key_is_rejected() {
        let text = MINIMAL.replace("amplitude_um = 100", "amplitude_um = 100\nampltude = 3");
        let err = parse_config(&text).unwrap_err();
        let issue = &err.issues[0];
        assert_eq!(issue.kind, IssueKind::UnknownKey);
        assert_eq!(issue.key, "motion.ampltude");
        assert_eq!(issue.line, Some(6));
    }

    #[test]
    fn unknown_top_level_key() {
        let text = format!("sed = 3\n{MINIMAL}");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.issues[0].kind, IssueKind::UnknownKey);
        assert_eq!(err.issues[0].key, "sed");
        assert_eq!(err.issues[0].line, Some(1));
    }

    #[test]
    fn missing_required_key() {
        let text = MINIMAL.replace("speed_um_s = 800", "mode = \"predictive\"");
        let err = parse_config(&text).unwrap_err();
        let issue = &err.issues[0];
        assert_eq!(issue.kind, IssueKind::MissingKey);
        assert_eq!(issue.key, "controller.speed_um_s");
        assert_eq!(issue.line, Some(7));

        let err = parse_config("kind = \"track\"\n[controller]\nspeed_um_s = 1\n").unwrap_err();
        assert_eq!(err.issues[0].key, "motion");
    }

    #[test]
    fn dotted_keys_are_located() {
        let text = "kind = \"inject\"\nmotion.amplitude_um = 10\ncontroller.speed_um_s = 1\ninjection.target_relative_depth = 1.0\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.issues[0].key, "injection.target_relative_depth");
        assert_eq!(err.issues[0].line, Some(4));
    }

    #[test]
    fn several_range_errors_reported_together() {
        let text = r#"
kind = "track"
duration_s = 0
[motion]
amplitude_um = 1
[controller]
speed_um_s = 800
[phantom]
tethering_gain = 1.5
"#;
        let err = parse_config(text).unwrap_err();
        let keys: Vec<_> = err.issues.iter().map(|i| i.key.as_str()).collect();
        assert_eq!(keys, ["duration_s", "phantom.tethering_gain"]);
        assert_eq!(err.issues[1].line, Some(9));
    }

    #[test]
    fn syntax_errors_have_lines() {
        let err = parse_config("kind = \"track\"\nmotion = [\n").unwrap_err();
        assert_eq!(err.issues[0].kind, IssueKind::Syntax);
        assert!(err.issues[0].line.is_some());
    }

    #[test]
    fn toml_round_trip() {
        let c = parse_config(MINIMAL).unwrap();
        let again = parse_config(&c.to_toml()).unwrap();
        assert_eq!(c, again);
    }
}
