use std::io::Write;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::metrics::{compute_metrics, Metrics};
use super::run::run_scenario;
use crate::config::{
    find_key_line, from_toml_error, ConfigError, ConfigIssue, IssueKind, ScenarioConfig,
    ScenarioKind,
};
use crate::error::Result;
use crate::presets;

pub const METRICS_HEADER: [&str; 12] = [
    "label",
    "config_hash",
    "seed",
    "kind",
    "max_deviation_um",
    "rms_error_um",
    "max_deviation_ilm_um",
    "rms_error_ilm_um",
    "phase_lag_s",
    "drift_slope_um_s",
    "amplitude_ratio",
    "injection_outcome",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub kind: Option<ScenarioKind>,
    pub metrics: Metrics,
}

impl SweepRow {
    pub fn new(config: &ScenarioConfig, metrics: Metrics) -> Self {
        Self {
            label: config.label.clone().unwrap_or_default(),
            config_hash: config_hash(config),
            seed: Some(config.seed),
            kind: Some(config.kind),
            metrics,
        }
    }
}

/// First 16 hex digits of the SHA-256 of the canonical TOML form.
pub fn config_hash(config: &ScenarioConfig) -> String {
    let digest = Sha256::digest(config.to_toml().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs every config (in parallel) and returns one row per config, in input
/// order. Nothing runs unless every config is valid.
pub fn sweep(configs: &[ScenarioConfig]) -> Result<Vec<SweepRow>> {
    for (i, c) in configs.iter().enumerate() {
        c.validate().map_err(|e| e.in_context(&format!("config #{}", i + 1)))?;
    }
    configs
        .par_iter()
        .map(|c| {
            let trace = run_scenario(c)?;
            let metrics = compute_metrics(&trace)?;
            Ok(SweepRow::new(c, metrics))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        let m = &r.metrics;
        let kind = match r.kind {
            Some(ScenarioKind::Track) => "track",
            Some(ScenarioKind::Inject) => "inject",
            None => "",
        };
        out.write_record([
            r.label.clone(),
            r.config_hash.clone(),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            kind.to_string(),
            format!("{:.6}", m.max_deviation_um),
            format!("{:.6}", m.rms_error_um),
            format!("{:.6}", m.max_deviation_ilm_um),
            format!("{:.6}", m.rms_error_ilm_um),
            opt(m.phase_lag_s),
            format!("{:.6}", m.drift_slope_um_s),
            opt(m.amplitude_ratio),
            m.injection.map_or("n/a", |o| o.name()).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn issue(key: &str, line: Option<usize>, kind: IssueKind, message: impl Into<String>) -> ConfigError {
    ConfigError::single(ConfigIssue {
        key: key.to_string(),
        line,
        kind,
        message: message.into(),
    })
}

fn merge(base: &mut toml::Table, overlay: &toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn nth_run_line(text: &str, n: usize) -> Option<usize> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| l.trim_start().starts_with("[[run]]"))
        .nth(n)
        .map(|(i, _)| i + 1)
}

/// Expands a sweep file into concrete configs.
///
/// ```toml
/// base = "fig5a"          # preset name, or a [base] table
/// seeds = [1, 2, 3]       # optional; one config per seed per run
///
/// [[run]]
/// label = "A25"
/// motion.amplitude_um = 25
/// controller.speed_um_s = 200
/// ```
///
/// Each `[[run]]` table is merged over the base. Without any run the base is
/// used as is.
pub fn parse_sweep(text: &str) -> std::result::Result<Vec<ScenarioConfig>, ConfigError> {
    let doc: toml::Table = toml::from_str(text).map_err(|e| from_toml_error(text, &e))?;
    for key in doc.keys() {
        if !["base", "seeds", "run"].contains(&key.as_str()) {
            return Err(issue(key, find_key_line(text, key), IssueKind::UnknownKey, "sweep files take base, seeds and run"));
        }
    }

    let base = match doc.get("base") {
        Some(toml::Value::String(name)) => {
            let source = presets::source(name).ok_or_else(|| {
                issue("base", find_key_line(text, "base"), IssueKind::OutOfRange, format!("no preset named `{name}`"))
            })?;
            toml::from_str::<toml::Table>(source).expect("presets are valid TOML")
        }
        Some(toml::Value::Table(t)) => t.clone(),
        Some(_) => {
            return Err(issue("base", find_key_line(text, "base"), IssueKind::OutOfRange, "must be a preset name or a table"))
        }
        None => return Err(issue("base", None, IssueKind::MissingKey, "sweep needs a base config")),
    };

    let seeds: Option<Vec<u64>> = match doc.get("seeds") {
        None => None,
        Some(toml::Value::Array(items)) => Some(
            items
                .iter()
                .map(|v| v.as_integer().and_then(|i| u64::try_from(i).ok()))
                .collect::<Option<_>>()
                .ok_or_else(|| issue("seeds", find_key_line(text, "seeds"), IssueKind::OutOfRange, "seeds must be non-negative integers"))?,
        ),
        Some(_) => return Err(issue("seeds", find_key_line(text, "seeds"), IssueKind::OutOfRange, "must be an array")),
    };

    let runs: Vec<toml::Table> = match doc.get("run") {
        None => vec![toml::Table::new()],
        Some(toml::Value::Array(items)) => items
            .iter()
            .map(|v| v.as_table().cloned())
            .collect::<Option<_>>()
            .ok_or_else(|| issue("run", find_key_line(text, "run"), IssueKind::OutOfRange, "use [[run]] tables"))?,
        Some(_) => return Err(issue("run", find_key_line(text, "run"), IssueKind::OutOfRange, "use [[run]] tables")),
    };

    let mut configs = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let line = nth_run_line(text, i);
        let context = format!("run #{}", i + 1);
        let mut merged = base.clone();
        merge(&mut merged, run);
        let seed_list: Vec<Option<u64>> = match &seeds {
            Some(s) => s.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        for seed in seed_list {
            let mut table = merged.clone();
            if let Some(seed) = seed {
                table.insert("seed".into(), toml::Value::Integer(seed as i64));
            }
            let config: ScenarioConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
                let mut err = from_toml_error("", &e).in_context(&context);
                for issue in &mut err.issues {
                    issue.line = line;
                }
                err
            })?;
            config.validate().map_err(|mut err| {
                for issue in &mut err.issues {
                    issue.line = line;
                }
                err.in_context(&context)
            })?;
            configs.push(config);
        }
    }
    Ok(configs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sweep_is_empty() {
        assert!(sweep(&[]).unwrap().is_empty());
        let mut buf = Vec::new();
        write_metrics_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", METRICS_HEADER.join(",")));
    }

    #[test]
    fn hash_tracks_content() {
        let a = presets::load("fig5a").unwrap().unwrap();
        let b = a.clone().with_seed(1);
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn sweep_file_expansion() {
        let text = r#"
base = "fig5a"
seeds = [1, 2]

[[run]]
label = "A25"
motion.amplitude_um = 25
controller.speed_um_s = 200

[[run]]
label = "predictive"
controller.mode = "predictive"
"#;
        let configs = parse_sweep(text).unwrap();
        assert_eq!(configs.len(), 4);
        assert_eq!(configs[0].motion.amplitude_um, 25.0);
        assert_eq!(configs[0].motion.period_s, 5.0);
        assert_eq!(configs[1].seed, 2);
        assert_eq!(configs[2].motion.amplitude_um, 100.0);
        assert_eq!(configs[2].controller.speed_um_s, 800.0);
        assert_eq!(configs[3].label.as_deref(), Some("predictive"));
        assert_eq!(configs[3].kind, ScenarioKind::Track);
    }

    #[test]
    fn sweep_file_errors() {
        let err = parse_sweep("base = \"fig5a\"\n\n[[run]]\nmotion.amplitude_um = -1\n").unwrap_err();
        assert_eq!(err.issues[0].key, "motion.amplitude_um");
        assert_eq!(err.issues[0].line, Some(3));
        assert!(err.to_string().contains("run #1"));

        let err = parse_sweep("base = \"fig5a\"\n[[run]]\nmotion.ampltude = 1\n").unwrap_err();
        assert_eq!(err.issues[0].kind, IssueKind::UnknownKey);

        assert!(parse_sweep("base = \"nope\"\n").is_err());
        assert!(parse_sweep("seeds = [1]\n").is_err());
        assert!(parse_sweep("base = \"fig5a\"\nextra = 1\n").is_err());
    }

    #[test]
    fn invalid_config_aborts_before_running() {
        let good = presets::load("fig5a").unwrap().unwrap();
        let mut bad = good.clone();
        bad.duration_s = -1.0;
        let err = sweep(&[good, bad]).unwrap_err();
        assert!(err.to_string().contains("config #2"), "{err}");
    }
}
