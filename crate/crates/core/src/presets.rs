//! Bundled scenario configs.

use crate::config::{parse_config, ConfigError, ScenarioConfig};

const PRESETS: [(&str, &str); 6] = [
    ("fig5a", include_str!("../presets/fig5a.toml")),
    ("fig5b", include_str!("../presets/fig5b.toml")),
    ("fig5c", include_str!("../presets/fig5c.toml")),
    ("fig5d", include_str!("../presets/fig5d.toml")),
    ("fig6-injection", include_str!("../presets/fig6-injection.toml")),
    ("physio-heartbeat", include_str!("../presets/physio-heartbeat.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Raw TOML of a preset.
pub fn source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// First comment line of a preset, used as its description.
pub fn summary(name: &str) -> Option<&'static str> {
    source(name)?.lines().next()?.strip_prefix("# ")
}

pub fn load(name: &str) -> Option<Result<ScenarioConfig, ConfigError>> {
    source(name).map(parse_config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioKind;
    use crate::control::{retina_velocity_magnitude, RobotModel};

    #[test]
    fn all_presets_parse() {
        for name in names() {
            let c = load(name).unwrap().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(c.label.as_deref(), Some(name));
            assert_eq!(c.robot, RobotModel::paper());
        }
        assert!(load("fig7").is_none());
    }

    #[test]
    fn commanded_speeds_are_ten_times_average_retina_speed() {
        for name in ["fig5a", "fig5b", "fig5c", "physio-heartbeat"] {
            let c = load(name).unwrap().unwrap();
            let v = retina_velocity_magnitude(c.motion.amplitude_um, c.motion.period_s).unwrap();
            assert!((c.controller.speed_um_s - 10.0 * v).abs() < 1e-9, "{name}");
        }
        let c = load("fig6-injection").unwrap().unwrap();
        assert_eq!(c.kind, ScenarioKind::Inject);
        assert_eq!(c.injection.duration_s(), 6.0);
    }
}
