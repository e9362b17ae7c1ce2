use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::trace::{Event, Trace, TraceRow};
use crate::config::{ScenarioConfig, ScenarioKind};
use crate::error::{Error, Result};

/// Fraction of the injection window the tip must spend inside the retina.
pub const BLEB_FRACTION: f64 = 0.9;
/// Fraction of the window above the ILM that counts as a vitreous injection.
pub const VITREOUS_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionOutcome {
    Bleb,
    Vitreous,
    RpeBreach,
    Indeterminate,
}

impl InjectionOutcome {
    pub fn name(self) -> &'static str {
        match self {
            InjectionOutcome::Bleb => "bleb",
            InjectionOutcome::Vitreous => "vitreous",
            InjectionOutcome::RpeBreach => "rpe_breach",
            InjectionOutcome::Indeterminate => "indeterminate",
        }
    }
}

impl fmt::Display for InjectionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Against the stage, both series zeroed at the start.
    pub max_deviation_um: f64,
    pub rms_error_um: f64,
    /// Same, against the true ILM under the needle.
    pub max_deviation_ilm_um: f64,
    pub rms_error_ilm_um: f64,
    /// Positive when the needle trails the stage.
    pub phase_lag_s: Option<f64>,
    pub drift_slope_um_s: f64,
    pub amplitude_ratio: Option<f64>,
    pub injection: Option<InjectionOutcome>,
}

/// Linear interpolation of `rows` onto a uniform grid whose step is the
/// median row spacing.
struct Grid {
    t: Vec<f64>,
    needle: Vec<f64>,
    stage: Vec<f64>,
    ilm: Vec<f64>,
    dt: f64,
}

fn resample(rows: &[TraceRow]) -> Grid {
    let t0 = rows[0].t;
    let mut gaps: Vec<f64> = rows.windows(2).map(|w| w[1].t - w[0].t).collect();
    if gaps.is_empty() {
        return Grid {
            t: vec![t0],
            needle: vec![rows[0].needle_tip_z_um],
            stage: vec![rows[0].stage_z_um],
            ilm: vec![rows[0].true_ilm_z_um],
            dt: 0.0,
        };
    }
    let mid = (gaps.len() - 1) / 2;
    let dt = *gaps.select_nth_unstable_by(mid, f64::total_cmp).1;
    let span = rows[rows.len() - 1].t - t0;
    let n = (span / dt + 1e-9).floor() as usize + 1;

    let mut grid = Grid {
        t: Vec::with_capacity(n),
        needle: Vec::with_capacity(n),
        stage: Vec::with_capacity(n),
        ilm: Vec::with_capacity(n),
        dt,
    };
    let mut j = 0;
    for i in 0..n {
        let t = t0 + i as f64 * dt;
        while j + 2 < rows.len() && rows[j + 1].t <= t {
            j += 1;
        }
        let (a, b) = (&rows[j], &rows[(j + 1).min(rows.len() - 1)]);
        let w = if b.t > a.t { ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0) } else { 0.0 };
        let lerp = |x: f64, y: f64| x + w * (y - x);
        grid.t.push(t);
        grid.needle.push(lerp(a.needle_tip_z_um, b.needle_tip_z_um));
        grid.stage.push(lerp(a.stage_z_um, b.stage_z_um));
        grid.ilm.push(lerp(a.true_ilm_z_um, b.true_ilm_z_um));
    }
    grid
}

fn zeroed(v: &[f64]) -> Vec<f64> {
    let v0 = v[0];
    v.iter().map(|x| x - v0).collect()
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn demeaned(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Least-squares slope of `y` against `t`.
fn slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (ti, yi) in t.iter().zip(y) {
        sxy += (ti - tm) * (yi - ym);
        sxx += (ti - tm) * (ti - tm);
    }
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

/// Lag (in steps) maximizing the correlation coefficient of `x[i]` with
/// `y[i - lag]` over their overlap, for `|lag| <= max_lag`. Normalizing by
/// the overlap energies rather than its length keeps identical signals
/// peaked at zero. Near-ties go to the smallest magnitude.
fn xcorr_argmax(x: &[f64], y: &[f64], max_lag: isize) -> isize {
    let n = x.len() as isize;
    let mut best = (f64::NEG_INFINITY, 0isize);
    for lag in -max_lag..=max_lag {
        let lo = lag.max(0);
        let hi = n.min(n + lag);
        if hi <= lo {
            continue;
        }
        let (mut c, mut ex, mut ey) = (0.0, 0.0, 0.0);
        for i in lo..hi {
            let (a, b) = (x[i as usize], y[(i - lag) as usize]);
            c += a * b;
            ex += a * a;
            ey += b * b;
        }
        if ex <= 0.0 || ey <= 0.0 {
            continue;
        }
        let r = c / (ex * ey).sqrt();
        let tie = (r - best.0).abs() <= 1e-12;
        if (r > best.0 && !tie) || (tie && lag.abs() < best.1.abs()) {
            best = (r, lag);
        }
    }
    best.1
}

/// Amplitude of the component at angular frequency `w`.
fn fundamental_amplitude(t: &[f64], v: &[f64], w: f64) -> f64 {
    let (mut a, mut b) = (0.0, 0.0);
    for (ti, vi) in t.iter().zip(v) {
        a += vi * (w * ti).cos();
        b += vi * (w * ti).sin();
    }
    2.0 * a.hypot(b) / t.len() as f64
}

pub fn compute_metrics(trace: &Trace) -> Result<Metrics> {
    let rows = &trace.rows;
    if rows.is_empty() {
        return Err(Error::Trace("empty trace".into()));
    }
    let n0 = rows[0].needle_tip_z_um;
    let s0 = rows[0].stage_z_um;
    let i0 = rows[0].true_ilm_z_um;
    let dev = |r: &TraceRow| (r.needle_tip_z_um - n0) - (r.stage_z_um - s0);
    let dev_ilm = |r: &TraceRow| (r.needle_tip_z_um - n0) - (r.true_ilm_z_um - i0);
    let max_deviation_um = rows.iter().map(|r| dev(r).abs()).fold(0.0, f64::max);
    let max_deviation_ilm_um = rows.iter().map(|r| dev_ilm(r).abs()).fold(0.0, f64::max);

    let grid = resample(rows);
    let needle = zeroed(&grid.needle);
    let stage = zeroed(&grid.stage);
    let ilm = zeroed(&grid.ilm);
    let e: Vec<f64> = needle.iter().zip(&stage).map(|(n, s)| n - s).collect();
    let e_ilm: Vec<f64> = needle.iter().zip(&ilm).map(|(n, s)| n - s).collect();

    let (mut phase_lag_s, mut amplitude_ratio) = (None, None);
    let period = trace.period_s.filter(|p| *p > 0.0);
    if let Some(period) = period {
        let duration = grid.t[grid.t.len() - 1] - grid.t[0];
        let xs = demeaned(&needle);
        let ys = demeaned(&stage);
        let stage_var = ys.iter().map(|y| y * y).sum::<f64>() / ys.len() as f64;
        if duration >= 2.0 * period - 1e-9 && stage_var > 1e-12 && grid.dt > 0.0 {
            let needle_var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
            if needle_var > 1e-12 {
                let max_lag = (0.5 * period / grid.dt).round() as isize;
                phase_lag_s = Some(xcorr_argmax(&xs, &ys, max_lag) as f64 * grid.dt);
            }

            let whole = (duration / period + 1e-9).floor() * period;
            let n = ((whole / grid.dt).round() as usize).min(grid.t.len());
            let t_rel: Vec<f64> = grid.t[..n].iter().map(|t| t - grid.t[0]).collect();
            let w = TAU / period;
            let amp_stage = fundamental_amplitude(&t_rel, &ys[..n], w);
            if amp_stage > 1e-9 {
                let amp_needle = fundamental_amplitude(&t_rel, &xs[..n], w);
                amplitude_ratio = Some(amp_needle / amp_stage);
            }
        }
    }

    let injection = match trace.kind {
        Some(ScenarioKind::Inject) => Some(classify_window(trace)),
        Some(ScenarioKind::Track) => None,
        None => trace.first_event(Event::InsertionComplete).map(|_| classify_window(trace)),
    };

    Ok(Metrics {
        max_deviation_um,
        rms_error_um: rms(&e),
        max_deviation_ilm_um,
        rms_error_ilm_um: rms(&e_ilm),
        phase_lag_s,
        drift_slope_um_s: slope(&grid.t, &e),
        amplitude_ratio,
        injection,
    })
}

/// Start and end of the injection window, if insertion completed.
pub fn injection_window(trace: &Trace) -> Option<(f64, f64)> {
    let start = trace.first_event(Event::InsertionComplete)?.t;
    let end = trace
        .rows
        .iter()
        .find(|r| r.t >= start && r.events.contains(Event::InjectionEnd))
        .or(trace.rows.last())?
        .t;
    Some((start, end))
}

pub fn classify_injection(trace: &Trace, config: &ScenarioConfig) -> Result<InjectionOutcome> {
    if config.kind != ScenarioKind::Inject {
        return Err(Error::WrongScenarioKind("injection classification needs an inject scenario"));
    }
    if trace.is_empty() {
        return Err(Error::Trace("empty trace".into()));
    }
    Ok(classify_window(trace))
}

fn classify_window(trace: &Trace) -> InjectionOutcome {
    let Some((start, end)) = injection_window(trace) else {
        return InjectionOutcome::Indeterminate;
    };
    let window: Vec<&TraceRow> = trace.rows.iter().filter(|r| r.t >= start && r.t <= end).collect();

    if window.iter().any(|r| r.needle_tip_z_um >= r.true_rpe_z_um) {
        return InjectionOutcome::RpeBreach;
    }

    // Each row holds until the next one.
    let weights: Vec<f64> = if end > start {
        window.windows(2).map(|w| w[1].t - w[0].t).chain([0.0]).collect()
    } else {
        vec![1.0; window.len()]
    };
    let total: f64 = weights.iter().sum();
    let fraction = |pred: &dyn Fn(&TraceRow) -> bool| {
        window.iter().zip(&weights).filter(|(r, _)| pred(r)).map(|(_, w)| w).sum::<f64>() / total
    };
    let inside = fraction(&|r| r.needle_tip_z_um > r.true_ilm_z_um && r.needle_tip_z_um < r.true_rpe_z_um);
    let above = fraction(&|r| r.needle_tip_z_um < r.true_ilm_z_um);

    if inside >= BLEB_FRACTION {
        InjectionOutcome::Bleb
    } else if above > VITREOUS_FRACTION {
        InjectionOutcome::Vitreous
    } else {
        InjectionOutcome::Indeterminate
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::trace::Events;

    fn synthetic(duration: f64, dt: f64, stage: impl Fn(f64) -> f64, needle: impl Fn(f64) -> f64) -> Trace {
        let mut trace = Trace::new(Some(5.0), Some(ScenarioKind::Track));
        let n = (duration / dt).round() as usize;
        for i in 0..=n {
            let t = i as f64 * dt;
            trace.push(TraceRow {
                t,
                stage_z_um: stage(t),
                true_ilm_z_um: 2500.0 + stage(t),
                true_rpe_z_um: 2750.0 + stage(t),
                needle_tip_z_um: 2200.0 + needle(t),
                measured_median_ilm_z_um: None,
                commanded_velocity_um_s: 0.0,
                events: Events::only(Event::Sample),
            });
        }
        trace
    }

    fn sine(t: f64) -> f64 {
        100.0 * (TAU * t / 5.0).sin()
    }

    #[test]
    fn perfect_tracking() {
        let m = compute_metrics(&synthetic(60.0, 0.01, sine, sine)).unwrap();
        assert!(m.max_deviation_um < 1e-9);
        assert!(m.rms_error_um < 1e-9);
        assert_eq!(m.phase_lag_s, Some(0.0));
        assert!((m.amplitude_ratio.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(m.injection, None);
    }

    #[test]
    fn shifted_sine_lag() {
        let m = compute_metrics(&synthetic(60.0, 0.01, sine, |t| sine(t - 0.3))).unwrap();
        let lag = m.phase_lag_s.unwrap();
        assert!((lag - 0.30).abs() <= 0.02, "{lag}");
        let m = compute_metrics(&synthetic(60.0, 0.01, sine, |t| sine(t + 0.2))).unwrap();
        assert!((m.phase_lag_s.unwrap() + 0.20).abs() <= 0.02);
    }

    #[test]
    fn linear_drift_slope() {
        let m = compute_metrics(&synthetic(60.0, 0.01, sine, |t| sine(t) + t)).unwrap();
        assert!((m.drift_slope_um_s - 1.0).abs() <= 0.05);
    }

    #[test]
    fn short_trace_has_no_lag_or_ratio() {
        let m = compute_metrics(&synthetic(9.0, 0.01, sine, sine)).unwrap();
        assert!(m.phase_lag_s.is_none() && m.amplitude_ratio.is_none());
        let m = compute_metrics(&synthetic(10.0, 0.01, sine, sine)).unwrap();
        assert!(m.phase_lag_s.is_some());
        let m = compute_metrics(&synthetic(20.0, 0.01, |_| 0.0, |_| 0.0)).unwrap();
        assert!(m.phase_lag_s.is_none() && m.amplitude_ratio.is_none());
        assert!(compute_metrics(&Trace::default()).is_err());
    }

    #[test]
    fn amplitude_ratio_of_scaled_sine() {
        let m = compute_metrics(&synthetic(60.0, 0.01, sine, |t| 0.5 * sine(t - 0.7))).unwrap();
        assert!((m.amplitude_ratio.unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn irregular_rows_do_not_bias_rms() {
        // A constant offset after t = 1 gives rms close to the offset.
        let mut tr = synthetic(30.0, 0.01, |_| 0.0, |t| if t >= 1.0 { 10.0 } else { 0.0 });
        tr.rows.retain(|r| r.t < 1.0 || r.t > 29.0 || (r.t * 100.0).round() as i64 % 7 != 0);
        let m = compute_metrics(&tr).unwrap();
        assert_eq!(m.max_deviation_um, 10.0);
        assert!(m.rms_error_um <= m.max_deviation_um);
        assert!((m.rms_error_um - 10.0 * (29.0f64 / 30.0).sqrt()).abs() < 0.1);
    }

    fn injection_trace(tip: impl Fn(f64) -> f64) -> Trace {
        let mut tr = synthetic(10.0, 0.01, |_| 0.0, |t| tip(t) - 2200.0);
        tr.kind = Some(ScenarioKind::Inject);
        tr.rows[100].events.insert(Event::InsertionComplete);
        tr.rows[700].events.insert(Event::InjectionEnd);
        tr
    }

    #[test]
    fn classification_rules() {
        let mut config = ScenarioConfig::inject(Default::default(), crate::control::ControllerConfig::bang_bang(800.0));
        let outcome = |tip: &dyn Fn(f64) -> f64| classify_injection(&injection_trace(tip), &config).unwrap();

        assert_eq!(outcome(&|_| 2625.0), InjectionOutcome::Bleb);
        // Above the ILM for half the window.
        assert_eq!(outcome(&|t| if t < 4.0 { 2400.0 } else { 2625.0 }), InjectionOutcome::Vitreous);
        // A single instant at the RPE wins over everything else.
        assert_eq!(outcome(&|t| if (t - 3.0).abs() < 0.005 { 2750.0 } else { 2625.0 }), InjectionOutcome::RpeBreach);
        // On the ILM: neither inside nor above.
        assert_eq!(outcome(&|_| 2500.0), InjectionOutcome::Indeterminate);
        // Outside the window nothing counts.
        assert_eq!(outcome(&|t| if t > 8.0 { 2800.0 } else { 2625.0 }), InjectionOutcome::Bleb);

        let m = compute_metrics(&injection_trace(|_| 2625.0)).unwrap();
        assert_eq!(m.injection, Some(InjectionOutcome::Bleb));

        config.kind = ScenarioKind::Track;
        assert!(matches!(
            classify_injection(&injection_trace(|_| 2625.0), &config),
            Err(Error::WrongScenarioKind(_))
        ));
    }
}
