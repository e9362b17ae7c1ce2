use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::trace::{Event, Events, Trace, TraceRow};
use crate::config::{ScenarioConfig, ScenarioKind};
use crate::control::{Actuation, CommandBasis, ControlCommand, Controller, Observation, Robot};
use crate::error::{Error, Result};
use crate::perception::{corrupt, extract_surface_point_cloud, median_layer_depth};
use crate::phantom::{NeedlePose, Phantom, PhantomState};
use crate::scanner::{Class, LabeledVolume, Scanner, StateSource};
use crate::Vec3;

const STREAM_TIMING: u64 = 1;
const STREAM_SEGMENTATION: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Tracking,
    Inserting,
    /// Compensating with the needle in place (during and after injection).
    Injecting,
}

/// Everything known at one control update.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlUpdate {
    pub t: f64,
    pub volume_id: u64,
    pub scan_t_start: f64,
    pub scan_t_end: f64,
    pub median_ilm_um: Option<f64>,
    pub median_rpe_um: Option<f64>,
    pub needle_z_um: f64,
    pub command: ControlCommand,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep the first this many segmented volumes.
    pub keep_volumes: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub updates: Vec<ControlUpdate>,
    pub volumes: Vec<LabeledVolume>,
}

/// Phantom, robot and trace recorder advanced together at the fine step.
struct World {
    phantom: Phantom,
    robot: Robot,
    needle_xy: (f64, f64),
    cutting: bool,
    command: f64,
    measured: Option<f64>,
    t: f64,
    step: f64,
    sample_interval: f64,
    next_sample: u64,
    /// Pending timed events, ascending.
    markers: Vec<(f64, Event)>,
    trace: Trace,
}

impl World {
    fn pose(&self) -> NeedlePose {
        NeedlePose {
            tip: Vec3::new(self.needle_xy.0, self.needle_xy.1, self.robot.z()),
            cutting: self.cutting,
        }
    }

    fn state(&self) -> &PhantomState {
        self.phantom.state().expect("world is initialized")
    }

    fn record(&mut self, events: Events) {
        let s = self.state();
        let (ilm, rpe) = s.layers_at(self.needle_xy.0).unwrap_or((s.ilm_z_um, s.rpe_z_um));
        let row = TraceRow {
            t: self.t,
            stage_z_um: s.stage_z_um,
            true_ilm_z_um: ilm,
            true_rpe_z_um: rpe,
            needle_tip_z_um: self.robot.z(),
            measured_median_ilm_z_um: self.measured,
            commanded_velocity_um_s: self.command,
            events,
        };
        self.trace.push(row);
    }

    fn sample_time(&self, k: u64) -> f64 {
        k as f64 * self.sample_interval
    }

    fn advance_to(&mut self, target: f64) -> Result<()> {
        if target < self.t {
            return Err(Error::TimeReversal {
                previous: self.t,
                requested: target,
            });
        }
        while self.t < target {
            let next_sample = self.sample_time(self.next_sample);
            let next_marker = self.markers.first().map_or(f64::INFINITY, |m| m.0);
            let next = (self.t + self.step).min(target).min(next_sample).min(next_marker);
            let dt = next - self.t;
            if dt > 0.0 {
                self.robot.step(self.command, dt);
            }
            self.t = next;
            let pose = self.pose();
            self.phantom.advance(next, Some(&pose))?;

            let mut events = Events::default();
            if next >= next_sample {
                events.insert(Event::Sample);
                self.next_sample += 1;
            }
            while self.markers.first().is_some_and(|m| m.0 <= next) {
                events.insert(self.markers.remove(0).1);
            }
            if events != Events::default() {
                self.record(events);
            }
        }
        Ok(())
    }

    fn schedule(&mut self, t: f64, event: Event) {
        let at = self.markers.partition_point(|m| m.0 <= t);
        self.markers.insert(at, (t, event));
    }
}

impl StateSource for World {
    fn state_at(&mut self, t: f64) -> Result<PhantomState> {
        self.advance_to(t)?;
        Ok(self.state().clone())
    }
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<Trace> {
    run_scenario_with(config, &RunOptions::default()).map(|out| out.trace)
}

/// Runs one closed-loop scenario: acquire, segment, command, integrate,
/// repeat until the duration is covered.
pub fn run_scenario_with(config: &ScenarioConfig, options: &RunOptions) -> Result<RunOutput> {
    config.validate()?;

    let mut timing_rng = ChaCha8Rng::seed_from_u64(config.seed);
    timing_rng.set_stream(STREAM_TIMING);
    let mut seg_rng = ChaCha8Rng::seed_from_u64(config.seed);
    seg_rng.set_stream(STREAM_SEGMENTATION);

    let mut scanner = Scanner::new(config.scan.clone(), config.timing.clone(), config.needle.shape())?;
    let mut controller = Controller::new(config.controller.clone())?;
    let actuation = Actuation::from_robot(&config.robot, config.timing.nominal_interval_s());

    let phantom = Phantom::new(config.phantom.clone(), config.motion.clone())?;
    let start_z = config.phantom.ilm_rest_depth_um + config.motion.displacement(0.0)
        - config.needle.start_above_ilm_um;
    let mut world = World {
        phantom,
        robot: Robot::new(config.robot.clone(), start_z),
        needle_xy: (config.needle.x_um, config.needle.y_um),
        cutting: config.kind == ScenarioKind::Inject,
        command: 0.0,
        measured: None,
        t: 0.0,
        step: config.integration_step_s,
        sample_interval: config.sample_interval_s,
        next_sample: 1,
        markers: Vec::new(),
        trace: Trace::new(Some(config.motion.dominant_period()), Some(config.kind)),
    };
    let pose = world.pose();
    world.phantom.advance(0.0, Some(&pose))?;
    world.record(Events::only(Event::Sample));

    let mut phase = match config.kind {
        ScenarioKind::Track => Phase::Tracking,
        ScenarioKind::Inject => Phase::Inserting,
    };
    let inj = &config.injection;
    let mut updates = Vec::new();
    let mut volumes = Vec::new();
    let duration = config.duration_s;

    while world.t < duration {
        let scan_start = world.t;
        let volume = scanner.acquire(&mut world, scan_start, &mut timing_rng)?;
        world.advance_to(volume.t_end)?;
        let t_cmd = volume.t_end + config.timing.processing_overhead_s;
        world.advance_to(t_cmd)?;
        if t_cmd > duration {
            break;
        }

        let volume = corrupt(volume, &config.segmentation, &mut seg_rng);
        let cloud = extract_surface_point_cloud(&volume);
        let median_ilm = median_layer_depth(&cloud, Class::Ilm);
        let median_rpe = median_layer_depth(&cloud, Class::Rpe);
        let needle_z = world.robot.z();

        let obs = Observation {
            t: t_cmd,
            median_ilm_um: median_ilm,
            measured_at: volume.t_effective(),
            needle_z_um: needle_z,
        };
        let mut events = Events::only(Event::Control);
        let mut insertion_target = None;
        if phase == Phase::Inserting {
            let target = median_ilm
                .zip(median_rpe)
                .map(|(ilm, rpe)| ilm + inj.target_relative_depth * (rpe - ilm));
            if target.is_some_and(|target| needle_z >= target) {
                phase = Phase::Injecting;
                world.cutting = false;
                controller.engage();
                events.insert(Event::InsertionComplete);
                world.schedule(t_cmd + inj.duration_s(), Event::InjectionEnd);
            } else {
                insertion_target = Some(target);
            }
        }

        // The controller sees every scan, also while inserting, so that its
        // history is current when compensation starts.
        let mut command = controller.update(&obs, &actuation)?;
        if let Some(target) = insertion_target {
            command = ControlCommand {
                velocity_z_um_s: if target.is_some() { inj.insertion_speed_um_s } else { 0.0 },
                issued_at: t_cmd,
                basis: CommandBasis::Insertion { target_um: target },
            };
        }

        world.command = command.velocity_z_um_s;
        world.measured = median_ilm;
        world.record(events);

        if volumes.len() < options.keep_volumes {
            volumes.push(volume.clone());
        }
        updates.push(ControlUpdate {
            t: t_cmd,
            volume_id: volume.id,
            scan_t_start: volume.t_start,
            scan_t_end: volume.t_end,
            median_ilm_um: median_ilm,
            median_rpe_um: median_rpe,
            needle_z_um: needle_z,
            command,
            phase,
        });
    }

    let mut trace = std::mem::take(&mut world.trace);
    trace.rows.retain(|r| r.t <= duration + 1e-9);
    Ok(RunOutput {
        trace,
        updates,
        volumes,
    })
}
