use std::io::{Read, Write};

use crate::config::ScenarioKind;
use crate::error::{Error, Result};

/// Rows closer than this are merged so that printed times stay distinct.
const MERGE_EPS_S: f64 = 2e-6;

pub const TRACE_HEADER: [&str; 8] = [
    "t_s",
    "stage_z_um",
    "true_ilm_z_um",
    "true_rpe_z_um",
    "needle_tip_z_um",
    "measured_median_ilm_z_um",
    "commanded_velocity_um_s",
    "event",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Sample,
    Control,
    InsertionComplete,
    InjectionEnd,
}

impl Event {
    pub const ALL: [Event; 4] = [
        Event::Sample,
        Event::Control,
        Event::InsertionComplete,
        Event::InjectionEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Event::Sample => "sample",
            Event::Control => "control",
            Event::InsertionComplete => "insertion_complete",
            Event::InjectionEnd => "injection_end",
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

/// Set of tags carried by one row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Events(u8);

impl Events {
    pub fn only(e: Event) -> Self {
        Self(e.bit())
    }

    pub fn contains(self, e: Event) -> bool {
        self.0 & e.bit() != 0
    }

    pub fn insert(&mut self, e: Event) {
        self.0 |= e.bit();
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Event> {
        Event::ALL.into_iter().filter(move |e| self.contains(*e))
    }

    /// `sample` alone, otherwise the non-sample tags joined by `|`.
    pub fn label(self) -> String {
        let tags: Vec<_> = self.iter().filter(|e| *e != Event::Sample).map(Event::name).collect();
        if tags.is_empty() {
            Event::Sample.name().to_string()
        } else {
            tags.join("|")
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        let mut set = Self::default();
        for tag in label.split('|') {
            let e = Event::ALL
                .into_iter()
                .find(|e| e.name() == tag.trim())
                .ok_or_else(|| Error::Trace(format!("unknown event tag `{tag}`")))?;
            set.insert(e);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub stage_z_um: f64,
    /// ILM and RPE at the needle's lateral position.
    pub true_ilm_z_um: f64,
    pub true_rpe_z_um: f64,
    pub needle_tip_z_um: f64,
    pub measured_median_ilm_z_um: Option<f64>,
    /// Last issued command, in command units.
    pub commanded_velocity_um_s: f64,
    pub events: Events,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    /// Dominant motion period, needed for lag and amplitude estimates.
    pub period_s: Option<f64>,
    pub kind: Option<ScenarioKind>,
}

impl Trace {
    pub fn new(period_s: Option<f64>, kind: Option<ScenarioKind>) -> Self {
        Self {
            rows: Vec::new(),
            period_s,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Appends a row; a row at (nearly) the same time as the previous one is
    /// merged into it, keeping the newer values and the union of tags.
    pub fn push(&mut self, row: TraceRow) {
        if let Some(last) = self.rows.last_mut() {
            if row.t - last.t < MERGE_EPS_S {
                let events = last.events.union(row.events);
                let t = last.t;
                *last = TraceRow { t, events, ..row };
                return;
            }
        }
        self.rows.push(row);
    }

    /// First row carrying `event`.
    pub fn first_event(&self, event: Event) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.events.contains(event))
    }

    pub fn control_rows(&self) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(|r| r.events.contains(Event::Control))
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.rows.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Trace(format!(
                    "time not strictly increasing at t = {}",
                    w[1].t
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_HEADER)?;
        for r in &self.rows {
            let measured = r
                .measured_median_ilm_z_um
                .map(|m| format!("{m:.6}"))
                .unwrap_or_default();
            out.write_record([
                format!("{:.6}", r.t),
                format!("{:.6}", r.stage_z_um),
                format!("{:.6}", r.true_ilm_z_um),
                format!("{:.6}", r.true_rpe_z_um),
                format!("{:.6}", r.needle_tip_z_um),
                measured,
                format!("{:.6}", r.commanded_velocity_um_s),
                r.events.label(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Reads a trace written by [`Trace::write_csv`]. Period and kind are not
    /// stored in the file and come back as `None`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers()?.clone();
        if header.iter().ne(TRACE_HEADER) {
            return Err(Error::Trace(format!(
                "unexpected header; expected {}",
                TRACE_HEADER.join(",")
            )));
        }
        let mut trace = Trace::default();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let num = |k: usize| -> Result<f64> {
                record[k].trim().parse::<f64>().map_err(|e| {
                    Error::Trace(format!("row {}: column {}: {e}", i + 1, TRACE_HEADER[k]))
                })
            };
            let measured = if record[5].trim().is_empty() {
                None
            } else {
                Some(num(5)?)
            };
            trace.rows.push(TraceRow {
                t: num(0)?,
                stage_z_um: num(1)?,
                true_ilm_z_um: num(2)?,
                true_rpe_z_um: num(3)?,
                needle_tip_z_um: num(4)?,
                measured_median_ilm_z_um: measured,
                commanded_velocity_um_s: num(6)?,
                events: Events::parse(&record[7])?,
            });
        }
        trace.validate()?;
        Ok(trace)
    }
}
