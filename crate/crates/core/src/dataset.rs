//! Demonstration records, the observation features, and the line-delimited
//! dataset file.
//!
//! File layout: line 1 is a header object
//! `{"schema_version", "sim", "tasks"}`; every following line is one sample
//! `{"trial", "t", "f": [8 numbers], "yp", "yr"}`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::expert::TaskSpec;
use crate::flightdyn::{heading_error, AircraftState, ControlInput, SimParams};
use crate::seeds::{self, stream};
use crate::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Identifies the feature layout below. Policies record it and refuse
/// features built under a different layout.
pub const FEATURE_SCHEMA_ID: &str = "straight-level-8/v1";
pub const FEATURE_COUNT: usize = 8;

const ALTITUDE_SCALE: f64 = 100.0;
const AIRSPEED_SCALE: f64 = 10.0;

/// Observation vector, in this order:
///
/// | idx | component |
/// |-----|-----------|
/// | 0 | sin(heading error) |
/// | 1 | cos(heading error) |
/// | 2 | altitude error / 100 m |
/// | 3 | airspeed error / 10 m/s |
/// | 4 | pitch attitude / pitch limit |
/// | 5 | bank angle / roll limit |
/// | 6 | pitch rate * dt (degrees per tick) |
/// | 7 | roll rate * dt (degrees per tick) |
///
/// Errors are `target - current`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub [f64; FEATURE_COUNT]);

impl FeatureVector {
    pub const NAMES: [&'static str; FEATURE_COUNT] = [
        "sin_heading_error",
        "cos_heading_error",
        "altitude_error",
        "airspeed_error",
        "pitch_att",
        "roll_att",
        "pitch_rate",
        "roll_rate",
    ];

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

pub fn featurize(state: &AircraftState, task: &TaskSpec, params: &SimParams) -> FeatureVector {
    let herr = heading_error(state.heading, task.target_heading).to_radians();
    FeatureVector([
        herr.sin(),
        herr.cos(),
        (task.target_altitude - state.altitude) / ALTITUDE_SCALE,
        (task.target_airspeed - state.airspeed) / AIRSPEED_SCALE,
        state.pitch_att / params.pitch_limit,
        state.roll_att / params.roll_limit,
        state.pitch_rate * params.dt,
        state.roll_rate * params.dt,
    ])
}

/// One (observation, expert action) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub features: FeatureVector,
    pub action: ControlInput,
    pub trial_id: usize,
    pub t: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    trial: usize,
    t: f64,
    f: [f64; FEATURE_COUNT],
    yp: f64,
    yr: f64,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        SampleRecord {
            trial: s.trial_id,
            t: s.t,
            f: s.features.0,
            yp: s.action.yoke_pitch,
            yr: s.action.yoke_roll,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub sim: SimParams,
    pub tasks: Vec<TaskSpec>,
}

impl DatasetMeta {
    pub fn new(sim: SimParams, tasks: Vec<TaskSpec>) -> Self {
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            sim,
            tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, meta: DatasetMeta) -> Self {
        Self { samples, meta }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_trials(&self) -> usize {
        self.meta.tasks.len()
    }

    /// Checks that trial ids index `meta.tasks` and that time increases
    /// within each trial.
    pub fn validate(&self) -> Result<()> {
        let mut last_t: Vec<Option<f64>> = vec![None; self.meta.tasks.len()];
        for (i, s) in self.samples.iter().enumerate() {
            let Some(slot) = last_t.get_mut(s.trial_id) else {
                return Err(Error::invalid(format!(
                    "sample {i}: trial {} has no task (dataset has {} trials)",
                    s.trial_id,
                    self.meta.tasks.len()
                )));
            };
            if let Some(prev) = *slot {
                if s.t <= prev {
                    return Err(Error::invalid(format!(
                        "sample {i}: time {} does not increase within trial {}",
                        s.t, s.trial_id
                    )));
                }
            }
            *slot = Some(s.t);
            if !s.features.is_finite() || !s.action.is_finite() {
                return Err(Error::invalid(format!("sample {i}: non-finite value")));
            }
            if s.action.yoke_pitch.abs() > 1.0 || s.action.yoke_roll.abs() > 1.0 {
                return Err(Error::invalid(format!("sample {i}: action outside [-1, 1]")));
            }
        }
        Ok(())
    }

    /// Keeps the listed trials, renumbering them 0.. in the given order.
    fn select_trials(&self, trials: &[usize]) -> Dataset {
        let mut new_id = vec![usize::MAX; self.meta.tasks.len()];
        for (new, &old) in trials.iter().enumerate() {
            new_id[old] = new;
        }
        let mut samples: Vec<Sample> = self
            .samples
            .iter()
            .filter(|s| new_id[s.trial_id] != usize::MAX)
            .map(|s| Sample {
                trial_id: new_id[s.trial_id],
                ..*s
            })
            .collect();
        samples.sort_by_key(|s| s.trial_id);
        let tasks = trials.iter().map(|&i| self.meta.tasks[i]).collect();
        Dataset::new(
            samples,
            DatasetMeta {
                tasks,
                ..self.meta.clone()
            },
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, &self.meta)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut *w, &SampleRecord::from(s))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), &path.display().to_string())
    }

    /// Parses a dataset stream. `what` names the source in error messages.
    pub fn read_from(reader: impl BufRead, what: &str) -> Result<Dataset> {
        let malformed = |line: usize, message: String| Error::Malformed {
            what: what.to_string(),
            line,
            message,
        };
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| malformed(1, e.to_string()))?,
            None => return Err(malformed(1, "missing header line".into())),
        };
        let version: serde_json::Value = serde_json::from_str(&header).map_err(|e| malformed(1, e.to_string()))?;
        let found = version.get("schema_version").and_then(|v| v.as_u64());
        if found != Some(DATASET_SCHEMA_VERSION as u64) {
            return Err(Error::Schema {
                expected: format!("dataset schema {DATASET_SCHEMA_VERSION}"),
                found: match found {
                    Some(v) => format!("dataset schema {v}"),
                    None => "no schema_version".into(),
                },
            });
        }
        let meta: DatasetMeta = serde_json::from_value(version).map_err(|e| malformed(1, e.to_string()))?;

        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| malformed(lineno, e.to_string()))?;
            let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
            if rec.trial >= meta.tasks.len() {
                return Err(malformed(lineno, format!("trial {} not declared in header", rec.trial)));
            }
            samples.push(Sample {
                features: FeatureVector(rec.f),
                action: ControlInput {
                    yoke_pitch: rec.yp,
                    yoke_roll: rec.yr,
                },
                trial_id: rec.trial,
                t: rec.t,
            });
        }
        Ok(Dataset::new(samples, meta))
    }
}

/// Splits by whole trials: a seeded shuffle of trial ids, the first
/// `round(n_trials * val_fraction)` of which become the validation set.
/// Both halves keep their trials in original order, renumbered from 0.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let n = dataset.n_trials();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seeds::derive(seed, stream::SPLIT, 0)));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val: BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let train: Vec<usize> = (0..n).filter(|i| !val.contains(i)).collect();
    let val: Vec<usize> = val.into_iter().collect();
    Ok((dataset.select_trials(&train), dataset.select_trials(&val)))
}
