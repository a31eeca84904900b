use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{loss_and_gradients, AdamState, Fidelity, LossConfig, LossError, LossReport};
use crate::datasets::PointCloud;
use crate::diffcore::{DiffError, Tensor};
use crate::flows::{FlowError, FlowModel};
use crate::otoracle::GaussianParams;
use crate::swdist::{sample_projections, SwError};

const BATCH_STREAM: u64 = 1;
const PROJECTION_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 3;

/// Staged training plan: the slice count grows from `slices_start` to
/// `slices_end` and each slice count is trained for `epochs_per_step`
/// epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub slices_start: usize,
    pub slices_end: usize,
    pub slices_step: usize,
    pub epochs_per_step: usize,
    /// Regularization switches on once the slice count reaches this.
    pub regularization_from: usize,
    /// Multiplier applied to both weights every `growth_interval` slices
    /// past activation.
    pub growth_factor: f64,
    pub growth_interval: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl Schedule {
    /// Full-scale plan: 500 to 2000 slices in steps of 50, 100 epochs per
    /// step, regularization from 1500 slices growing 5% per 100 slices.
    pub fn full_scale() -> Self {
        Self {
            slices_start: 500,
            slices_end: 2000,
            slices_step: 50,
            epochs_per_step: 100,
            regularization_from: 1500,
            growth_factor: 1.05,
            growth_interval: 100,
            batch_size: 4096,
            learning_rate: 1e-4,
            seed: 0,
        }
    }

    /// Desk-scale plan: 100 to 500 slices, 10 epochs per step,
    /// regularization from 300 slices.
    pub fn desk() -> Self {
        Self {
            slices_start: 100,
            slices_end: 500,
            slices_step: 50,
            epochs_per_step: 10,
            regularization_from: 300,
            growth_factor: 1.05,
            growth_interval: 100,
            batch_size: 100,
            learning_rate: 1e-2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidSchedule(m.into()));
        if self.slices_start == 0 || self.slices_start > self.slices_end {
            return bad("need 1 <= slices_start <= slices_end");
        }
        if self.slices_step == 0 {
            return bad("slices_step must be >= 1");
        }
        if self.epochs_per_step == 0 {
            return bad("epochs_per_step must be >= 1");
        }
        if !(self.growth_factor >= 1.0 && self.growth_factor.is_finite()) {
            return bad("growth_factor must be finite and >= 1");
        }
        if self.growth_interval == 0 {
            return bad("growth_interval must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn slice_counts(&self) -> impl Iterator<Item = usize> + '_ {
        (self.slices_start..=self.slices_end).step_by(self.slices_step.max(1))
    }

    pub fn total_epochs(&self) -> usize {
        self.slice_counts().count() * self.epochs_per_step
    }

    /// `(lambda, gamma)` in force at slice count `slices`.
    pub fn weights_at(&self, slices: usize, cfg: &LossConfig) -> (f64, f64) {
        if !cfg.regularization || slices < self.regularization_from {
            return (0.0, 0.0);
        }
        let k = (slices - self.regularization_from) / self.growth_interval;
        let f = self.growth_factor.powi(k as i32);
        (cfg.lambda * f, cfg.gamma * f)
    }
}

/// What the model is trained to reach.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Samples(&'a PointCloud),
    Gaussian(&'a GaussianParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Seconds spent in each epoch.
    pub wall_times: Vec<f64>,
    pub steps: u64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid training data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    /// Parameters hold the last finite state when this is returned.
    #[error("training diverged in epoch {epoch}: {message}")]
    Diverged {
        epoch: usize,
        message: String,
        history: Vec<EpochRecord>,
    },
}

fn is_numeric(e: &LossError) -> bool {
    let diff = match e {
        LossError::Diff(d) => d,
        LossError::Flow(FlowError::Diff(d)) => d,
        LossError::Flow(FlowError::Unit { source, .. }) => source,
        LossError::Sliced(SwError::Diff(d)) => d,
        _ => return false,
    };
    matches!(diff, DiffError::NonFinite { .. } | DiffError::NonFiniteGradient(_))
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(idx.len(), d, data).expect("row gather")
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Runs the staged schedule, recording one averaged report per epoch.
///
/// Every epoch shuffles `x` and the target samples independently, cuts
/// them into `batch_size` batches (dropping the ragged tail) and draws a
/// fresh projection set. Uninitialized ActNorm layers are fitted to the
/// first source batch.
pub fn train(
    model: &mut FlowModel,
    x: &PointCloud,
    target: Target<'_>,
    schedule: &Schedule,
    cfg: &LossConfig,
) -> Result<TrainOutcome, TrainError> {
    schedule.validate()?;
    cfg.validate()?;
    if x.dim() != model.dim() {
        return Err(TrainError::InvalidData(format!(
            "source has d={}, model has d={}",
            x.dim(),
            model.dim()
        )));
    }
    let pool = match target {
        Target::Samples(y) => {
            if cfg.semi_discrete {
                return Err(TrainError::InvalidData("semi-discrete mode needs a Gaussian target".into()));
            }
            if y.dim() != x.dim() {
                return Err(TrainError::InvalidData(format!(
                    "target has d={}, source has d={}",
                    y.dim(),
                    x.dim()
                )));
            }
            x.len().min(y.len())
        }
        Target::Gaussian(g) => {
            if !cfg.semi_discrete {
                return Err(TrainError::InvalidData("a Gaussian target requires semi-discrete mode".into()));
            }
            if g.dim() != x.dim() {
                return Err(TrainError::InvalidData("target Gaussian dimension differs".into()));
            }
            x.len()
        }
    };
    let batch = schedule.batch_size.min(pool);
    if batch < 2 {
        return Err(TrainError::InvalidData("need at least two points per batch".into()));
    }
    let batches = pool / batch;

    let mut batch_rng = stream(schedule.seed, BATCH_STREAM);
    let mut proj_rng = stream(schedule.seed, PROJECTION_STREAM);
    let mut probe_rng = stream(schedule.seed, PROBE_STREAM);
    let mut adam = AdamState::new(model.params(), schedule.learning_rate);
    let mut history = Vec::with_capacity(schedule.total_epochs());
    let mut wall_times = Vec::with_capacity(schedule.total_epochs());
    let mut x_order: Vec<usize> = (0..x.len()).collect();
    let mut y_order: Vec<usize> = match target {
        Target::Samples(y) => (0..y.len()).collect(),
        Target::Gaussian(_) => Vec::new(),
    };
    let mut epoch = 0;

    for slices in schedule.slice_counts() {
        let (lambda, gamma) = schedule.weights_at(slices, cfg);
        let step_cfg = LossConfig {
            lambda,
            gamma,
            regularization: true,
            ..cfg.clone()
        };
        for _ in 0..schedule.epochs_per_step {
            epoch += 1;
            let started = Instant::now();
            x_order.shuffle(&mut batch_rng);
            y_order.shuffle(&mut batch_rng);
            let projections = sample_projections(slices, x.dim(), cfg.p, &mut proj_rng)
                .map_err(LossError::from)?;
            let mut reports = Vec::with_capacity(batches);
            for b in 0..batches {
                let span = b * batch..(b + 1) * batch;
                let xb = rows(x.points(), &x_order[span.clone()]);
                if !model.is_initialized() {
                    model
                        .initialize_actnorm(&PointCloud::new(xb.clone()).map_err(FlowError::from).map_err(LossError::from)?)
                        .map_err(LossError::from)?;
                    adam = AdamState::new(model.params(), schedule.learning_rate);
                }
                let yb;
                let fidelity = match target {
                    Target::Samples(y) => {
                        yb = rows(y.points(), &y_order[span]);
                        Fidelity::Sliced {
                            target: &yb,
                            projections: &projections,
                        }
                    }
                    Target::Gaussian(g) => Fidelity::Gaussian(g),
                };
                let snapshot = model.params().values_snapshot();
                let step = loss_and_gradients(model, &xb, fidelity, &step_cfg, &mut probe_rng)
                    .and_then(|r| {
                        adam.step(model.params_mut())?;
                        Ok(r)
                    });
                let diverged = |message: String, history: Vec<EpochRecord>| TrainError::Diverged {
                    epoch,
                    message,
                    history,
                };
                match step {
                    Ok(r) => {
                        let finite = model.params().iter().all(|(_, _, v)| v.is_finite());
                        if !finite {
                            model.params_mut().restore_values(&snapshot);
                            return Err(diverged("parameters became non-finite".into(), history));
                        }
                        reports.push(r);
                    }
                    Err(e) if is_numeric(&e) => {
                        model.params_mut().restore_values(&snapshot);
                        return Err(diverged(e.to_string(), history));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            let report = LossReport::mean(&reports).expect("at least one batch per epoch");
            history.push(EpochRecord { epoch, report });
            wall_times.push(started.elapsed().as_secs_f64());
        }
    }
    Ok(TrainOutcome {
        history,
        wall_times,
        steps: adam.step_count(),
    })
}

/// Fixed leading columns of the history CSV; `cost_1..cost_M` and
/// `energy_1..energy_M` follow.
pub const HISTORY_COLUMNS: [&str; 7] = ["epoch", "slices", "lambda", "gamma", "total", "fidelity", "sw"];

/// History as CSV with shortest round-trip float formatting.
pub fn write_history_csv(history: &[EpochRecord]) -> String {
    let flows = history.first().map_or(0, |r| r.report.flow_costs.len());
    let mut out = HISTORY_COLUMNS.join(",");
    for m in 1..=flows {
        let _ = write!(out, ",cost_{m}");
    }
    for m in 1..=flows {
        let _ = write!(out, ",energy_{m}");
    }
    out.push('\n');
    for rec in history {
        let r = &rec.report;
        let sw = r.sw.map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = write!(
            out,
            "{},{},{:?},{:?},{:?},{:?},{}",
            rec.epoch, r.slices, r.lambda, r.gamma, r.total, r.fidelity, sw
        );
        for v in r.flow_costs.iter().chain(&r.jacobian_energies) {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Parses text produced by [`write_history_csv`].
pub fn read_history_csv(text: &str) -> Result<Vec<EpochRecord>, String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty history")?.split(',').collect();
    if header.len() < HISTORY_COLUMNS.len() || header[..HISTORY_COLUMNS.len()] != HISTORY_COLUMNS {
        return Err("unexpected history header".into());
    }
    let extra = header.len() - HISTORY_COLUMNS.len();
    if extra % 2 != 0 {
        return Err("cost and energy columns must pair up".into());
    }
    let flows = extra / 2;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(format!("line {lineno}: expected {} fields", header.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {lineno}: bad number {s:?}"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| format!("line {lineno}: bad integer {s:?}"));
        let values = |range: std::ops::Range<usize>| f[range].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>();
        let base = HISTORY_COLUMNS.len();
        out.push(EpochRecord {
            epoch: int(f[0])?,
            report: LossReport {
                slices: int(f[1])?,
                lambda: num(f[2])?,
                gamma: num(f[3])?,
                total: num(f[4])?,
                fidelity: num(f[5])?,
                sw: if f[6].is_empty() { None } else { Some(num(f[6])?) },
                flow_costs: values(base..base + flows)?,
                jacobian_energies: values(base + flows..base + 2 * flows)?,
            },
        });
    }
    Ok(out)
}
