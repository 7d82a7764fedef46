//! Experiment drivers behind the `racer` subcommands: iterative time-trial
//! sessions, the head-to-head exploration protocol, and offline GP evaluation
//! against logged races.

use std::path::Path;

use racer_core::gp::{GpModel, GpModelFile, KernelSpec, Observation};
use racer_core::headtohead::{
    absorb_samples, fit_opponent_gp, prediction_errors, run_race, OpponentState, RaceLog,
};
use racer_core::timetrial::{
    initial_plan, measure_residuals, mpc_step, IterationLog, OcpSolution, Reference,
    ResidualSample, TimeTrialConfig, TimeTrialSession,
};
use racer_core::vehicle::plant_step;
use racer_core::track::random_track;
use racer_core::{GpDataset, Track, VehicleState};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, H2hSection};
use crate::report::{mean_std, write_json, BaselineReport, MetricsReport, PredStep, RaceStats};
use crate::CliError;

/// Seed offsets separating the head-to-head batches so training, exploration
/// and evaluation draw disjoint random tracks from the same base seed.
const EXPLORE_SEED_OFFSET: u64 = 100_000;
const EVAL_SEED_OFFSET: u64 = 200_000;
/// Hard cap on chained exploration races, guarding against a session whose
/// races terminate immediately.
const MAX_EXPLORE_RACES: usize = 1000;

/// Self-contained input for `racer evalgp`: the track a race was logged on
/// plus the full per-step log and one-step samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalData {
    pub track: Track,
    pub log: RaceLog,
}

// ---------------------------------------------------------------------------
// CSV records
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TimeTrialRecord {
    t: f64,
    v_x: f64,
    v_y: f64,
    psi_dot: f64,
    e_psi: f64,
    e_y: f64,
    s: f64,
    delta: f64,
    a_x: f64,
    z_ref_v_y: f64,
    z_ref_psi_dot: f64,
    z_ref_delta: f64,
    gamma_1: f64,
    qp_optimal: bool,
}

#[derive(Serialize)]
struct RaceRecord {
    t: f64,
    ego_v_x: f64,
    ego_v_y: f64,
    ego_psi_dot: f64,
    ego_e_psi: f64,
    ego_e_y: f64,
    ego_s: f64,
    opp_s: f64,
    opp_e_y: f64,
    opp_e_psi: f64,
    opp_v_x: f64,
    alpha: f64,
    target_index: Option<usize>,
    slack_total: f64,
    separation: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Csv(path.display().to_string(), e.to_string()))
}

fn write_iteration_csv(path: &Path, log: &IterationLog) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    for step in &log.steps {
        let rec = TimeTrialRecord {
            t: step.t,
            v_x: step.state.v_x,
            v_y: step.state.v_y,
            psi_dot: step.state.psi_dot,
            e_psi: step.state.e_psi,
            e_y: step.state.e_y,
            s: step.state.s,
            delta: step.input.delta,
            a_x: step.input.a_x,
            z_ref_v_y: step.z_ref[0],
            z_ref_psi_dot: step.z_ref[1],
            z_ref_delta: step.z_ref[2],
            gamma_1: step.gamma_1,
            qp_optimal: step.qp_optimal,
        };
        w.serialize(rec).map_err(|e| CliError::Csv(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(path.display().to_string(), e))
}

fn write_race_csv(path: &Path, log: &RaceLog) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    for step in &log.steps {
        let rec = RaceRecord {
            t: step.t,
            ego_v_x: step.ego.v_x,
            ego_v_y: step.ego.v_y,
            ego_psi_dot: step.ego.psi_dot,
            ego_e_psi: step.ego.e_psi,
            ego_e_y: step.ego.e_y,
            ego_s: step.ego.s,
            opp_s: step.opp.s,
            opp_e_y: step.opp.e_y,
            opp_e_psi: step.opp.e_psi,
            opp_v_x: step.opp.v_x,
            alpha: step.alpha,
            target_index: step.target_index,
            slack_total: step.slack_total,
            separation: step.separation,
        };
        w.serialize(rec).map_err(|e| CliError::Csv(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// shared evaluation helpers
// ---------------------------------------------------------------------------

/// One-step residual RMSE per output of a GP over a sample set.
pub fn rmse_per_output(model: &GpModel, samples: &[Observation]) -> Vec<f64> {
    let n_y = model.n_outputs();
    let mut sq = vec![0.0; n_y];
    let mut n = 0usize;
    for obs in samples {
        if !obs.is_finite() || obs.z.len() != model.n_features() {
            continue;
        }
        let mean = model.predict_mean(&obs.z);
        for (d, sq_d) in sq.iter_mut().enumerate() {
            let e = mean[d] - obs.y[d];
            *sq_d += e * e;
        }
        n += 1;
    }
    if n == 0 {
        return vec![0.0; n_y];
    }
    sq.into_iter().map(|s| (s / n as f64).sqrt()).collect()
}

fn keep_stride(samples: &[Observation], stride: usize) -> Vec<Observation> {
    samples.iter().step_by(stride.max(1)).cloned().collect()
}

// ---------------------------------------------------------------------------
// time trial
// ---------------------------------------------------------------------------

/// Run the iterative time-trial protocol: `iterations` laps with the
/// configured exploration schedule, refitting the compensation and planning
/// GPs after each lap, then score both final GPs on a standardized held-out
/// validation lap (the uncompensated initial plan, identical for every
/// schedule so RMSE numbers are comparable across runs).
pub fn run_timetrial(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
) -> Result<MetricsReport, CliError> {
    let track = cfg.track.build(seed)?;
    let mut session = TimeTrialSession::new(
        track.clone(),
        cfg.vehicle.clone(),
        cfg.timetrial.config.clone(),
        seed,
    );

    let mut report = MetricsReport::empty();
    for i in 0..cfg.timetrial.iterations {
        let log = session.run_iteration();
        write_iteration_csv(&out.join(format!("iteration_{i:02}.csv")), &log)?;
        report.lap_times_planned.push(log.lap_time_planned);
        report.lap_times_measured.push(log.lap_time_measured);
    }

    report.gp_rmse = timetrial_validation_rmse(cfg, &session);

    if let Some(m) = &session.model_mpc {
        write_json(&out.join("model_mpc.json"), &GpModelFile::from(m))?;
    }
    if let Some(m) = &session.model_plan {
        write_json(&out.join("model_plan.json"), &GpModelFile::from(m))?;
    }
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}

/// Residual samples from the standardized diverse validation lap: the
/// uncompensated tracking MPC follows the initial plan with fixed
/// incommensurate sinusoidal offsets on the lateral-dynamics references, so
/// the lap visits feature combinations off the racing line. The trajectory is
/// fully deterministic and depends only on the track, vehicle and controller
/// settings — not on the learning schedule being scored — so different
/// schedules are compared on identical held-out data.
pub fn validation_samples(
    track: &Track,
    params: &racer_core::VehicleParams,
    tt: &TimeTrialConfig,
) -> Vec<ResidualSample> {
    let plan = initial_plan(
        track,
        tt.planner.n_points,
        tt.planner.v_max,
        tt.a_lat_max,
        tt.planner.ax_bounds,
        params,
    );
    let l = track.total_length();
    let n = tt.mpc.n_horizon;
    let t_step = tt.mpc.period;
    let mut xi = plan.states[0];
    xi.s = 0.0;
    let mut prev: Option<OcpSolution> = None;
    let mut last_delta = 0.0;
    let mut samples = Vec::new();
    let mut progress = 0.0;
    let mut t = 0.0;
    while t < tt.max_lap_time && progress < l {
        let mut states = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        let mut s = xi.s;
        for _ in 0..n {
            let (st, u) = plan.sample(s, track);
            let kappa = track.curvature_at(s);
            let sdot =
                (st.v_x * st.e_psi.cos() - st.v_y * st.e_psi.sin()) / (1.0 - kappa * st.e_y);
            s += t_step * sdot.max(0.5);
            let (mut st_next, _) = plan.sample(s, track);
            let phase = 2.0 * std::f64::consts::PI * s / l;
            st_next.v_y += 0.35 * (7.0 * phase).sin();
            st_next.psi_dot += 0.5 * (11.0 * phase + 1.0).sin();
            states.push(st_next);
            deltas.push(u.delta + 0.08 * (13.0 * phase + 2.0).sin());
        }
        let reference = Reference { states, deltas };
        let (u0, sol) =
            mpc_step(&xi, &reference, None, prev.as_ref(), last_delta, track, params, &tt.mpc);
        let Ok(next) = plant_step(&xi, &u0, params, &tt.plant, track, t_step) else {
            break;
        };
        samples.push(measure_residuals(&xi, &u0, &next, track, params, t_step));
        let mut ds = next.s - xi.s;
        if track.closed {
            if ds < -l * 0.5 {
                ds += l;
            } else if ds > l * 0.5 {
                ds -= l;
            }
        }
        progress += ds;
        prev = Some(sol);
        last_delta = u0.delta;
        xi = next;
        t += t_step;
    }
    samples
}

/// Held-out residual RMSE of the session's final GPs:
/// `[mpc_v_y, mpc_psi_dot, plan_v_y, plan_psi_dot]` over the standardized
/// diverse validation lap.
pub fn timetrial_validation_rmse(cfg: &ExperimentConfig, session: &TimeTrialSession) -> Vec<f64> {
    let (Some(model_mpc), Some(model_plan)) = (&session.model_mpc, &session.model_plan) else {
        return Vec::new();
    };
    let samples = validation_samples(&session.track, &cfg.vehicle, &cfg.timetrial.config);
    let mut sq = [0.0f64; 4];
    let mut n = 0usize;
    for sample in &samples {
        let m_mpc = model_mpc.predict_mean(&sample.z);
        let m_plan = model_plan.predict_mean(&sample.z);
        sq[0] += (m_mpc[0] - sample.y_mpc[0]).powi(2);
        sq[1] += (m_mpc[1] - sample.y_mpc[1]).powi(2);
        sq[2] += (m_plan[0] - sample.y_plan[0]).powi(2);
        sq[3] += (m_plan[1] - sample.y_plan[1]).powi(2);
        n += 1;
    }
    if n == 0 {
        return Vec::new();
    }
    sq.iter().map(|s| (s / n as f64).sqrt()).collect()
}

// ---------------------------------------------------------------------------
// head to head
// ---------------------------------------------------------------------------

fn ego_start(h: &H2hSection) -> VehicleState {
    VehicleState { v_x: h.start_speed, v_y: 0.0, psi_dot: 0.0, e_psi: 0.0, e_y: 0.0, s: 0.0 }
}

fn opp_start(h: &H2hSection) -> OpponentState {
    OpponentState { s: h.start_gap, e_y: 0.0, e_psi: 0.0, v_x: h.start_speed }
}

struct ArmOutcome {
    overtake_capped: Vec<f64>,
    stats: RaceStats,
    pred_errors: Vec<Vec<f64>>,
    sq_err: Vec<f64>,
    n_samples: usize,
}

impl ArmOutcome {
    fn new(pred_steps: usize) -> Self {
        Self {
            overtake_capped: Vec::new(),
            stats: RaceStats { races: 0, overtaken: 0, hard_collisions: 0, border_hits: 0 },
            pred_errors: vec![Vec::new(); pred_steps],
            sq_err: vec![0.0; 4],
            n_samples: 0,
        }
    }

    fn record_race(&mut self, log: &RaceLog, duration_cap: f64) {
        self.stats.races += 1;
        self.stats.hard_collisions += log.hard_collisions;
        self.stats.border_hits += log.border_hits;
        match log.overtake_time {
            Some(t) => {
                self.stats.overtaken += 1;
                self.overtake_capped.push(t);
            }
            None => self.overtake_capped.push(duration_cap),
        }
    }

    fn record_predictions(&mut self, model: &GpModel, data: &EvalData, pred_steps: usize) {
        let errs = prediction_errors(model, &data.log, &data.track, pred_steps);
        for (bucket, e) in self.pred_errors.iter_mut().zip(errs) {
            bucket.extend(e);
        }
        for obs in &data.log.samples {
            if !obs.is_finite() {
                continue;
            }
            let mean = model.predict_mean(&obs.z);
            for d in 0..4 {
                self.sq_err[d] += (mean[d] - obs.y[d]).powi(2);
            }
            self.n_samples += 1;
        }
    }

    fn rmse(&self) -> Vec<f64> {
        if self.n_samples == 0 {
            return Vec::new();
        }
        self.sq_err.iter().map(|s| (s / self.n_samples as f64).sqrt()).collect()
    }

    fn pred_curve(&self) -> Vec<PredStep> {
        self.pred_errors
            .iter()
            .enumerate()
            .map(|(k, e)| PredStep::from_errors(k + 1, e))
            .collect()
    }
}

/// Run the full head-to-head protocol:
/// 1. a seeded batch of passive races (alpha = 0, no opponent model) on random
///    tracks, feeding the initial GP (first `passive_initial` races) and the
///    baseline comparator GP (first `passive_baseline` races);
/// 2. an exploration session — races chained with the initial GP at
///    `explore_alpha` until `explore_duration` simulated seconds — whose data
///    is absorbed on top of the initial dataset and retrained into the
///    exploration GP;
/// 3. an evaluation batch of fresh random tracks raced at alpha = 0 once per
///    GP, plus one passive race per track whose logged trajectory scores both
///    GPs on identical data.
pub fn run_h2h(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<MetricsReport, CliError> {
    let h = &cfg.h2h;
    let params = &cfg.vehicle;
    let policy = racer_core::dataselect::SelectionPolicy {
        capacity: h.capacity,
        outlier_multiplier: 3.0,
    };
    let kernel = KernelSpec::matern32(3.0);
    let ego0 = ego_start(h);
    let opp0 = opp_start(h);

    let t0 = std::time::Instant::now();

    // phase 1: passive training batch
    let n_passive = h.passive_initial.max(h.passive_baseline);
    let mut ds_initial = GpDataset::new(h.capacity);
    let mut ds_baseline = GpDataset::new(h.capacity);
    for i in 0..n_passive {
        let race_seed = seed.wrapping_add(i as u64);
        let track = random_track(race_seed, &h.tracks)?;
        let log = run_race(&track, &ego0, &opp0, None, 0.0, race_seed, params, &h.race);
        eprintln!("[h2h] train race {}/{} ({:.0}s)", i + 1, n_passive, t0.elapsed().as_secs_f64());
        write_race_csv(&out.join(format!("train_{i:03}.csv")), &log)?;
        let samples = keep_stride(&log.samples, h.sample_stride);
        if i < h.passive_initial {
            absorb_samples(&mut ds_initial, &samples, &policy, &kernel, &h.noise, h.min_fit);
        }
        if i < h.passive_baseline {
            absorb_samples(&mut ds_baseline, &samples, &policy, &kernel, &h.noise, h.min_fit);
        }
    }
    let gp_initial =
        fit_opponent_gp(&ds_initial, &h.noise, h.hyperopt.as_ref().map(|s| (s, seed)))?;
    let gp_baseline =
        fit_opponent_gp(&ds_baseline, &h.noise, h.hyperopt.as_ref().map(|s| (s, seed ^ 1)))?;

    // phase 2: exploration session on top of the initial GP
    let mut ds_explore = ds_initial.clone();
    let mut sim_time = 0.0;
    let mut i = 0usize;
    while sim_time < h.explore_duration && i < MAX_EXPLORE_RACES {
        let race_seed = seed.wrapping_add(EXPLORE_SEED_OFFSET).wrapping_add(i as u64);
        let track = random_track(race_seed, &h.tracks)?;
        let log = run_race(
            &track,
            &ego0,
            &opp0,
            Some(&gp_initial),
            h.explore_alpha,
            race_seed,
            params,
            &h.race,
        );
        write_race_csv(&out.join(format!("explore_{i:03}.csv")), &log)?;
        if log.steps.is_empty() {
            break;
        }
        sim_time += log.steps.len() as f64 * h.race.h2h.period;
        eprintln!(
            "[h2h] explore race {} ({:.0}/{:.0} sim s, {:.0}s)",
            i + 1,
            sim_time,
            h.explore_duration,
            t0.elapsed().as_secs_f64()
        );
        let samples = keep_stride(&log.samples, h.sample_stride);
        absorb_samples(&mut ds_explore, &samples, &policy, &kernel, &h.noise, h.min_fit);
        i += 1;
    }
    let gp_explore =
        fit_opponent_gp(&ds_explore, &h.noise, h.hyperopt.as_ref().map(|s| (s, seed ^ 2)))?;

    write_json(&out.join("gp_initial.json"), &GpModelFile::from(&gp_initial))?;
    write_json(&out.join("gp_baseline.json"), &GpModelFile::from(&gp_baseline))?;
    write_json(&out.join("gp_explore.json"), &GpModelFile::from(&gp_explore))?;

    // phase 3: evaluation batch
    let mut arm_explore = ArmOutcome::new(h.pred_steps);
    let mut arm_baseline = ArmOutcome::new(h.pred_steps);
    for i in 0..h.eval_tracks {
        let eval_seed = seed.wrapping_add(EVAL_SEED_OFFSET).wrapping_add(i as u64);
        let track = random_track(eval_seed, &h.tracks)?;

        let log_e =
            run_race(&track, &ego0, &opp0, Some(&gp_explore), 0.0, eval_seed, params, &h.race);
        write_race_csv(&out.join(format!("eval_explore_{i:02}.csv")), &log_e)?;
        arm_explore.record_race(&log_e, h.race.duration);

        let log_b =
            run_race(&track, &ego0, &opp0, Some(&gp_baseline), 0.0, eval_seed, params, &h.race);
        write_race_csv(&out.join(format!("eval_baseline_{i:02}.csv")), &log_b)?;
        arm_baseline.record_race(&log_b, h.race.duration);

        // neutral logged trajectory: no opponent model in the loop, so the
        // prediction-error comparison sees data generated independently of
        // either GP being scored
        let log_p = run_race(&track, &ego0, &opp0, None, 0.0, eval_seed, params, &h.race);
        write_race_csv(&out.join(format!("eval_passive_{i:02}.csv")), &log_p)?;
        let data = EvalData { track, log: log_p };
        write_json(&out.join(format!("evaldata_{i:02}.json")), &data)?;
        arm_explore.record_predictions(&gp_explore, &data, h.pred_steps);
        arm_baseline.record_predictions(&gp_baseline, &data, h.pred_steps);
        eprintln!(
            "[h2h] eval track {}/{} ({:.0}s)",
            i + 1,
            h.eval_tracks,
            t0.elapsed().as_secs_f64()
        );
    }

    let (ot_mean_e, ot_std_e) = match mean_std(&arm_explore.overtake_capped) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    };
    let (ot_mean_b, ot_std_b) = match mean_std(&arm_baseline.overtake_capped) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    };

    let report = MetricsReport {
        lap_times_planned: Vec::new(),
        lap_times_measured: Vec::new(),
        gp_rmse: arm_explore.rmse(),
        overtake_time_mean: ot_mean_e,
        overtake_time_std: ot_std_e,
        pred_err_by_step: arm_explore.pred_curve(),
        stats: Some(arm_explore.stats),
        baseline: Some(BaselineReport {
            overtake_time_mean: ot_mean_b,
            overtake_time_std: ot_std_b,
            gp_rmse: arm_baseline.rmse(),
            pred_err_by_step: arm_baseline.pred_curve(),
            stats: arm_baseline.stats,
        }),
    };
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// evalgp
// ---------------------------------------------------------------------------

/// Score a stored GP against a logged race: one-step residual RMSE per output
/// on the logged samples plus the multi-step lateral prediction-error curve.
pub fn run_evalgp(
    model_path: &Path,
    data_path: &Path,
    pred_steps: usize,
    out: &Path,
) -> Result<MetricsReport, CliError> {
    let file: GpModelFile = crate::report::read_json(model_path)?;
    let model = file.fit()?;
    let data: EvalData = crate::report::read_json(data_path)?;

    let mut report = MetricsReport::empty();
    report.gp_rmse = rmse_per_output(&model, &data.log.samples);
    let errs = prediction_errors(&model, &data.log, &data.track, pred_steps);
    report.pred_err_by_step =
        errs.iter().enumerate().map(|(k, e)| PredStep::from_errors(k + 1, e)).collect();
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}
