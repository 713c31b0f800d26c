//! Closed-loop scenario engine: per-step wiring of plant, sensors, the two
//! estimators, the detector, the attacker tracker, and the two controllers,
//! plus batch runs and metrics.
//!
//! One step of a run: sample noise, advance the plant, measure, form the
//! attack-vector statistic from the previous detection estimate, update the
//! CUSUM and the mode, update the detection estimator (always GPS + relative)
//! and the control estimator (relative only once an attack is flagged), then
//! pick the input: the robust tracking law in robust mode, or the escape
//! controller re-solved every step in emergency mode. Identical config and
//! seed reproduce the trace byte for byte.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::ScenarioConfig;
use crate::detector::{self, ControlMode, DetectorState};
use crate::escape::{
    self, ControlPlan, ControllerVariant, EscapeInputs, EscapeProblem,
};
use crate::estimator::{self, EstimatorMode, EstimatorState};
use crate::model::{self, SensorNoise, SystemModel, TrueState};
use crate::rng::{NoiseChannel, ScenarioRng};
use crate::trace::{ScenarioTrace, SolverRecord, TraceDims, TraceRecord, TrackerRecord};
use crate::tracker::AttackerEstimate;
use crate::{Error, Result};

/// Robust-mode tracking gains.
#[derive(Debug, Clone, Copy)]
pub struct RobustGains {
    pub kp: f64,
    pub kd: f64,
}

/// Velocity-limited tracking law: command a bounded desired velocity toward
/// the goal position and accelerate toward it, clamped to the input ball.
/// Reduces to `-kd * velocity` damping at the goal.
pub fn robust_control(
    model: &SystemModel,
    x_hat: &DVector<f64>,
    x_goal: &DVector<f64>,
    gains: RobustGains,
    v_max: f64,
    u_max: f64,
) -> DVector<f64> {
    let pos = model.position_of(x_hat);
    let goal = model.position_of(x_goal);
    let mut v_des = gains.kp * (goal - pos);
    let vn = v_des.norm();
    if vn > v_max {
        v_des *= v_max / vn;
    }
    let vel_index: Vec<usize> =
        (0..model.state_dim()).filter(|i| !model.pos_index.contains(i)).collect();
    let mut u = DVector::zeros(model.input_dim());
    for (slot, &i) in vel_index.iter().enumerate() {
        if slot < u.len() && slot < v_des.len() {
            u[slot] = gains.kd * (v_des[slot] - x_hat[i]);
        }
    }
    let norm = u.norm();
    if norm > u_max {
        u *= u_max / norm;
    }
    u
}

/// Per-run outcome summary derived from the trace.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub seed: u64,
    pub steps: usize,
    /// First step whose true position is inside the effective range.
    pub first_entry: Option<usize>,
    pub detected: bool,
    pub detection_step: Option<usize>,
    /// Steps from true range entry to detection.
    pub detection_latency: Option<i64>,
    pub k_escape: Option<usize>,
    /// Absolute deadline step `k_attack + k_escape`.
    pub deadline: Option<usize>,
    /// First step after entry whose true position is back outside.
    pub first_exit: Option<usize>,
    pub exit_by_deadline: Option<bool>,
    /// Max control-side estimation error over the first in-range episode.
    pub max_error_attack: Option<f64>,
    /// Control-side estimation error at the exit step.
    pub error_at_exit: Option<f64>,
    pub goal_reached: bool,
    pub goal_step: Option<usize>,
    pub emergency_steps: usize,
    /// Steps whose true velocity norm exceeds the bound by more than 1e-6.
    pub velocity_violations: usize,
    pub max_velocity: f64,
    pub error: Option<String>,
}

/// A finished (or aborted) scenario run: the trace is always present, with
/// whatever steps completed before an error.
#[derive(Debug)]
pub struct ScenarioRun {
    pub trace: ScenarioTrace,
    pub metrics: RunMetrics,
    pub error: Option<String>,
}

struct EscapeContext {
    problem: EscapeProblem,
    p_deadline_pos: DMatrix<f64>,
    warm: Option<Vec<DVector<f64>>>,
}

/// Run one scenario to completion (or first error) with the given seed.
pub fn run_scenario(config: &ScenarioConfig, seed: u64) -> ScenarioRun {
    let dims_placeholder = TraceDims { n: 0, m_u: 0, m_g: 0, m_i: 0, m_s: 0, n_a: 0 };
    match run_scenario_inner(config, seed) {
        Ok((trace, error)) => {
            let metrics = compute_metrics(&trace, config, seed, error.clone());
            ScenarioRun { trace, metrics, error }
        }
        Err(e) => {
            let msg = e.to_string();
            let trace = ScenarioTrace::new(dims_placeholder);
            let metrics = compute_metrics(&trace, config, seed, Some(msg.clone()));
            ScenarioRun { trace, metrics, error: Some(msg) }
        }
    }
}

fn run_scenario_inner(
    config: &ScenarioConfig,
    seed: u64,
) -> Result<(ScenarioTrace, Option<String>)> {
    config.validate()?;
    let model = config.system_model()?;
    let base_attacker = config.attacker();
    let gains = RobustGains { kp: config.robust.kp, kd: config.robust.kd };
    let goal = DVector::from_vec(config.scenario.goal.clone());
    let dims = TraceDims {
        n: model.state_dim(),
        m_u: model.input_dim(),
        m_g: model.gps_dim(),
        m_i: model.imu_dim(),
        m_s: model.rssi_dim(),
        n_a: model.pos_index.len(),
    };
    let mut trace = ScenarioTrace::new(dims);

    let mut rng = ScenarioRng::new(seed);
    let mut truth = TrueState::new(DVector::from_vec(config.scenario.start.clone()));
    let start_estimate = truth.x.clone();
    let p0 = DMatrix::identity(model.state_dim(), model.state_dim());
    let mut est1 = EstimatorState::new(start_estimate.clone(), p0.clone(), EstimatorMode::GpsImu);
    let mut est2 = EstimatorState::new(start_estimate, p0, EstimatorMode::GpsImu);
    let mut det = DetectorState::new(config.detector.alpha, config.detector.delta, model.gps_dim())?;
    let mut tracker: Option<AttackerEstimate> = None;
    let mut escape_ctx: Option<EscapeContext> = None;
    let mut u_prev = DVector::zeros(model.input_dim());
    let mut attacker = base_attacker.clone();
    let mut was_in_range = false;
    let mut goal_recorded = false;
    let mut run_error: Option<String> = None;

    'steps: for k in 1..=config.run.steps {
        // attacker motion offsets are cumulative, indexed by the step they
        // take effect at
        if let Some(offset) = config.attacker.motion.get(k - 1) {
            for (slot, d) in offset.iter().enumerate() {
                attacker.position[slot] += d;
            }
        }

        macro_rules! attempt {
            ($expr:expr) => {
                match $expr {
                    Ok(v) => v,
                    Err(e) => {
                        run_error = Some(format!("step {k}: {e}"));
                        break 'steps;
                    }
                }
            };
        }

        let w = attempt!(rng.gaussian(NoiseChannel::Process, &model.sigma_process));
        let next = attempt!(model::step_dynamics(&model, &truth, &u_prev, &w));
        let flag = model::in_range(&model, &next, &attacker);
        if flag && !was_in_range {
            trace.push_event(k, "range_entry", attacker.r_effect);
        }
        if !flag && was_in_range {
            let d = model::distance_to(&model, &attacker.position_vector(), &next.x);
            trace.push_event(k, "range_exit", d);
        }

        let noise = SensorNoise {
            v_gps: attempt!(rng.gaussian(NoiseChannel::Gps, &model.sigma_gps)),
            v_imu: attempt!(rng.gaussian(NoiseChannel::Imu, &model.sigma_imu)),
            v_rssi: attempt!(rng.gaussian(NoiseChannel::SignalStrength, &model.sigma_rssi)),
        };
        let bundle = attempt!(model::measure(&model, &next, &truth, &attacker, flag, &noise));

        // detection statistic from the previous estimate, then the mode switch
        let d_hat = detector::estimate_attack(&model, &bundle.y_gps, &est1.x_hat, &u_prev);
        let p_d = detector::innovation_covariance(&model, &est1.p);
        attempt!(detector::cusum_step(&mut det, &d_hat, &p_d));
        let prev_mode = det.mode;
        let mode = detector::decide(&mut det, k);
        if prev_mode == ControlMode::Robust && mode == ControlMode::Emergency {
            trace.push_event(k, "detection", det.s);
        }
        if prev_mode == ControlMode::Emergency && mode == ControlMode::Robust {
            trace.push_event(k, "mode_return", det.s);
        }

        // detection estimator always fuses both channels
        est1 = attempt!(estimator::update(&model, &est1, &u_prev, &bundle.y_gps, &bundle.y_imu));

        let mut solver_record: Option<SolverRecord> = None;
        let u_next;
        match mode {
            ControlMode::Robust => {
                est2 = EstimatorState::new(est1.x_hat.clone(), est1.p.clone(), EstimatorMode::GpsImu);
                escape_ctx = None;
                u_next = robust_control(
                    &model,
                    &est1.x_hat,
                    &goal,
                    gains,
                    config.limits.v_max,
                    config.limits.u_max,
                );
            }
            ControlMode::Emergency => {
                est2.mode = EstimatorMode::ImuOnly;
                est2 = attempt!(estimator::update(&model, &est2, &u_prev, &bundle.y_gps, &bundle.y_imu));

                let uav_pos_est = model.position_of(&est2.x_hat);
                let alt = match tracker.as_mut() {
                    Some(t) => t,
                    None => {
                        let t = attempt!(AttackerEstimate::initialize(
                            &uav_pos_est,
                            config.tracker_config(),
                        ));
                        tracker.get_or_insert(t)
                    }
                };
                attempt!(alt.step(&model, bundle.y_rssi.clone(), uav_pos_est));

                if escape_ctx.is_none() {
                    // pinned at detection: escape time from the control-side
                    // covariance, deadline covariance from the denied recursion
                    let k_escape = attempt!(escape::escape_time(
                        &est2.p,
                        config.escape.zeta,
                        config.escape.alpha,
                        &model,
                        config.escape.max_escape_steps,
                    ));
                    trace.push_event(k, "escape_time", k_escape as f64);
                    trace.push_event(k, "escape_deadline", (k + k_escape) as f64);
                    let p_deadline_pos = if k_escape == 0 {
                        position_block(&model, &est2.p)
                    } else {
                        let seq = attempt!(estimator::predict_covariance_gps_denied(
                            &model, &est2.p, k_escape,
                        ));
                        position_block(&model, seq.last().expect("nonempty sequence"))
                    };
                    escape_ctx = Some(EscapeContext {
                        problem: EscapeProblem {
                            k_attack: k,
                            k_escape,
                            horizon: k_escape + config.escape.horizon_offset,
                            q: DMatrix::from_diagonal(&DVector::from_vec(config.escape.q_diag.clone())),
                            r: DMatrix::from_diagonal(&DVector::from_vec(config.escape.r_diag.clone())),
                            x_goal: goal.clone(),
                            r_effect: attacker.r_effect,
                            beta: config.escape.beta,
                            gamma: config.escape.gamma,
                            v_max: config.limits.v_max,
                            u_max: config.limits.u_max,
                            solver: config.solver_options(),
                        },
                        p_deadline_pos,
                        warm: None,
                    });
                }
                let ctx = escape_ctx.as_mut().expect("context just ensured");
                let inputs = EscapeInputs {
                    x_hat: est2.x_hat.clone(),
                    p_uav_deadline_pos: ctx.p_deadline_pos.clone(),
                    attacker_pos: alt.position(),
                    p_attacker_pos: alt.position_covariance(),
                    elapsed: k - ctx.problem.k_attack,
                    warm_start: ctx.warm.clone(),
                };
                let plan: ControlPlan = match config.escape.variant {
                    ControllerVariant::Potential => {
                        attempt!(escape::solve_escape_potential(&model, &inputs, &ctx.problem))
                    }
                    ControllerVariant::Tube => {
                        attempt!(escape::solve_escape_tube(&model, &inputs, &ctx.problem))
                    }
                    ControllerVariant::TubeWithFallback => {
                        let tube = attempt!(escape::solve_escape_tube(&model, &inputs, &ctx.problem));
                        if tube.feasible {
                            tube
                        } else {
                            trace.push_event(k, "tube_infeasible", tube.stats.constraint_violation);
                            attempt!(escape::solve_escape_potential(&model, &inputs, &ctx.problem))
                        }
                    }
                };
                solver_record = Some(SolverRecord {
                    iterations: plan.stats.iterations,
                    grad_norm: plan.stats.grad_norm,
                    constraint_violation: plan.stats.constraint_violation,
                });
                u_next = plan.u_seq.first().cloned().unwrap_or_else(|| DVector::zeros(model.input_dim()));
                ctx.warm = Some(plan.u_seq.iter().skip(1).cloned().collect());
            }
        }

        if !goal_recorded {
            let dist_goal = (model.position_of(&next.x) - model.position_of(&goal)).norm();
            if dist_goal <= config.run.goal_tolerance {
                trace.push_event(k, "goal_reached", dist_goal);
                goal_recorded = true;
            }
        }

        trace.records.push(TraceRecord {
            k,
            mode,
            in_range: flag,
            x_true: next.x.iter().copied().collect(),
            est1: est1.x_hat.iter().copied().collect(),
            est2: est2.x_hat.iter().copied().collect(),
            y_gps: bundle.y_gps.iter().copied().collect(),
            y_imu: bundle.y_imu.iter().copied().collect(),
            y_rssi: bundle.y_rssi.iter().copied().collect(),
            d_hat: d_hat.iter().copied().collect(),
            cusum: det.s,
            cusum_threshold: det.threshold(),
            u: u_next.iter().copied().collect(),
            p1_trace: est1.p.trace(),
            p2_trace: est2.p.trace(),
            tracker: tracker.as_ref().map(|t| TrackerRecord {
                position: t.position().iter().copied().collect(),
                power: t.power(),
                cov_diag: (0..t.dim()).map(|i| t.p[(i, i)]).collect(),
            }),
            solver: solver_record,
        });

        truth = next;
        u_prev = u_next;
        was_in_range = flag;
    }

    Ok((trace, run_error))
}

fn position_block(model: &SystemModel, p: &DMatrix<f64>) -> DMatrix<f64> {
    let n_a = model.pos_index.len();
    DMatrix::from_fn(n_a, n_a, |r, c| p[(model.pos_index[r], model.pos_index[c])])
}

/// Derive run metrics from a trace (also used by the CLI on parsed files).
pub fn compute_metrics(
    trace: &ScenarioTrace,
    config: &ScenarioConfig,
    seed: u64,
    error: Option<String>,
) -> RunMetrics {
    let records = &trace.records;
    let first_entry = records.iter().find(|r| r.in_range).map(|r| r.k);
    let first_exit = first_entry.and_then(|entry| {
        records.iter().find(|r| r.k > entry && !r.in_range).map(|r| r.k)
    });
    // bind detection and escape events to the attack episode: the first such
    // event at or after true range entry (false alarms before the attack are
    // counted separately through the emergency-step rate)
    let after = first_entry.unwrap_or(0);
    let event_from = |name: &str| {
        trace.events.iter().find(|e| e.name == name && e.step >= after)
    };
    let detection_step = event_from("detection").map(|e| e.step).or_else(|| {
        records
            .iter()
            .find(|r| r.k >= after && r.mode == ControlMode::Emergency)
            .map(|r| r.k)
    });
    let k_escape = event_from("escape_time").map(|e| e.value as usize);
    let deadline = event_from("escape_deadline").map(|e| e.value as usize);
    let goal_step = trace.events.iter().find(|e| e.name == "goal_reached").map(|e| e.step);

    let pos_err = |r: &TraceRecord| -> f64 {
        // control-side estimate: est2 in emergency, est1 otherwise
        let est = if r.mode == ControlMode::Emergency { &r.est2 } else { &r.est1 };
        r.x_true
            .iter()
            .zip(est)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };

    let attack_span: Option<(usize, usize)> = first_entry.map(|entry| {
        let end = first_exit.unwrap_or_else(|| records.last().map_or(entry, |r| r.k));
        (entry, end)
    });
    let max_error_attack = attack_span.map(|(a, b)| {
        records
            .iter()
            .filter(|r| r.k >= a && r.k <= b)
            .map(|r| pos_err(r))
            .fold(0.0, f64::max)
    });
    let error_at_exit = first_exit.and_then(|x| {
        records.iter().find(|r| r.k == x).map(|r| pos_err(r))
    });

    let vel_dim = trace.dims.n.saturating_sub(trace.dims.n_a);
    let mut velocity_violations = 0;
    let mut max_velocity = 0.0_f64;
    for r in records {
        // velocity components are the trailing non-position entries for the
        // default layout; general layouts recompute from pos_index at runtime
        let v: f64 = r
            .x_true
            .iter()
            .skip(trace.dims.n - vel_dim)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        max_velocity = max_velocity.max(v);
        if v > config.limits.v_max + 1e-6 {
            velocity_violations += 1;
        }
    }

    RunMetrics {
        seed,
        steps: records.len(),
        first_entry,
        detected: detection_step.is_some(),
        detection_step,
        detection_latency: match (detection_step, first_entry) {
            (Some(d), Some(e)) => Some(d as i64 - e as i64),
            _ => None,
        },
        k_escape,
        deadline,
        first_exit,
        exit_by_deadline: match (first_exit, deadline) {
            (Some(x), Some(d)) => Some(x <= d),
            (None, Some(_)) => Some(false),
            _ => None,
        },
        max_error_attack,
        error_at_exit,
        goal_reached: goal_step.is_some(),
        goal_step,
        emergency_steps: records.iter().filter(|r| r.mode == ControlMode::Emergency).count(),
        velocity_violations,
        max_velocity,
        error,
    }
}

/// Batch outcome: per-seed rows plus aggregate accessors.
#[derive(Debug)]
pub struct BatchSummary {
    pub rows: Vec<RunMetrics>,
}

impl BatchSummary {
    pub fn detection_rate(&self) -> f64 {
        rate(&self.rows, |m| m.detected)
    }

    pub fn detection_within(&self, latency: i64) -> f64 {
        rate(&self.rows, |m| m.detection_latency.is_some_and(|l| l <= latency))
    }

    pub fn escape_success_rate(&self) -> f64 {
        rate(&self.rows, |m| m.exit_by_deadline == Some(true))
    }

    pub fn error_bound_rate(&self, zeta: f64) -> f64 {
        rate(&self.rows, |m| m.max_error_attack.is_some_and(|e| e <= zeta))
    }

    /// Fraction of all simulated steps spent in emergency mode.
    pub fn emergency_step_rate(&self) -> f64 {
        let total: usize = self.rows.iter().map(|m| m.steps).sum();
        let emergency: usize = self.rows.iter().map(|m| m.emergency_steps).sum();
        if total == 0 {
            0.0
        } else {
            emergency as f64 / total as f64
        }
    }

    pub fn goal_rate(&self) -> f64 {
        rate(&self.rows, |m| m.goal_reached)
    }

    /// Summary CSV: one row per seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,steps,first_entry,detected,detection_step,detection_latency,k_escape,deadline,\
             first_exit,exit_by_deadline,max_error_attack,error_at_exit,goal_reached,goal_step,\
             emergency_steps,velocity_violations,max_velocity,error\n",
        );
        let opt_u = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
        let opt_i = |v: Option<i64>| v.map_or(String::new(), |x| x.to_string());
        let opt_f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9e}"));
        let opt_b = |v: Option<bool>| v.map_or(String::new(), |x| (x as u8).to_string());
        for m in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.9e},{}\n",
                m.seed,
                m.steps,
                opt_u(m.first_entry),
                m.detected as u8,
                opt_u(m.detection_step),
                opt_i(m.detection_latency),
                opt_u(m.k_escape),
                opt_u(m.deadline),
                opt_u(m.first_exit),
                opt_b(m.exit_by_deadline),
                opt_f(m.max_error_attack),
                opt_f(m.error_at_exit),
                m.goal_reached as u8,
                opt_u(m.goal_step),
                m.emergency_steps,
                m.velocity_violations,
                m.max_velocity,
                m.error.clone().unwrap_or_default().replace(',', ";"),
            ));
        }
        out
    }
}

fn rate(rows: &[RunMetrics], f: impl Fn(&RunMetrics) -> bool) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|m| f(m)).count() as f64 / rows.len() as f64
}

/// Run the scenario once per seed (in parallel) and collect metrics.
/// Per-seed failures become flagged rows; the batch continues.
pub fn run_batch(config: &ScenarioConfig, seeds: &[u64]) -> Result<BatchSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("batch needs at least one seed".into()));
    }
    config.validate()?;
    let rows: Vec<RunMetrics> = seeds
        .par_iter()
        .map(|&seed| run_scenario(config, seed).metrics)
        .collect();
    Ok(BatchSummary { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config;
    use approx::assert_relative_eq;

    #[test]
    fn robust_control_zero_at_goal() {
        let model = crate::fixtures::double_integrator();
        let goal = DVector::from_vec(vec![10.0, 20.0, 0.0, 0.0]);
        let u = robust_control(&model, &goal, &goal, RobustGains { kp: 0.2, kd: 0.9 }, 5.0, 2.0);
        assert_eq!(u, DVector::zeros(2));
    }

    #[test]
    fn robust_control_saturates() {
        let model = crate::fixtures::double_integrator();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0]);
        let goal = DVector::from_vec(vec![300.0, 300.0, 0.0, 0.0]);
        let u = robust_control(&model, &x, &goal, RobustGains { kp: 0.2, kd: 0.9 }, 5.0, 2.0);
        assert_relative_eq!(u.norm(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn robust_control_damps_velocity() {
        let model = crate::fixtures::double_integrator();
        let x = DVector::from_vec(vec![10.0, 20.0, 1.5, -0.5]);
        let goal = DVector::from_vec(vec![10.0, 20.0, 0.0, 0.0]);
        let u = robust_control(&model, &x, &goal, RobustGains { kp: 0.2, kd: 0.9 }, 5.0, 2.0);
        // pure damping: antiparallel to the velocity
        let v = DVector::from_vec(vec![1.5, -0.5]);
        let cosine = u.dot(&v) / (u.norm() * v.norm());
        assert_relative_eq!(cosine, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn no_attack_run_reaches_goal_without_detection() {
        let cfg = config::paper_v_no_attack();
        let mut cfg = cfg;
        cfg.run.steps = 1200;
        let run = run_scenario(&cfg, 11);
        assert!(run.error.is_none(), "{:?}", run.error);
        assert!(run.metrics.goal_reached, "goal not reached");
        assert!(run.metrics.first_entry.is_none());
        // emergency excursions are possible false alarms but must be rare
        let rate = run.metrics.emergency_steps as f64 / run.metrics.steps as f64;
        assert!(rate < 0.05, "false-alarm step rate {rate}");
    }

    #[test]
    fn same_seed_reproduces_bytes_different_seed_differs() {
        let mut cfg = config::paper_v();
        cfg.run.steps = 260;
        let a = run_scenario(&cfg, 42);
        let b = run_scenario(&cfg, 42);
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        assert_eq!(a.trace.events_csv(), b.trace.events_csv());
        let c = run_scenario(&cfg, 43);
        assert_ne!(a.trace.to_csv(), c.trace.to_csv());
    }

    #[test]
    fn reference_scenario_detects_and_escapes() {
        let mut cfg = config::paper_v();
        cfg.run.steps = 450;
        let run = run_scenario(&cfg, 7);
        assert!(run.error.is_none(), "{:?}", run.error);
        let m = &run.metrics;
        assert!(m.first_entry.is_some(), "never entered the range");
        assert!(m.detected);
        assert!(m.detection_latency.unwrap() <= 5, "latency {:?}", m.detection_latency);
        assert!(m.k_escape.is_some());
        assert_eq!(m.exit_by_deadline, Some(true), "exit {:?} deadline {:?}", m.first_exit, m.deadline);
    }

    #[test]
    fn mode_wiring_matches_trace() {
        // robust rows must carry the robust law recomputable from est1
        let mut cfg = config::paper_v();
        cfg.run.steps = 300;
        let run = run_scenario(&cfg, 3);
        let model = cfg.system_model().unwrap();
        let goal = DVector::from_vec(cfg.scenario.goal.clone());
        for r in &run.trace.records {
            if r.mode == ControlMode::Robust {
                let est1 = DVector::from_vec(r.est1.clone());
                let expect = robust_control(
                    &model,
                    &est1,
                    &goal,
                    RobustGains { kp: cfg.robust.kp, kd: cfg.robust.kd },
                    cfg.limits.v_max,
                    cfg.limits.u_max,
                );
                let got = DVector::from_vec(r.u.clone());
                assert!((got - expect).norm() < 1e-9, "robust input mismatch at k={}", r.k);
            } else {
                assert!(r.solver.is_some(), "emergency row without solver stats at k={}", r.k);
            }
        }
    }

    #[test]
    fn applied_inputs_respect_bound() {
        let mut cfg = config::paper_v();
        cfg.run.steps = 400;
        let run = run_scenario(&cfg, 5);
        for r in &run.trace.records {
            let u = DVector::from_vec(r.u.clone());
            assert!(u.norm() <= cfg.limits.u_max + 1e-6, "input bound violated at k={}", r.k);
        }
    }

    #[test]
    fn batch_aggregates_and_flagged_rows() {
        let mut cfg = config::paper_v_no_attack();
        cfg.run.steps = 120;
        let seeds: Vec<u64> = (0..4).collect();
        let batch = run_batch(&cfg, &seeds).unwrap();
        assert_eq!(batch.rows.len(), 4);
        assert!(batch.rows.iter().all(|m| m.error.is_none()));
        assert!(batch.emergency_step_rate() < 0.05);
        assert!(run_batch(&cfg, &[]).is_err());
    }

    #[test]
    fn metrics_from_parsed_trace_match() {
        let mut cfg = config::paper_v();
        cfg.run.steps = 280;
        let run = run_scenario(&cfg, 9);
        let text = run.trace.to_csv();
        let parsed = ScenarioTrace::parse_csv(&text, run.trace.dims.clone()).unwrap();
        let mut reparsed = parsed;
        reparsed.events = run.trace.events.clone();
        let m2 = compute_metrics(&reparsed, &cfg, 9, None);
        assert_eq!(run.metrics.first_entry, m2.first_entry);
        assert_eq!(run.metrics.detection_step, m2.detection_step);
        assert_eq!(run.metrics.emergency_steps, m2.emergency_steps);
    }
}
