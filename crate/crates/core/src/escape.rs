//! Escape-time computation and the escape controller.
//!
//! The escape time bounds how long the GPS-denied covariance can grow before
//! a tolerable-error displacement becomes statistically indistinguishable from
//! the estimation error. The escape controller plans inputs over a finite
//! horizon that track the goal while leaving the spoofing device's effective
//! range: either through a hard exit-distance constraint at the escape
//! deadline tightened by a probabilistic margin, or through a repulsive
//! potential charged on every post-deadline step.
//!
//! The underlying optimizer is single shooting over the input sequence with
//! per-step projection onto the input-norm ball, an augmented-Lagrangian
//! treatment of the velocity and exit-distance constraints, and monotone
//! backtracking gradient descent inside.

use nalgebra::{DMatrix, DVector};

use crate::estimator::predict_covariance_gps_denied;
use crate::linalg::cholesky_with_jitter;
use crate::model::SystemModel;
use crate::stats::{chi2_quantile, normal_quantile};
use crate::{Error, Result, EPS_DIST};

/// Escape-controller flavor selected per scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerVariant {
    /// Hard exit constraint at the deadline with probabilistic margin.
    Tube,
    /// Repulsive-potential soft constraint after the deadline.
    Potential,
    /// Tube first; fall back to the potential program when infeasible.
    TubeWithFallback,
}

/// Iteration caps and tolerances of the trajectory optimizer.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SolverOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    pub grad_tol: f64,
    pub constraint_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_outer: 8,
            max_inner: 70,
            grad_tol: 1e-4,
            constraint_tol: 1e-6,
        }
    }
}

/// Escape-control problem data, pinned at detection time.
#[derive(Debug, Clone)]
pub struct EscapeProblem {
    /// Absolute step index at which the attack was flagged.
    pub k_attack: usize,
    /// Escape time (steps after `k_attack`).
    pub k_escape: usize,
    /// Prediction horizon N (steps after `k_attack`), N >= k_escape.
    pub horizon: usize,
    /// Stage state weight, symmetric PD.
    pub q: DMatrix<f64>,
    /// Stage input weight, symmetric PD.
    pub r: DMatrix<f64>,
    /// Goal state.
    pub x_goal: DVector<f64>,
    /// Effective range of the spoofing device (meters).
    pub r_effect: f64,
    /// Repulsive-potential scaling.
    pub beta: f64,
    /// Chance-constraint confidence in (0.5, 1).
    pub gamma: f64,
    /// Velocity-norm bound on the non-position components.
    pub v_max: f64,
    /// Input-norm bound.
    pub u_max: f64,
    pub solver: SolverOptions,
}

impl EscapeProblem {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < self.k_escape {
            return Err(Error::Config("prediction horizon must cover the escape time".into()));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config("potential scaling must be positive".into()));
        }
        if !(0.5 < self.gamma && self.gamma < 1.0) {
            return Err(Error::Domain(format!("gamma must lie in (0.5, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Solver diagnostics attached to every plan.
#[derive(Debug, Clone, Default)]
pub struct SolverStats {
    /// Accepted descent iterations across all outer rounds.
    pub iterations: usize,
    /// Projected-gradient norm at termination.
    pub grad_norm: f64,
    /// Largest constraint violation at termination (meters / m s^-1).
    pub constraint_violation: f64,
    /// Final objective value (without augmented-Lagrangian terms).
    pub objective: f64,
    /// Residual potential cost at termination (potential program only).
    pub potential_cost: f64,
}

/// Planned input sequence with its induced state rollout.
#[derive(Debug, Clone)]
pub struct ControlPlan {
    pub u_seq: Vec<DVector<f64>>,
    /// Rollout including the initial state: `x_seq.len() == u_seq.len() + 1`.
    pub x_seq: Vec<DVector<f64>>,
    pub feasible: bool,
    pub stats: SolverStats,
}

/// Current estimates the controller plans from.
#[derive(Debug, Clone)]
pub struct EscapeInputs {
    /// Current UAV state estimate (the control-side estimator).
    pub x_hat: DVector<f64>,
    /// Predicted UAV covariance at the escape deadline, position block.
    pub p_uav_deadline_pos: DMatrix<f64>,
    /// Attacker position estimate.
    pub attacker_pos: DVector<f64>,
    /// Attacker position covariance block.
    pub p_attacker_pos: DMatrix<f64>,
    /// Steps elapsed since `k_attack` (receding-horizon re-solves).
    pub elapsed: usize,
    /// Previous plan shifted by one step, if any.
    pub warm_start: Option<Vec<DVector<f64>>>,
}

/// Steps until a displacement of magnitude `zeta_mag` along each position
/// component falls inside the chi-squared acceptance region of the GPS-denied
/// error covariance: smallest k with
/// `zeta' P_k^{-1} zeta < chi2_quantile(n, alpha)`.
///
/// Returns 0 when the condition already holds at the attack covariance.
pub fn escape_time(
    p_at_attack: &DMatrix<f64>,
    zeta_mag: f64,
    alpha: f64,
    model: &SystemModel,
    max_steps: usize,
) -> Result<usize> {
    if zeta_mag <= 0.0 {
        return Err(Error::Domain(format!("tolerable error must be positive, got {zeta_mag}")));
    }
    let n = model.state_dim();
    let mut zeta = DVector::zeros(n);
    for &i in &model.pos_index {
        zeta[i] = zeta_mag;
    }
    let threshold = chi2_quantile(n as f64, alpha)?;
    let holds = |p: &DMatrix<f64>| -> Result<bool> {
        let sol = cholesky_with_jitter(p, 1e-9)?.solve(&zeta);
        Ok(zeta.dot(&sol) < threshold)
    };
    if holds(p_at_attack)? {
        return Ok(0);
    }
    let mut p = p_at_attack.clone();
    for k in 1..=max_steps {
        p = predict_covariance_gps_denied(model, &p, 1)?.pop().expect("one step requested");
        if holds(&p)? {
            return Ok(k);
        }
    }
    Err(Error::Numerical(format!(
        "escape-time criterion not met within {max_steps} steps"
    )))
}

/// First-order probabilistic margin for the exit-distance constraint:
/// `z_gamma * sqrt(g' (P_uav + P_att) g)` along the attacker-to-UAV direction.
///
/// Satisfying `dist - r_effect > margin` implies the linearized chance
/// constraint `P[dist - r_effect > 0] > gamma`.
pub fn tube_backoff(
    p_uav_pos: &DMatrix<f64>,
    p_att_pos: &DMatrix<f64>,
    uav_pos: &DVector<f64>,
    att_pos: &DVector<f64>,
    gamma: f64,
) -> Result<f64> {
    if !(0.5 < gamma && gamma < 1.0) {
        return Err(Error::Domain(format!("gamma must lie in (0.5, 1), got {gamma}")));
    }
    let diff = uav_pos - att_pos;
    let dist = diff.norm();
    if dist < EPS_DIST {
        return Err(Error::Singularity("tube direction undefined for coincident positions".into()));
    }
    let g = diff / dist;
    let total = p_uav_pos + p_att_pos;
    let dir_var = g.dot(&(&total * &g)).max(0.0);
    Ok(normal_quantile(gamma)? * dir_var.sqrt())
}

/// Repulsive potential: `0.5 beta (1/d - 1/r_effect)^2` inside the effective
/// range, zero outside; continuous at the boundary.
pub fn repulsive_potential(d: f64, r_effect: f64, beta: f64) -> Result<f64> {
    if d <= EPS_DIST {
        return Err(Error::Singularity(format!("potential evaluated at distance {d:e}")));
    }
    if d > r_effect {
        return Ok(0.0);
    }
    let diff = 1.0 / d - 1.0 / r_effect;
    Ok(0.5 * beta * diff * diff)
}

/// Derivative of the repulsive potential with respect to the distance.
fn repulsive_potential_ddist(d: f64, r_effect: f64, beta: f64) -> f64 {
    if d <= EPS_DIST || d > r_effect {
        return 0.0;
    }
    let diff = 1.0 / d - 1.0 / r_effect;
    -beta * diff / (d * d)
}

/// Which soft-constraint machinery a solve carries.
enum ProgramKind {
    /// Hard exit-distance constraint at the deadline with the given margin.
    Tube { margin: f64 },
    /// Repulsive potential on every state at or past the deadline.
    Potential,
}

struct ProblemGeometry {
    vel_index: Vec<usize>,
    /// Plan length (number of inputs).
    len: usize,
    /// Plan-state index (into x_1..x_len) of the deadline, if still ahead.
    deadline_state: Option<usize>,
    /// First plan-state index charged with the potential.
    potential_from: usize,
}

fn geometry(model: &SystemModel, prob: &EscapeProblem, elapsed: usize) -> ProblemGeometry {
    let vel_index: Vec<usize> =
        (0..model.state_dim()).filter(|i| !model.pos_index.contains(i)).collect();
    let len = prob.horizon.saturating_sub(elapsed).max(1);
    // plan state x_j (j = 1..len) sits at absolute step k_attack + elapsed + j
    let deadline_state = if prob.k_escape > elapsed {
        let j = prob.k_escape - elapsed;
        (j <= len).then_some(j)
    } else {
        Some(1) // deadline already passed: demand exit at the first planned state
    };
    let potential_from = prob.k_escape.saturating_sub(elapsed).max(1);
    ProblemGeometry { vel_index, len, deadline_state, potential_from }
}

fn rollout(model: &SystemModel, x0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut xs = Vec::with_capacity(u_seq.len() + 1);
    xs.push(x0.clone());
    for u in u_seq {
        let next = &model.a * xs.last().unwrap() + &model.b * u;
        xs.push(next);
    }
    xs
}

/// Objective and constraint residuals for one candidate input sequence.
struct Evaluation {
    objective: f64,
    potential_cost: f64,
    /// `||v_j|| - v_max` per plan state, positive when violated.
    vel_residuals: Vec<f64>,
    /// `r_effect + margin - dist` at the deadline state (tube only).
    exit_residual: Option<f64>,
}

struct Objective<'a> {
    model: &'a SystemModel,
    prob: &'a EscapeProblem,
    geo: &'a ProblemGeometry,
    kind: &'a ProgramKind,
    att_pos: &'a DVector<f64>,
}

impl Objective<'_> {
    fn distance(&self, x: &DVector<f64>) -> f64 {
        (self.model.position_of(x) - self.att_pos).norm()
    }

    fn velocity_norm(&self, x: &DVector<f64>) -> f64 {
        self.geo.vel_index.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt()
    }

    fn evaluate(&self, xs: &[DVector<f64>], u_seq: &[DVector<f64>]) -> Evaluation {
        let mut objective = 0.0;
        let mut potential_cost = 0.0;
        let mut vel_residuals = Vec::with_capacity(u_seq.len());
        let mut exit_residual = None;
        for (j, u) in u_seq.iter().enumerate() {
            let x = &xs[j + 1];
            let dx = x - &self.prob.x_goal;
            objective += dx.dot(&(&self.prob.q * &dx)) + u.dot(&(&self.prob.r * u));
            vel_residuals.push(self.velocity_norm(x) - self.prob.v_max);
            match self.kind {
                ProgramKind::Potential => {
                    if j + 1 >= self.geo.potential_from {
                        let d = self.distance(x).max(EPS_DIST * 2.0);
                        if d <= self.prob.r_effect {
                            let t = 1.0 / d - 1.0 / self.prob.r_effect;
                            potential_cost += 0.5 * self.prob.beta * t * t;
                        }
                    }
                }
                ProgramKind::Tube { margin } => {
                    if Some(j + 1) == self.geo.deadline_state {
                        exit_residual = Some(self.prob.r_effect + margin - self.distance(x));
                    }
                }
            }
        }
        objective += potential_cost;
        Evaluation { objective, potential_cost, vel_residuals, exit_residual }
    }

    /// Augmented-Lagrangian value of an evaluation.
    fn merit(&self, ev: &Evaluation, mult: &Multipliers) -> f64 {
        let mut total = ev.objective;
        for (g, &lam) in ev.vel_residuals.iter().zip(&mult.vel) {
            let t = (lam + mult.penalty * g).max(0.0);
            total += (t * t - lam * lam) / (2.0 * mult.penalty);
        }
        if let Some(g) = ev.exit_residual {
            let t = (mult.exit + mult.penalty * g).max(0.0);
            total += (t * t - mult.exit * mult.exit) / (2.0 * mult.penalty);
        }
        total
    }

    /// Gradient of the merit function with respect to the stacked inputs,
    /// assembled by the adjoint recursion over the rollout.
    fn merit_gradient(
        &self,
        xs: &[DVector<f64>],
        u_seq: &[DVector<f64>],
        ev: &Evaluation,
        mult: &Multipliers,
    ) -> Vec<DVector<f64>> {
        let n = self.model.state_dim();
        let len = u_seq.len();
        let mut state_grads: Vec<DVector<f64>> = Vec::with_capacity(len);
        for j in 1..=len {
            let x = &xs[j];
            let mut g = 2.0 * &self.prob.q * (x - &self.prob.x_goal);
            let lam = mult.vel[j - 1];
            let resid = ev.vel_residuals[j - 1];
            let t = (lam + mult.penalty * resid).max(0.0);
            if t > 0.0 {
                let vnorm = self.velocity_norm(x);
                if vnorm > 1e-12 {
                    for &i in &self.geo.vel_index {
                        g[i] += t * x[i] / vnorm;
                    }
                }
            }
            match self.kind {
                ProgramKind::Potential => {
                    if j >= self.geo.potential_from {
                        let d = self.distance(x).max(EPS_DIST * 2.0);
                        let dd = repulsive_potential_ddist(d, self.prob.r_effect, self.prob.beta);
                        if dd != 0.0 && d > 1e-12 {
                            let pos = self.model.position_of(x);
                            let dir = (&pos - self.att_pos) / d;
                            for (slot, &i) in self.model.pos_index.iter().enumerate() {
                                g[i] += dd * dir[slot];
                            }
                        }
                    }
                }
                ProgramKind::Tube { .. } => {
                    if Some(j) == self.geo.deadline_state {
                        if let Some(resid) = ev.exit_residual {
                            let t = (mult.exit + mult.penalty * resid).max(0.0);
                            if t > 0.0 {
                                let d = self.distance(x);
                                if d > 1e-12 {
                                    let pos = self.model.position_of(x);
                                    let dir = (&pos - self.att_pos) / d;
                                    for (slot, &i) in self.model.pos_index.iter().enumerate() {
                                        g[i] -= t * dir[slot];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            state_grads.push(g);
        }
        // adjoint sweep: lambda_j = mu_j + A' lambda_{j+1}
        let mut grads = vec![DVector::zeros(self.model.input_dim()); len];
        let mut lambda: DVector<f64> = DVector::zeros(n);
        for j in (0..len).rev() {
            lambda = &state_grads[j] + self.model.a.transpose() * lambda;
            grads[j] = 2.0 * &self.prob.r * &u_seq[j] + self.model.b.transpose() * &lambda;
        }
        grads
    }
}

struct Multipliers {
    vel: Vec<f64>,
    exit: f64,
    penalty: f64,
}

fn project_inputs(u_seq: &mut [DVector<f64>], u_max: f64) {
    for u in u_seq.iter_mut() {
        let norm = u.norm();
        if norm > u_max {
            *u *= u_max / norm;
        }
    }
}

/// Core solve shared by both programs.
fn solve(
    model: &SystemModel,
    prob: &EscapeProblem,
    inputs: &EscapeInputs,
    kind: ProgramKind,
) -> ControlPlan {
    let geo = geometry(model, prob, inputs.elapsed);
    let objective = Objective {
        model,
        prob,
        geo: &geo,
        kind: &kind,
        att_pos: &inputs.attacker_pos,
    };

    let mut u_seq = warm_start_controls(model, prob, inputs, &geo, &kind);
    project_inputs(&mut u_seq, prob.u_max);

    let mut mult = Multipliers { vel: vec![0.0; geo.len], exit: 0.0, penalty: 10.0 };
    let mut stats = SolverStats::default();
    let mut step = 0.5;
    let mut last_violation = f64::INFINITY;

    let outer_rounds = match kind {
        ProgramKind::Tube { .. } => prob.solver.max_outer,
        ProgramKind::Potential => prob.solver.max_outer.min(4),
    };

    let mut xs = rollout(model, &inputs.x_hat, &u_seq);
    let mut ev = objective.evaluate(&xs, &u_seq);

    for _outer in 0..outer_rounds {
        let mut merit = objective.merit(&ev, &mult);
        for _inner in 0..prob.solver.max_inner {
            let grads = objective.merit_gradient(&xs, &u_seq, &ev, &mult);
            let mut accepted = false;
            let mut trial_step = step;
            for _bt in 0..30 {
                let mut candidate: Vec<DVector<f64>> = u_seq
                    .iter()
                    .zip(&grads)
                    .map(|(u, g)| u - trial_step * g)
                    .collect();
                project_inputs(&mut candidate, prob.u_max);
                let cxs = rollout(model, &inputs.x_hat, &candidate);
                let cev = objective.evaluate(&cxs, &candidate);
                let cmerit = objective.merit(&cev, &mult);
                if cmerit < merit - 1e-12 {
                    let moved: f64 = candidate
                        .iter()
                        .zip(&u_seq)
                        .map(|(a, b)| (a - b).norm_squared())
                        .sum::<f64>()
                        .sqrt();
                    u_seq = candidate;
                    xs = cxs;
                    ev = cev;
                    merit = cmerit;
                    stats.iterations += 1;
                    stats.grad_norm = moved / trial_step;
                    accepted = true;
                    step = (trial_step * 1.5).min(2.0);
                    break;
                }
                trial_step *= 0.4;
            }
            if !accepted {
                stats.grad_norm = 0.0;
                break;
            }
            if stats.grad_norm <= prob.solver.grad_tol {
                break;
            }
        }
        let mut violation = 0.0_f64;
        for (g, lam) in ev.vel_residuals.iter().zip(mult.vel.iter_mut()) {
            *lam = (*lam + mult.penalty * g).max(0.0);
            violation = violation.max(*g);
        }
        if let Some(g) = ev.exit_residual {
            mult.exit = (mult.exit + mult.penalty * g).max(0.0);
            violation = violation.max(g);
        }
        if violation <= prob.solver.constraint_tol {
            break;
        }
        if violation > 0.25 * last_violation {
            mult.penalty = (mult.penalty * 8.0).min(1e8);
        }
        last_violation = violation;
    }

    let violation = ev
        .vel_residuals
        .iter()
        .copied()
        .chain(ev.exit_residual)
        .fold(0.0_f64, f64::max);
    stats.constraint_violation = violation.max(0.0);
    stats.objective = ev.objective;
    stats.potential_cost = ev.potential_cost;
    let feasible = stats.constraint_violation <= prob.solver.constraint_tol.max(1e-6);

    ControlPlan { u_seq, x_seq: xs, feasible, stats }
}

/// Candidate warm starts: shifted previous plan, goal-tracking rollout, and
/// an initial radial push away from the attacker. The candidate with the best
/// merit under the base objective wins.
fn warm_start_controls(
    model: &SystemModel,
    prob: &EscapeProblem,
    inputs: &EscapeInputs,
    geo: &ProblemGeometry,
    kind: &ProgramKind,
) -> Vec<DVector<f64>> {
    let mut candidates: Vec<Vec<DVector<f64>>> = Vec::new();
    if let Some(prev) = &inputs.warm_start {
        let mut c = prev.clone();
        c.truncate(geo.len);
        while c.len() < geo.len {
            c.push(c.last().cloned().unwrap_or_else(|| DVector::zeros(model.input_dim())));
        }
        candidates.push(c);
    }
    candidates.push(tracking_rollout(model, prob, &inputs.x_hat, geo.len, None));
    candidates.push(tracking_rollout(
        model,
        prob,
        &inputs.x_hat,
        geo.len,
        Some(inputs.attacker_pos.clone()),
    ));

    let objective = Objective { model, prob, geo, kind, att_pos: &inputs.attacker_pos };
    let mult = Multipliers { vel: vec![0.0; geo.len], exit: 0.0, penalty: 10.0 };
    let mut best: Option<(f64, Vec<DVector<f64>>)> = None;
    for mut cand in candidates {
        project_inputs(&mut cand, prob.u_max);
        let xs = rollout(model, &inputs.x_hat, &cand);
        let ev = objective.evaluate(&xs, &cand);
        let merit = objective.merit(&ev, &mult);
        if best.as_ref().map_or(true, |(b, _)| merit < *b) {
            best = Some((merit, cand));
        }
    }
    best.expect("at least one warm-start candidate").1
}

/// PD-like rollout toward the goal. With `avoid` set, a strong radial push
/// away from that position is blended in whenever the rollout sits inside a
/// band around the effective range, so the candidate exits and then skirts
/// the boundary instead of flying through.
fn tracking_rollout(
    model: &SystemModel,
    prob: &EscapeProblem,
    x0: &DVector<f64>,
    len: usize,
    avoid: Option<DVector<f64>>,
) -> Vec<DVector<f64>> {
    let vel_index: Vec<usize> =
        (0..model.state_dim()).filter(|i| !model.pos_index.contains(i)).collect();
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(len);
    let band = prob.r_effect + 3.0;
    for _ in 0..len {
        let mut u = DVector::zeros(model.input_dim());
        let pos = model.position_of(&x);
        let escape_mode = avoid.as_ref().and_then(|att| {
            let diff = &pos - att;
            let d = diff.norm();
            (d > EPS_DIST && d < band).then(|| diff / d)
        });
        match escape_mode {
            Some(dir) => {
                // brake and push out of the range band, curving toward the
                // goal side so the candidate skirts instead of parking on the
                // approach line
                let goal_pos = model.position_of(&prob.x_goal);
                let to_goal = &goal_pos - &pos;
                let mut tangent = &to_goal - &dir * dir.dot(&to_goal);
                let tnorm = tangent.norm();
                if tnorm > 1e-9 {
                    tangent /= tnorm;
                } else {
                    // goal collinear with the radial direction: pick a fixed
                    // perpendicular to break the symmetry
                    tangent = DVector::zeros(dir.len());
                    if dir.len() >= 2 {
                        tangent[0] = -dir[1];
                        tangent[1] = dir[0];
                    }
                }
                for slot in 0..model.pos_index.len().min(u.len()) {
                    u[slot] = 2.0 * prob.u_max * (0.8 * dir[slot] + 0.6 * tangent[slot]);
                }
                for (slot, &i) in vel_index.iter().enumerate() {
                    if slot < u.len() {
                        u[slot] -= 0.9 * x[i];
                    }
                }
            }
            None => {
                // velocity-limited tracking: command a bounded desired
                // velocity toward the goal, accelerate toward it
                let goal_pos = model.position_of(&prob.x_goal);
                let mut v_des = DVector::zeros(model.pos_index.len());
                for slot in 0..model.pos_index.len() {
                    v_des[slot] = 0.2 * (goal_pos[slot] - pos[slot]);
                }
                let vn = v_des.norm();
                if vn > prob.v_max {
                    v_des *= prob.v_max / vn;
                }
                for (slot, &i) in vel_index.iter().enumerate() {
                    if slot < u.len() {
                        u[slot] = 0.9 * (v_des[slot] - x[i]);
                    }
                }
            }
        }
        let norm = u.norm();
        if norm > prob.u_max {
            u *= prob.u_max / norm;
        }
        x = &model.a * &x + &model.b * &u;
        out.push(u);
    }
    out
}

/// Hard-constrained escape program: minimize tracking cost subject to input
/// and velocity bounds and the margin-tightened exit-distance constraint at
/// the deadline. Reports `feasible = false` instead of erroring when no
/// admissible plan is found (callers fall back to the potential program).
pub fn solve_escape_tube(
    model: &SystemModel,
    inputs: &EscapeInputs,
    prob: &EscapeProblem,
) -> Result<ControlPlan> {
    prob.validate()?;
    let margin = tube_backoff(
        &inputs.p_uav_deadline_pos,
        &inputs.p_attacker_pos,
        &model.position_of(&inputs.x_hat),
        &inputs.attacker_pos,
        prob.gamma,
    )?;

    // reachability certificate: position displacement per step is bounded by
    // the velocity bound through A plus the direct input coupling through B
    let geo = geometry(model, prob, inputs.elapsed);
    if let Some(deadline) = geo.deadline_state {
        let pos_rows = model.pos_index.len();
        let mut a_pv = DMatrix::zeros(pos_rows, geo.vel_index.len());
        for (r, &pi) in model.pos_index.iter().enumerate() {
            for (c, &vi) in geo.vel_index.iter().enumerate() {
                a_pv[(r, c)] = model.a[(pi, vi)];
            }
        }
        let mut b_p = DMatrix::zeros(pos_rows, model.input_dim());
        for (r, &pi) in model.pos_index.iter().enumerate() {
            for c in 0..model.input_dim() {
                b_p[(r, c)] = model.b[(pi, c)];
            }
        }
        let per_step = a_pv.norm() * prob.v_max + b_p.norm() * prob.u_max;
        let current = (model.position_of(&inputs.x_hat) - &inputs.attacker_pos).norm();
        let required = prob.r_effect + margin - current;
        if required > per_step * deadline as f64 {
            let mut plan = solve(model, prob, inputs, ProgramKind::Potential);
            plan.feasible = false;
            plan.stats.constraint_violation = required - per_step * deadline as f64;
            return Ok(plan);
        }
    }

    Ok(solve(model, prob, inputs, ProgramKind::Tube { margin }))
}

/// Soft-constrained escape program: quadratic tracking plus the repulsive
/// potential on each state at or past the deadline. Always returns a plan.
pub fn solve_escape_potential(
    model: &SystemModel,
    inputs: &EscapeInputs,
    prob: &EscapeProblem,
) -> Result<ControlPlan> {
    prob.validate()?;
    Ok(solve(model, prob, inputs, ProgramKind::Potential))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::steady_state_covariance;
    use crate::fixtures::{double_integrator, scalar_gps_only};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn escape_time_reference_model() {
        let model = double_integrator();
        let p0 = steady_state_covariance(&model, 1e-10, 100_000).unwrap();
        let k = escape_time(&p0, 3.0, 0.01, &model, 10_000).unwrap();
        assert_eq!(k, 155);
    }

    #[test]
    fn escape_time_zero_when_already_met() {
        let model = double_integrator();
        let p = DMatrix::identity(4, 4) * 1e9;
        assert_eq!(escape_time(&p, 3.0, 0.01, &model, 100).unwrap(), 0);
    }

    #[test]
    fn escape_time_scalar_closed_form() {
        // scalar state, no relative channel: P_k = p0 + k s^2, so
        // k = ceil((z^2 / chi2_1(alpha) - p0) / s^2)
        let sigma2 = 0.05;
        let p0 = 0.3;
        let zeta = 3.0;
        let alpha = 0.01;
        let model = scalar_gps_only(1.0, sigma2, 1.0);
        let k = escape_time(
            &DMatrix::from_element(1, 1, p0),
            zeta,
            alpha,
            &model,
            2_000_000,
        )
        .unwrap();
        let chi = chi2_quantile(1.0, alpha).unwrap();
        let expect = ((zeta * zeta / chi - p0) / sigma2).ceil() as usize;
        assert_eq!(k, expect);
    }

    #[test]
    fn tube_backoff_zero_covariance() {
        let p = DMatrix::zeros(2, 2);
        let m = tube_backoff(
            &p,
            &p,
            &DVector::from_vec(vec![10.0, 0.0]),
            &DVector::from_vec(vec![0.0, 0.0]),
            0.99,
        )
        .unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn tube_backoff_unit_variance_unit_quantile() {
        // gamma = Phi(1): margin equals 1 for unit directional variance
        let m = tube_backoff(
            &DMatrix::identity(2, 2),
            &DMatrix::zeros(2, 2),
            &DVector::from_vec(vec![5.0, 5.0]),
            &DVector::from_vec(vec![1.0, 1.0]),
            0.8413447461,
        )
        .unwrap();
        assert_relative_eq!(m, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn tube_backoff_isotropic_direction_independent() {
        let p = DMatrix::identity(2, 2) * 3.7;
        let att = DVector::from_vec(vec![0.0, 0.0]);
        let mut last = None;
        for th in [0.0_f64, 0.7, 1.9, 3.0] {
            let uav = DVector::from_vec(vec![20.0 * th.cos(), 20.0 * th.sin()]);
            let m = tube_backoff(&p, &DMatrix::zeros(2, 2), &uav, &att, 0.95).unwrap();
            if let Some(prev) = last {
                assert_relative_eq!(m, prev, epsilon = 1e-12);
            }
            last = Some(m);
        }
    }

    #[test]
    fn tube_backoff_rejects_bad_gamma() {
        let p = DMatrix::identity(2, 2);
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let b = DVector::zeros(2);
        assert!(tube_backoff(&p, &p, &a, &b, 0.5).is_err());
        assert!(tube_backoff(&p, &p, &a, &b, 1.0).is_err());
        assert!(tube_backoff(&p, &p, &a, &b, 0.3).is_err());
    }

    #[test]
    fn potential_boundary_and_half_range() {
        let beta = 50_000.0;
        let r = 30.0;
        assert_eq!(repulsive_potential(r, r, beta).unwrap(), 0.0);
        assert_eq!(repulsive_potential(31.0, r, beta).unwrap(), 0.0);
        // at half range: 0.5 beta (2/r - 1/r)^2 = beta / (2 r^2)
        let v = repulsive_potential(r / 2.0, r, beta).unwrap();
        assert_relative_eq!(v, beta / (2.0 * r * r), epsilon = 1e-9);
        assert_relative_eq!(v, 27.78, epsilon = 1e-2);
        assert!(repulsive_potential(1e-9, r, beta).is_err());
    }

    #[test]
    fn potential_continuous_and_decreasing() {
        let beta = 50_000.0;
        let r = 30.0;
        let inside = repulsive_potential(r - 1e-9, r, beta).unwrap();
        assert!(inside < 1e-12, "potential must vanish continuously at the boundary");
        let mut last = f64::INFINITY;
        for i in 1..300 {
            let d = 0.1 * i as f64;
            if d > r {
                break;
            }
            let v = repulsive_potential(d, r, beta).unwrap();
            assert!(v < last, "potential must strictly decrease in distance");
            last = v;
        }
    }

    fn base_problem() -> EscapeProblem {
        EscapeProblem {
            k_attack: 0,
            k_escape: 50,
            horizon: 90,
            q: DMatrix::identity(4, 4) * 0.01,
            r: DMatrix::identity(2, 2) * 0.1,
            x_goal: DVector::from_vec(vec![60.0, 40.0, 0.0, 0.0]),
            r_effect: 30.0,
            beta: 50_000.0,
            gamma: 0.99,
            v_max: 5.0,
            u_max: 2.0,
            solver: SolverOptions::default(),
        }
    }

    fn far_inputs(x_hat: DVector<f64>) -> EscapeInputs {
        EscapeInputs {
            x_hat,
            p_uav_deadline_pos: DMatrix::zeros(2, 2),
            attacker_pos: DVector::from_vec(vec![-1e6, -1e6]),
            p_attacker_pos: DMatrix::zeros(2, 2),
            elapsed: 0,
            warm_start: None,
        }
    }

    /// Finite-horizon LQ tracking oracle via backward Riccati recursion.
    fn lq_tracking_cost(
        model: &crate::model::SystemModel,
        prob: &EscapeProblem,
        x0: &DVector<f64>,
        len: usize,
    ) -> (f64, Vec<DVector<f64>>) {
        let n = model.state_dim();
        let mut p = DMatrix::zeros(n, n);
        let mut qlin: DVector<f64> = DVector::zeros(n);
        let mut gains: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(len);
        for _ in 0..len {
            let m = &prob.q + &p;
            let mlin = &qlin - &prob.q * &prob.x_goal;
            let h = &prob.r + model.b.transpose() * &m * &model.b;
            let hinv = h.clone().try_inverse().expect("control Hessian invertible");
            let kx = &hinv * model.b.transpose() * &m * &model.a;
            let kc = &hinv * model.b.transpose() * &mlin;
            let acl = &model.a - &model.b * &kx;
            let p_new = model.a.transpose() * &m * &acl;
            let q_new = acl.transpose() * &mlin;
            gains.push((kx, kc));
            p = 0.5 * (&p_new + p_new.transpose());
            qlin = q_new;
        }
        gains.reverse();
        let mut x = x0.clone();
        let mut cost = 0.0;
        let mut us = Vec::with_capacity(len);
        for (kx, kc) in gains {
            let u = -(&kx * &x) - &kc;
            let next = &model.a * &x + &model.b * &u;
            let dx = &next - &prob.x_goal;
            cost += dx.dot(&(&prob.q * dx.clone())) + u.dot(&(&prob.r * u.clone()));
            us.push(u);
            x = next;
        }
        (cost, us)
    }

    #[test]
    fn unconstrained_tube_matches_lq_oracle() {
        let model = double_integrator();
        let mut prob = base_problem();
        prob.solver.max_inner = 600;
        prob.solver.grad_tol = 1e-8;
        // bounds wide enough that the LQ optimum never touches them
        prob.u_max = 50.0;
        prob.v_max = 200.0;
        let x0 = DVector::from_vec(vec![50.0, 34.0, 0.5, 0.3]);
        let (oracle_cost, oracle_us) = lq_tracking_cost(&model, &prob, &x0, 90);
        assert!(oracle_us.iter().all(|u| u.norm() < prob.u_max * 0.99));
        let plan = solve_escape_tube(&model, &far_inputs(x0), &prob).unwrap();
        assert!(plan.feasible);
        assert!(
            (plan.stats.objective - oracle_cost).abs() <= 0.001 * oracle_cost,
            "solver {} vs oracle {}",
            plan.stats.objective,
            oracle_cost
        );
    }

    #[test]
    fn potential_inactive_matches_tracking() {
        let model = double_integrator();
        let mut prob = base_problem();
        prob.solver.max_inner = 400;
        prob.solver.grad_tol = 1e-7;
        let x0 = DVector::from_vec(vec![50.0, 34.0, 0.5, 0.3]);
        let tube = solve_escape_tube(&model, &far_inputs(x0.clone()), &prob).unwrap();
        let pot = solve_escape_potential(&model, &far_inputs(x0), &prob).unwrap();
        assert_eq!(pot.stats.potential_cost, 0.0);
        let rel = (pot.stats.objective - tube.stats.objective).abs() / tube.stats.objective;
        assert!(rel < 1e-3, "relative gap {rel}");
    }

    #[test]
    fn zero_covariance_tube_margin_is_zero_for_any_gamma() {
        let model = double_integrator();
        let prob = base_problem();
        let x0 = DVector::from_vec(vec![50.0, 34.0, 0.0, 0.0]);
        let mut lo = far_inputs(x0.clone());
        lo.attacker_pos = DVector::from_vec(vec![0.0, 0.0]);
        let mut prob_lo = prob.clone();
        prob_lo.gamma = 0.500001;
        let mut prob_hi = prob;
        prob_hi.gamma = 0.99;
        let a = solve_escape_tube(&model, &lo, &prob_lo).unwrap();
        let b = solve_escape_tube(&model, &lo, &prob_hi).unwrap();
        assert!((a.stats.objective - b.stats.objective).abs() <= 1e-6 * a.stats.objective.max(1.0));
    }

    #[test]
    fn deep_inside_with_short_deadline_infeasible() {
        let model = double_integrator();
        let mut prob = base_problem();
        prob.k_escape = 3; // 3 steps at <= 0.7 m/step cannot cover ~25 m
        prob.horizon = 43;
        let inputs = EscapeInputs {
            x_hat: DVector::from_vec(vec![5.0, 0.0, 0.0, 0.0]),
            p_uav_deadline_pos: DMatrix::zeros(2, 2),
            attacker_pos: DVector::from_vec(vec![0.0, 0.0]),
            p_attacker_pos: DMatrix::zeros(2, 2),
            elapsed: 0,
            warm_start: None,
        };
        let plan = solve_escape_tube(&model, &inputs, &prob).unwrap();
        assert!(!plan.feasible);
    }

    #[test]
    fn rollout_consistency() {
        let model = double_integrator();
        let prob = base_problem();
        let x0 = DVector::from_vec(vec![10.0, 20.0, 1.0, -1.0]);
        let plan = solve_escape_potential(&model, &far_inputs(x0), &prob).unwrap();
        assert_eq!(plan.x_seq.len(), plan.u_seq.len() + 1);
        for i in 0..plan.u_seq.len() {
            let expect = &model.a * &plan.x_seq[i] + &model.b * &plan.u_seq[i];
            assert!((expect - &plan.x_seq[i + 1]).norm() < 1e-9);
        }
        for u in &plan.u_seq {
            assert!(u.norm() <= prob.u_max + 1e-6);
        }
    }

    #[test]
    fn potential_program_escapes_by_deadline() {
        let model = double_integrator();
        let mut prob = base_problem();
        prob.k_escape = 40;
        prob.horizon = 80;
        // goal on the near side: tracking and potential both pull outward,
        // so the retreat must clear the boundary on every post-deadline state
        prob.x_goal = DVector::from_vec(vec![20.0, 20.0, 0.0, 0.0]);
        prob.solver.max_inner = 300;
        prob.solver.max_outer = 6;
        let inputs = EscapeInputs {
            x_hat: DVector::from_vec(vec![79.0, 79.0, 2.0, 2.0]),
            p_uav_deadline_pos: DMatrix::zeros(2, 2),
            attacker_pos: DVector::from_vec(vec![100.0, 100.0]),
            p_attacker_pos: DMatrix::zeros(2, 2),
            elapsed: 0,
            warm_start: None,
        };
        let plan = solve_escape_potential(&model, &inputs, &prob).unwrap();
        for j in prob.k_escape..=prob.horizon {
            let d = (model.position_of(&plan.x_seq[j]) - &inputs.attacker_pos).norm();
            assert!(
                d > prob.r_effect - 0.5,
                "state {j} still {d:.2} m from the device (range {})",
                prob.r_effect
            );
        }
    }

    #[test]
    fn potential_program_beats_naive_through_path() {
        // entering at speed with the device dead ahead: the optimized plan
        // must carry far less potential cost than the straight tracking plan
        let model = double_integrator();
        let mut prob = base_problem();
        prob.k_escape = 60;
        prob.horizon = 100;
        prob.x_goal = DVector::from_vec(vec![300.0, 300.0, 0.0, 0.0]);
        prob.solver.max_inner = 200;
        let inputs = EscapeInputs {
            x_hat: DVector::from_vec(vec![80.0, 80.0, 3.5, 3.5]),
            p_uav_deadline_pos: DMatrix::zeros(2, 2),
            attacker_pos: DVector::from_vec(vec![100.0, 100.0]),
            p_attacker_pos: DMatrix::zeros(2, 2),
            elapsed: 0,
            warm_start: None,
        };
        let geo = geometry(&model, &prob, 0);
        let kind = ProgramKind::Potential;
        let objective = Objective {
            model: &model,
            prob: &prob,
            geo: &geo,
            kind: &kind,
            att_pos: &inputs.attacker_pos,
        };
        let naive = tracking_rollout(&model, &prob, &inputs.x_hat, geo.len, None);
        let naive_ev = objective.evaluate(&rollout(&model, &inputs.x_hat, &naive), &naive);
        let plan = solve_escape_potential(&model, &inputs, &prob).unwrap();
        assert!(
            plan.stats.potential_cost < 0.05 * naive_ev.potential_cost,
            "optimized potential {} vs naive {}",
            plan.stats.potential_cost,
            naive_ev.potential_cost
        );
        assert!(plan.stats.objective < naive_ev.objective);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let model = double_integrator();
        let mut prob = base_problem();
        prob.k_escape = 5;
        prob.horizon = 25;
        let inputs = EscapeInputs {
            x_hat: DVector::from_vec(vec![85.0, 90.0, 2.0, 1.0]),
            p_uav_deadline_pos: DMatrix::zeros(2, 2),
            attacker_pos: DVector::from_vec(vec![100.0, 100.0]),
            p_attacker_pos: DMatrix::zeros(2, 2),
            elapsed: 0,
            warm_start: None,
        };
        let geo = geometry(&model, &prob, 0);
        let kind = ProgramKind::Potential;
        let objective = Objective {
            model: &model,
            prob: &prob,
            geo: &geo,
            kind: &kind,
            att_pos: &inputs.attacker_pos,
        };
        let mult = Multipliers { vel: vec![0.3; geo.len], exit: 0.0, penalty: 25.0 };
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _case in 0..20 {
            let u_seq: Vec<DVector<f64>> = (0..geo.len)
                .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.5..1.5)))
                .collect();
            let xs = rollout(&model, &inputs.x_hat, &u_seq);
            let ev = objective.evaluate(&xs, &u_seq);
            let grads = objective.merit_gradient(&xs, &u_seq, &ev, &mult);
            let h = 1e-6;
            for probe in 0..6 {
                let j = (probe * 7) % geo.len;
                let c = probe % 2;
                let mut up = u_seq.clone();
                up[j][c] += h;
                let evp = objective.evaluate(&rollout(&model, &inputs.x_hat, &up), &up);
                let mut dn = u_seq.clone();
                dn[j][c] -= h;
                let evn = objective.evaluate(&rollout(&model, &inputs.x_hat, &dn), &dn);
                let fd = (objective.merit(&evp, &mult) - objective.merit(&evn, &mult)) / (2.0 * h);
                let an = grads[j][c];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-5,
                    "gradient mismatch at ({j},{c}): fd={fd}, analytic={an}"
                );
            }
        }
    }
}
