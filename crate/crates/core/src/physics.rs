//! Unitary propagation of a driven two-level atom.
//!
//! The Hamiltonian is H(t) = diag(omega1, omega2) + mu E(t) sigma_x in units
//! with hbar = 1. One step of [`strang_step`] applies the symmetric splitting
//!
//! ```text
//! U(dt) = exp(-i H0 dt/2) exp(-i mu E_mid sigma_x dt) exp(-i H0 dt/2)
//! ```
//!
//! with the field frozen at the step midpoint. Both factors are evaluated in
//! closed form (diagonal phases and a sigma_x rotation), so every step is
//! exactly unitary; the splitting error is second order in dt.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{FieldEvaluator, FieldSpec};

use std::io::Write;

/// Default node spacing of the simulation grid.
pub const DEFAULT_DT: f64 = 0.025;
/// Default number of grid nodes (100 seed points plus a 10000-step horizon).
pub const DEFAULT_N_POINTS: usize = 10_100;
/// Time span covered by the default grid, `DEFAULT_DT * DEFAULT_N_POINTS`.
pub const DEFAULT_SPAN: f64 = 252.5;

/// Atom constants: level energies and dipole coupling strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoLevelParams {
    omega1: f64,
    omega2: f64,
    mu: f64,
}

impl Default for TwoLevelParams {
    fn default() -> Self {
        Self {
            omega1: 0.0,
            omega2: 1.0,
            mu: 1.0,
        }
    }
}

impl TwoLevelParams {
    pub fn new(omega1: f64, omega2: f64, mu: f64) -> Result<Self> {
        if !(omega1.is_finite() && omega2.is_finite() && mu.is_finite()) {
            return Err(Error::Config("atom parameters must be finite".into()));
        }
        Ok(Self { omega1, omega2, mu })
    }

    pub fn omega1(&self) -> f64 {
        self.omega1
    }

    pub fn omega2(&self) -> f64 {
        self.omega2
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Level splitting omega2 - omega1.
    pub fn transition_frequency(&self) -> f64 {
        self.omega2 - self.omega1
    }
}

/// Normalized two-component state (C1, C2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantumState {
    c1: Complex64,
    c2: Complex64,
}

impl QuantumState {
    /// Builds a state from raw amplitudes, normalizing them. Rejects
    /// non-finite components and the zero vector.
    pub fn new(c1: Complex64, c2: Complex64) -> Result<Self> {
        let norm_sqr = c1.norm_sqr() + c2.norm_sqr();
        if !norm_sqr.is_finite() {
            return Err(Error::NonFinite {
                context: "state amplitudes",
            });
        }
        if norm_sqr == 0.0 {
            return Err(Error::Config("state amplitudes must not all be zero".into()));
        }
        let inv = norm_sqr.sqrt().recip();
        Ok(Self {
            c1: c1 * inv,
            c2: c2 * inv,
        })
    }

    /// Lower level occupied: (1, 0).
    pub fn ground() -> Self {
        Self {
            c1: Complex64::new(1.0, 0.0),
            c2: Complex64::new(0.0, 0.0),
        }
    }

    /// Upper level occupied: (0, 1).
    pub fn excited() -> Self {
        Self {
            c1: Complex64::new(0.0, 0.0),
            c2: Complex64::new(1.0, 0.0),
        }
    }

    pub fn c1(&self) -> Complex64 {
        self.c1
    }

    pub fn c2(&self) -> Complex64 {
        self.c2
    }

    pub fn norm_sqr(&self) -> f64 {
        self.c1.norm_sqr() + self.c2.norm_sqr()
    }

    /// Upper-level population |C2|^2.
    pub fn excited_population(&self) -> f64 {
        self.c2.norm_sqr()
    }
}

/// Uniform time grid t_k = t0 + k dt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    n_points: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_points: usize) -> Result<Self> {
        if !t0.is_finite() || !dt.is_finite() || dt <= 0.0 {
            return Err(Error::Config(format!(
                "time grid needs finite t0 and positive dt, got t0={t0}, dt={dt}"
            )));
        }
        if n_points == 0 {
            return Err(Error::Config("time grid needs at least one node".into()));
        }
        Ok(Self { t0, dt, n_points })
    }

    /// Grid used throughout: t0 = 0, dt = 0.025, 10100 nodes.
    pub fn default_grid() -> Self {
        Self {
            t0: 0.0,
            dt: DEFAULT_DT,
            n_points: DEFAULT_N_POINTS,
        }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Node time t_k.
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.t0, self.dt, self.n_points).map(|_| ())
    }
}

/// Solved trajectory: field samples, dipole series, and states on a grid.
#[derive(Clone, Debug)]
pub struct Trajectory {
    grid: TimeGrid,
    e: Vec<f64>,
    d: Vec<f64>,
    states: Vec<QuantumState>,
}

impl Trajectory {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Field values at the grid nodes.
    pub fn e(&self) -> &[f64] {
        &self.e
    }

    /// Dipole expectation values at the grid nodes.
    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn states(&self) -> &[QuantumState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }
}

/// Dipole expectation 2 mu Re(C1* C2).
pub fn dipole_expectation(state: &QuantumState, mu: f64) -> f64 {
    2.0 * mu * (state.c1.conj() * state.c2).re
}

/// Rescales a near-normalized state back onto the unit sphere. The closed
/// forms below are unitary in exact arithmetic; this removes the few-ulp
/// rounding residue so it cannot accumulate over long runs.
#[inline]
fn renormalized(c1: Complex64, c2: Complex64) -> QuantumState {
    let inv = (c1.norm_sqr() + c2.norm_sqr()).sqrt().recip();
    QuantumState {
        c1: c1 * inv,
        c2: c2 * inv,
    }
}

/// One splitting step with the field value frozen at `e_mid`.
///
/// Negative `dt` steps backward; the step is its own inverse under
/// dt -> -dt with the same field value.
pub fn strang_step(
    state: &QuantumState,
    params: &TwoLevelParams,
    e_mid: f64,
    dt: f64,
) -> Result<QuantumState> {
    if !e_mid.is_finite() {
        return Err(Error::NonFinite {
            context: "strang_step field value",
        });
    }
    if !dt.is_finite() {
        return Err(Error::NonFinite {
            context: "strang_step dt",
        });
    }
    let half1 = Complex64::cis(-0.5 * params.omega1 * dt);
    let half2 = Complex64::cis(-0.5 * params.omega2 * dt);
    let a = half1 * state.c1;
    let b = half2 * state.c2;
    let theta = params.mu * e_mid * dt;
    let (sin_t, cos_t) = theta.sin_cos();
    let off = Complex64::new(0.0, -sin_t);
    let r1 = cos_t * a + off * b;
    let r2 = off * a + cos_t * b;
    Ok(renormalized(half1 * r1, half2 * r2))
}

/// First-order companion of [`strang_step`]: the same midpoint coupling
/// rotation followed by the full diagonal phase, composed asymmetrically.
/// Used as a negative control in convergence studies.
fn lie_step(state: &QuantumState, params: &TwoLevelParams, e_mid: f64, dt: f64) -> QuantumState {
    let theta = params.mu * e_mid * dt;
    let (sin_t, cos_t) = theta.sin_cos();
    let off = Complex64::new(0.0, -sin_t);
    let r1 = cos_t * state.c1 + off * state.c2;
    let r2 = off * state.c1 + cos_t * state.c2;
    renormalized(
        Complex64::cis(-params.omega1 * dt) * r1,
        Complex64::cis(-params.omega2 * dt) * r2,
    )
}

/// Splitting scheme selector for convergence studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitScheme {
    /// Symmetric second-order splitting.
    Strang,
    /// Asymmetric first-order splitting.
    LieFirstOrder,
}

fn solve_with_scheme(
    params: &TwoLevelParams,
    evaluator: &FieldEvaluator,
    grid: &TimeGrid,
    initial: &QuantumState,
    scheme: SplitScheme,
) -> Result<Trajectory> {
    grid.validate()?;
    let n = grid.n_points();
    let mut e = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);

    let mut state = *initial;
    for k in 0..n {
        let e_k = evaluator.eval(grid.time(k));
        if !e_k.is_finite() {
            return Err(Error::Propagation {
                step: k,
                reason: format!("field value {e_k} at node {k} is not finite"),
            });
        }
        e.push(e_k);
        d.push(dipole_expectation(&state, params.mu));
        states.push(state);
        if k + 1 < n {
            let e_mid = evaluator.eval(grid.time(k) + 0.5 * grid.dt());
            state = match scheme {
                SplitScheme::Strang => strang_step(&state, params, e_mid, grid.dt()).map_err(
                    |err| Error::Propagation {
                        step: k,
                        reason: err.to_string(),
                    },
                )?,
                SplitScheme::LieFirstOrder => lie_step(&state, params, e_mid, grid.dt()),
            };
        }
    }
    Ok(Trajectory {
        grid: *grid,
        e,
        d,
        states,
    })
}

/// Propagates `initial` across `grid` under `field` and records the field,
/// dipole, and state at every node.
pub fn solve_trajectory(
    params: &TwoLevelParams,
    field: &FieldSpec,
    grid: &TimeGrid,
    initial: &QuantumState,
) -> Result<Trajectory> {
    let evaluator = FieldEvaluator::new(field)?;
    solve_with_scheme(params, &evaluator, grid, initial, SplitScheme::Strang)
}

/// Rotating-wave upper-level population for a resonant-or-detuned sine drive
/// starting from the ground state: with detuning D = w - (omega2 - omega1)
/// and Rabi frequency R = mu A,
///
/// ```text
/// P2(t) = R^2 / (R^2 + D^2) * sin^2(sqrt(R^2 + D^2) t / 2)
/// ```
///
/// and 0 when both R and D vanish.
pub fn rwa_excited_population(
    params: &TwoLevelParams,
    amplitude: f64,
    drive_frequency: f64,
    t: f64,
) -> f64 {
    let detuning = drive_frequency - params.transition_frequency();
    let rabi = params.mu * amplitude;
    let general = (rabi * rabi + detuning * detuning).sqrt();
    if general == 0.0 {
        return 0.0;
    }
    let mixing = rabi * rabi / (general * general);
    let s = (0.5 * general * t).sin();
    mixing * s * s
}

/// Result of a step-halving study: max-dipole errors against a refined
/// reference, and the ratios between successive errors.
#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub dts: Vec<f64>,
    /// Max |d - d_ref| over the nodes of each grid.
    pub max_errors: Vec<f64>,
    /// max_errors[i] / max_errors[i+1]; 4 means second order under halving.
    pub ratios: Vec<f64>,
    /// Mean of log2(ratio) per halving, None when errors are at rounding level.
    pub observed_order: Option<f64>,
    /// True when every error is at rounding level (e.g. zero field).
    pub exact: bool,
}

/// Errors below this are treated as exact for order estimation.
const CONVERGENCE_EXACT_FLOOR: f64 = 1e-14;

/// Runs the solver at each dt in `dts` over [0, span] and measures the max
/// dipole error at that grid's own nodes against a reference computed with
/// the same scheme at dt / refinement.
pub fn convergence_study(
    params: &TwoLevelParams,
    field: &FieldSpec,
    span: f64,
    dts: &[f64],
    refinement: usize,
    scheme: SplitScheme,
) -> Result<ConvergenceReport> {
    if dts.is_empty() {
        return Err(Error::Config("convergence study needs at least one dt".into()));
    }
    if refinement < 2 {
        return Err(Error::Config("reference refinement must be at least 2".into()));
    }
    if !span.is_finite() || span <= 0.0 {
        return Err(Error::Config(format!("study span must be positive, got {span}")));
    }
    let evaluator = FieldEvaluator::new(field)?;
    let initial = QuantumState::ground();
    let mut max_errors = Vec::with_capacity(dts.len());
    for &dt in dts {
        let steps = (span / dt).round() as usize;
        if steps == 0 {
            return Err(Error::Config(format!("dt {dt} exceeds study span {span}")));
        }
        let grid = TimeGrid::new(0.0, dt, steps + 1)?;
        let fine = TimeGrid::new(0.0, dt / refinement as f64, steps * refinement + 1)?;
        let coarse = solve_with_scheme(params, &evaluator, &grid, &initial, scheme)?;
        let reference = solve_with_scheme(params, &evaluator, &fine, &initial, scheme)?;
        let mut err = 0.0_f64;
        for (k, &dk) in coarse.d().iter().enumerate() {
            err = err.max((dk - reference.d()[k * refinement]).abs());
        }
        max_errors.push(err);
    }
    let exact = max_errors.iter().all(|&e| e < CONVERGENCE_EXACT_FLOOR);
    let mut ratios = Vec::new();
    let mut observed_order = None;
    if !exact && max_errors.len() > 1 {
        for pair in max_errors.windows(2) {
            ratios.push(pair[0] / pair[1]);
        }
        let mean_log = ratios.iter().map(|r| r.log2()).sum::<f64>() / ratios.len() as f64;
        observed_order = Some(mean_log);
    }
    Ok(ConvergenceReport {
        dts: dts.to_vec(),
        max_errors,
        ratios,
        observed_order,
        exact,
    })
}

/// Writes a trajectory as CSV with header
/// `t,E,d,re_c1,im_c1,re_c2,im_c2` and 17 significant digits per value.
pub fn write_trajectory_csv<W: Write>(trajectory: &Trajectory, out: &mut W) -> Result<()> {
    writeln!(out, "t,E,d,re_c1,im_c1,re_c2,im_c2")?;
    for k in 0..trajectory.len() {
        let s = &trajectory.states()[k];
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            trajectory.grid().time(k),
            trajectory.e()[k],
            trajectory.d()[k],
            s.c1().re,
            s.c1().im,
            s.c2().re,
            s.c2().im,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn params_default_and_validation() {
        let p = TwoLevelParams::default();
        assert_eq!((p.omega1(), p.omega2(), p.mu()), (0.0, 1.0, 1.0));
        assert_eq!(p.transition_frequency(), 1.0);
        assert!(TwoLevelParams::new(0.0, f64::INFINITY, 1.0).is_err());
        assert!(TwoLevelParams::new(0.5, 1.5, -2.0).is_ok());
    }

    #[test]
    fn state_constructor_normalizes() {
        let s = QuantumState::new(Complex64::new(3.0, 0.0), Complex64::new(4.0, 0.0)).unwrap();
        close(s.norm_sqr(), 1.0, 1e-15);
        close(s.excited_population(), 0.64, 1e-15);
        assert!(QuantumState::new(Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)).is_err());
        assert!(QuantumState::new(Complex64::new(f64::NAN, 0.0), Complex64::new(1.0, 0.0)).is_err());
    }

    #[test]
    fn grid_times_and_validation() {
        let grid = TimeGrid::default_grid();
        assert_eq!(grid.n_points(), 10_100);
        assert_eq!(grid.dt(), 0.025);
        assert_eq!(grid.time(0), 0.0);
        assert_eq!(grid.time(4), 0.1);
        assert!(TimeGrid::new(0.0, 0.0, 10).is_err());
        assert!(TimeGrid::new(0.0, -0.1, 10).is_err());
        assert!(TimeGrid::new(0.0, 0.1, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 0.1, 10).is_err());
    }

    #[test]
    fn ground_state_is_stationary_without_field() {
        let params = TwoLevelParams::default();
        let mut state = QuantumState::ground();
        for _ in 0..100 {
            state = strang_step(&state, &params, 0.0, 0.025).unwrap();
        }
        assert_eq!(state.c1().re, 1.0);
        assert_eq!(state.c1().im.abs(), 0.0);
        assert_eq!(state.c2().norm_sqr(), 0.0);
    }

    #[test]
    fn excited_state_collects_free_phase() {
        let params = TwoLevelParams::default();
        let state = strang_step(&QuantumState::excited(), &params, 0.0, 0.1).unwrap();
        let expected = Complex64::cis(-0.1);
        assert!((state.c2() - expected).norm() < 1e-15);
        assert_eq!(state.c1().norm_sqr(), 0.0);
    }

    #[test]
    fn step_rejects_non_finite_input() {
        let params = TwoLevelParams::default();
        let state = QuantumState::ground();
        assert!(matches!(
            strang_step(&state, &params, f64::NAN, 0.025),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            strang_step(&state, &params, 0.0, f64::INFINITY),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn long_run_preserves_norm() {
        let params = TwoLevelParams::default();
        let field = FieldSpec::sine(2.0, 2.0);
        let traj =
            solve_trajectory(&params, &field, &TimeGrid::default_grid(), &QuantumState::ground())
                .unwrap();
        let worst = traj
            .states()
            .iter()
            .map(|s| (s.norm_sqr() - 1.0).abs())
            .fold(0.0_f64, f64::max);
        assert!(worst < 1e-12, "worst norm deviation {worst}");
    }

    #[test]
    fn backward_steps_undo_forward_steps() {
        let params = TwoLevelParams::default();
        let evaluator = FieldEvaluator::new(&FieldSpec::sine(1.5, 0.8)).unwrap();
        let dt = 0.025;
        let n = 400;
        let initial =
            QuantumState::new(Complex64::new(0.6, 0.2), Complex64::new(-0.4, 0.5)).unwrap();
        let mut state = initial;
        for k in 0..n {
            state = strang_step(&state, &params, evaluator.eval((k as f64 + 0.5) * dt), dt).unwrap();
        }
        for k in (0..n).rev() {
            state =
                strang_step(&state, &params, evaluator.eval((k as f64 + 0.5) * dt), -dt).unwrap();
        }
        assert!((state.c1() - initial.c1()).norm() < 1e-13);
        assert!((state.c2() - initial.c2()).norm() < 1e-13);
    }

    #[test]
    fn zero_field_trajectory_has_zero_dipole() {
        let params = TwoLevelParams::default();
        let traj = solve_trajectory(
            &params,
            &FieldSpec::zero(),
            &TimeGrid::new(0.0, 0.025, 2000).unwrap(),
            &QuantumState::ground(),
        )
        .unwrap();
        assert!(traj.d().iter().all(|&d| d == 0.0));
        assert!(traj.e().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn dipole_expectation_basics() {
        assert_eq!(dipole_expectation(&QuantumState::ground(), 1.0), 0.0);
        assert_eq!(dipole_expectation(&QuantumState::excited(), 1.0), 0.0);
        let plus = QuantumState::new(Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)).unwrap();
        close(dipole_expectation(&plus, 1.0), 1.0, 1e-15);
        close(dipole_expectation(&plus, 2.5), 2.5, 1e-15);
        let quadrature =
            QuantumState::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)).unwrap();
        close(dipole_expectation(&quadrature, 1.0), 0.0, 1e-15);
    }

    #[test]
    fn rwa_reference_basics() {
        let params = TwoLevelParams::default();
        assert_eq!(rwa_excited_population(&params, 0.05, 1.0, 0.0), 0.0);
        // On resonance the population reaches 1 at t = pi / (mu A).
        let t_flip = std::f64::consts::PI / 0.05;
        close(rwa_excited_population(&params, 0.05, 1.0, t_flip), 1.0, 1e-12);
        // Far detuned, the excursion is bounded by R^2 / (R^2 + D^2).
        let cap = 0.05_f64.powi(2) / (0.05_f64.powi(2) + 0.5_f64.powi(2));
        for k in 0..100 {
            let p = rwa_excited_population(&params, 0.05, 1.5, k as f64);
            assert!(p <= cap * (1.0 + 1e-12));
        }
        assert_eq!(rwa_excited_population(&params, 0.0, 1.0, 3.0), 0.0);
    }

    #[test]
    fn weak_resonant_drive_matches_rwa() {
        let params = TwoLevelParams::default();
        let traj = solve_trajectory(
            &params,
            &FieldSpec::sine(0.05, 1.0),
            &TimeGrid::default_grid(),
            &QuantumState::ground(),
        )
        .unwrap();
        let mut worst = 0.0_f64;
        for (k, state) in traj.states().iter().enumerate() {
            let t = traj.grid().time(k);
            if t > 250.0 {
                break;
            }
            let reference = rwa_excited_population(&params, 0.05, 1.0, t);
            worst = worst.max((state.excited_population() - reference).abs());
        }
        assert!(worst < 2e-2, "worst RWA deviation {worst}");
    }

    #[test]
    fn dipole_error_shrinks_at_second_order() {
        let params = TwoLevelParams::default();
        let report = convergence_study(
            &params,
            &FieldSpec::sine(1.0, 0.5),
            40.0,
            &[0.05, 0.025, 0.0125],
            64,
            SplitScheme::Strang,
        )
        .unwrap();
        assert!(!report.exact);
        for ratio in &report.ratios {
            assert!((3.6..=4.4).contains(ratio), "ratio {ratio}");
        }
        let order = report.observed_order.unwrap();
        assert!((1.8..=2.2).contains(&order), "order {order}");
    }

    #[test]
    fn first_order_scheme_fails_second_order_check() {
        let params = TwoLevelParams::default();
        let report = convergence_study(
            &params,
            &FieldSpec::sine(1.0, 0.5),
            40.0,
            &[0.05, 0.025, 0.0125],
            64,
            SplitScheme::LieFirstOrder,
        )
        .unwrap();
        let order = report.observed_order.unwrap();
        assert!((0.8..=1.2).contains(&order), "order {order}");
        assert!(report.ratios.iter().any(|r| *r < 3.6));
    }

    #[test]
    fn zero_field_convergence_is_exact() {
        let params = TwoLevelParams::default();
        let report = convergence_study(
            &params,
            &FieldSpec::zero(),
            40.0,
            &[0.05, 0.025],
            32,
            SplitScheme::Strang,
        )
        .unwrap();
        assert!(report.exact);
        assert!(report.observed_order.is_none());
        assert!(report.max_errors.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn trajectory_csv_round_trips() {
        let params = TwoLevelParams::default();
        let traj = solve_trajectory(
            &params,
            &FieldSpec::sine(1.0, 0.5),
            &TimeGrid::new(0.0, 0.025, 8).unwrap(),
            &QuantumState::ground(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,E,d,re_c1,im_c1,re_c2,im_c2");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 8);
        for (k, row) in rows.iter().enumerate() {
            let cols: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cols.len(), 7);
            assert_eq!(cols[0], traj.grid().time(k));
            assert_eq!(cols[2], traj.d()[k]);
        }
    }

    #[test]
    fn solver_rejects_invalid_field() {
        let params = TwoLevelParams::default();
        let mut field = FieldSpec::sine(1.0, 1.0);
        field.amplitude = f64::NAN;
        let result = solve_trajectory(
            &params,
            &field,
            &TimeGrid::default_grid(),
            &QuantumState::ground(),
        );
        assert!(matches!(result, Err(Error::Config(_))));
    }
}
