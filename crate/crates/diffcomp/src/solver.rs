//! Probability-flow ODE solvers over the VP schedule.
//!
//! Data-prediction multistep solvers of order 1..3 in log-SNR time. With
//! `alpha = signal`, `sigma = noise`, `lambda = ln(alpha/sigma)` and the data
//! prediction `D = (x - sigma * eps) / alpha`, one step from train index `s`
//! to `t` with `h = lambda_t - lambda_s` is
//!
//! ```text
//! order 1:  x_t = (sigma_t/sigma_s) * x_s - alpha_t * (e^-h - 1) * D0
//! order 2:  ... - alpha_t * (e^-h - 1) * 0.5 * D1,   D1 = (D0 - D0_prev) / r0
//! order 3:  two-back quadratic correction (see `multistep_update`)
//! ```
//!
//! Order 1 is algebraically the DDIM step `x_t = alpha_t * D0 + sigma_t * eps`.
//! The same formulas integrate both directions: backward (noise to data,
//! `h > 0`) and forward inversion (data to noise, `h < 0`) simply reverse the
//! traversal of the grid.
//!
//! The effective order is reduced near both ends of a run,
//! `min(order, steps_taken + 1, steps_remaining)`, so the forward and
//! backward passes apply the same order on every grid segment.

use std::collections::VecDeque;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, TimeGrid};

/// Integration direction along the diffusion time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Data to noise (inversion): train index 0 up to N.
    Forward,
    /// Noise to data (sampling): train index N down to 0.
    Backward,
}

/// Timestep placement rule. Only the uniform discrete-index rule is
/// implemented; the enum is the seam for alternative spacings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimestepSpacing {
    #[default]
    UniformTrainIndex,
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Multistep order, 1..=3. Order 1 is DDIM-equivalent.
    pub order: usize,
    pub num_steps: usize,
    pub direction: Direction,
    /// Guidance scale `s` used by guided conditioning (see [`cfg_noise`]).
    pub guidance_scale: f64,
    pub spacing: TimestepSpacing,
}

impl SolverConfig {
    pub fn new(order: usize, num_steps: usize, direction: Direction) -> Self {
        SolverConfig {
            order,
            num_steps,
            direction,
            guidance_scale: 1.0,
            spacing: TimestepSpacing::UniformTrainIndex,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.order) {
            return Err(Error::config(format!(
                "solver order must be 1..=3, got {}",
                self.order
            )));
        }
        if self.num_steps < self.order {
            return Err(Error::config(format!(
                "num_steps ({}) must be >= order ({})",
                self.num_steps, self.order
            )));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::config("guidance scale must be >= 0"));
        }
        Ok(())
    }
}

/// A latent array pinned to a train-time index.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub data: Array3<f64>,
    pub time_index: usize,
}

impl LatentState {
    pub fn new(data: Array3<f64>, time_index: usize) -> Self {
        LatentState { data, time_index }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// All states visited by one integration, start included.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<LatentState>,
    pub direction: Direction,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at grid point `k` (train index `grid.train_index(k)`),
    /// independent of traversal direction.
    pub fn at_grid_point(&self, k: usize) -> &LatentState {
        match self.direction {
            Direction::Forward => &self.states[k],
            Direction::Backward => &self.states[self.states.len() - 1 - k],
        }
    }
}

/// Classifier-free guidance blend: `s * eps_cond + (1 - s) * eps_uncond`.
pub fn cfg_noise(
    eps_cond: &Array3<f64>,
    eps_uncond: &Array3<f64>,
    scale: f64,
) -> Result<Array3<f64>> {
    if eps_cond.dim() != eps_uncond.dim() {
        return Err(Error::contract(format!(
            "cfg_noise shape mismatch: {:?} vs {:?}",
            eps_cond.dim(),
            eps_uncond.dim()
        )));
    }
    Ok(eps_cond * scale + eps_uncond * (1.0 - scale))
}

/// One denoiser evaluation context.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// 0-based step counter within the run.
    pub step: usize,
    /// Grid point the step leaves from.
    pub src_grid: usize,
    /// Grid point the step arrives at.
    pub dst_grid: usize,
    pub num_steps: usize,
    pub direction: Direction,
}

/// Noise predictor driving the ODE. Implementations wrap a backbone plus a
/// prompt (and optionally guidance or attention overrides).
pub trait DenoiseModel {
    fn predict(&mut self, x: &Array3<f64>, train_index: usize, step: &StepInfo)
        -> Result<Array3<f64>>;
}

impl<F> DenoiseModel for F
where
    F: FnMut(&Array3<f64>, usize, &StepInfo) -> Result<Array3<f64>>,
{
    fn predict(
        &mut self,
        x: &Array3<f64>,
        train_index: usize,
        step: &StepInfo,
    ) -> Result<Array3<f64>> {
        self(x, train_index, step)
    }
}

/// Ring buffer of previous data predictions with their log-SNR values.
#[derive(Debug, Clone, Default)]
pub struct SolverHistory {
    entries: VecDeque<(f64, Array3<f64>)>,
}

impl SolverHistory {
    pub fn new() -> Self {
        SolverHistory::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, lambda: f64, data_pred: Array3<f64>) {
        self.entries.push_front((lambda, data_pred));
        while self.entries.len() > 2 {
            self.entries.pop_back();
        }
    }

    fn get(&self, back: usize) -> &(f64, Array3<f64>) {
        &self.entries[back]
    }
}

/// Multistep update given the current data prediction and history.
///
/// `d0` is the data prediction at the source point; `history` holds the one
/// or two previous predictions (most recent first).
fn multistep_update(
    x: &Array3<f64>,
    d0: &Array3<f64>,
    schedule: &NoiseSchedule,
    src: usize,
    dst: usize,
    order: usize,
    history: &SolverHistory,
) -> Array3<f64> {
    let lambda_t = schedule.log_snr(dst);
    let lambda_s = schedule.log_snr(src);
    let sigma_t = schedule.noise(dst);
    let sigma_s = schedule.noise(src);
    let alpha_t = schedule.signal(dst);
    let h = lambda_t - lambda_s;
    let phi = (-h).exp_m1(); // e^-h - 1

    let base = x * (sigma_t / sigma_s) - d0 * (alpha_t * phi);
    match order {
        1 => base,
        2 => {
            let (lambda_s1, d1_prev) = history.get(0);
            let h0 = lambda_s - lambda_s1;
            let r0 = h0 / h;
            let d1 = (d0 - d1_prev) / r0;
            base - d1 * (0.5 * alpha_t * phi)
        }
        3 => {
            let (lambda_s1, m1) = history.get(0);
            let (lambda_s2, m2) = history.get(1);
            let h0 = lambda_s - lambda_s1;
            let h1 = lambda_s1 - lambda_s2;
            let (r0, r1) = (h0 / h, h1 / h);
            let d1_0 = (d0 - m1) / r0;
            let d1_1 = (m1 - m2) / r1;
            let diff = &d1_0 - &d1_1;
            let d1 = &d1_0 + &diff * (r0 / (r0 + r1));
            let d2 = diff / (r0 + r1);
            base + d1 * (alpha_t * (phi / h + 1.0)) - d2 * (alpha_t * ((phi + h) / (h * h) - 0.5))
        }
        _ => unreachable!("order validated to 1..=3"),
    }
}

/// Effective order at a given step: warm-up and tail both reduce it so the
/// same order applies to each grid segment in either direction.
fn effective_order(order: usize, step: usize, num_steps: usize, history_len: usize) -> usize {
    order.min(step + 1).min(num_steps - step).min(history_len + 1)
}

/// Advances one discretization step along the probability-flow ODE.
///
/// Evaluates the model once at the state's current train index, forms the
/// data prediction, applies the multistep update toward the destination grid
/// point and pushes the prediction into `history`. Deterministic given
/// identical inputs.
pub fn ode_step(
    state: &LatentState,
    model: &mut dyn DenoiseModel,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    step_index: usize,
    history: &mut SolverHistory,
) -> Result<LatentState> {
    let num_steps = grid.num_steps();
    let (src_grid, dst_grid) = match cfg.direction {
        Direction::Forward => (step_index, step_index + 1),
        Direction::Backward => (num_steps - step_index, num_steps - step_index - 1),
    };
    let src = grid.train_index(src_grid);
    let dst = grid.train_index(dst_grid);
    if state.time_index != src {
        return Err(Error::contract(format!(
            "state at train index {} but step {} expects {}",
            state.time_index, step_index, src
        )));
    }

    let info = StepInfo {
        step: step_index,
        src_grid,
        dst_grid,
        num_steps,
        direction: cfg.direction,
    };
    let eps = model.predict(&state.data, src, &info)?;
    if eps.dim() != state.data.dim() {
        return Err(Error::contract(format!(
            "denoiser output shape {:?} does not match state {:?}",
            eps.dim(),
            state.data.dim()
        )));
    }
    if !eps.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical(step_index, "denoiser output not finite"));
    }

    let alpha_s = schedule.signal(src);
    let sigma_s = schedule.noise(src);
    let d0 = (&state.data - &(&eps * sigma_s)) / alpha_s;

    let order = effective_order(cfg.order, step_index, num_steps, history.len());
    let next = multistep_update(&state.data, &d0, schedule, src, dst, order, history);
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical(step_index, "state not finite after update"));
    }
    history.push(schedule.log_snr(src), d0);
    Ok(LatentState::new(next, dst))
}

/// Observation passed to step hooks after each committed step.
pub struct StepEvent<'a> {
    pub step: usize,
    pub src_grid: usize,
    pub dst_grid: usize,
    pub state: &'a LatentState,
}

pub type StepHook<'a> = Box<dyn FnMut(&StepEvent<'_>) -> Result<()> + 'a>;

/// Integrates the full grid in the configured direction.
///
/// Returns the final state plus the complete trajectory (`num_steps + 1`
/// states, start included). Hooks run after every step; a hook error aborts
/// the run with its step context attached.
pub fn integrate(
    x_start: LatentState,
    model: &mut dyn DenoiseModel,
    schedule: &NoiseSchedule,
    cfg: &SolverConfig,
    hooks: &mut [StepHook<'_>],
) -> Result<(LatentState, Trajectory)> {
    cfg.validate()?;
    let grid = TimeGrid::uniform(schedule.num_train_steps(), cfg.num_steps)?;
    let expected_start = match cfg.direction {
        Direction::Forward => grid.train_index(0),
        Direction::Backward => grid.train_index(grid.num_steps()),
    };
    if x_start.time_index != expected_start {
        return Err(Error::contract(format!(
            "start state at train index {} but {:?} integration starts at {}",
            x_start.time_index, cfg.direction, expected_start
        )));
    }

    let mut history = SolverHistory::new();
    let mut states = Vec::with_capacity(cfg.num_steps + 1);
    let mut current = x_start;
    states.push(current.clone());
    for step in 0..cfg.num_steps {
        current = ode_step(&current, model, schedule, &grid, cfg, step, &mut history)?;
        let (src_grid, dst_grid) = match cfg.direction {
            Direction::Forward => (step, step + 1),
            Direction::Backward => (cfg.num_steps - step, cfg.num_steps - step - 1),
        };
        let event = StepEvent {
            step,
            src_grid,
            dst_grid,
            state: &current,
        };
        for hook in hooks.iter_mut() {
            hook(&event).map_err(|e| match e {
                Error::Contract(msg) => Error::contract(format!("hook failed at step {step}: {msg}")),
                other => other,
            })?;
        }
        states.push(current.clone());
    }
    let trajectory = Trajectory {
        states,
        direction: cfg.direction,
    };
    Ok((current, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn zero_model() -> impl DenoiseModel {
        |x: &Array3<f64>, _t: usize, _s: &StepInfo| Ok(Array3::zeros(x.dim()))
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::vp_linear(1000, (1e-4, 0.02)).unwrap()
    }

    #[test]
    fn cfg_noise_identities() {
        let a = Array3::from_elem((1, 2, 2), 1.0);
        let b = Array3::from_elem((1, 2, 2), 0.5);
        let s1 = cfg_noise(&a, &b, 1.0).unwrap();
        assert_eq!(s1, a);
        let s0 = cfg_noise(&a, &b, 0.0).unwrap();
        assert_eq!(s0, b);
        let s25 = cfg_noise(&a, &b, 2.5).unwrap();
        assert!((s25[[0, 0, 0]] - 1.75).abs() < 1e-15);
    }

    #[test]
    fn cfg_noise_fixed_point_for_equal_inputs() {
        let a = Array3::from_shape_fn((2, 3, 3), |(c, i, j)| (c + i * 3 + j) as f64 * 0.1 - 0.7);
        for s in [0.0, 0.5, 1.0, 2.5, 7.0] {
            let out = cfg_noise(&a, &a, s).unwrap();
            for (x, y) in out.iter().zip(a.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cfg_noise_rejects_shape_mismatch() {
        let a = Array3::<f64>::zeros((1, 2, 2));
        let b = Array3::<f64>::zeros((1, 2, 3));
        assert!(matches!(cfg_noise(&a, &b, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_denoiser_step_is_signal_ratio_rescale() {
        let sched = schedule();
        let grid = TimeGrid::uniform(1000, 20).unwrap();
        let cfg = SolverConfig::new(1, 20, Direction::Backward);
        let x = Array3::from_shape_fn((2, 4, 4), |(c, i, j)| ((c + i + j) as f64).sin() + 0.3);
        let state = LatentState::new(x.clone(), 1000);
        let mut history = SolverHistory::new();
        let mut model = zero_model();
        let next = ode_step(&state, &mut model, &sched, &grid, &cfg, 0, &mut history).unwrap();
        let ratio = sched.signal(grid.train_index(19)) / sched.signal(1000);
        for (a, b) in next.data.iter().zip(x.iter()) {
            assert!((a - b * ratio).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn order_two_with_empty_history_falls_back_to_order_one() {
        let sched = schedule();
        let grid = TimeGrid::uniform(1000, 20).unwrap();
        let x = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| 0.1 * (i as f64) - 0.05 * (j as f64));
        let state = LatentState::new(x, 1000);

        let run = |order: usize| {
            let cfg = SolverConfig::new(order, 20, Direction::Backward);
            let mut history = SolverHistory::new();
            let mut model = |x: &Array3<f64>, _t: usize, _s: &StepInfo| Ok(x * 0.5);
            ode_step(&state, &mut model, &sched, &grid, &cfg, 0, &mut history).unwrap()
        };
        let first_order = run(1);
        let second_order = run(2);
        assert_eq!(first_order.data, second_order.data);
    }

    #[test]
    fn integrate_records_all_states_and_survives_zero_input() {
        let sched = schedule();
        let cfg = SolverConfig::new(2, 20, Direction::Forward);
        let start = LatentState::new(Array3::zeros((1, 4, 4)), 0);
        let mut model = zero_model();
        let (end, traj) = integrate(start, &mut model, &sched, &cfg, &mut []).unwrap();
        assert_eq!(traj.len(), 21);
        assert!(end.is_finite());
        assert_eq!(end.time_index, 1000);
    }

    #[test]
    fn non_finite_denoiser_output_reports_step() {
        let sched = schedule();
        let cfg = SolverConfig::new(1, 4, Direction::Backward);
        let start = LatentState::new(Array3::zeros((1, 2, 2)), 1000);
        let mut model = |x: &Array3<f64>, _t: usize, s: &StepInfo| {
            if s.step == 2 {
                Ok(Array3::from_elem(x.dim(), f64::NAN))
            } else {
                Ok(Array3::zeros(x.dim()))
            }
        };
        let err = integrate(start, &mut model, &sched, &cfg, &mut []).unwrap_err();
        match err {
            Error::Numerical { step, .. } => assert_eq!(step, 2),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn effective_order_symmetric_across_directions() {
        // Segment s..s+1 must get the same order whether reached forward
        // (step s) or backward (step N-1-s).
        let n = 20;
        for order in 1..=3 {
            for s in 0..n {
                let fw = effective_order(order, s, n, s.min(2));
                let bw_step = n - 1 - s;
                let bw = effective_order(order, bw_step, n, bw_step.min(2));
                assert_eq!(fw, bw, "order {order}, segment {s}");
            }
        }
    }

    #[test]
    fn hook_failure_aborts_with_step_context() {
        let sched = schedule();
        let cfg = SolverConfig::new(1, 4, Direction::Forward);
        let start = LatentState::new(Array3::zeros((1, 2, 2)), 0);
        let mut model = zero_model();
        let mut hooks: Vec<StepHook<'_>> = vec![Box::new(|e: &StepEvent<'_>| {
            if e.step == 1 {
                Err(Error::contract("synthetic hook failure"))
            } else {
                Ok(())
            }
        })];
        let err = integrate(start, &mut model, &sched, &cfg, &mut hooks).unwrap_err();
        assert!(err.to_string().contains("step 1"));
    }
}
