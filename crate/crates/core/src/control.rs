//! LQR synthesis in the lifted space and closed-loop simulation.
//!
//! The Riccati equation is solved by the fixed-point iteration
//! `P ← Q + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA` from `P = Q`; the gain is returned
//! negative-feedback-inclusive, so downstream code always applies
//! `u_k = K·g(x_k)` literally.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{discrete_step, state_norm, DynamicalSystem, IntegrationConfig};
use crate::error::{Error, Result};
use crate::observables::LiftedState;
use crate::training::KoopmanModel;
use crate::util::matrix_digest;

/// Quadratic cost weights on the lifted state and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct LQRWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LQRWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(Error::InvalidArgument("Q must be square".to_string()));
        }
        if r.nrows() != r.ncols() {
            return Err(Error::InvalidArgument("R must be square".to_string()));
        }
        let sym_defect = |m: &DMatrix<f64>| (m - m.transpose()).abs().max();
        if sym_defect(&q) > 1e-12 || sym_defect(&r) > 1e-12 {
            return Err(Error::InvalidArgument(
                "cost matrices must be symmetric within 1e-12".to_string(),
            ));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument(
                "R must be positive definite".to_string(),
            ));
        }
        Ok(Self { q, r })
    }

    /// Costs that penalize only the physical states: `Q = diag(state_weights,
    /// 0_N)` on the lifted space, `R = diag(input_weights)`.
    pub fn from_state_weights(
        state_weights: &[f64],
        lifted_dim: usize,
        input_weights: &[f64],
    ) -> Result<Self> {
        if state_weights.len() > lifted_dim {
            return Err(Error::DimensionMismatch {
                context: "state weights",
                expected: lifted_dim,
                found: state_weights.len(),
            });
        }
        let mut q = DMatrix::zeros(lifted_dim, lifted_dim);
        for (i, w) in state_weights.iter().enumerate() {
            q[(i, i)] = *w;
        }
        let p = input_weights.len();
        let mut r = DMatrix::zeros(p, p);
        for (i, w) in input_weights.iter().enumerate() {
            r[(i, i)] = *w;
        }
        Self::new(q, r)
    }
}

/// A static feedback gain `u = K·ξ` with synthesis provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGain {
    pub k: DMatrix<f64>,
    /// Digest of the (A, B, Q, R) the gain was designed from.
    pub designed_from: String,
    /// Spectral radius of A + BK recorded at synthesis.
    pub closed_loop_spectral_radius: f64,
}

impl FeedbackGain {
    pub fn zero(p: usize, lifted_dim: usize) -> Self {
        Self {
            k: DMatrix::zeros(p, lifted_dim),
            designed_from: "zero".to_string(),
            closed_loop_spectral_radius: f64::NAN,
        }
    }
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|e| e.norm())
        .fold(0.0, f64::max)
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration
/// from `P = Q`, stopping once `‖P_{t+1} − P_t‖_F < tol`. The returned P is
/// symmetric and satisfies the DARE with residual below `10·tol`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let step = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let btp = b.transpose() * p;
        let gram = r + &btp * b;
        let inv = gram.try_inverse().ok_or_else(|| {
            Error::InvalidArgument("R + BᵀPB became singular during the DARE iteration".to_string())
        })?;
        let atp = a.transpose() * p;
        let next = q + &atp * a - &atp * b * inv * &btp * a;
        // Symmetrize to keep round-off from drifting the iterates.
        Ok((&next + next.transpose()) * 0.5)
    };

    let mut p = q.clone();
    let mut best_diff = f64::INFINITY;
    let mut stall = 0usize;
    for _ in 0..max_iter {
        let next = step(&p)?;
        let diff = (&next - &p).norm();
        p = next;
        if !diff.is_finite() {
            return Err(Error::RiccatiNotConverged {
                iterations: max_iter,
                residual: diff,
            });
        }
        if diff < tol {
            break;
        }
        // Large-magnitude P stalls above any absolute tolerance; once the
        // iterate stops improving it has hit float precision.
        if diff < 0.999 * best_diff {
            best_diff = diff;
            stall = 0;
        } else {
            stall += 1;
            if stall >= 100 {
                break;
            }
        }
    }
    let residual = (&step(&p)? - &p).norm();
    let attainable = 1e4 * f64::EPSILON * (1.0 + p.norm());
    if residual < (10.0 * tol).max(attainable) {
        Ok(p)
    } else {
        Err(Error::RiccatiNotConverged {
            iterations: max_iter,
            residual,
        })
    }
}

/// Structure-preserving doubling iteration for the DARE, used as a fallback
/// when the fixed-point iteration cannot converge (operators with very large
/// spectral radius push the fixed point's float noise floor above any
/// absolute tolerance). Quadratically convergent for stabilizable pairs.
pub fn solve_dare_doubling(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let r_inv = r.clone().try_inverse().ok_or_else(|| {
        Error::InvalidArgument("R must be invertible for the doubling iteration".to_string())
    })?;
    let mut a_k = a.clone();
    let mut g_k = b * &r_inv * b.transpose();
    let mut h_k = q.clone();
    let eye = DMatrix::identity(d, d);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let w = &eye + &g_k * &h_k;
        let w_inv = w.try_inverse().ok_or(Error::RiccatiNotConverged {
            iterations: max_iter,
            residual,
        })?;
        let aw = &a_k * &w_inv;
        let a_next = &aw * &a_k;
        let g_next = &g_k + &aw * &g_k * a_k.transpose();
        let h_next = &h_k + a_k.transpose() * &h_k * &w_inv * &a_k;
        residual = (&h_next - &h_k).norm();
        let scale = 1.0 + h_next.norm();
        a_k = a_next;
        g_k = g_next;
        h_k = (&h_next + h_next.transpose()) * 0.5;
        if !residual.is_finite() {
            break;
        }
        if residual <= 1e-13 * scale {
            // Verify against the Riccati operator in a scale-aware way.
            let btp = b.transpose() * &h_k;
            let gram = r + &btp * b;
            let inv = gram.try_inverse().ok_or(Error::RiccatiNotConverged {
                iterations: max_iter,
                residual,
            })?;
            let atp = a.transpose() * &h_k;
            let rhs = q + &atp * a - &atp * b * inv * &btp * a;
            let rel = (&h_k - &rhs).norm() / (1.0 + h_k.norm() + atp.norm() * a.norm());
            if rel < 1e-8 {
                return Ok(h_k);
            }
            break;
        }
    }
    Err(Error::RiccatiNotConverged {
        iterations: max_iter,
        residual,
    })
}

/// Infinite-horizon LQR gain `K = −(R+BᵀPB)⁻¹BᵀPA`. A closed-loop spectral
/// radius at or above one is recorded and logged, not treated as an error.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    weights: &LQRWeights,
) -> Result<FeedbackGain> {
    let p = match solve_dare(a, b, &weights.q, &weights.r, 1e-12, 1_000_000) {
        Ok(p) => p,
        Err(first_err) => {
            log::warn!("fixed-point DARE failed ({first_err}); retrying with the doubling iteration");
            solve_dare_doubling(a, b, &weights.q, &weights.r, 200)?
        }
    };
    let btp = b.transpose() * &p;
    let gram = &weights.r + &btp * b;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("R + BᵀPB is singular".to_string()))?;
    let k = -(inv * &btp * a);
    let rho = spectral_radius(&(a + b * &k));
    if rho >= 1.0 {
        log::warn!("LQR closed-loop spectral radius is {rho:.6} (>= 1)");
    }
    Ok(FeedbackGain {
        k,
        designed_from: matrix_digest(&[a, b, &weights.q, &weights.r]),
        closed_loop_spectral_radius: rho,
    })
}

/// Blow-up and convergence thresholds for closed-loop rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    pub blow_up_radius: f64,
    pub convergence_tol: f64,
    /// The last `tail_window` states must all be inside the tolerance ball
    /// for the run to count as converged.
    pub tail_window: usize,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            blow_up_radius: 1e6,
            convergence_tol: 0.05,
            tail_window: 10,
        }
    }
}

/// A closed-loop rollout of the TRUE plant: states, inputs, accumulated cost
/// `Σ ξᵀQξ + uᵀRu`, and convergence/divergence flags.
#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// Per-step stage cost `ξ_kᵀQξ_k + u_kᵀRu_k` (empty when no weights
    /// were supplied).
    pub stage_costs: Vec<f64>,
    pub cost: f64,
    pub converged: bool,
    pub diverged: bool,
}

/// Simulates the true system under `u_k = K·g(x_k)`, the gain applied to the
/// model's lifting. Exceeding the blow-up radius truncates the rollout.
#[allow(clippy::too_many_arguments)]
pub fn simulate_true_closed_loop(
    system: &DynamicalSystem,
    model: &KoopmanModel,
    gain: &FeedbackGain,
    x0: &[f64],
    steps: usize,
    cfg: &IntegrationConfig,
    weights: Option<&LQRWeights>,
    opts: &SimulationOptions,
) -> Result<ClosedLoopResult> {
    if x0.len() != system.n || system.n != model.n {
        return Err(Error::DimensionMismatch {
            context: "closed-loop initial state",
            expected: system.n,
            found: x0.len(),
        });
    }
    if gain.k.ncols() != model.lifted_dim() {
        return Err(Error::DimensionMismatch {
            context: "feedback gain columns",
            expected: model.lifted_dim(),
            found: gain.k.ncols(),
        });
    }
    let mut states = vec![x0.to_vec()];
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut stage_costs: Vec<f64> = Vec::new();
    let mut diverged = false;
    for _ in 0..steps {
        let x = states.last().unwrap().clone();
        let lifted = model.lift(&x)?;
        let u_vec = &gain.k * &lifted.values;
        if let Some(w) = weights {
            let stage = (lifted.values.transpose() * &w.q * &lifted.values)[(0, 0)]
                + (u_vec.transpose() * &w.r * &u_vec)[(0, 0)];
            stage_costs.push(stage);
        }
        let u: Vec<f64> = u_vec.iter().copied().collect();
        match discrete_step(system, &x, &u, cfg) {
            Ok(y) if y.iter().all(|v| v.is_finite()) => {
                let blow_up = state_norm(&y) > opts.blow_up_radius;
                inputs.push(u);
                states.push(y);
                if blow_up {
                    diverged = true;
                    break;
                }
            }
            _ => {
                diverged = true;
                break;
            }
        }
    }
    let full_length = states.len() == steps + 1;
    let tail = opts.tail_window.min(states.len());
    let converged = !diverged
        && full_length
        && states[states.len() - tail..]
            .iter()
            .all(|x| state_norm(x) < opts.convergence_tol);
    // A truncated rollout may have recorded a stage cost for a step that was
    // never taken; trim to the inputs that were actually applied.
    stage_costs.truncate(inputs.len());
    let cost = stage_costs.iter().sum();
    Ok(ClosedLoopResult {
        states,
        inputs,
        stage_costs,
        cost,
        converged,
        diverged,
    })
}

/// The nominal closed loop: the exact linear recursion
/// `ξ_{k+1} = (A + BK)·ξ_k` in the lifted space.
pub fn simulate_model_closed_loop(
    model: &KoopmanModel,
    gain: &FeedbackGain,
    xi0: &DVector<f64>,
    steps: usize,
) -> Vec<DVector<f64>> {
    let closed = model.a_eff() + model.b_eff() * &gain.k;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(xi0.clone());
    for _ in 0..steps {
        let next = &closed * out.last().unwrap();
        out.push(next);
    }
    out
}

/// Decoded lifted state, convenience for comparing against true rollouts.
pub fn decode_lifted(model: &KoopmanModel, xi: &DVector<f64>) -> Vec<f64> {
    model.decode(&LiftedState {
        values: xi.clone(),
        split: model.n,
    })
}

/// Two swept axes of initial conditions; the remaining coordinates are taken
/// from `fixed`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasinAxis {
    pub dim: usize,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl BasinAxis {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![0.5 * (self.min + self.max)];
        }
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.min + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinGrid {
    pub axis1: BasinAxis,
    pub axis2: BasinAxis,
    pub fixed: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BasinResult {
    pub axis1_values: Vec<f64>,
    pub axis2_values: Vec<f64>,
    /// `converged[i][j]` for axis1 value i, axis2 value j.
    pub converged: Vec<Vec<bool>>,
    pub converged_count: usize,
}

/// Tests convergence of the true closed loop from every grid cell; a cell is
/// true iff the rollout converges (diverged cells are simply false).
#[allow(clippy::too_many_arguments)]
pub fn estimate_basin(
    system: &DynamicalSystem,
    model: &KoopmanModel,
    gain: &FeedbackGain,
    grid: &BasinGrid,
    horizon: usize,
    tol: f64,
    cfg: &IntegrationConfig,
    opts: &SimulationOptions,
) -> Result<BasinResult> {
    if grid.fixed.len() != system.n {
        return Err(Error::DimensionMismatch {
            context: "basin grid fixed coordinates",
            expected: system.n,
            found: grid.fixed.len(),
        });
    }
    if grid.axis1.dim >= system.n || grid.axis2.dim >= system.n {
        return Err(Error::InvalidArgument(
            "basin grid axis exceeds the state dimension".to_string(),
        ));
    }
    let axis1_values = grid.axis1.values();
    let axis2_values = grid.axis2.values();
    let cell_opts = SimulationOptions {
        convergence_tol: tol,
        ..*opts
    };
    let mut converged = vec![vec![false; axis2_values.len()]; axis1_values.len()];
    let mut count = 0;
    for (i, v1) in axis1_values.iter().enumerate() {
        for (j, v2) in axis2_values.iter().enumerate() {
            let mut x0 = grid.fixed.clone();
            x0[grid.axis1.dim] = *v1;
            x0[grid.axis2.dim] = *v2;
            let run = simulate_true_closed_loop(
                system, model, gain, &x0, horizon, cfg, None, &cell_opts,
            )?;
            converged[i][j] = run.converged;
            if run.converged {
                count += 1;
            }
        }
    }
    Ok(BasinResult {
        axis1_values,
        axis2_values,
        converged,
        converged_count: count,
    })
}
