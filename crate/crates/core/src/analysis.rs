//! Model-quality analysis: the pointwise modeling error
//! `r(x,u) = g(F(x,u)) − (A·g(x) + B·u)`, dense error fields, Monte-Carlo
//! L2-norm estimates, open-loop state prediction, the exact closed-loop
//! error-accumulation decomposition, the triangle-inequality error bound,
//! and observable-rescaling studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::FeedbackGain;
use crate::dynamics::{discrete_step, DynamicalSystem, IntegrationConfig};
use crate::error::{Error, Result};
use crate::observables::{Lifting, LiftedState};
use crate::training::{spectral_norm, KoopmanModel};
use crate::util::l2_norm;

/// Product of box-uniform distributions on states and inputs, with a sample
/// budget and seed. The supports are compact by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingMeasure {
    pub x_box: Vec<(f64, f64)>,
    pub u_box: Vec<(f64, f64)>,
    pub samples: usize,
    pub seed: u64,
}

impl SamplingMeasure {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidArgument(
                "measure needs at least one sample".to_string(),
            ));
        }
        for (lo, hi) in self.x_box.iter().chain(self.u_box.iter()) {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::InvalidArgument(format!(
                    "measure boxes need finite lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Lebesgue volume of the product box.
    pub fn volume(&self) -> f64 {
        self.x_box
            .iter()
            .chain(self.u_box.iter())
            .map(|(lo, hi)| hi - lo)
            .product()
    }

    /// Deterministic sample list; each sample draws the state coordinates
    /// first, then the input coordinates.
    pub fn draw(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.samples)
            .map(|_| {
                let x = self
                    .x_box
                    .iter()
                    .map(|(lo, hi)| rng.random_range(*lo..*hi))
                    .collect();
                let u = self
                    .u_box
                    .iter()
                    .map(|(lo, hi)| rng.random_range(*lo..*hi))
                    .collect();
                (x, u)
            })
            .collect()
    }
}

/// Pointwise modeling error `r(x,u) = [F(x,u); g̃(F(x,u))] − (A·g(x) + B·u)`,
/// evaluated with the TRUE successor from `discrete_step`.
pub fn modeling_error(
    model: &KoopmanModel,
    system: &DynamicalSystem,
    x: &[f64],
    u: &[f64],
    cfg: &IntegrationConfig,
) -> Result<DVector<f64>> {
    let y = discrete_step(system, x, u, cfg)?;
    modeling_error_given_successor(model, x, u, &y)
}

/// Same residual when the true successor is already known (used by rollout
/// post-processing so no state is integrated twice).
pub fn modeling_error_given_successor(
    model: &KoopmanModel,
    x: &[f64],
    u: &[f64],
    y: &[f64],
) -> Result<DVector<f64>> {
    let gx = model.lift(x)?;
    let gy = model.lift(y)?;
    let u = DVector::from_row_slice(u);
    let pred = model.a_eff() * &gx.values + model.b_eff() * &u;
    Ok(&gy.values - &pred)
}

/// Which coordinate a field axis sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum AxisTarget {
    State(usize),
    Input(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldAxis {
    pub target: AxisTarget,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl FieldAxis {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![0.5 * (self.min + self.max)];
        }
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.min + step * i as f64).collect()
    }
}

/// Two swept axes plus fixed values for the remaining coordinates.
/// `first_block_only` restricts the norm to the first n residual components
/// (the state-prediction error).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub axis1: FieldAxis,
    pub axis2: FieldAxis,
    pub x_fixed: Vec<f64>,
    pub u_fixed: Vec<f64>,
    #[serde(default)]
    pub first_block_only: bool,
}

/// `‖r(x,u)‖₂` over a grid; non-finite cells are counted, not fatal.
#[derive(Debug, Clone)]
pub struct ErrorField {
    pub axis1_values: Vec<f64>,
    pub axis2_values: Vec<f64>,
    /// `values[i][j]` for axis1 value i, axis2 value j.
    pub values: Vec<Vec<f64>>,
    pub non_finite_cells: usize,
}

impl ErrorField {
    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .cloned()
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_difference(&self, other: &ErrorField) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn error_field(
    model: &KoopmanModel,
    system: &DynamicalSystem,
    grid: &FieldGrid,
    cfg: &IntegrationConfig,
) -> Result<ErrorField> {
    if grid.x_fixed.len() != system.n || grid.u_fixed.len() != system.p {
        return Err(Error::DimensionMismatch {
            context: "field grid fixed coordinates",
            expected: system.n + system.p,
            found: grid.x_fixed.len() + grid.u_fixed.len(),
        });
    }
    let set = |x: &mut Vec<f64>, u: &mut Vec<f64>, axis: &FieldAxis, v: f64| match axis.target {
        AxisTarget::State(i) => x[i] = v,
        AxisTarget::Input(i) => u[i] = v,
    };
    let axis1_values = grid.axis1.values();
    let axis2_values = grid.axis2.values();
    let mut values = vec![vec![0.0; axis2_values.len()]; axis1_values.len()];
    let mut non_finite_cells = 0;
    for (i, v1) in axis1_values.iter().enumerate() {
        for (j, v2) in axis2_values.iter().enumerate() {
            let mut x = grid.x_fixed.clone();
            let mut u = grid.u_fixed.clone();
            set(&mut x, &mut u, &grid.axis1, *v1);
            set(&mut x, &mut u, &grid.axis2, *v2);
            let cell = match modeling_error(model, system, &x, &u, cfg) {
                Ok(r) => {
                    let norm = if grid.first_block_only {
                        r.rows(0, model.n).norm()
                    } else {
                        r.norm()
                    };
                    if norm.is_finite() {
                        norm
                    } else {
                        non_finite_cells += 1;
                        f64::NAN
                    }
                }
                Err(_) => {
                    non_finite_cells += 1;
                    f64::NAN
                }
            };
            values[i][j] = cell;
        }
    }
    Ok(ErrorField {
        axis1_values,
        axis2_values,
        values,
        non_finite_cells,
    })
}

/// Monte-Carlo estimate of `∫‖r‖² dμ`: the μ-weighted mean of `‖r‖²` with its
/// standard error, plus the Lebesgue-normalized value (volume × mean)
/// matching the unnormalized integral.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RNormEstimate {
    pub mean_sq: f64,
    pub std_error: f64,
    pub lebesgue: f64,
    pub lebesgue_std_error: f64,
    pub volume: f64,
    pub samples: usize,
}

pub fn estimate_r_norm(
    model: &KoopmanModel,
    system: &DynamicalSystem,
    measure: &SamplingMeasure,
    cfg: &IntegrationConfig,
) -> Result<RNormEstimate> {
    measure.validate()?;
    if measure.samples < 2 {
        return Err(Error::InvalidArgument(
            "standard errors need at least two samples".to_string(),
        ));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let samples = measure.draw();
    for (x, u) in &samples {
        let s = modeling_error(model, system, x, u, cfg)?.norm_squared();
        sum += s;
        sum_sq += s * s;
    }
    let m = measure.samples as f64;
    let mean_sq = sum / m;
    let var = ((sum_sq - m * mean_sq * mean_sq) / (m - 1.0)).max(0.0);
    let std_error = (var / m).sqrt();
    let volume = measure.volume();
    Ok(RNormEstimate {
        mean_sq,
        std_error,
        lebesgue: volume * mean_sq,
        lebesgue_std_error: volume * std_error,
        volume,
        samples: measure.samples,
    })
}

/// Midpoint-rule quadrature of `∫‖r‖² dx du` over the product box, offered
/// for low-dimensional problems (n + p ≤ 3) as an independent route to the
/// Monte-Carlo estimate. Returns (box-mean of ‖r‖², Lebesgue integral).
pub fn quadrature_r_norm(
    model: &KoopmanModel,
    system: &DynamicalSystem,
    x_box: &[(f64, f64)],
    u_box: &[(f64, f64)],
    points_per_dim: usize,
    cfg: &IntegrationConfig,
) -> Result<(f64, f64)> {
    let dims = x_box.len() + u_box.len();
    if dims > 3 {
        return Err(Error::Unsupported(format!(
            "grid quadrature is offered for n+p <= 3, got {dims}"
        )));
    }
    if points_per_dim == 0 {
        return Err(Error::InvalidArgument(
            "quadrature needs at least one point per dimension".to_string(),
        ));
    }
    let boxes: Vec<(f64, f64)> = x_box.iter().chain(u_box.iter()).copied().collect();
    let volume: f64 = boxes.iter().map(|(lo, hi)| hi - lo).product();
    let midpoints = |lo: f64, hi: f64| -> Vec<f64> {
        let h = (hi - lo) / points_per_dim as f64;
        (0..points_per_dim)
            .map(|i| lo + h * (i as f64 + 0.5))
            .collect()
    };
    let grids: Vec<Vec<f64>> = boxes.iter().map(|(lo, hi)| midpoints(*lo, *hi)).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut index = vec![0usize; dims];
    loop {
        let point: Vec<f64> = index.iter().zip(&grids).map(|(i, g)| g[*i]).collect();
        let (x, u) = point.split_at(x_box.len());
        sum += modeling_error(model, system, x, u, cfg)?.norm_squared();
        count += 1;
        let mut carry = dims;
        for d in (0..dims).rev() {
            index[d] += 1;
            if index[d] < points_per_dim {
                carry = d;
                break;
            }
            index[d] = 0;
        }
        if carry == dims {
            break;
        }
    }
    let mean = sum / count as f64;
    Ok((mean, mean * volume))
}

/// How predicted states are propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Re-lift the decoded state each step (the default):
    /// `x̂_{k+1} = W{A·[x̂_k; g̃(x̂_k)] + B·u_k}`.
    Relift,
    /// Propagate the lifted vector linearly from `g(x̂_0)` and decode.
    Linear,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Predicted states; `states[0]` is the given initial state.
    pub states: Vec<Vec<f64>>,
    pub diverged: bool,
}

/// Open-loop state prediction for a given input sequence.
pub fn predict_states(
    model: &KoopmanModel,
    x0: &[f64],
    inputs: &[Vec<f64>],
    mode: PredictionMode,
    blow_up_radius: f64,
) -> Result<Prediction> {
    if x0.len() != model.n {
        return Err(Error::DimensionMismatch {
            context: "prediction initial state",
            expected: model.n,
            found: x0.len(),
        });
    }
    let a = model.a_eff();
    let b = model.b_eff();
    let mut states = vec![x0.to_vec()];
    let mut diverged = false;
    match mode {
        PredictionMode::Relift => {
            for u in inputs {
                let x = states.last().unwrap();
                let lifted = model.lift(x)?;
                let next = &a * &lifted.values + &b * DVector::from_row_slice(u);
                let decoded = model.decode(&LiftedState {
                    values: next,
                    split: model.n,
                });
                if !decoded.iter().all(|v| v.is_finite()) || l2_norm(&decoded) > blow_up_radius {
                    diverged = true;
                    break;
                }
                states.push(decoded);
            }
        }
        PredictionMode::Linear => {
            let mut xi = model.lift(x0)?.values;
            for u in inputs {
                xi = &a * &xi + &b * DVector::from_row_slice(u);
                let decoded = model.decode(&LiftedState {
                    values: xi.clone(),
                    split: model.n,
                });
                if !decoded.iter().all(|v| v.is_finite()) || l2_norm(&decoded) > blow_up_radius {
                    diverged = true;
                    break;
                }
                states.push(decoded);
            }
        }
    }
    Ok(Prediction { states, diverged })
}

/// RMSE between two state sequences over their common prefix.
pub fn rmse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let len = a.len().min(b.len());
    if len == 0 {
        return f64::NAN;
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for k in 0..len {
        for (va, vb) in a[k].iter().zip(&b[k]) {
            sq += (va - vb) * (va - vb);
            count += 1;
        }
    }
    (sq / count as f64).sqrt()
}

/// One step of the closed-loop error-accumulation identity
/// `g(x_{k+1}) = (A+BK)^{k+1}·ξ0 + Σ_{i=0}^{k} (A+BK)^i·r(x_{k−i}, u_{k−i})`.
#[derive(Debug, Clone)]
pub struct StepDecomposition {
    /// `(A+BK)^{k+1}·ξ0`: the nominal closed-loop term.
    pub ideal: DVector<f64>,
    /// The accumulated-residual sum.
    pub accumulated: DVector<f64>,
    /// The lifted true state `g(x_{k+1})`.
    pub lifted_true: DVector<f64>,
    /// `‖lifted_true − ideal − accumulated‖`.
    pub defect: f64,
}

#[derive(Debug, Clone)]
pub struct AccumulationReport {
    pub steps: Vec<StepDecomposition>,
    pub max_defect: f64,
}

/// Simulates the true closed loop under `u_k = K·g(x_k)` and decomposes each
/// lifted state into the nominal term plus the accumulated residuals. The
/// identity is exact; the reported defect is pure float accumulation.
pub fn error_accumulation(
    model: &KoopmanModel,
    system: &DynamicalSystem,
    gain: &FeedbackGain,
    x0: &[f64],
    steps: usize,
    cfg: &IntegrationConfig,
    blow_up_radius: f64,
) -> Result<AccumulationReport> {
    if gain.k.ncols() != model.lifted_dim() {
        return Err(Error::DimensionMismatch {
            context: "feedback gain columns",
            expected: model.lifted_dim(),
            found: gain.k.ncols(),
        });
    }
    let a = model.a_eff();
    let b = model.b_eff();
    let closed = &a + &b * &gain.k;

    let mut x = x0.to_vec();
    let mut xi = model.lift(&x)?.values;
    let mut ideal = xi.clone();
    let mut accumulated: DVector<f64> = DVector::zeros(model.lifted_dim());
    let mut report = Vec::with_capacity(steps);
    let mut max_defect = 0.0f64;

    for _ in 0..steps {
        let u_vec = &gain.k * &xi;
        let u: Vec<f64> = u_vec.iter().copied().collect();
        let y = discrete_step(system, &x, &u, cfg)?;
        if !y.iter().all(|v| v.is_finite()) || l2_norm(&y) > blow_up_radius {
            break;
        }
        let xi_next = model.lift(&y)?.values;
        // r_k from the rollout itself; no state is integrated twice.
        let residual = &xi_next - (&a * &xi + &b * &u_vec);

        ideal = &closed * &ideal;
        accumulated = &closed * &accumulated + &residual;
        let defect = (&xi_next - &ideal - &accumulated).norm();
        max_defect = max_defect.max(defect);
        report.push(StepDecomposition {
            ideal: ideal.clone(),
            accumulated: accumulated.clone(),
            lifted_true: xi_next.clone(),
            defect,
        });

        x = y;
        xi = xi_next;
    }
    Ok(AccumulationReport {
        steps: report,
        max_defect,
    })
}

/// Monte-Carlo report for the triangle-inequality bound
/// `‖r‖² ≤ ‖g∘F‖² + ‖[A B]‖·(‖[A B]‖·‖h‖² + 2·⟨‖g∘F‖, ‖h‖⟩)`,
/// with every term estimated on the SAME sample set. All `*_mean` fields are
/// μ-weighted (normalized) values; multiply by `volume` for the
/// Lebesgue-normalized integrals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    /// `E[‖r‖²]` and its standard error.
    pub lhs_mean: f64,
    pub lhs_se: f64,
    /// `E[‖g∘F‖²]`.
    pub g_of_f_sq_mean: f64,
    pub g_of_f_sq_se: f64,
    /// Spectral norm of `[A B]`.
    pub ab_norm: f64,
    /// `E[‖h‖²]` with `h = [g(x); u]`.
    pub h_sq_mean: f64,
    pub h_sq_se: f64,
    /// `E[‖g∘F‖·‖h‖]`.
    pub inner_mean: f64,
    pub inner_se: f64,
    /// `g_of_f_sq + ab·(ab·h_sq + 2·inner)`, by construction.
    pub rhs_total: f64,
    /// Combined standard error of the right-hand side.
    pub rhs_se: f64,
    /// Whether `‖r‖ ≤ ‖g∘F‖ + ‖[A B]‖·‖h‖` held at every sample.
    pub pointwise_triangle_holds: bool,
    pub samples: usize,
    pub volume: f64,
}

pub fn error_bound(
    model: &KoopmanModel,
    system: &DynamicalSystem,
    measure: &SamplingMeasure,
    cfg: &IntegrationConfig,
) -> Result<BoundReport> {
    measure.validate()?;
    if measure.samples < 2 {
        return Err(Error::InvalidArgument(
            "standard errors need at least two samples".to_string(),
        ));
    }
    let a = model.a_eff();
    let b = model.b_eff();
    let mut ab = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    ab.columns_mut(0, a.ncols()).copy_from(&a);
    ab.columns_mut(a.ncols(), b.ncols()).copy_from(&b);
    let ab_norm = spectral_norm(&ab);

    struct Acc {
        sum: f64,
        sum_sq: f64,
    }
    impl Acc {
        fn new() -> Self {
            Acc {
                sum: 0.0,
                sum_sq: 0.0,
            }
        }
        fn push(&mut self, v: f64) {
            self.sum += v;
            self.sum_sq += v * v;
        }
        fn mean_se(&self, m: f64) -> (f64, f64) {
            let mean = self.sum / m;
            let var = ((self.sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
            (mean, (var / m).sqrt())
        }
    }

    let mut lhs = Acc::new();
    let mut gf_sq = Acc::new();
    let mut h_sq = Acc::new();
    let mut inner = Acc::new();
    let mut pointwise_triangle_holds = true;

    for (x, u) in &measure.draw() {
        let y = discrete_step(system, x, u, cfg)?;
        let gx = model.lift(x)?.values;
        let gy = model.lift(&y)?.values;
        let uv = DVector::from_row_slice(u);
        let pred = &a * &gx + &b * &uv;
        let r_norm = (&gy - &pred).norm();
        let gf_norm = gy.norm();
        let h_norm = (gx.norm_squared() + uv.norm_squared()).sqrt();

        lhs.push(r_norm * r_norm);
        gf_sq.push(gf_norm * gf_norm);
        h_sq.push(h_norm * h_norm);
        inner.push(gf_norm * h_norm);
        let bound = gf_norm + ab_norm * h_norm;
        if r_norm > bound + 1e-12 * (1.0 + bound) {
            pointwise_triangle_holds = false;
        }
    }

    let m = measure.samples as f64;
    let (lhs_mean, lhs_se) = lhs.mean_se(m);
    let (gf_mean, gf_se) = gf_sq.mean_se(m);
    let (h_mean, h_se) = h_sq.mean_se(m);
    let (in_mean, in_se) = inner.mean_se(m);
    let rhs_total = gf_mean + ab_norm * (ab_norm * h_mean + 2.0 * in_mean);
    let rhs_se =
        (gf_se * gf_se + (ab_norm * ab_norm * h_se).powi(2) + (2.0 * ab_norm * in_se).powi(2))
            .sqrt();
    Ok(BoundReport {
        lhs_mean,
        lhs_se,
        g_of_f_sq_mean: gf_mean,
        g_of_f_sq_se: gf_se,
        ab_norm,
        h_sq_mean: h_mean,
        h_sq_se: h_se,
        inner_mean: in_mean,
        inner_se: in_se,
        rhs_total,
        rhs_se,
        pointwise_triangle_holds,
        samples: measure.samples,
        volume: measure.volume(),
    })
}

/// Rescales the observables of a model by `alpha`: the lifted vector becomes
/// `α·g(x)`, B becomes `α·B`, A is unchanged, and the decoder divides by `α`,
/// so the decoded difference equation is identical.
pub fn scale_model(model: &KoopmanModel, alpha: f64) -> Result<KoopmanModel> {
    if alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scale must be finite and nonzero, got {alpha}"
        )));
    }
    let old = model.observables.scale();
    let rel = alpha / old;
    let mut out = model.clone();
    out.observables = model.observables.with_scale(alpha)?;
    out.b = &model.b * rel;
    if let Some(db) = &model.provenance.delta_b {
        out.provenance.delta_b = Some(db * rel);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{lqr_gain, LQRWeights};
    use crate::dynamics::builtin;
    use crate::edmd;
    use crate::observables::{fixed_dictionary, ObservableFn};
    use crate::sampling::{collect_trajectories, BoxSampler, InputSignal};
    use crate::training::ModelProvenance;
    use approx::assert_abs_diff_eq;

    fn exact_linear() -> (DynamicalSystem, KoopmanModel) {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.05, -0.05, 0.85]);
        let b = DMatrix::from_row_slice(2, 1, &[0.1, 0.2]);
        let sys = {
            let (a, b) = (a.clone(), b.clone());
            DynamicalSystem::discrete("lin", 2, 1, vec![(-2.0, 2.0); 2], move |x, u| {
                vec![
                    a[(0, 0)] * x[0] + a[(0, 1)] * x[1] + b[(0, 0)] * u[0],
                    a[(1, 0)] * x[0] + a[(1, 1)] * x[1] + b[(1, 0)] * u[0],
                ]
            })
        };
        let model = KoopmanModel::new(
            a,
            b,
            ObservableFn::identity(2),
            1,
            ModelProvenance::default(),
        )
        .unwrap();
        (sys, model)
    }

    fn motivating_fit(name: &str, m: usize) -> (DynamicalSystem, KoopmanModel) {
        let sys = builtin("motivating").unwrap();
        let cfg = IntegrationConfig::default();
        let sampler = BoxSampler::new(vec![(-4.0, 4.0)], 77).unwrap();
        let signal = InputSignal::uniform(-2.0, 2.0, 78, cfg.dt).unwrap();
        let ds = collect_trajectories(&sys, &sampler, &signal, 1, &cfg, m).unwrap();
        let dict = fixed_dictionary(name).unwrap();
        let fit = edmd::fit(&ds, &dict).unwrap();
        let model = KoopmanModel::from_edmd(&fit, ObservableFn::Dictionary(dict), 1).unwrap();
        (sys, model)
    }

    #[test]
    fn exact_model_has_zero_residual() {
        let (sys, model) = exact_linear();
        let cfg = IntegrationConfig::default();
        for (x, u) in [([0.5, -0.3], [0.2]), ([1.5, 1.0], [-0.7]), ([0.0, 0.0], [0.0])] {
            let r = modeling_error(&model, &sys, &x, &u, &cfg).unwrap();
            assert!(r.norm() < 1e-10);
        }
    }

    #[test]
    fn model1_first_component_zero_at_origin() {
        let (sys, model) = motivating_fit("model1", 2000);
        let cfg = IntegrationConfig::default();
        let r = modeling_error(&model, &sys, &[0.0], &[0.0], &cfg).unwrap();
        assert_abs_diff_eq!(r[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn model1_residual_matches_closed_form() {
        let (sys, model) = motivating_fit("model1", 4000);
        let cfg = IntegrationConfig::default();
        let a1 = model.a[(1, 0)];
        let a2 = model.a[(1, 1)];
        let a3 = model.b[(1, 0)];
        for (x, u) in [(-2.0, 0.5), (0.7, -1.2), (3.0, 1.9), (-3.5, -0.4)] {
            let r = modeling_error(&model, &sys, &[x], &[u], &cfg).unwrap();
            let f = x * x * (-x).exp() + u;
            let expected = f * f * (-f).exp() - a1 * x - a2 * (x * x * (-x).exp()) - a3 * u;
            assert_abs_diff_eq!(r[1], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn error_field_exact_model_is_zero() {
        let (sys, model) = exact_linear();
        let cfg = IntegrationConfig::default();
        let grid = FieldGrid {
            axis1: FieldAxis {
                target: AxisTarget::State(0),
                min: -1.0,
                max: 1.0,
                count: 7,
            },
            axis2: FieldAxis {
                target: AxisTarget::Input(0),
                min: -1.0,
                max: 1.0,
                count: 5,
            },
            x_fixed: vec![0.0, 0.3],
            u_fixed: vec![0.0],
            first_block_only: false,
        };
        let field = error_field(&model, &sys, &grid, &cfg).unwrap();
        assert_eq!(field.non_finite_cells, 0);
        assert!(field.max_value() < 1e-10);
    }

    #[test]
    fn model_fields_differ_between_dictionaries() {
        let (sys, m1) = motivating_fit("model1", 3000);
        let (_, m2) = motivating_fit("model2", 3000);
        let cfg = IntegrationConfig::default();
        let grid = FieldGrid {
            axis1: FieldAxis {
                target: AxisTarget::State(0),
                min: -4.0,
                max: 4.0,
                count: 15,
            },
            axis2: FieldAxis {
                target: AxisTarget::Input(0),
                min: -2.0,
                max: 2.0,
                count: 15,
            },
            x_fixed: vec![0.0],
            u_fixed: vec![0.0],
            first_block_only: false,
        };
        let f1 = error_field(&m1, &sys, &grid, &cfg).unwrap();
        // Model 2's field has one more residual component; compare norms on
        // the shared grid only qualitatively.
        let f2 = error_field(&m2, &sys, &grid, &cfg).unwrap();
        assert!(f1.max_abs_difference(&f2) > 0.0);
    }

    #[test]
    fn one_by_one_grid_reduces_to_modeling_error() {
        let (sys, model) = motivating_fit("model1", 500);
        let cfg = IntegrationConfig::default();
        let grid = FieldGrid {
            axis1: FieldAxis {
                target: AxisTarget::State(0),
                min: 1.3,
                max: 1.3,
                count: 1,
            },
            axis2: FieldAxis {
                target: AxisTarget::Input(0),
                min: -0.4,
                max: -0.4,
                count: 1,
            },
            x_fixed: vec![0.0],
            u_fixed: vec![0.0],
            first_block_only: false,
        };
        let field = error_field(&model, &sys, &grid, &cfg).unwrap();
        let r = modeling_error(&model, &sys, &[1.3], &[-0.4], &cfg).unwrap();
        assert_abs_diff_eq!(field.values[0][0], r.norm(), epsilon = 1e-14);
    }

    #[test]
    fn estimate_r_norm_exact_model_is_zero() {
        let (sys, model) = exact_linear();
        let cfg = IntegrationConfig::default();
        let measure = SamplingMeasure {
            x_box: vec![(-1.0, 1.0); 2],
            u_box: vec![(-1.0, 1.0)],
            samples: 128,
            seed: 5,
        };
        let est = estimate_r_norm(&model, &sys, &measure, &cfg).unwrap();
        assert!(est.mean_sq < 1e-20);
        assert!(est.std_error < 1e-20);
    }

    #[test]
    fn std_error_shrinks_with_sqrt_m() {
        let (sys, model) = motivating_fit("model1", 1000);
        let cfg = IntegrationConfig::default();
        let base = SamplingMeasure {
            x_box: vec![(-4.0, 4.0)],
            u_box: vec![(-2.0, 2.0)],
            samples: 4000,
            seed: 9,
        };
        let double = SamplingMeasure {
            samples: 8000,
            ..base.clone()
        };
        // Average SE ratio over repeated seeds concentrates near sqrt(2).
        let mut ratio = 0.0;
        let reps = 6;
        for s in 0..reps {
            let e1 = estimate_r_norm(
                &model,
                &sys,
                &SamplingMeasure {
                    seed: 100 + s,
                    ..base.clone()
                },
                &cfg,
            )
            .unwrap();
            let e2 = estimate_r_norm(
                &model,
                &sys,
                &SamplingMeasure {
                    seed: 200 + s,
                    ..double.clone()
                },
                &cfg,
            )
            .unwrap();
            ratio += e1.std_error / e2.std_error;
        }
        ratio /= reps as f64;
        assert!(
            (ratio - std::f64::consts::SQRT_2).abs() < 0.35,
            "ratio {ratio}"
        );
    }

    #[test]
    fn predict_exact_model_matches_truth() {
        let (sys, model) = exact_linear();
        let cfg = IntegrationConfig::default();
        let inputs: Vec<Vec<f64>> = (0..50).map(|k| vec![(0.3 * k as f64).cos()]).collect();
        let pred = predict_states(&model, &[0.8, -0.6], &inputs, PredictionMode::Relift, 1e6)
            .unwrap();
        assert!(!pred.diverged);
        let mut x = vec![0.8, -0.6];
        for (pk, u) in pred.states.iter().zip(inputs.iter().map(Some).chain([None])) {
            for i in 0..2 {
                assert_abs_diff_eq!(pk[i], x[i], epsilon = 1e-9);
            }
            if let Some(u) = u {
                x = discrete_step(&sys, &x, u, &cfg).unwrap();
            }
        }
    }

    #[test]
    fn predict_edge_cases() {
        let (_, model) = exact_linear();
        let empty: Vec<Vec<f64>> = Vec::new();
        let pred = predict_states(&model, &[0.5, 0.5], &empty, PredictionMode::Relift, 1e6)
            .unwrap();
        assert_eq!(pred.states, vec![vec![0.5, 0.5]]);

        // One step equals decode(A·lift(x0) + B·u0).
        let one = predict_states(&model, &[0.5, 0.5], &[vec![0.3]], PredictionMode::Relift, 1e6)
            .unwrap();
        let lifted = model.lift(&[0.5, 0.5]).unwrap();
        let next = model.a_eff() * lifted.values + model.b_eff() * DVector::from_vec(vec![0.3]);
        for i in 0..2 {
            assert_abs_diff_eq!(one.states[1][i], next[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn accumulation_identity_exact_model() {
        let (sys, model) = exact_linear();
        let cfg = IntegrationConfig::default();
        let weights =
            LQRWeights::new(DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let gain = lqr_gain(&model.a_eff(), &model.b_eff(), &weights).unwrap();
        let report =
            error_accumulation(&model, &sys, &gain, &[1.0, -0.5], 100, &cfg, 1e8).unwrap();
        assert_eq!(report.steps.len(), 100);
        assert!(report.max_defect < 1e-9, "defect {}", report.max_defect);
        // Exact model: the accumulated term stays zero and the ideal term is
        // the lifted true trajectory.
        for step in &report.steps {
            assert!(step.accumulated.norm() < 1e-9);
            assert!((&step.lifted_true - &step.ideal).norm() < 1e-9);
        }
    }

    #[test]
    fn accumulation_base_case() {
        let (sys, model) = motivating_fit("model1", 1500);
        let cfg = IntegrationConfig::default();
        let weights = LQRWeights::from_state_weights(&[1.0], 2, &[1.0]).unwrap();
        let gain = lqr_gain(&model.a_eff(), &model.b_eff(), &weights).unwrap();
        let x0 = [0.8];
        let report = error_accumulation(&model, &sys, &gain, &x0, 1, &cfg, 1e8).unwrap();
        let xi0 = model.lift(&x0).unwrap().values;
        let closed = model.a_eff() + model.b_eff() * &gain.k;
        let u0 = &gain.k * &xi0;
        let y = discrete_step(&sys, &x0, u0.as_slice(), &cfg).unwrap();
        let r0 = modeling_error_given_successor(&model, &x0, u0.as_slice(), &y).unwrap();
        let expected = &closed * &xi0 + &r0;
        assert!((&report.steps[0].lifted_true - &expected).norm() < 1e-12);
    }

    #[test]
    fn bound_zero_model_degenerates_to_gf_norm() {
        let sys = builtin("motivating").unwrap();
        let dict = fixed_dictionary("model1").unwrap();
        let model = KoopmanModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            ObservableFn::Dictionary(dict),
            1,
            ModelProvenance::default(),
        )
        .unwrap();
        let cfg = IntegrationConfig::default();
        let measure = SamplingMeasure {
            x_box: vec![(-4.0, 4.0)],
            u_box: vec![(-2.0, 2.0)],
            samples: 2000,
            seed: 3,
        };
        let report = error_bound(&model, &sys, &measure, &cfg).unwrap();
        assert_eq!(report.ab_norm, 0.0);
        assert_abs_diff_eq!(report.lhs_mean, report.g_of_f_sq_mean, epsilon = 1e-12);
        assert_abs_diff_eq!(report.rhs_total, report.g_of_f_sq_mean, epsilon = 1e-12);
        assert!(report.pointwise_triangle_holds);
    }

    #[test]
    fn bound_report_invariant_by_construction() {
        let (sys, model) = motivating_fit("model2", 1000);
        let cfg = IntegrationConfig::default();
        let measure = SamplingMeasure {
            x_box: vec![(-4.0, 4.0)],
            u_box: vec![(-2.0, 2.0)],
            samples: 500,
            seed: 4,
        };
        let report = error_bound(&model, &sys, &measure, &cfg).unwrap();
        let recomputed = report.g_of_f_sq_mean
            + report.ab_norm * (report.ab_norm * report.h_sq_mean + 2.0 * report.inner_mean);
        assert_abs_diff_eq!(report.rhs_total, recomputed, epsilon = 1e-12);
        assert!(report.lhs_mean <= report.rhs_total + 3.0 * report.rhs_se);
        assert!(report.pointwise_triangle_holds);
    }

    #[test]
    fn scaled_model_predictions_are_invariant() {
        let (_, model) = motivating_fit("model2", 2000);
        let scaled = scale_model(&model, 10.0).unwrap();
        let inputs: Vec<Vec<f64>> = (0..30).map(|k| vec![(0.1 * k as f64).sin() * 0.5]).collect();
        let p1 = predict_states(&model, &[-1.0], &inputs, PredictionMode::Relift, 1e9).unwrap();
        let p2 = predict_states(&scaled, &[-1.0], &inputs, PredictionMode::Relift, 1e9).unwrap();
        assert_eq!(p1.states.len(), p2.states.len());
        for (a, b) in p1.states.iter().zip(&p2.states) {
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-10);
        }
        // α = 1 is the identity.
        let same = scale_model(&model, 1.0).unwrap();
        assert_eq!(same, model);
        assert!(scale_model(&model, 0.0).is_err());
    }

    #[test]
    fn refit_with_scaled_dictionary_changes_field() {
        let sys = builtin("motivating").unwrap();
        let cfg = IntegrationConfig::default();
        let sampler = BoxSampler::new(vec![(-4.0, 4.0)], 55).unwrap();
        let signal = InputSignal::uniform(-2.0, 2.0, 56, cfg.dt).unwrap();
        let ds = collect_trajectories(&sys, &sampler, &signal, 1, &cfg, 3000).unwrap();
        let grid = FieldGrid {
            axis1: FieldAxis {
                target: AxisTarget::State(0),
                min: -4.0,
                max: 4.0,
                count: 12,
            },
            axis2: FieldAxis {
                target: AxisTarget::Input(0),
                min: -2.0,
                max: 2.0,
                count: 12,
            },
            x_fixed: vec![0.0],
            u_fixed: vec![0.0],
            first_block_only: false,
        };
        let field_for = |alpha: f64| {
            let mut dict = fixed_dictionary("model2").unwrap();
            dict.scale = alpha;
            let fit = edmd::fit(&ds, &dict).unwrap();
            let model =
                KoopmanModel::from_edmd(&fit, ObservableFn::Dictionary(dict), 1).unwrap();
            error_field(&model, &sys, &grid, &cfg).unwrap()
        };
        let f1 = field_for(1.0);
        let f10 = field_for(10.0);
        assert!(f1.max_abs_difference(&f10) > 0.0);
    }

    /// Both directions of the first-block-residual/state-prediction link.
    #[test]
    fn first_block_residual_iff_exact_prediction() {
        let (sys, model) = exact_linear();
        let cfg = IntegrationConfig::default();
        // Exact model: zero first-block residual and exact prediction.
        let r = modeling_error(&model, &sys, &[0.4, 0.2], &[0.1], &cfg).unwrap();
        assert!(r.rows(0, 2).norm() < 1e-12);

        // Perturb the first row: the first-block residual turns nonzero and
        // the one-step prediction misses by exactly that residual.
        let mut broken = model.clone();
        broken.a[(0, 0)] += 0.05;
        let x = [0.4, 0.2];
        let u = [vec![0.1]];
        let rb = modeling_error(&broken, &sys, &x, &u[0], &cfg).unwrap();
        assert!(rb.rows(0, 2).norm() > 1e-3);
        let pred = predict_states(&broken, &x, &u, PredictionMode::Relift, 1e6).unwrap();
        let truth = discrete_step(&sys, &x, &u[0], &cfg).unwrap();
        let miss = (0..2)
            .map(|i| (pred.states[1][i] - truth[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert_abs_diff_eq!(miss, rb.rows(0, 2).norm(), epsilon = 1e-10);
    }
}
