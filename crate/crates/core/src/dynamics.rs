//! Benchmark controlled systems and the discrete-time map obtained by
//! integrating them over one sampling period.
//!
//! Continuous systems are advanced with the classical 4th-order Runge-Kutta
//! scheme; the input is zero-order-held across all substeps of a sampling
//! period, so `discrete_step` realizes the map `x_{k+1} = F(x_k, u_k)`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::util::{all_finite, l2_norm};

/// Whether a system is described by a vector field or by a discrete map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Continuous,
    Discrete,
}

type Evaluator = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// A controlled dynamical system: a named evaluator `(x, u) -> dx/dt`
/// (continuous kind) or `(x, u) -> x_next` (discrete kind), with state
/// dimension `n`, input dimension `p`, and an axis-aligned state domain box
/// used for sampling and analysis grids (never enforced during simulation).
#[derive(Clone)]
pub struct DynamicalSystem {
    pub name: String,
    pub n: usize,
    pub p: usize,
    pub kind: SystemKind,
    pub domain: Vec<(f64, f64)>,
    pub parameters: BTreeMap<String, f64>,
    evaluator: Evaluator,
}

impl fmt::Debug for DynamicalSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicalSystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("p", &self.p)
            .field("kind", &self.kind)
            .field("domain", &self.domain)
            .field("parameters", &self.parameters)
            .finish_non_exhaustive()
    }
}

impl DynamicalSystem {
    pub fn continuous<F>(name: &str, n: usize, p: usize, domain: Vec<(f64, f64)>, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            n,
            p,
            kind: SystemKind::Continuous,
            domain,
            parameters: BTreeMap::new(),
            evaluator: Arc::new(f),
        }
    }

    pub fn discrete<F>(name: &str, n: usize, p: usize, domain: Vec<(f64, f64)>, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            n,
            p,
            kind: SystemKind::Discrete,
            domain,
            parameters: BTreeMap::new(),
            evaluator: Arc::new(f),
        }
    }

    pub fn with_parameters(mut self, parameters: BTreeMap<String, f64>) -> Self {
        self.parameters = parameters;
        self
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "state vector",
                expected: self.n,
                found: x.len(),
            });
        }
        if u.len() != self.p {
            return Err(Error::DimensionMismatch {
                context: "input vector",
                expected: self.p,
                found: u.len(),
            });
        }
        Ok(())
    }

    /// Evaluates the vector field `f(x, u)` of a continuous-kind system.
    pub fn eval_vector_field(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if self.kind != SystemKind::Continuous {
            return Err(Error::Unsupported(format!(
                "system `{}` is a discrete map; it has no vector field",
                self.name
            )));
        }
        self.check_dims(x, u)?;
        Ok((self.evaluator)(x, u))
    }

    /// Evaluates the one-step map of a discrete-kind system.
    pub fn eval_map(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if self.kind != SystemKind::Discrete {
            return Err(Error::Unsupported(format!(
                "system `{}` is continuous; use discrete_step to advance it",
                self.name
            )));
        }
        self.check_dims(x, u)?;
        Ok((self.evaluator)(x, u))
    }
}

/// Sampling period and the number of internal RK4 substeps per period.
/// The internal step is `h = dt / substeps`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntegrationConfig {
    pub dt: f64,
    pub substeps: usize,
}

impl IntegrationConfig {
    pub fn new(dt: f64, substeps: usize) -> Result<Self> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sampling period must be positive, got {dt}"
            )));
        }
        if substeps == 0 {
            return Err(Error::InvalidArgument(
                "substeps must be at least 1".to_string(),
            ));
        }
        Ok(Self { dt, substeps })
    }

    pub fn step_size(&self) -> f64 {
        self.dt / self.substeps as f64
    }
}

impl Default for IntegrationConfig {
    /// dt = 0.1 with 10 substeps, i.e. an internal solver step of 0.01.
    fn default() -> Self {
        Self {
            dt: 0.1,
            substeps: 10,
        }
    }
}

/// One classical RK4 update of size `h` with the input held constant.
pub fn rk4_step(system: &DynamicalSystem, x: &[f64], u: &[f64], h: f64) -> Result<Vec<f64>> {
    if system.kind != SystemKind::Continuous {
        return Err(Error::Unsupported(
            "rk4_step requires a continuous-kind system".to_string(),
        ));
    }
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "RK4 step size must be positive, got {h}"
        )));
    }
    system.check_dims(x, u)?;
    let n = system.n;

    let stage = |name: &str, v: &[f64]| -> Result<Vec<f64>> {
        let k = (system.evaluator)(v, u);
        if !all_finite(&k) {
            return Err(Error::NonFinite {
                stage: format!("RK4 stage {name} of system `{}`", system.name),
            });
        }
        Ok(k)
    };

    let k1 = stage("k1", x)?;
    let mut tmp = vec![0.0; n];
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    let k2 = stage("k2", &tmp)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    let k3 = stage("k3", &tmp)?;
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    let k4 = stage("k4", &tmp)?;

    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if !all_finite(&out) {
        return Err(Error::NonFinite {
            stage: format!("RK4 update of system `{}`", system.name),
        });
    }
    Ok(out)
}

/// Advances the system by one sampling period: `substeps` RK4 steps of size
/// `dt / substeps` for continuous systems (input zero-order-held), or a single
/// map evaluation for discrete systems (which ignore integration settings).
pub fn discrete_step(
    system: &DynamicalSystem,
    x: &[f64],
    u: &[f64],
    cfg: &IntegrationConfig,
) -> Result<Vec<f64>> {
    match system.kind {
        SystemKind::Discrete => {
            let y = system.eval_map(x, u)?;
            if !all_finite(&y) {
                return Err(Error::NonFinite {
                    stage: format!("map evaluation of system `{}`", system.name),
                });
            }
            Ok(y)
        }
        SystemKind::Continuous => {
            let h = cfg.step_size();
            let mut state = x.to_vec();
            for _ in 0..cfg.substeps {
                state = rk4_step(system, &state, u, h)?;
            }
            Ok(state)
        }
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["motivating", "pendulum", "cartpole"];

/// Constructs a fully parameterized built-in benchmark system.
pub fn builtin(name: &str) -> Result<DynamicalSystem> {
    builtin_with_params(name, &BTreeMap::new())
}

/// Same as [`builtin`] but with named parameter overrides (cartpole only;
/// the other systems have no free parameters).
pub fn builtin_with_params(
    name: &str,
    overrides: &BTreeMap<String, f64>,
) -> Result<DynamicalSystem> {
    if matches!(name, "motivating" | "pendulum") {
        if let Some(key) = overrides.keys().next() {
            return Err(Error::InvalidArgument(format!(
                "system `{name}` has no parameter `{key}`"
            )));
        }
    }
    match name {
        "motivating" => Ok(DynamicalSystem::discrete(
            "motivating",
            1,
            1,
            vec![(-4.0, 4.0)],
            |x, u| vec![x[0] * x[0] * (-x[0]).exp() + u[0]],
        )),
        "pendulum" => Ok(DynamicalSystem::continuous(
            "pendulum",
            2,
            1,
            vec![(-3.0, 3.0), (-3.0, 3.0)],
            |x, u| vec![x[1], -x[0].sin() + u[0]],
        )),
        "cartpole" => {
            let mut params: BTreeMap<String, f64> = [
                ("m", 1.0),
                ("M", 5.0),
                ("L", 2.0),
                ("g", -10.0),
                ("delta", 1.0),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            for (k, v) in overrides {
                if !params.contains_key(k) {
                    return Err(Error::InvalidArgument(format!(
                        "cartpole has no parameter `{k}`"
                    )));
                }
                params.insert(k.clone(), *v);
            }
            let (m, mm, l, g, delta) = (
                params["m"],
                params["M"],
                params["L"],
                params["g"],
                params["delta"],
            );
            let sys = DynamicalSystem::continuous(
                "cartpole",
                4,
                1,
                vec![(-3.0, 3.0); 4],
                move |x, u| {
                    let (x2, x3, x4) = (x[1], x[2], x[3]);
                    let (sin3, cos3) = x3.sin_cos();
                    let a = m * l * x4 * x4 * sin3 - delta * x2;
                    let denom = m * l * l * (mm + m * (1.0 - cos3 * cos3));
                    vec![
                        x2,
                        (-m * m * l * l * g * cos3 * sin3 + m * l * l * a + m * l * l * u[0])
                            / denom,
                        x4,
                        ((m + mm) * m * g * l * sin3 - m * l * cos3 * a + m * l * cos3 * u[0])
                            / denom,
                    ]
                },
            );
            Ok(sys.with_parameters(params))
        }
        _ => Err(Error::UnknownName {
            name: name.to_string(),
            valid: BUILTIN_NAMES.to_vec(),
        }),
    }
}

/// Euclidean norm of a state, used for blow-up checks during rollouts.
pub fn state_norm(x: &[f64]) -> f64 {
    l2_norm(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_decay() -> DynamicalSystem {
        DynamicalSystem::continuous("decay", 1, 1, vec![(-1.0, 1.0)], |x, _| vec![-x[0]])
    }

    #[test]
    fn pendulum_equilibrium() {
        let sys = builtin("pendulum").unwrap();
        let dx = sys.eval_vector_field(&[0.0, 0.0], &[0.0]).unwrap();
        assert_eq!(dx, vec![0.0, 0.0]);
    }

    #[test]
    fn cartpole_equilibrium_and_parameters() {
        let sys = builtin("cartpole").unwrap();
        assert_eq!(sys.n, 4);
        assert_eq!(sys.p, 1);
        assert_eq!(sys.parameters["m"], 1.0);
        assert_eq!(sys.parameters["M"], 5.0);
        assert_eq!(sys.parameters["L"], 2.0);
        assert_eq!(sys.parameters["g"], -10.0);
        assert_eq!(sys.parameters["delta"], 1.0);
        let dx = sys.eval_vector_field(&[0.0; 4], &[0.0]).unwrap();
        assert_eq!(dx, vec![0.0; 4]);
    }

    #[test]
    fn pendulum_quarter_turn() {
        let sys = builtin("pendulum").unwrap();
        let dx = sys
            .eval_vector_field(&[std::f64::consts::FRAC_PI_2, 0.0], &[0.0])
            .unwrap();
        assert_abs_diff_eq!(dx[0], 0.0);
        assert_abs_diff_eq!(dx[1], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn vector_field_rejects_discrete_kind() {
        let sys = builtin("motivating").unwrap();
        assert!(matches!(
            sys.eval_vector_field(&[0.0], &[0.0]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let sys = builtin("pendulum").unwrap();
        assert!(matches!(
            sys.eval_vector_field(&[0.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rk4_matches_exponential() {
        let sys = scalar_decay();
        let y = rk4_step(&sys, &[1.0], &[0.0], 0.1).unwrap();
        assert_abs_diff_eq!(y[0], (-0.1_f64).exp(), epsilon = 1e-7);
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let sys = DynamicalSystem::continuous("still", 1, 1, vec![(-1.0, 1.0)], |_, _| vec![0.0]);
        let y = rk4_step(&sys, &[5.0], &[0.0], 0.3).unwrap();
        assert_eq!(y[0], 5.0);
    }

    #[test]
    fn rk4_order_four_on_exponential() {
        // Integrate dx/dt = -x from 1.0 over [0, 1]; halving h twice should
        // shrink the global error by roughly 16x each time.
        let sys = scalar_decay();
        let exact = (-1.0_f64).exp();
        let run = |steps: usize| {
            let h = 1.0 / steps as f64;
            let mut x = vec![1.0];
            for _ in 0..steps {
                x = rk4_step(&sys, &x, &[0.0], h).unwrap();
            }
            (x[0] - exact).abs()
        };
        let e1 = run(8);
        let e2 = run(16);
        let e3 = run(32);
        let r1 = e1 / e2;
        let r2 = e2 / e3;
        assert!((12.0..=20.0).contains(&r1), "ratio {r1}");
        assert!((12.0..=20.0).contains(&r2), "ratio {r2}");
    }

    #[test]
    fn rk4_reports_nonfinite_stage() {
        let sys = DynamicalSystem::continuous("bad", 1, 1, vec![(-1.0, 1.0)], |x, _| {
            vec![if x[0] > 1.5 { f64::NAN } else { x[0] * 10.0 }]
        });
        let err = rk4_step(&sys, &[1.0], &[0.0], 1.0).unwrap_err();
        match err {
            Error::NonFinite { stage } => assert!(stage.contains("k2"), "stage was {stage}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn discrete_step_motivating_fixed_point() {
        let sys = builtin("motivating").unwrap();
        let cfg = IntegrationConfig::default();
        assert_eq!(discrete_step(&sys, &[0.0], &[0.0], &cfg).unwrap(), vec![0.0]);
        let y = discrete_step(&sys, &[1.0], &[0.0], &cfg).unwrap();
        assert_abs_diff_eq!(y[0], (-1.0_f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn discrete_step_pendulum_equilibrium() {
        let sys = builtin("pendulum").unwrap();
        let cfg = IntegrationConfig::new(0.1, 10).unwrap();
        let y = discrete_step(&sys, &[0.0, 0.0], &[0.0], &cfg).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn substeps_compose() {
        let sys = builtin("pendulum").unwrap();
        let x = [1.2, -0.4];
        let u = [0.3];
        let combined =
            discrete_step(&sys, &x, &u, &IntegrationConfig::new(0.2, 4).unwrap()).unwrap();
        let fine = IntegrationConfig::new(0.05, 1).unwrap();
        let mut state = x.to_vec();
        for _ in 0..4 {
            state = discrete_step(&sys, &state, &u, &fine).unwrap();
        }
        for i in 0..2 {
            assert_abs_diff_eq!(combined[i], state[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn unknown_builtin_lists_valid_names() {
        let err = builtin("lorenz").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("motivating") && msg.contains("pendulum") && msg.contains("cartpole"));
    }

    #[test]
    fn parameter_overrides() {
        let overrides: BTreeMap<String, f64> = [("M".to_string(), 7.0)].into_iter().collect();
        let sys = builtin_with_params("cartpole", &overrides).unwrap();
        assert_eq!(sys.parameters["M"], 7.0);
        assert!(builtin_with_params("pendulum", &overrides).is_err());
        let bad: BTreeMap<String, f64> = [("mass".to_string(), 1.0)].into_iter().collect();
        assert!(builtin_with_params("cartpole", &bad).is_err());
    }

    #[test]
    fn integration_config_validation() {
        assert!(IntegrationConfig::new(0.0, 1).is_err());
        assert!(IntegrationConfig::new(0.1, 0).is_err());
        assert_eq!(IntegrationConfig::new(0.1, 10).unwrap().step_size(), 0.01);
    }
}
