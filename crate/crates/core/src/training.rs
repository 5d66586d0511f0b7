//! Joint learning of the features and lifted operator (initial training),
//! and spectral-norm-constrained refinement of (A, B) with closed-loop data.
//!
//! The training loss is
//! `J = λ1·‖A·G_x + B·U − G_y‖_F² + λ2·‖W(A·G_x + B·U) − Y‖_F²`,
//! where both terms depend on the network weights through the lifted columns
//! of G_x and G_y. Refinement freezes the weights and optimizes only
//! (ΔA, ΔB) by projected gradient descent onto spectral-norm balls; the
//! projection is the closed-form singular-value clipping.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edmd::{self, EdmdFit};
use crate::error::{Error, Result};
use crate::observables::{Lifting, ObservableFn, ObservableMap};
use crate::sampling::{Triplet, TrajectoryDataset};
use crate::util::{matjson, matrix_digest};

/// Hyperparameters for the initial training (and the inner optimizer of the
/// refinement step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 256,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::InvalidArgument(
                "loss weights must be nonnegative with λ1+λ2 > 0".to_string(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".to_string(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Spectral-norm budgets for the refinement step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub eps_a: f64,
    pub eps_b: f64,
    /// Target fraction of closed-loop triplets when assembling the augmented
    /// dataset (used by callers; the refinement itself takes data as given).
    pub mix: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            eps_a: 0.1,
            eps_b: 0.1,
            mix: 0.5,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_a < 0.0 || self.eps_b < 0.0 {
            return Err(Error::InvalidArgument(
                "spectral-norm budgets must be nonnegative".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::InvalidArgument(
                "data mix ratio must lie in [0, 1]".to_string(),
            ));
        }
        Ok(())
    }
}

/// Where a model came from, plus refinement deltas kept separate from the
/// step-1 matrices for auditability.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelProvenance {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "optional_mat"
    )]
    pub delta_a: Option<DMatrix<f64>>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "optional_mat"
    )]
    pub delta_b: Option<DMatrix<f64>>,
}

mod optional_mat {
    use super::matjson;
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        value: &Option<DMatrix<f64>>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        value.as_ref().map(matjson::Mat::from).serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<Option<DMatrix<f64>>, D::Error> {
        let raw = Option::<matjson::Mat>::deserialize(de)?;
        raw.map(|m| DMatrix::try_from(m).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// The lifted linear model `ξ_{k+1} = A ξ_k + B u_k` together with its
/// observables. `a`/`b` hold the step-1 estimate; refinement deltas live in
/// the provenance and are folded in by [`KoopmanModel::a_eff`] /
/// [`KoopmanModel::b_eff`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KoopmanModelJson", into = "KoopmanModelJson")]
pub struct KoopmanModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub observables: ObservableFn,
    pub n: usize,
    pub feature_dim: usize,
    pub p: usize,
    pub provenance: ModelProvenance,
}

#[derive(Serialize, Deserialize)]
struct KoopmanModelJson {
    a: matjson::Mat,
    b: matjson::Mat,
    observables: ObservableFn,
    n: usize,
    feature_dim: usize,
    p: usize,
    provenance: ModelProvenance,
}

impl From<KoopmanModel> for KoopmanModelJson {
    fn from(m: KoopmanModel) -> Self {
        KoopmanModelJson {
            a: matjson::Mat::from(&m.a),
            b: matjson::Mat::from(&m.b),
            observables: m.observables,
            n: m.n,
            feature_dim: m.feature_dim,
            p: m.p,
            provenance: m.provenance,
        }
    }
}

impl TryFrom<KoopmanModelJson> for KoopmanModel {
    type Error = String;

    fn try_from(j: KoopmanModelJson) -> std::result::Result<Self, String> {
        let a = DMatrix::try_from(j.a)?;
        let b = DMatrix::try_from(j.b)?;
        let model = KoopmanModel {
            a,
            b,
            observables: j.observables,
            n: j.n,
            feature_dim: j.feature_dim,
            p: j.p,
            provenance: j.provenance,
        };
        model.check_shapes().map_err(|e| e.to_string())?;
        Ok(model)
    }
}

impl KoopmanModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        observables: ObservableFn,
        p: usize,
        provenance: ModelProvenance,
    ) -> Result<Self> {
        let model = Self {
            n: observables.state_dim(),
            feature_dim: observables.feature_dim(),
            a,
            b,
            observables,
            p,
            provenance,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Wraps an EDMD fit as a model with provenance "edmd".
    pub fn from_edmd(fit: &EdmdFit, observables: ObservableFn, p: usize) -> Result<Self> {
        Self::new(
            fit.a.clone(),
            fit.b.clone(),
            observables,
            p,
            ModelProvenance {
                source: "edmd".to_string(),
                ..Default::default()
            },
        )
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.n + self.feature_dim;
        if self.a.nrows() != d || self.a.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "model matrix A",
                expected: d,
                found: self.a.nrows().max(self.a.ncols()),
            });
        }
        if self.b.nrows() != d || self.b.ncols() != self.p {
            return Err(Error::DimensionMismatch {
                context: "model matrix B",
                expected: d,
                found: self.b.nrows(),
            });
        }
        if self.observables.state_dim() != self.n
            || self.observables.feature_dim() != self.feature_dim
        {
            return Err(Error::DimensionMismatch {
                context: "model observables",
                expected: self.n + self.feature_dim,
                found: self.observables.lifted_dim(),
            });
        }
        if let Some(da) = &self.provenance.delta_a {
            if da.shape() != self.a.shape() {
                return Err(Error::DimensionMismatch {
                    context: "refinement delta A",
                    expected: d,
                    found: da.nrows(),
                });
            }
        }
        if let Some(db) = &self.provenance.delta_b {
            if db.shape() != self.b.shape() {
                return Err(Error::DimensionMismatch {
                    context: "refinement delta B",
                    expected: d,
                    found: db.nrows(),
                });
            }
        }
        Ok(())
    }

    pub fn lifted_dim(&self) -> usize {
        self.n + self.feature_dim
    }

    /// Step-1 A plus the refinement delta, if any.
    pub fn a_eff(&self) -> DMatrix<f64> {
        match &self.provenance.delta_a {
            Some(da) => &self.a + da,
            None => self.a.clone(),
        }
    }

    pub fn b_eff(&self) -> DMatrix<f64> {
        match &self.provenance.delta_b {
            Some(db) => &self.b + db,
            None => self.b.clone(),
        }
    }

    pub fn lift(&self, x: &[f64]) -> Result<crate::observables::LiftedState> {
        self.observables.lift(x)
    }

    pub fn decode(&self, lifted: &crate::observables::LiftedState) -> Vec<f64> {
        self.observables.decode(lifted)
    }
}

/// Value and exact gradients of the two-term loss on a set of triplets.
/// `term1`/`term2` are the raw (unweighted) sums of squares.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub j: f64,
    pub term1: f64,
    pub term2: f64,
    pub d_a: DMatrix<f64>,
    pub d_b: DMatrix<f64>,
    pub d_kernels: Vec<DMatrix<f64>>,
    pub d_biases: Vec<DVector<f64>>,
}

/// Loss of the model on the whole dataset, with gradients for A, B, and the
/// network weights (empty weight gradients for dictionary/identity
/// observables). Uses the model's effective matrices.
pub fn loss_initial(
    model: &KoopmanModel,
    dataset: &TrajectoryDataset,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossGradients> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("loss needs a nonempty dataset".to_string()));
    }
    let a = model.a_eff();
    let b = model.b_eff();
    loss_grads(
        &a,
        &b,
        &model.observables,
        dataset.triplets.iter(),
        lambda1,
        lambda2,
        true,
    )
}

/// Core loss/gradient evaluation shared by the public entry point and the
/// training loop. Iterates triplets one column at a time so the first loss
/// term matches the per-sample modeling-error sum bit for bit.
#[allow(clippy::too_many_arguments)]
fn loss_grads<'a>(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    observables: &ObservableFn,
    triplets: impl Iterator<Item = &'a Triplet>,
    lambda1: f64,
    lambda2: f64,
    with_weight_grads: bool,
) -> Result<LossGradients> {
    let d = a.nrows();
    let n = observables.state_dim();
    let alpha = observables.scale();
    let network = observables.as_network();

    let mut term1 = 0.0;
    let mut term2 = 0.0;
    let mut d_a = DMatrix::zeros(d, a.ncols());
    let mut d_b = DMatrix::zeros(d, b.ncols());
    let mut d_kernels: Vec<DMatrix<f64>> = Vec::new();
    let mut d_biases: Vec<DVector<f64>> = Vec::new();
    if let Some(net) = network {
        if with_weight_grads {
            for layer in net.layers() {
                d_kernels.push(DMatrix::zeros(layer.kernel.nrows(), layer.kernel.ncols()));
                d_biases.push(DVector::zeros(layer.bias.len()));
            }
        }
    }

    let mut count = 0usize;
    for t in triplets {
        count += 1;
        let gx = observables.lift(&t.x)?;
        let gy = observables.lift(&t.y)?;
        let u = DVector::from_row_slice(&t.u);
        let pred = a * &gx.values + b * &u;
        let e1 = &pred - &gy.values;
        term1 += e1.norm_squared();
        // Decoded prediction against the raw successor state.
        let mut e2 = DVector::zeros(n);
        for i in 0..n {
            e2[i] = pred[i] / alpha - t.y[i];
        }
        term2 += e2.norm_squared();
        if !(term1.is_finite() && term2.is_finite()) {
            return Err(Error::NonFinite {
                stage: format!("loss on triplet {}", count - 1),
            });
        }

        // dJ/dpred = 2λ1·e1 + (λ2 part only on the first n coordinates).
        let mut d_pred = &e1 * (2.0 * lambda1);
        for i in 0..n {
            d_pred[i] += 2.0 * lambda2 * e2[i] / alpha;
        }
        d_a += &d_pred * gx.values.transpose();
        d_b += &d_pred * u.transpose();

        if with_weight_grads {
            if let Some(net) = network {
                // Upstream through the feature block of g(x): Aᵀ·dJ/dpred,
                // keeping the bottom N rows; through g(y): −2λ1·e1 bottom N.
                let up_x_full = a.transpose() * &d_pred;
                let up_x = DVector::from_fn(net.feature_dim(), |i, _| up_x_full[n + i]);
                // backward() differentiates α·NN, while the lifted feature
                // block is α·NN as well, so pass the upstream unscaled.
                let gx_grads = net.backward(&t.x, &up_x)?;
                let up_y = DVector::from_fn(net.feature_dim(), |i, _| -2.0 * lambda1 * e1[n + i]);
                let gy_grads = net.backward(&t.y, &up_y)?;
                for (acc, g) in d_kernels.iter_mut().zip(
                    gx_grads
                        .kernels
                        .iter()
                        .zip(gy_grads.kernels.iter())
                        .map(|(a, b)| a + b),
                ) {
                    *acc += g;
                }
                for (acc, g) in d_biases.iter_mut().zip(
                    gx_grads
                        .biases
                        .iter()
                        .zip(gy_grads.biases.iter())
                        .map(|(a, b)| a + b),
                ) {
                    *acc += g;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset("loss needs a nonempty batch".to_string()));
    }

    Ok(LossGradients {
        j: lambda1 * term1 + lambda2 * term2,
        term1,
        term2,
        d_a,
        d_b,
        d_kernels,
        d_biases,
    })
}

/// Largest singular value (induced 2-norm).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Euclidean projection onto the spectral-norm ball of radius `eps`:
/// singular values are clipped at `eps`. Interior points return unchanged.
pub fn project_spectral_ball(m: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    assert!(eps >= 0.0, "spectral-norm radius must be nonnegative");
    if spectral_norm(m) <= eps {
        return m.clone();
    }
    if eps == 0.0 {
        return DMatrix::zeros(m.nrows(), m.ncols());
    }
    let mut svd = m.clone().svd(true, true);
    for s in svd.singular_values.iter_mut() {
        if *s > eps {
            *s = eps;
        }
    }
    svd.recompose().expect("SVD with both factors recomposes")
}

/// Architecture of the learned features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    /// Apply the activation after the final affine layer (the default).
    pub final_activation: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            feature_dim: 1,
            hidden: vec![10],
            final_activation: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub j: f64,
    pub term1: f64,
    pub term2: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: KoopmanModel,
    pub curve: Vec<LossRecord>,
    /// Set when training aborted on a non-finite loss; the returned model is
    /// the last finite checkpoint.
    pub diverged_at: Option<usize>,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(cfg: &TrainingConfig, sizes: &[usize]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            v: sizes.iter().map(|s| vec![0.0; *s]).collect(),
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let lr_t = self.lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t));
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= lr_t * m[i] / (v[i].sqrt() + self.eps);
        }
    }
}

struct Params {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    observables: ObservableFn,
}

impl Params {
    fn loss(&self, triplets: &[&Triplet], l1: f64, l2: f64, grads: bool) -> Result<LossGradients> {
        loss_grads(
            &self.a,
            &self.b,
            &self.observables,
            triplets.iter().copied(),
            l1,
            l2,
            grads,
        )
    }
}

/// Step 1: jointly learns the features and (A, B) by Adam on the two-term
/// loss. (A, B) start from the EDMD fit under the randomly initialized
/// lifting; the best full-dataset checkpoint is returned, so the final loss
/// never exceeds the initial one. Deterministic given the seed.
pub fn train_initial(
    dataset: &TrajectoryDataset,
    arch: &ArchSpec,
    cfg: &TrainingConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training needs data".to_string()));
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }

    let map = ObservableMap::random(
        dataset.n,
        arch.feature_dim,
        &arch.hidden,
        arch.final_activation,
        cfg.seed,
    )?;
    let observables = ObservableFn::Network(map);
    let init = edmd::fit(dataset, &observables)?;
    let mut params = Params {
        a: init.a,
        b: init.b,
        observables,
    };

    let digest = config_digest(arch, cfg);
    let all: Vec<&Triplet> = dataset.triplets.iter().collect();
    let initial = params.loss(&all, cfg.lambda1, cfg.lambda2, false)?;
    let mut curve = vec![LossRecord {
        epoch: 0,
        j: initial.j,
        term1: initial.term1,
        term2: initial.term2,
    }];
    let mut best_j = initial.j;
    let mut best = (params.a.clone(), params.b.clone(), params.observables.clone());

    let n_layers = match params.observables.as_network() {
        Some(net) => net.layers().len(),
        None => 0,
    };
    let mut sizes = vec![params.a.len(), params.b.len()];
    if let Some(net) = params.observables.as_network() {
        for layer in net.layers() {
            sizes.push(layer.kernel.len());
            sizes.push(layer.bias.len());
        }
    }
    let mut adam = Adam::new(cfg, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut diverged_at = None;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Triplet> = chunk.iter().map(|i| &dataset.triplets[*i]).collect();
            let grads = match params.loss(&batch, cfg.lambda1, cfg.lambda2, true) {
                Ok(g) if g.j.is_finite() => g,
                _ => {
                    log::warn!("training diverged at epoch {epoch}, batch {bi}; keeping the last finite checkpoint");
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
            };
            adam.begin_step();
            adam.update(0, params.a.as_mut_slice(), grads.d_a.as_slice());
            adam.update(1, params.b.as_mut_slice(), grads.d_b.as_slice());
            if let Some(net) = match &mut params.observables {
                ObservableFn::Network(net) => Some(net),
                _ => None,
            } {
                for li in 0..n_layers {
                    let slot = 2 + 2 * li;
                    let layer = &mut net.layers_mut()[li];
                    adam.update(slot, layer.kernel.as_mut_slice(), grads.d_kernels[li].as_slice());
                    adam.update(
                        slot + 1,
                        layer.bias.as_mut_slice(),
                        grads.d_biases[li].as_slice(),
                    );
                }
            }
        }
        let full = params.loss(&all, cfg.lambda1, cfg.lambda2, false)?;
        curve.push(LossRecord {
            epoch,
            j: full.j,
            term1: full.term1,
            term2: full.term2,
        });
        if full.j.is_finite() && full.j < best_j {
            best_j = full.j;
            best = (params.a.clone(), params.b.clone(), params.observables.clone());
        }
    }

    let model = KoopmanModel::new(
        best.0,
        best.1,
        best.2,
        dataset.p,
        ModelProvenance {
            source: "train_initial".to_string(),
            config_digest: Some(digest),
            ..Default::default()
        },
    )?;
    Ok(TrainedModel {
        model,
        curve,
        diverged_at,
    })
}

fn config_digest(arch: &ArchSpec, cfg: &TrainingConfig) -> String {
    let enc = DMatrix::from_iterator(
        1,
        9 + arch.hidden.len(),
        [
            arch.feature_dim as f64,
            if arch.final_activation { 1.0 } else { 0.0 },
            cfg.lambda1,
            cfg.lambda2,
            cfg.learning_rate,
            cfg.epochs as f64,
            cfg.batch_size as f64,
            cfg.seed as f64,
            cfg.beta1,
        ]
        .into_iter()
        .chain(arch.hidden.iter().map(|h| *h as f64)),
    );
    matrix_digest(&[&enc])
}

#[derive(Debug, Clone)]
pub struct RefinedModel {
    pub model: KoopmanModel,
    pub curve: Vec<LossRecord>,
    /// True when the augmented dataset contained no closed-loop trajectories.
    pub no_closed_loop_data: bool,
}

/// Step 2: with the weights frozen, minimizes
/// `J_c(ΔA, ΔB)` subject to `‖ΔA‖ ≤ ε_A`, `‖ΔB‖ ≤ ε_B`
/// by projected gradient descent with backtracking, starting from
/// (ΔA, ΔB) = (0, 0). The loss never increases across iterates, so the
/// returned pair satisfies `J_c(ΔA, ΔB) ≤ J_c(0, 0)`.
pub fn refine(
    model: &KoopmanModel,
    dataset: &TrajectoryDataset,
    cfg: &RefinementConfig,
    opt: &TrainingConfig,
) -> Result<RefinedModel> {
    cfg.validate()?;
    opt.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("refinement needs data".to_string()));
    }
    let no_closed_loop_data = !dataset.has_feedback_data();
    if no_closed_loop_data {
        log::warn!("refinement dataset contains no closed-loop (feedback) trajectories");
    }

    let d = model.lifted_dim();
    let m = dataset.len();
    let n = model.n;
    let alpha = model.observables.scale();

    // Weights are frozen, so the lifted data matrices are fixed.
    let mut g_x = DMatrix::zeros(d, m);
    let mut g_y = DMatrix::zeros(d, m);
    let mut u = DMatrix::zeros(model.p, m);
    let mut y = DMatrix::zeros(n, m);
    for (k, t) in dataset.triplets.iter().enumerate() {
        let gx = model.observables.lift(&t.x)?;
        let gy = model.observables.lift(&t.y)?;
        for i in 0..d {
            g_x[(i, k)] = gx.values[i];
            g_y[(i, k)] = gy.values[i];
        }
        for j in 0..model.p {
            u[(j, k)] = t.u[j];
        }
        for i in 0..n {
            y[(i, k)] = t.y[i];
        }
    }

    let a0 = model.a_eff();
    let b0 = model.b_eff();
    let (l1, l2) = (opt.lambda1, opt.lambda2);

    let cost = |da: &DMatrix<f64>, db: &DMatrix<f64>| -> (f64, f64, f64) {
        let pred = (&a0 + da) * &g_x + (&b0 + db) * &u;
        let e1 = &pred - &g_y;
        let t1 = e1.norm_squared();
        let decoded = pred.rows(0, n) / alpha;
        let e2 = decoded - &y;
        let t2 = e2.norm_squared();
        (l1 * t1 + l2 * t2, t1, t2)
    };

    let mut da = DMatrix::zeros(d, d);
    let mut db = DMatrix::zeros(d, model.p);
    let (mut jc, t1, t2) = cost(&da, &db);
    let mut curve = vec![LossRecord {
        epoch: 0,
        j: jc,
        term1: t1,
        term2: t2,
    }];

    for epoch in 1..=opt.epochs {
        let pred = (&a0 + &da) * &g_x + (&b0 + &db) * &u;
        let e1 = &pred - &g_y;
        let mut d_pred = e1 * (2.0 * l1);
        {
            let decoded = pred.rows(0, n) / alpha;
            let e2 = decoded - &y;
            let mut top = d_pred.rows_mut(0, n);
            top += e2 * (2.0 * l2 / alpha);
        }
        let grad_a = &d_pred * g_x.transpose();
        let grad_b = &d_pred * u.transpose();

        let mut step = opt.learning_rate;
        let mut accepted = false;
        for _ in 0..60 {
            let cand_a = project_spectral_ball(&(&da - &grad_a * step), cfg.eps_a);
            let cand_b = project_spectral_ball(&(&db - &grad_b * step), cfg.eps_b);
            let (cand_j, cand_t1, cand_t2) = cost(&cand_a, &cand_b);
            if cand_j.is_finite() && cand_j <= jc {
                da = cand_a;
                db = cand_b;
                jc = cand_j;
                curve.push(LossRecord {
                    epoch,
                    j: cand_j,
                    term1: cand_t1,
                    term2: cand_t2,
                });
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let mut refined = model.clone();
    refined.provenance = ModelProvenance {
        source: "refine".to_string(),
        config_digest: model.provenance.config_digest.clone(),
        delta_a: Some(da),
        delta_b: Some(db),
    };
    // Fold any pre-existing deltas into the stored base so the new deltas
    // compose against the matrices the gain was designed from.
    refined.a = a0;
    refined.b = b0;
    Ok(RefinedModel {
        model: refined,
        curve,
        no_closed_loop_data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{builtin, DynamicalSystem, IntegrationConfig};
    use crate::sampling::{collect_trajectories, BoxSampler, InputSignal};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn linear_dataset(seed: u64) -> TrajectoryDataset {
        let sys = DynamicalSystem::discrete("lin2", 2, 1, vec![(-1.0, 1.0); 2], |x, u| {
            vec![
                0.8 * x[0] + 0.1 * x[1] + 0.2 * u[0],
                -0.1 * x[0] + 0.7 * x[1],
            ]
        });
        let cfg = IntegrationConfig::default();
        let sampler = BoxSampler::new(vec![(-1.0, 1.0); 2], seed).unwrap();
        let signal = InputSignal::uniform(-1.0, 1.0, seed + 1, cfg.dt).unwrap();
        collect_trajectories(&sys, &sampler, &signal, 10, &cfg, 30).unwrap()
    }

    fn exact_linear_model() -> KoopmanModel {
        let a = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.1, 0.7]);
        let b = DMatrix::from_row_slice(2, 1, &[0.2, 0.0]);
        KoopmanModel::new(a, b, ObservableFn::identity(2), 1, Default::default()).unwrap()
    }

    #[test]
    fn exact_model_has_zero_loss() {
        let ds = linear_dataset(1);
        let model = exact_linear_model();
        let loss = loss_initial(&model, &ds, 1.0, 1.0).unwrap();
        assert!(loss.j < 1e-22, "J = {}", loss.j);
    }

    #[test]
    fn lambda1_zero_reduces_to_reconstruction_term() {
        let ds = linear_dataset(2);
        // A deliberately wrong model so the loss is nonzero.
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.1, 0.1]);
        let model =
            KoopmanModel::new(a.clone(), b.clone(), ObservableFn::identity(2), 1, Default::default())
                .unwrap();
        let lambda2 = 3.0;
        let loss = loss_initial(&model, &ds, 0.0, lambda2).unwrap();
        // Independent evaluation of the second term.
        let mut expected = 0.0;
        for t in &ds.triplets {
            let gx = nalgebra::DVector::from_row_slice(&t.x);
            let u = nalgebra::DVector::from_row_slice(&t.u);
            let pred = &a * gx + &b * u;
            for i in 0..2 {
                let e = pred[i] - t.y[i];
                expected += e * e;
            }
        }
        assert_abs_diff_eq!(loss.j, lambda2 * expected, epsilon = 1e-10);
        assert_abs_diff_eq!(loss.term2, expected, epsilon = 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let sys = builtin("pendulum").unwrap();
        let cfg = IntegrationConfig::default();
        let sampler = BoxSampler::new(vec![(-1.0, 1.0); 2], 4).unwrap();
        let signal = InputSignal::uniform(-1.0, 1.0, 5, cfg.dt).unwrap();
        let ds = collect_trajectories(&sys, &sampler, &signal, 4, &cfg, 4).unwrap();

        let map = ObservableMap::random(2, 2, &[6], true, 7).unwrap();
        let obs = ObservableFn::Network(map);
        let init = edmd::fit(&ds, &obs).unwrap();
        let model = KoopmanModel::from_edmd(&init, obs, 1).unwrap();
        let (l1, l2) = (0.7, 1.3);
        let loss = loss_initial(&model, &ds, l1, l2).unwrap();

        let h = 1e-5;
        let eval = |m: &KoopmanModel| loss_initial(m, &ds, l1, l2).unwrap().j;
        let check = |an: f64, fd: f64, what: &str| {
            let denom = an.abs().max(fd.abs()).max(1e-2);
            assert!(((an - fd) / denom).abs() < 1e-5, "{what}: analytic {an}, fd {fd}");
        };

        for r in 0..model.a.nrows() {
            for c in 0..model.a.ncols() {
                let mut plus = model.clone();
                plus.a[(r, c)] += h;
                let mut minus = model.clone();
                minus.a[(r, c)] -= h;
                check(loss.d_a[(r, c)], (eval(&plus) - eval(&minus)) / (2.0 * h), "A");
            }
        }
        for r in 0..model.b.nrows() {
            let mut plus = model.clone();
            plus.b[(r, 0)] += h;
            let mut minus = model.clone();
            minus.b[(r, 0)] -= h;
            check(loss.d_b[(r, 0)], (eval(&plus) - eval(&minus)) / (2.0 * h), "B");
        }
        let net = model.observables.as_network().unwrap();
        for li in 0..net.layers().len() {
            for r in 0..net.layers()[li].kernel.nrows() {
                for c in 0..net.layers()[li].kernel.ncols() {
                    let mut plus = model.clone();
                    if let ObservableFn::Network(net) = &mut plus.observables {
                        net.layers_mut()[li].kernel[(r, c)] += h;
                    }
                    let mut minus = model.clone();
                    if let ObservableFn::Network(net) = &mut minus.observables {
                        net.layers_mut()[li].kernel[(r, c)] -= h;
                    }
                    check(
                        loss.d_kernels[li][(r, c)],
                        (eval(&plus) - eval(&minus)) / (2.0 * h),
                        "kernel",
                    );
                }
            }
            for r in 0..net.layers()[li].bias.len() {
                let mut plus = model.clone();
                if let ObservableFn::Network(net) = &mut plus.observables {
                    net.layers_mut()[li].bias[r] += h;
                }
                let mut minus = model.clone();
                if let ObservableFn::Network(net) = &mut minus.observables {
                    net.layers_mut()[li].bias[r] -= h;
                }
                check(
                    loss.d_biases[li][r],
                    (eval(&plus) - eval(&minus)) / (2.0 * h),
                    "bias",
                );
            }
        }
    }

    #[test]
    fn spectral_norm_cases() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(spectral_norm(&m), 3.0, epsilon = 1e-12);
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 2)), 0.0);
        // Random matrix against the full-SVD oracle.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let r = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let oracle = r.clone().svd(false, false).singular_values.max();
        assert_abs_diff_eq!(spectral_norm(&r), oracle, epsilon = 1e-9);
    }

    #[test]
    fn projection_cases() {
        let small = DMatrix::from_row_slice(2, 2, &[0.05, 0.0, 0.0, 0.01]);
        let proj = project_spectral_ball(&small, 0.1);
        assert_eq!(proj, small);

        let diag = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.05]);
        let proj = project_spectral_ball(&diag, 0.1);
        assert_abs_diff_eq!(proj[(0, 0)], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(proj[(1, 1)], 0.05, epsilon = 1e-12);

        let zero = project_spectral_ball(&diag, 0.0);
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_idempotent_and_optimal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let rows = rng.random_range(1..5);
            let cols = rng.random_range(1..5);
            let m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
            let eps = rng.random_range(0.0..1.5);
            let p = project_spectral_ball(&m, eps);
            assert!(spectral_norm(&p) <= eps + 1e-9);
            let pp = project_spectral_ball(&p, eps);
            assert!((&pp - &p).norm() <= 1e-12);
            // No random feasible point beats the projection.
            let dist = (&m - &p).norm();
            for _ in 0..20 {
                let q = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
                let q = project_spectral_ball(&q, eps);
                assert!((&m - &q).norm() >= dist - 1e-9);
            }
        }
    }

    #[test]
    fn train_linear_system_prediction() {
        // Data from a stable linear system is exactly embeddable; after a few
        // epochs the model predicts it well over 50 steps.
        let ds = linear_dataset(10);
        let arch = ArchSpec {
            feature_dim: 1,
            hidden: vec![8],
            final_activation: true,
        };
        let cfg = TrainingConfig {
            epochs: 40,
            batch_size: 64,
            seed: 3,
            ..Default::default()
        };
        let trained = train_initial(&ds, &arch, &cfg).unwrap();
        assert!(trained.diverged_at.is_none());
        assert!(trained.curve.last().unwrap().j <= trained.curve[0].j);

        let a_true = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.1, 0.7]);
        let b_true = DMatrix::from_row_slice(2, 1, &[0.2, 0.0]);
        let mut x_true = nalgebra::DVector::from_vec(vec![0.5, -0.4]);
        let mut x_est = vec![0.5, -0.4];
        let a = trained.model.a_eff();
        let b = trained.model.b_eff();
        let mut sq = 0.0;
        for _ in 0..50 {
            let u = nalgebra::DVector::from_vec(vec![0.0]);
            x_true = &a_true * &x_true + &b_true * &u;
            let lifted = trained.model.lift(&x_est).unwrap();
            let pred = &a * &lifted.values + &b * &u;
            let decoded = trained.model.decode(&crate::observables::LiftedState {
                values: pred,
                split: 2,
            });
            x_est = decoded;
            for i in 0..2 {
                sq += (x_est[i] - x_true[i]).powi(2);
            }
        }
        let rmse = (sq / 100.0).sqrt();
        assert!(rmse < 1e-2, "rmse {rmse}");
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let ds = linear_dataset(11);
        let arch = ArchSpec::default();
        let cfg = TrainingConfig {
            epochs: 0,
            batch_size: 32,
            seed: 9,
            ..Default::default()
        };
        let t1 = train_initial(&ds, &arch, &cfg).unwrap();
        let t2 = train_initial(&ds, &arch, &cfg).unwrap();
        assert_eq!(t1.model, t2.model);
        assert_eq!(t1.curve.len(), 1);
        // The initialization is the EDMD fit under the seeded random lifting.
        let map = ObservableMap::random(2, 1, &[10], true, 9).unwrap();
        let obs = ObservableFn::Network(map);
        let fit = edmd::fit(&ds, &obs).unwrap();
        assert_eq!(t1.model.a, fit.a);
        assert_eq!(t1.model.b, fit.b);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = linear_dataset(12);
        let arch = ArchSpec::default();
        let cfg = TrainingConfig {
            epochs: 5,
            batch_size: 50,
            seed: 21,
            ..Default::default()
        };
        let t1 = train_initial(&ds, &arch, &cfg).unwrap();
        let t2 = train_initial(&ds, &arch, &cfg).unwrap();
        assert_eq!(t1.model, t2.model);
        assert_eq!(t1.curve, t2.curve);
    }

    #[test]
    fn refine_zero_budget_returns_model_unchanged() {
        let ds = linear_dataset(13);
        let model = exact_linear_model();
        let rcfg = RefinementConfig {
            eps_a: 0.0,
            eps_b: 0.0,
            mix: 0.5,
        };
        let opt = TrainingConfig {
            epochs: 10,
            batch_size: 32,
            ..Default::default()
        };
        let refined = refine(&model, &ds, &rcfg, &opt).unwrap();
        assert_eq!(refined.model.a_eff(), model.a_eff());
        assert_eq!(refined.model.b_eff(), model.b_eff());
        assert!(refined.no_closed_loop_data);
    }

    #[test]
    fn refine_respects_budgets_and_never_worsens() {
        let ds = linear_dataset(14);
        // Start from a deliberately biased model so there is room to improve.
        let a = DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 0.6]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        let model =
            KoopmanModel::new(a, b, ObservableFn::identity(2), 1, Default::default()).unwrap();
        let rcfg = RefinementConfig::default();
        let opt = TrainingConfig {
            epochs: 100,
            learning_rate: 1e-4,
            ..Default::default()
        };
        let before = model.observables.clone();
        let refined = refine(&model, &ds, &rcfg, &opt).unwrap();
        let da = refined.model.provenance.delta_a.as_ref().unwrap();
        let db = refined.model.provenance.delta_b.as_ref().unwrap();
        assert!(spectral_norm(da) <= 0.1 + 1e-9);
        assert!(spectral_norm(db) <= 0.1 + 1e-9);
        assert!(refined.curve.last().unwrap().j <= refined.curve[0].j);
        assert!(refined.curve.last().unwrap().j < refined.curve[0].j);
        // Observables are untouched.
        assert_eq!(refined.model.observables, before);
    }

    #[test]
    fn model_json_roundtrip() {
        let ds = linear_dataset(15);
        let arch = ArchSpec::default();
        let cfg = TrainingConfig {
            epochs: 2,
            batch_size: 64,
            seed: 2,
            ..Default::default()
        };
        let trained = train_initial(&ds, &arch, &cfg).unwrap();
        let json = serde_json::to_string(&trained.model).unwrap();
        let back: KoopmanModel = serde_json::from_str(&json).unwrap();
        assert_eq!(trained.model, back);
    }
}
