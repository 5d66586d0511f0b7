//! Pipeline stages: collect → train → [refine] → control → analyze.
//! Each stage writes its artifacts into the run directory; partial runs load
//! the prerequisites of earlier stages from the same directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;

use koopman_core::analysis::{
    error_bound, error_field, predict_states, AxisTarget, FieldAxis, FieldGrid, PredictionMode,
    SamplingMeasure,
};
use koopman_core::control::{
    estimate_basin, lqr_gain, simulate_true_closed_loop, BasinAxis, BasinGrid, LQRWeights,
    SimulationOptions,
};
use koopman_core::dynamics::{discrete_step, DynamicalSystem, IntegrationConfig};
use koopman_core::edmd;
use koopman_core::observables::{fixed_dictionary, ObservableFn};
use koopman_core::sampling::{
    collect_closed_loop, collect_trajectories, merge, split_into_groups, BoxSampler, InputSignal,
    TrajectoryDataset,
};
use koopman_core::training::{refine, train_initial, KoopmanModel};

use crate::artifacts;
use crate::config::{ArchitectureSection, ExperimentConfig, SignalSection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Collect,
    Train,
    Refine,
    Control,
    Analyze,
}

pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.csv")
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.json")
    }
    pub fn loss(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
    pub fn model_refined(&self) -> PathBuf {
        self.dir.join("model_refined.json")
    }
    pub fn loss_refine(&self) -> PathBuf {
        self.dir.join("loss_refine.csv")
    }
    pub fn gain(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("gain{suffix}.json"))
    }
    pub fn trajectory(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("trajectory{suffix}.csv"))
    }
    pub fn heatmap(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("heatmap{suffix}.csv"))
    }
    pub fn basin(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("basin{suffix}.csv"))
    }
    pub fn bound(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("bound{suffix}.json"))
    }
    pub fn prediction(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("prediction{suffix}.csv"))
    }
}

/// Collects the Step-1 dataset described by the sampling section.
pub fn collect_stage(
    config: &ExperimentConfig,
    system: &DynamicalSystem,
    cfg: &IntegrationConfig,
    x0_seed: u64,
) -> anyhow::Result<TrajectoryDataset> {
    let sampler = BoxSampler::new(config.sampling.x0_box.clone(), x0_seed)?;
    let s = &config.sampling;
    let ds = match &s.signal {
        SignalSection::Uniform { lower, upper, seed } => {
            let signal = InputSignal::uniform(*lower, *upper, *seed, cfg.dt)?;
            collect_trajectories(system, &sampler, &signal, s.steps, cfg, s.trajectories)?
        }
        SignalSection::Zero => {
            let signal = InputSignal::zero(cfg.dt);
            collect_trajectories(system, &sampler, &signal, s.steps, cfg, s.trajectories)?
        }
        SignalSection::CosineGroups { frequencies } => {
            let raw = collect_trajectories(
                system,
                &sampler,
                &InputSignal::zero(cfg.dt),
                s.steps,
                cfg,
                s.trajectories,
            )?;
            split_into_groups(&raw, system, Some(cfg), frequencies.len(), frequencies, cfg.dt)?
        }
    };
    if !ds.excluded.is_empty() {
        log::warn!("{} trajectories excluded during collection", ds.excluded.len());
    }
    Ok(ds)
}

/// Fits or trains the model requested by the architecture/training sections.
pub fn train_stage(
    config: &ExperimentConfig,
    dataset: &TrajectoryDataset,
) -> anyhow::Result<(KoopmanModel, Vec<koopman_core::training::LossRecord>)> {
    match (&config.architecture, config.training_config()) {
        (Some(ArchitectureSection::Network { .. }), Some(tcfg)) => {
            let arch = config.arch_spec().expect("network architecture");
            let trained = train_initial(dataset, &arch, &tcfg)?;
            if let Some(epoch) = trained.diverged_at {
                log::warn!("training diverged at epoch {epoch}; using the last finite checkpoint");
            }
            Ok((trained.model, trained.curve))
        }
        (Some(ArchitectureSection::Network { .. }), None) => {
            bail!("a network architecture needs a [training] section")
        }
        (Some(ArchitectureSection::Dictionary { name, scale }), _) => {
            let mut dict = fixed_dictionary(name)?;
            dict.scale = *scale;
            let fit = edmd::fit(dataset, &dict)?;
            let model = KoopmanModel::from_edmd(&fit, ObservableFn::Dictionary(dict), dataset.p)?;
            Ok((model, Vec::new()))
        }
        (Some(ArchitectureSection::Identity) | None, _) => {
            let lifting = ObservableFn::identity(dataset.n);
            let fit = edmd::fit(dataset, &lifting)?;
            let model = KoopmanModel::from_edmd(&fit, lifting, dataset.p)?;
            Ok((model, Vec::new()))
        }
    }
}

fn weights_for(config: &ExperimentConfig, model: &KoopmanModel) -> anyhow::Result<LQRWeights> {
    Ok(LQRWeights::from_state_weights(
        &config.lqr.state_weights,
        model.lifted_dim(),
        &config.lqr.input_weights,
    )?)
}

/// Assembles the Step-2 dataset (initial data plus closed-loop and fresh
/// open-loop rollouts per the mix ratio) and refines the model.
pub fn refine_stage(
    config: &ExperimentConfig,
    system: &DynamicalSystem,
    cfg: &IntegrationConfig,
    model: &KoopmanModel,
    dataset: &TrajectoryDataset,
) -> anyhow::Result<(KoopmanModel, Vec<koopman_core::training::LossRecord>)> {
    let section = config
        .refinement
        .as_ref()
        .context("config has no [refinement] section")?;
    if section.mix >= 1.0 {
        bail!("refinement mix must be below 1 (fraction of NEW data in the augmented set)");
    }
    let weights = weights_for(config, model)?;
    let gain = lqr_gain(&model.a_eff(), &model.b_eff(), &weights)?;

    let steps = config.sampling.steps;
    let new_total =
        ((dataset.len() as f64) * section.mix / (1.0 - section.mix)).round() as usize;
    let fb_trajs = (new_total / 2).div_ceil(steps).max(1);
    let fresh_trajs = (new_total - new_total / 2).div_ceil(steps).max(1);

    let fb_sampler = BoxSampler::new(config.sampling.x0_box.clone(), section.x0_seed)?;
    let closed = collect_closed_loop(
        system,
        model,
        &gain,
        &fb_sampler,
        steps,
        cfg,
        fb_trajs,
        section.blow_up_radius,
    )?;

    // Fresh rollouts collected the same way as Step 1, reseeded.
    let fresh = {
        let mut shifted = config.clone();
        shifted.sampling.trajectories = fresh_trajs;
        if let SignalSection::Uniform { seed, .. } = &mut shifted.sampling.signal {
            *seed = seed.wrapping_add(1);
        }
        collect_stage(&shifted, system, cfg, section.x0_seed.wrapping_add(1))?
    };

    let augmented = merge(dataset, &merge(&closed, &fresh)?)?;
    let rcfg = config.refinement_config().expect("refinement section");
    let mut opt = config.training_config().unwrap_or_default();
    opt.epochs = section.epochs;
    opt.learning_rate = section.learning_rate;
    let refined = refine(model, &augmented, &rcfg, &opt)?;
    if refined.no_closed_loop_data {
        log::warn!("refinement dataset contained no closed-loop data");
    }
    Ok((refined.model, refined.curve))
}

/// Designs the LQR gain and runs the true closed loop for one model,
/// writing gain + trajectory.
pub fn control_stage(
    config: &ExperimentConfig,
    system: &DynamicalSystem,
    cfg: &IntegrationConfig,
    model: &KoopmanModel,
    paths: &RunPaths,
    suffix: &str,
    hash: &str,
) -> anyhow::Result<()> {
    let sim = config
        .simulate
        .as_ref()
        .context("config has no [simulate] section")?;
    let weights = weights_for(config, model)?;
    let gain = lqr_gain(&model.a_eff(), &model.b_eff(), &weights)?;
    artifacts::save_gain(&paths.gain(suffix), &gain, hash)?;
    let run = simulate_true_closed_loop(
        system,
        model,
        &gain,
        &sim.x0,
        sim.steps,
        cfg,
        Some(&weights),
        &SimulationOptions::default(),
    )?;
    artifacts::write_trajectory_csv(&paths.trajectory(suffix), &run, hash)?;
    Ok(())
}

fn field_axis(section: &crate::config::GridAxisSection) -> anyhow::Result<FieldAxis> {
    let target = match section.target.as_str() {
        "state" => AxisTarget::State(section.index),
        "input" => AxisTarget::Input(section.index),
        other => bail!("unknown axis target `{other}`"),
    };
    Ok(FieldAxis {
        target,
        min: section.min,
        max: section.max,
        count: section.count,
    })
}

/// Produces the requested analysis artifacts for one model.
pub fn analyze_stage(
    config: &ExperimentConfig,
    system: &DynamicalSystem,
    cfg: &IntegrationConfig,
    model: &KoopmanModel,
    paths: &RunPaths,
    suffix: &str,
    hash: &str,
) -> anyhow::Result<()> {
    if config.analysis.heatmap.is_some() {
        analyze_only_heatmap(config, system, cfg, model, paths, suffix, hash)?;
    }
    if config.analysis.basin.is_some() {
        analyze_only_basin(config, system, cfg, model, paths, suffix, hash)?;
    }
    if config.analysis.bound.is_some() {
        analyze_only_bound(config, system, cfg, model, paths, suffix, hash)?;
    }
    if config.analysis.predict.is_some() {
        analyze_only_predict(config, system, cfg, model, paths, suffix, hash)?;
    }
    Ok(())
}

pub fn analyze_only_heatmap(
    config: &ExperimentConfig,
    system: &DynamicalSystem,
    cfg: &IntegrationConfig,
    model: &KoopmanModel,
    paths: &RunPaths,
    suffix: &str,
    hash: &str,
) -> anyhow::Result<()> {
    let h = config
        .analysis
        .heatmap
        .as_ref()
        .context("config has no [analysis.heatmap] section")?;
    let grid = FieldGrid {
        axis1: field_axis(&h.axis1)?,
        axis2: field_axis(&h.axis2)?,
        x_fixed: h.x_fixed.clone(),
        u_fixed: h.u_fixed.clone(),
        first_block_only: h.first_block_only,
    };
    let field = error_field(model, system, &grid, cfg)?;
    artifacts::write_heatmap_csv(&paths.heatmap(suffix), &field, hash)?;
    Ok(())
}

pub fn analyze_only_basin(
    config: &ExperimentConfig,
    system: &DynamicalSystem,
    cfg: &IntegrationConfig,
    model: &KoopmanModel,
    paths: &RunPaths,
    suffix: &str,
    hash: &str,
) -> anyhow::Result<()> {
    let b = config
        .analysis
        .basin
        .as_ref()
        .context("config has no [analysis.basin] section")?;
    let weights = weights_for(config, model)?;
    let gain = lqr_gain(&model.a_eff(), &model.b_eff(), &weights)?;
    let grid = BasinGrid {
        axis1: BasinAxis {
            dim: b.axis1_dim,
            min: b.axis1_range.0,
            max: b.axis1_range.1,
            count: b.axis1_count,
        },
        axis2: BasinAxis {
            dim: b.axis2_dim,
            min: b.axis2_range.0,
            max: b.axis2_range.1,
            count: b.axis2_count,
        },
        fixed: b.fixed.clone(),
    };
    let basin = estimate_basin(
        system,
        model,
        &gain,
        &grid,
        b.horizon,
        b.tol,
        cfg,
        &SimulationOptions::default(),
    )?;
    artifacts::write_basin_csv(&paths.basin(suffix), &basin, hash)?;
    Ok(())
}

pub fn analyze_only_bound(
    config: &ExperimentConfig,
    system: &DynamicalSystem,
    cfg: &IntegrationConfig,
    model: &KoopmanModel,
    paths: &RunPaths,
    suffix: &str,
    hash: &str,
) -> anyhow::Result<()> {
    let b = config
        .analysis
        .bound
        .as_ref()
        .context("config has no [analysis.bound] section")?;
    let measure = SamplingMeasure {
        x_box: b.x_box.clone(),
        u_box: b.u_box.clone(),
        samples: b.samples,
        seed: b.seed,
    };
    let report = error_bound(model, system, &measure, cfg)?;
    artifacts::write_bound_json(&paths.bound(suffix), &report, hash)?;
    Ok(())
}

pub fn analyze_only_predict(
    config: &ExperimentConfig,
    system: &DynamicalSystem,
    cfg: &IntegrationConfig,
    model: &KoopmanModel,
    paths: &RunPaths,
    suffix: &str,
    hash: &str,
) -> anyhow::Result<()> {
    let p = config
        .analysis
        .predict
        .as_ref()
        .context("config has no [analysis.predict] section")?;
    let inputs = vec![vec![0.0; system.p]; p.steps];
    let mut truth = vec![p.x0.clone()];
    for u in &inputs {
        truth.push(discrete_step(system, truth.last().unwrap(), u, cfg)?);
    }
    let prediction = predict_states(model, &p.x0, &inputs, PredictionMode::Relift, 1e9)?;
    artifacts::write_prediction_csv(&paths.prediction(suffix), &truth, &prediction, hash)?;
    Ok(())
}

/// Runs the full pipeline (or a single stage, loading prerequisites from the
/// run directory). Artifacts of completed stages survive later failures.
pub fn run_pipeline(
    config: &ExperimentConfig,
    out: &Path,
    only: Option<Stage>,
) -> anyhow::Result<()> {
    config.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let paths = RunPaths::new(out);
    let hash = config.hash();
    std::fs::write(paths.config(), config.canonical_json())
        .with_context(|| format!("writing {}", paths.config().display()))?;

    let system = config.build_system()?;
    let cfg = config.integration()?;
    let wants = |stage: Stage| only.is_none() || only == Some(stage);

    let mut dataset = None;
    if wants(Stage::Collect) {
        let ds = collect_stage(config, &system, &cfg, config.sampling.x0_seed)?;
        artifacts::write_dataset_csv(&paths.dataset(), &ds, &hash)?;
        log::info!("collected {} triplets", ds.len());
        dataset = Some(ds);
    }
    if only == Some(Stage::Collect) {
        return Ok(());
    }

    let load_dataset = |dataset: Option<TrajectoryDataset>| -> anyhow::Result<TrajectoryDataset> {
        match dataset {
            Some(ds) => Ok(ds),
            None => artifacts::read_dataset_csv(&paths.dataset()),
        }
    };

    let mut model = None;
    if wants(Stage::Train) {
        let ds = load_dataset(dataset.take())?;
        let (trained, curve) = train_stage(config, &ds)?;
        artifacts::save_model(&paths.model(), &trained, &hash)?;
        if !curve.is_empty() {
            artifacts::write_loss_csv(&paths.loss(), &curve, &hash)?;
        }
        model = Some(trained);
        dataset = Some(ds);
    }
    if only == Some(Stage::Train) {
        return Ok(());
    }

    let load_model = |model: Option<KoopmanModel>| -> anyhow::Result<KoopmanModel> {
        match model {
            Some(m) => Ok(m),
            None => artifacts::load_model(&paths.model()),
        }
    };

    let mut refined = None;
    if config.refinement.is_some() && wants(Stage::Refine) {
        let ds = load_dataset(dataset.take())?;
        let base = load_model(model.take())?;
        let (refined_model, curve) = refine_stage(config, &system, &cfg, &base, &ds)?;
        artifacts::save_model(&paths.model_refined(), &refined_model, &hash)?;
        artifacts::write_loss_csv(&paths.loss_refine(), &curve, &hash)?;
        refined = Some(refined_model);
        model = Some(base);
        dataset = Some(ds);
    }
    if only == Some(Stage::Refine) {
        return Ok(());
    }
    let _ = dataset;

    // Later stages run once per available model: the initial one and, when
    // refinement is configured, the refined one.
    let base = load_model(model.take())?;
    let mut models = vec![(String::new(), base)];
    if config.refinement.is_some() {
        let refined_model = match refined.take() {
            Some(m) => m,
            None => artifacts::load_model(&paths.model_refined())?,
        };
        models.push(("_refined".to_string(), refined_model));
    }

    if wants(Stage::Control) && config.simulate.is_some() {
        for (suffix, m) in &models {
            control_stage(config, &system, &cfg, m, &paths, suffix, &hash)?;
        }
    }
    if only == Some(Stage::Control) {
        return Ok(());
    }

    if wants(Stage::Analyze) {
        for (suffix, m) in &models {
            analyze_stage(config, &system, &cfg, m, &paths, suffix, &hash)?;
        }
    }
    Ok(())
}
