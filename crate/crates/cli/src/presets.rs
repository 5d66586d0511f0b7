//! Built-in experiment presets reproducing the benchmark studies at desk
//! scale: the one-dimensional guiding example (dictionary fits, residual
//! heatmaps, scale variants, closed-loop comparison), the pendulum
//! (cosine-group sampling and LQR), and the cartpole (two-stage learning
//! with basin-of-attraction sweeps).

use anyhow::bail;

use crate::config::{
    AnalysisSection, ArchitectureSection, BasinSection, BoundSection, ExperimentConfig,
    GridAxisSection, HeatmapSection, IntegrationSection, LqrSection, PredictSection,
    RefinementSection, SamplingSection, SignalSection, SimulateSection, SystemSection,
    TrainingSection,
};

pub const PRESET_NAMES: [&str; 3] = ["motivating", "pendulum", "cartpole"];

/// Returns the labeled runs of a preset; each run writes into its own
/// subdirectory of the output directory.
pub fn preset(name: &str) -> anyhow::Result<Vec<(String, ExperimentConfig)>> {
    match name {
        "motivating" => Ok(motivating()),
        "pendulum" => Ok(vec![("run".to_string(), pendulum())]),
        "cartpole" => Ok(vec![("run".to_string(), cartpole())]),
        _ => bail!(
            "unknown preset `{name}`; valid presets: {}",
            PRESET_NAMES.join(", ")
        ),
    }
}

fn motivating_run(dictionary: &str, scale: f64) -> ExperimentConfig {
    // The closed-loop comparison is meaningful for the unscaled fits; the
    // rescaled variants exist for their residual heatmaps.
    let simulate = if scale == 1.0 {
        Some(SimulateSection {
            x0: vec![-3.4298],
            steps: 50,
        })
    } else {
        None
    };
    ExperimentConfig {
        system: SystemSection {
            name: "motivating".to_string(),
            params: Default::default(),
        },
        integration: IntegrationSection {
            dt: 0.1,
            substeps: 1,
        },
        sampling: SamplingSection {
            signal: SignalSection::Uniform {
                lower: -2.0,
                upper: 2.0,
                seed: 43,
            },
            trajectories: 10_000,
            steps: 1,
            x0_box: vec![(-4.0, 4.0)],
            x0_seed: 42,
        },
        architecture: Some(ArchitectureSection::Dictionary {
            name: dictionary.to_string(),
            scale,
        }),
        training: None,
        refinement: None,
        lqr: LqrSection {
            state_weights: vec![1.0],
            input_weights: vec![1.0],
        },
        simulate,
        analysis: AnalysisSection {
            heatmap: Some(HeatmapSection {
                axis1: GridAxisSection {
                    target: "state".to_string(),
                    index: 0,
                    min: -4.0,
                    max: 4.0,
                    count: 41,
                },
                axis2: GridAxisSection {
                    target: "input".to_string(),
                    index: 0,
                    min: -2.0,
                    max: 2.0,
                    count: 41,
                },
                x_fixed: vec![0.0],
                u_fixed: vec![0.0],
                first_block_only: false,
            }),
            basin: None,
            bound: Some(BoundSection {
                x_box: vec![(-4.0, 4.0)],
                u_box: vec![(-2.0, 2.0)],
                samples: 20_000,
                seed: 11,
            }),
            predict: None,
        },
        output: None,
    }
}

fn motivating() -> Vec<(String, ExperimentConfig)> {
    vec![
        ("model1".to_string(), motivating_run("model1", 1.0)),
        ("model2".to_string(), motivating_run("model2", 1.0)),
        ("model2_alpha10".to_string(), motivating_run("model2", 10.0)),
        ("model2_alpha50".to_string(), motivating_run("model2", 50.0)),
    ]
}

fn cosine_frequencies() -> Vec<f64> {
    (0..6).map(|i| 20.0 * i as f64).collect()
}

fn pendulum() -> ExperimentConfig {
    ExperimentConfig {
        system: SystemSection {
            name: "pendulum".to_string(),
            params: Default::default(),
        },
        integration: IntegrationSection {
            dt: 0.1,
            substeps: 10,
        },
        sampling: SamplingSection {
            signal: SignalSection::CosineGroups {
                frequencies: cosine_frequencies(),
            },
            trajectories: 300,
            steps: 50,
            x0_box: vec![(-3.0, 3.0); 2],
            x0_seed: 1,
        },
        architecture: Some(ArchitectureSection::Network {
            feature_dim: 1,
            hidden: vec![10],
            final_activation: true,
        }),
        training: Some(TrainingSection {
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 256,
            seed: 0,
        }),
        refinement: None,
        lqr: LqrSection {
            state_weights: vec![100.0, 1.0],
            input_weights: vec![1.0],
        },
        simulate: Some(SimulateSection {
            x0: vec![1.0, 0.0],
            steps: 300,
        }),
        analysis: AnalysisSection {
            heatmap: None,
            basin: None,
            bound: None,
            predict: Some(PredictSection {
                x0: vec![1.0, 0.0],
                steps: 50,
            }),
        },
        output: None,
    }
}

fn cartpole() -> ExperimentConfig {
    ExperimentConfig {
        system: SystemSection {
            name: "cartpole".to_string(),
            params: Default::default(),
        },
        integration: IntegrationSection {
            dt: 0.1,
            substeps: 10,
        },
        sampling: SamplingSection {
            signal: SignalSection::CosineGroups {
                frequencies: cosine_frequencies(),
            },
            trajectories: 100,
            steps: 50,
            x0_box: vec![(-1.5, 1.5); 4],
            x0_seed: 2,
        },
        architecture: Some(ArchitectureSection::Network {
            feature_dim: 1,
            hidden: vec![25],
            final_activation: true,
        }),
        training: Some(TrainingSection {
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 1e-3,
            epochs: 1000,
            batch_size: 256,
            seed: 0,
        }),
        refinement: Some(RefinementSection {
            eps_a: 0.1,
            eps_b: 0.1,
            mix: 0.5,
            epochs: 150,
            learning_rate: 1e-4,
            x0_seed: 7,
            blow_up_radius: 100.0,
        }),
        lqr: LqrSection {
            state_weights: vec![100.0, 1.0, 100.0, 1.0],
            input_weights: vec![1.0],
        },
        simulate: Some(SimulateSection {
            x0: vec![1.0, 0.0, 0.5, 0.0],
            steps: 400,
        }),
        analysis: AnalysisSection {
            heatmap: Some(HeatmapSection {
                axis1: GridAxisSection {
                    target: "state".to_string(),
                    index: 0,
                    min: -13.0,
                    max: 6.9,
                    count: 21,
                },
                axis2: GridAxisSection {
                    target: "state".to_string(),
                    index: 2,
                    min: -2.5,
                    max: 2.0,
                    count: 21,
                },
                x_fixed: vec![0.0; 4],
                u_fixed: vec![0.0],
                first_block_only: true,
            }),
            basin: Some(BasinSection {
                axis1_dim: 0,
                axis1_range: (-13.0, 6.9),
                axis1_count: 11,
                axis2_dim: 2,
                axis2_range: (-2.5, 2.0),
                axis2_count: 9,
                fixed: vec![0.0; 4],
                horizon: 600,
                tol: 0.05,
            }),
            bound: None,
            predict: Some(PredictSection {
                x0: vec![0.5, 0.0, 0.5, 0.0],
                steps: 50,
            }),
        },
        output: None,
    }
}
