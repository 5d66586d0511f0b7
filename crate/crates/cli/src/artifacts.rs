//! On-disk artifacts: versioned model JSON, gain JSON, and the CSV formats
//! for datasets, loss curves, trajectories, heatmaps, basins, and
//! predictions. Every artifact embeds the config hash of the run that
//! produced it.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use koopman_core::analysis::{BoundReport, ErrorField, Prediction};
use koopman_core::control::{BasinResult, ClosedLoopResult, FeedbackGain};
use koopman_core::sampling::TrajectoryDataset;
use koopman_core::training::{KoopmanModel, LossRecord};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelEnvelope {
    version: u32,
    config_hash: String,
    model: KoopmanModel,
}

pub fn save_model(path: &Path, model: &KoopmanModel, config_hash: &str) -> anyhow::Result<()> {
    let envelope = ModelEnvelope {
        version: MODEL_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        model: model.clone(),
    };
    let json = serde_json::to_string_pretty(&envelope)?;
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_model(path: &Path) -> anyhow::Result<KoopmanModel> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let envelope: ModelEnvelope = serde_json::from_str(&text)
        .with_context(|| format!("parsing model JSON {}", path.display()))?;
    if envelope.version != MODEL_SCHEMA_VERSION {
        bail!(
            "model schema version mismatch in {}: expected {}, found {}",
            path.display(),
            MODEL_SCHEMA_VERSION,
            envelope.version
        );
    }
    Ok(envelope.model)
}

#[derive(Serialize, Deserialize)]
struct GainJson {
    version: u32,
    config_hash: String,
    rows: usize,
    cols: usize,
    /// Row-major gain entries.
    k: Vec<f64>,
    designed_from: String,
    closed_loop_spectral_radius: f64,
}

pub fn save_gain(path: &Path, gain: &FeedbackGain, config_hash: &str) -> anyhow::Result<()> {
    let mut k = Vec::with_capacity(gain.k.len());
    for i in 0..gain.k.nrows() {
        for j in 0..gain.k.ncols() {
            k.push(gain.k[(i, j)]);
        }
    }
    let json = serde_json::to_string_pretty(&GainJson {
        version: MODEL_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        rows: gain.k.nrows(),
        cols: gain.k.ncols(),
        k,
        designed_from: gain.designed_from.clone(),
        closed_loop_spectral_radius: gain.closed_loop_spectral_radius,
    })?;
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_gain(path: &Path) -> anyhow::Result<FeedbackGain> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let json: GainJson = serde_json::from_str(&text)
        .with_context(|| format!("parsing gain JSON {}", path.display()))?;
    if json.version != MODEL_SCHEMA_VERSION {
        bail!(
            "gain schema version mismatch: expected {}, found {}",
            MODEL_SCHEMA_VERSION,
            json.version
        );
    }
    if json.k.len() != json.rows * json.cols {
        bail!("gain payload has {} entries, expected {}x{}", json.k.len(), json.rows, json.cols);
    }
    Ok(FeedbackGain {
        k: DMatrix::from_row_slice(json.rows, json.cols, &json.k),
        designed_from: json.designed_from,
        closed_loop_spectral_radius: json.closed_loop_spectral_radius,
    })
}

fn create(path: &Path) -> anyhow::Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_dataset_csv(
    path: &Path,
    dataset: &TrajectoryDataset,
    config_hash: &str,
) -> anyhow::Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# config_hash={config_hash}")?;
    dataset.write_csv(&mut f)?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> anyhow::Result<TrajectoryDataset> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(TrajectoryDataset::read_csv(std::io::BufReader::new(file))?)
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord], config_hash: &str) -> anyhow::Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# config_hash={config_hash}")?;
    writeln!(f, "epoch,J,term1,term2")?;
    for r in curve {
        writeln!(f, "{},{},{},{}", r.epoch, r.j, r.term1, r.term2)?;
    }
    Ok(())
}

/// Closed-loop trajectory: `k, x_1..x_n, u_1..u_p, cost_to_go`. The final row
/// carries the terminal state with empty input columns.
pub fn write_trajectory_csv(
    path: &Path,
    result: &ClosedLoopResult,
    config_hash: &str,
) -> anyhow::Result<()> {
    let n = result.states.first().map(|x| x.len()).unwrap_or(0);
    let p = result.inputs.first().map(|u| u.len()).unwrap_or(0);
    let mut f = create(path)?;
    writeln!(f, "# config_hash={config_hash}")?;
    writeln!(f, "# converged={} diverged={}", result.converged, result.diverged)?;
    write!(f, "k")?;
    for i in 1..=n {
        write!(f, ",x_{i}")?;
    }
    for i in 1..=p {
        write!(f, ",u_{i}")?;
    }
    writeln!(f, ",cost_to_go")?;
    // Suffix sums of the stage costs give the cost-to-go at each step.
    let mut cost_to_go = vec![0.0; result.states.len()];
    for k in (0..result.stage_costs.len()).rev() {
        cost_to_go[k] = result.stage_costs[k] + cost_to_go.get(k + 1).copied().unwrap_or(0.0);
    }
    for (k, x) in result.states.iter().enumerate() {
        write!(f, "{k}")?;
        for v in x {
            write!(f, ",{v}")?;
        }
        if k < result.inputs.len() {
            for v in &result.inputs[k] {
                write!(f, ",{v}")?;
            }
        } else {
            for _ in 0..p {
                write!(f, ",")?;
            }
        }
        writeln!(f, ",{}", cost_to_go[k])?;
    }
    Ok(())
}

pub fn write_heatmap_csv(path: &Path, field: &ErrorField, config_hash: &str) -> anyhow::Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# config_hash={config_hash}")?;
    writeln!(f, "axis1,axis2,norm_r")?;
    for (i, a) in field.axis1_values.iter().enumerate() {
        for (j, b) in field.axis2_values.iter().enumerate() {
            writeln!(f, "{a},{b},{}", field.values[i][j])?;
        }
    }
    Ok(())
}

pub fn write_basin_csv(path: &Path, basin: &BasinResult, config_hash: &str) -> anyhow::Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# config_hash={config_hash}")?;
    writeln!(f, "# converged_count={}", basin.converged_count)?;
    writeln!(f, "axis1,axis2,converged")?;
    for (i, a) in basin.axis1_values.iter().enumerate() {
        for (j, b) in basin.axis2_values.iter().enumerate() {
            writeln!(f, "{a},{b},{}", if basin.converged[i][j] { 1 } else { 0 })?;
        }
    }
    Ok(())
}

/// Prediction against truth: `k, x_1..x_n, xhat_1..xhat_n`.
pub fn write_prediction_csv(
    path: &Path,
    truth: &[Vec<f64>],
    prediction: &Prediction,
    config_hash: &str,
) -> anyhow::Result<()> {
    let n = truth.first().map(|x| x.len()).unwrap_or(0);
    let mut f = create(path)?;
    writeln!(f, "# config_hash={config_hash}")?;
    write!(f, "k")?;
    for i in 1..=n {
        write!(f, ",x_{i}")?;
    }
    for i in 1..=n {
        write!(f, ",xhat_{i}")?;
    }
    writeln!(f)?;
    for (k, (x, xhat)) in truth.iter().zip(&prediction.states).enumerate() {
        write!(f, "{k}")?;
        for v in x {
            write!(f, ",{v}")?;
        }
        for v in xhat {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundEnvelope<'a> {
    config_hash: &'a str,
    report: &'a BoundReport,
}

pub fn write_bound_json(
    path: &Path,
    report: &BoundReport,
    config_hash: &str,
) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(&BoundEnvelope {
        config_hash,
        report,
    })?;
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
