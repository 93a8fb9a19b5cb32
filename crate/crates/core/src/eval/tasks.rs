//! Built-in task catalog.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Boundary, FrequencyMode, SystemSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const SPRINGS_FRAMES: usize = 99;
pub const KURAMOTO_FRAMES: usize = 98;
pub const BOUNDARY_FRAMES: usize = 209;
pub const INPUT_FRAMES: usize = 49;
pub const BOUNDARY_INPUT_FRAMES: usize = 149;

pub const DESK_TRAIN_SIMS: usize = 1000;
pub const DESK_TEST_SIMS: usize = 200;

/// One experiment: the system to simulate, how much of each trajectory the
/// encoder sees, how many latent edge types the model has and the desk-scale
/// dataset sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Catalog number, absent for custom tasks.
    #[serde(default)]
    pub id: Option<u32>,
    pub name: String,
    pub system: SystemSpec,
    pub input_frames: usize,
    pub n_edge_types: usize,
    pub train_sims: usize,
    pub test_sims: usize,
    /// Evaluate the checkpoint of this task instead of training.
    #[serde(default)]
    pub transfer_from: Option<u32>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.model_config().validate()?;
        if self.input_frames < 2 || self.input_frames >= self.system.frames {
            return Err(Error::contract(format!(
                "input_frames {} must be in 2..{}",
                self.input_frames, self.system.frames
            )));
        }
        if self.test_sims == 0 || (self.transfer_from.is_none() && self.train_sims < 2) {
            return Err(Error::contract("need at least 1 test and 2 training simulations"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(
            self.system.n_agents,
            self.system.feature_dim(),
            self.n_edge_types,
            self.input_frames,
        )
    }

    /// Frames available for forecasting after the encoder window.
    pub fn max_horizon(&self) -> usize {
        self.system.frames - self.input_frames
    }
}

fn springs_task(id: u32, name: &str, n: usize, probs: Vec<f64>, values: Vec<f64>, boundary: Boundary) -> TaskSpec {
    let bounded = boundary != Boundary::Unbounded;
    let (frames, input) = if bounded {
        (BOUNDARY_FRAMES, BOUNDARY_INPUT_FRAMES)
    } else {
        (SPRINGS_FRAMES, INPUT_FRAMES)
    };
    TaskSpec {
        id: Some(id),
        name: name.into(),
        n_edge_types: values.len(),
        system: SystemSpec::springs(n, probs, values, frames, boundary),
        input_frames: input,
        train_sims: DESK_TRAIN_SIMS,
        test_sims: DESK_TEST_SIMS,
        transfer_from: None,
    }
}

fn kuramoto_task(id: u32, name: &str, n: usize, mode: FrequencyMode) -> TaskSpec {
    TaskSpec {
        id: Some(id),
        name: name.into(),
        system: SystemSpec::kuramoto(n, KURAMOTO_FRAMES, mode),
        input_frames: INPUT_FRAMES,
        n_edge_types: 2,
        train_sims: DESK_TRAIN_SIMS,
        test_sims: DESK_TEST_SIMS,
        transfer_from: None,
    }
}

fn transfer_task(id: u32, name: &str, probs: Vec<f64>) -> TaskSpec {
    TaskSpec {
        transfer_from: Some(1),
        train_sims: 0,
        ..springs_task(id, name, 5, probs, vec![0.0, 1.0], Boundary::Unbounded)
    }
}

/// Catalog entry `id` (1 to 13).
pub fn task(id: u32) -> Result<TaskSpec> {
    let half = || vec![0.5, 0.5];
    let k2 = || vec![0.0, 1.0];
    let square = |side| Boundary::Square { side };
    let circle = |diameter| Boundary::Circle { diameter };
    Ok(match id {
        1 => springs_task(1, "5 particles, 2 link types", 5, half(), k2(), Boundary::Unbounded),
        2 => springs_task(2, "10 particles, 2 link types", 10, half(), k2(), Boundary::Unbounded),
        3 => springs_task(
            3,
            "5 particles, 3 link types",
            5,
            vec![1.0 / 3.0; 3],
            vec![0.0, 0.5, 1.0],
            Boundary::Unbounded,
        ),
        4 => kuramoto_task(4, "5 oscillators (true frequency)", 5, FrequencyMode::Actual),
        5 => kuramoto_task(5, "5 oscillators (estimated frequency)", 5, FrequencyMode::Estimated),
        6 => kuramoto_task(6, "10 oscillators (true frequency)", 10, FrequencyMode::Actual),
        7 => kuramoto_task(7, "10 oscillators (estimated frequency)", 10, FrequencyMode::Estimated),
        8 => springs_task(8, "task 1 in a square box of side 4", 5, half(), k2(), square(4.0)),
        9 => springs_task(9, "task 1 in a square box of side 2", 5, half(), k2(), square(2.0)),
        10 => springs_task(10, "task 1 in a circle of diameter 4", 5, half(), k2(), circle(4.0)),
        11 => springs_task(11, "task 1 in a circle of diameter 2", 5, half(), k2(), circle(2.0)),
        12 => transfer_task(12, "task 1 model on graphs without links", vec![1.0, 0.0]),
        13 => transfer_task(13, "task 1 model on complete graphs", vec![0.0, 1.0]),
        _ => {
            return Err(Error::contract(format!(
                "unknown task {id}; the catalog has tasks 1 to 13"
            )))
        }
    })
}

pub fn catalog() -> Vec<TaskSpec> {
    (1..=13).map(|id| task(id).expect("catalog ids are valid")).collect()
}
