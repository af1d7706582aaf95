use serde::{Deserialize, Serialize};

/// Which link directions count toward communication cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// One model-sized message per round.
    #[default]
    Single,
    /// Download plus upload.
    Both,
}

/// Cumulative transmitted parameters after `rounds` rounds: `rounds × |w_PE|`, doubled for [`Direction::Both`].
pub fn comms_cost(rounds: usize, trainable_params: usize, direction: Direction) -> u64 {
    let single = rounds as u64 * trainable_params as u64;
    match direction {
        Direction::Single => single,
        Direction::Both => 2 * single,
    }
}

/// `rounds×M` with the parameter count in millions to two decimals, e.g. `40×3.17`.
pub fn format_rounds_by_millions(rounds: usize, trainable_params: usize) -> String {
    format!("{rounds}×{:.2}", trainable_params as f64 / 1e6)
}
