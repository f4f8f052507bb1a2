//! Case files shipped with the crate.

use super::{parse_case, GridCase};

pub const TWO_BUS: &str = include_str!("../../fixtures/two_bus.case");
pub const THREE_BUS: &str = include_str!("../../fixtures/three_bus.case");
pub const SEVEN_BUS: &str = include_str!("../../fixtures/seven_bus.case");
pub const RL_BENCHMARK: &str = include_str!("../../fixtures/rl_benchmark.case");

pub fn two_bus() -> GridCase {
    parse_case(TWO_BUS, "two_bus.case").expect("fixture parses")
}

pub fn three_bus() -> GridCase {
    parse_case(THREE_BUS, "three_bus.case").expect("fixture parses")
}

pub fn seven_bus() -> GridCase {
    parse_case(SEVEN_BUS, "seven_bus.case").expect("fixture parses")
}

pub fn rl_benchmark() -> GridCase {
    parse_case(RL_BENCHMARK, "rl_benchmark.case").expect("fixture parses")
}
