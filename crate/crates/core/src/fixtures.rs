//! Built-in fixture robots: a 6-DOF arm (`hexa`) and a 7-DOF arm (`septa`)
//! with deliberately different link geometry, colors, and gripper widths.
//! Used by the test suite, the experiment harness, and as ready-made inputs
//! for the CLI.

use crate::urdf::{apply_robot_config, parse_urdf, RobotConfig, RobotModel};

pub const HEXA_URDF: &str = include_str!("../fixtures/hexa.urdf");
pub const HEXA_CONFIG: &str = include_str!("../fixtures/hexa.toml");
pub const SEPTA_URDF: &str = include_str!("../fixtures/septa.urdf");
pub const SEPTA_CONFIG: &str = include_str!("../fixtures/septa.toml");

fn build(urdf: &str, config: &str) -> RobotModel {
    let mut model = parse_urdf(urdf).expect("fixture URDF parses").model;
    let cfg = RobotConfig::from_toml(config).expect("fixture config parses");
    apply_robot_config(&mut model, &cfg).expect("fixture config applies");
    model
}

/// 6-DOF cylinder-bodied arm, orange, narrow gripper (max width 0.08 m).
pub fn hexa() -> RobotModel {
    build(HEXA_URDF, HEXA_CONFIG)
}

/// 7-DOF box-bodied arm, blue, wide gripper (max width 0.11 m) mounted with
/// a 45 degree roll.
pub fn septa() -> RobotModel {
    build(SEPTA_URDF, SEPTA_CONFIG)
}

/// Looks a fixture up by name; used by CLI and spec files so experiments can
/// name robots without shipping URDFs.
pub fn by_name(name: &str) -> Option<RobotModel> {
    match name {
        "hexa" => Some(hexa()),
        "septa" => Some(septa()),
        _ => None,
    }
}
