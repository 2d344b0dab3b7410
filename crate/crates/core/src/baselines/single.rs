//! All service modules on one sidechain, run by the same engine.

use crate::config::{ScenarioConfig, System};
use crate::error::Result;
use crate::exec::Exec;
use crate::orchestrator::{run_experiment, RunOutput};

pub fn run_single_sidechain(cfg: &ScenarioConfig, exec: Exec) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.system = System::Single;
    run_experiment(&cfg, exec)
}
