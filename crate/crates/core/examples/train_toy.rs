//! A short training run on one synthetic traversal. The global branch and
//! the local branch alternate each step; the log rows are the ones written
//! to train_log.csv by the CLI.
//!
//! cargo run --release --example train_toy -- [steps]

use egonn::data::{generate_traversal, generate_world, ScanSpec, TrajectorySpec, WorldSpec};
use egonn::losses::LossConfig;
use egonn::model::{EgoNN, NetConfig};
use egonn::trainer::{TrainConfig, TrainSet, Trainer};

fn main() -> egonn::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let world = generate_world(&WorldSpec::default())?;
    let traj = TrajectorySpec { count: 120, spacing: 1.5, ..TrajectorySpec::default() };
    let scans = generate_traversal(&world, &traj, &ScanSpec::toy())?;
    let loss = LossConfig::toy();
    let set = TrainSet::new(scans, &loss)?;
    let cfg = TrainConfig::default();
    let mut trainer = Trainer::new(EgoNN::new(NetConfig::toy(), cfg.seed)?, cfg, loss)?;
    trainer.run_until(&set, steps, |t, row| {
        println!("{:>4} {}", t.step, row.csv_row());
        Ok(())
    })?;
    Ok(())
}
