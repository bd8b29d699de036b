//! Memorizes one synthetic volume and reports Dice per epoch.
//! Usage: overfit [steps] [lr]

use std::time::Instant;

use tpmamba_core::config::{AugmentConfig, TrainConfig};
use tpmamba_core::synth::synth_volume;
use tpmamba_core::train::Trainer;

fn main() -> tpmamba_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(200, |s| s.parse().expect("steps"));
    let lr: f64 = args.get(2).map_or(2e-3, |s| s.parse().expect("lr"));
    let mut cfg = TrainConfig { epochs: steps, lr_start: lr, crop: [32, 96, 96], augment: AugmentConfig::NONE, ..TrainConfig::default() };
    cfg.window.window = [32, 96, 96];
    let cfg = cfg.finish()?;
    let rec = synth_volume([32, 96, 96], 2, 0)?;
    let mut t = Trainer::new(cfg)?;
    let start = Instant::now();
    t.fit(std::slice::from_ref(&rec), |m| {
        println!("epoch {:4} lr {:.2e} loss {:.4} dice {:.4} t {:.1}s", m.epoch, m.lr, m.loss, m.mean_dice, start.elapsed().as_secs_f64());
    })?;
    println!("final eval dice {:.4}", t.evaluate(&rec)?.mean);
    Ok(())
}
