//! Train a quarter-width model on phantom slices and save weights plus a
//! checkpoint. Defaults are small enough to finish in about a minute.
//!
//! ```text
//! cargo run --release --example train -- [epochs] [cases] [out_dir]
//! ```

use std::path::PathBuf;

use cect_forge::model::ModelConfig;
use cect_forge::phantom::{build_dataset, split_dataset, PhantomConfig};
use cect_forge::trainer::{TrainConfig, Trainer};
use cect_forge::weights::save_weights;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(45);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example-train".into()));
    std::fs::create_dir_all(&out)?;

    let cases = build_dataset(&PhantomConfig::default(), count, 1, 64, 7)?;
    let split = split_dataset(count, 7)?;
    let pick = |ix: &[usize]| ix.iter().flat_map(|&i| cases[i].slices.clone()).collect::<Vec<_>>();
    let (train, val) = (pick(&split.train), pick(&split.val));
    println!("{} training slices, {} validation slices", train.len(), val.len());

    let cfg = TrainConfig {
        epochs,
        checkpoint_every: epochs.max(1),
        model: ModelConfig::scaled(64, 4, 1),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg)?;
    trainer.fit(&train, &val, Some(&out), |r| {
        println!(
            "epoch {:3}  train {:.5}  val {:.5}  val dice {:.3}",
            r.epoch, r.train_loss, r.val_loss, r.val_dice
        );
    })?;
    if let Some(b) = &trainer.best {
        println!("keeping epoch {} (lowest validation loss {:.5})", b.epoch, b.val_loss);
    }
    save_weights(trainer.selected_params(), out.join("weights.cwt"))?;
    std::fs::write(out.join("history.csv"), trainer.history.to_csv())?;
    println!("weights and checkpoint in {}", out.display());
    Ok(())
}
