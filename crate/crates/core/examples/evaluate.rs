//! Score weights on held-out phantom cases. Without a weights file the true
//! CECT is scored against itself, which shows the ceiling of every metric.
//!
//! ```text
//! cargo run --release --example evaluate -- [weights.cwt]
//! ```

use cect_forge::phantom::{build_dataset, PhantomConfig};
use cect_forge::trainer::{evaluate, evaluate_predictions, EvalOptions};
use cect_forge::weights::load_weights;

fn main() -> cect_forge::Result<()> {
    let cases = build_dataset(&PhantomConfig::default(), 10, 1, 64, 99)?;
    let opts = EvalOptions::default();
    let e = match std::env::args().nth(1) {
        Some(path) => evaluate(&load_weights(path)?, &cases, &opts)?.0,
        None => {
            let preds: Vec<Vec<_>> = cases
                .iter()
                .map(|c| c.slices.iter().map(|p| p.cect.clone()).collect())
                .collect();
            evaluate_predictions(&cases, &preds, &opts)?
        }
    };
    for v in &e.volumes {
        println!(
            "case {:2}: predicted {:.2} ml, true {:.2} ml, dV {:.1}%",
            v.case, v.predicted_ml, v.true_ml, v.dv_percent
        );
    }
    println!("{}", serde_json::to_string_pretty(&e.report).expect("report serialises"));
    Ok(())
}
