//! Evaluate the composite loss on one phantom slice and show how each
//! term reacts to a prediction that misses the contrast.
//!
//! ```text
//! cargo run --release --example loss_terms
//! ```

use cect_forge::loss::{composite_loss, LossConfig};
use cect_forge::phantom::{generate_pair_at, PhantomConfig};
use cect_forge::tensor::Graph;

fn main() -> cect_forge::Result<()> {
    let cfg = PhantomConfig::default();
    let pair = generate_pair_at(&cfg, 3, 64)?;
    let sample = pair.to_sample();
    let loss_cfg = LossConfig::default();

    for (label, pred) in [("perfect", &sample.cect), ("unenhanced", &sample.ct)] {
        let mut g = Graph::new();
        let p = g.param(pred.clone());
        let terms = composite_loss(&mut g, p, &sample, &[], &loss_cfg)?;
        let b = terms.breakdown(&g);
        println!(
            "{label:>10}: total {:.5}  rmse {:.5}  bce {:.5}  l2 {:.5}",
            b.total, b.rmse, b.bce, b.l2
        );
    }
    println!(
        "v_th = {:.4} (normalised) = {:.0} HU, s = {}",
        loss_cfg.v_th,
        loss_cfg.v_th_hu(),
        loss_cfg.s
    );
    Ok(())
}
