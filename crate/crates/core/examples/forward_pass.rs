//! Build the encoder/decoder at full and quarter width and trace one
//! forward pass layer by layer.
//!
//! ```text
//! cargo run --release --example forward_pass
//! ```

use cect_forge::model::{build_network, LayerKind, ModelConfig};
use cect_forge::tensor::Tensor;

fn main() -> cect_forge::Result<()> {
    let full = ModelConfig::default();
    println!("{:<6} {:>14} {:>6} {:>6} {:>5}", "layer", "kind", "in", "out", "size");
    for l in full.layers() {
        let kind = match l.kind {
            LayerKind::Conv { kernel, stride } => format!("conv{kernel}x{kernel}/s{stride}"),
            LayerKind::ConvTranspose { kernel, stride } => format!("tconv{kernel}x{kernel}/s{stride}"),
        };
        println!(
            "{:<6} {:>14} {:>6} {:>6} {:>5}",
            l.name, kind, l.in_channels, l.out_channels, l.out_size
        );
    }

    let params = build_network(&ModelConfig::scaled(64, 4, 1))?;
    let n: usize = params.iter().map(|(_, t)| t.len()).sum();
    println!("\nquarter width at 64x64: {} tensors, {n} numbers", params.len());

    // a fresh network is the identity map
    let x = Tensor::from_fn(&[1, 1, 64, 64], |i| (i % 64) as f64 / 64.0);
    let y = params.infer(&x)?;
    let max_diff = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("untrained output vs input, max |diff| = {max_diff:.3e}");
    Ok(())
}
