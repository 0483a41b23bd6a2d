//! Build a small graph by hand, run it backwards, and check the gradients
//! against central differences.
//!
//! ```text
//! cargo run --release --example autodiff
//! ```

use cect_forge::tensor::gradcheck::grad_check_many;
use cect_forge::tensor::{BnMode, Graph, Tensor};
use rand::Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn main() -> cect_forge::Result<()> {
    let mut rng = cect_forge::seed::rng(42);
    let x = random(&[2, 1, 6, 6], &mut rng);
    let w = random(&[3, 1, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);

    // conv -> batch norm -> relu -> sum of squares
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.param(w.clone());
    let bv = g.param(b.clone());
    let gamma = g.param(Tensor::full(&[3], 1.0));
    let beta = g.param(Tensor::zeros(&[3]));
    let y = g.conv2d(xv, wv, bv, 1)?;
    let (y, stats) = g.batch_norm(y, gamma, beta, BnMode::Train)?;
    let y = g.relu(y);
    let sq = g.square(y);
    let loss = g.sum(sq);
    println!("loss = {:.6}", g.value(loss).item()?);
    if let Some(st) = stats {
        println!("batch means per channel: {:?}", st.mean);
    }

    let grads = g.backward(loss)?;
    let dw = grads.get(wv).expect("weight gradient");
    println!("dL/dW[0..3] = {:?}", &dw.data()[..3]);

    // the same function, differentiated numerically in every input
    let err = grad_check_many(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1)?;
            let y = g.relu(y);
            let sq = g.square(y);
            Ok(g.sum(sq))
        },
        &[x, w, b],
        1e-4,
    )?;
    println!("max relative error vs central differences: {err:.2e}");

    let mut g = Graph::new();
    let u = g.param(random(&[1, 2, 3, 3], &mut rng));
    let up = g.param(random(&[2, 1, 2, 2], &mut rng));
    let ub = g.param(Tensor::zeros(&[1]));
    let out = g.conv2d_transpose(u, up, ub)?;
    println!("transposed conv: {:?} -> {:?}", g.value(u).shape(), g.value(out).shape());
    Ok(())
}
