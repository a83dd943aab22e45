//! Linear centered kernel alignment from first principles: what the adapter
//! importance score actually measures.
//!
//! ```text
//! cargo run --example cka_basics
//! ```

use rand::Rng;
use safetune::importance::{cka, importance, Similarity};
use safetune::rng::named_stream;
use safetune::tensor::Tensor;

fn show(label: &str, s: Similarity) {
    match s {
        Similarity::Defined(v) => println!("{label:<34} {v:.12}"),
        Similarity::Undefined => println!("{label:<34} undefined"),
    }
}

fn main() -> safetune::Result<()> {
    let mut rng = named_stream(7, "example.cka");
    let x = Tensor::gaussian(64, 8, 1.0, &mut rng);

    // Identical representations align perfectly; importance is zero.
    show("cka(x, x)", cka(&x, &x, true)?);

    // CKA is invariant to isotropic scaling and to orthogonal rotation.
    let scaled = Tensor::from_vec(64, 8, x.data.iter().map(|v| 3.5 * v).collect())?;
    show("cka(x, 3.5·x)", cka(&x, &scaled, true)?);
    let mut flipped = x.clone();
    for r in 0..flipped.rows {
        let (a, b) = (flipped.at(r, 0), flipped.at(r, 3));
        *flipped.at_mut(r, 0) = b;
        *flipped.at_mut(r, 3) = a;
        *flipped.at_mut(r, 5) = -flipped.at(r, 5);
    }
    show("cka(x, x·P) for signed perm P", cka(&x, &flipped, true)?);

    // Independent noise decorrelates the representations.
    let noise = Tensor::gaussian(64, 8, 1.0, &mut rng);
    show("cka(x, noise)", cka(&x, &noise, true)?);

    // A constant representation centers to zero: similarity is undefined, and
    // the importance convention treats the adapter as maximally important
    // (never a freezing candidate) rather than silently producing a NaN.
    let constant = Tensor::filled(64, 8, 2.0);
    show("cka(x, const)", cka(&x, &constant, true)?);
    let imp = importance(&x, &constant, true)?;
    println!("importance for the undefined case:  {}", imp.score_or(1.0));

    // Importance = 1 − CKA between adapted and adapter-ablated activations.
    let mut nudged = x.clone();
    for v in nudged.data.iter_mut() {
        *v += 0.05 * rng.gen_range(-1.0..1.0);
    }
    let imp = importance(&x, &nudged, true)?;
    println!("importance after a small ablation:  {:.6}", imp.score_or(1.0));
    Ok(())
}
