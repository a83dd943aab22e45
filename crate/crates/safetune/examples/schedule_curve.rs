//! The cubic freezing threshold and the warm-up rule, printed as a table you
//! can eyeball: zero during warm-up, a fast-then-flattening ramp to the
//! terminal threshold, then constant.
//!
//! ```text
//! cargo run --example schedule_curve
//! ```

use safetune::schedule::{converged_between, threshold};

fn main() {
    let (tau_final, t_w, t_f) = (0.1, 5, 15);
    println!("cubic ramp with tau_final={tau_final}, t_w={t_w}, t_f={t_f}");
    println!("{:>5}  {:>10}  {}", "epoch", "tau_t", "bar");
    for t in 0..=20 {
        let tau = threshold(t, tau_final, Some(t_w), t_f);
        let bar = "#".repeat((tau / tau_final * 40.0).round() as usize);
        println!("{t:>5}  {tau:>10.6}  {bar}");
    }

    // Unresolved warm-up pins the threshold at zero no matter the epoch.
    assert_eq!(threshold(12, tau_final, None, t_f), 0.0);

    // The warm-up rule: strictly less than 5% relative movement on every
    // adapter, with an absolute escape for scores that sit at zero.
    println!("\nwarm-up settlement checks");
    let cases: [(&str, Vec<f64>, Vec<f64>); 3] = [
        ("2% and 2.5% movement", vec![0.50, 0.20], vec![0.51, 0.205]),
        ("exactly 5% movement", vec![0.50, 0.20], vec![0.50, 0.21]),
        ("zero score, 1e-9 wiggle", vec![0.0, 0.20], vec![1e-9, 0.20]),
    ];
    for (label, prev, cur) in &cases {
        println!("  {label:<28} settled: {}", converged_between(prev, cur));
    }
}
