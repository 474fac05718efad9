//! With every mechanism disabled, the adaptation loop must reduce to ordinary
//! supervised fine-tuning.

#[path = "common/sft_oracle.rs"]
mod sft_oracle;

use flashback_core::trainer::adapt;
use sft_oracle::{fixture, reference_loop};

#[test]
fn disabled_mechanisms_reduce_to_plain_fine_tuning() {
    let (data, model, cfg) = fixture();
    let (want, updates) = reference_loop(&model, &data, &cfg);
    assert!(updates >= 200, "{updates} updates");
    let got = adapt(&model, &data, &[], &cfg, |_| {}).unwrap().report;
    assert_eq!(got.counters.optimizer_steps, updates);
    assert_eq!(got.item_losses.len(), want.len());
    let worst = got.item_losses.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("{updates} updates, max per-item loss difference {worst:.3e}");
    assert!(worst <= 1e-10, "max difference {worst}");
    assert!(want.last().unwrap() < &want[0], "the loop should learn");
}
