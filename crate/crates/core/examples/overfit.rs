//! Overfits the tiny preset on one synthetic phantom and reports DSC.
//!
//! Usage: `cargo run --release --example overfit -- [csw_sa|sw_sa] [iterations] [lr] [crop] [batch]`

use std::time::Instant;

use cisunet_core::data::{normalize_intensity, synthetic_phantom, LabelMap};
use cisunet_core::inference::{labels_from_logits, sliding_window_predict, Blend};
use cisunet_core::metrics::{dsc, evaluate_case, BinaryMask};
use cisunet_core::train::{Trainer, TrainingCase};
use cisunet_core::{preset, AttentionVariant, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cisunet_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant: AttentionVariant = args
        .first()
        .map_or(Ok(AttentionVariant::CswSa), |s| s.parse())?;
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let crop: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);

    let mut run = RunConfig::default();
    run.model = preset("tiny")?.with_attention(variant);
    run.model.num_classes = 3;
    run.train.iterations = iterations;
    run.train.learning_rate = lr;
    run.train.batch_size = batch;
    run.data.samples_per_volume = batch;
    run.train.patch_size = [crop; 3];
    run.train.validate_every = 0;

    let (image, labels) = synthetic_phantom(&mut ChaCha8Rng::seed_from_u64(7), 64, 3)?;
    let image = normalize_intensity(&image, run.data.intensity_window)?;
    let case = TrainingCase {
        id: "phantom".into(),
        image,
        labels,
    };
    let mut trainer = Trainer::new(run)?;
    let samplers = trainer.samplers(std::slice::from_ref(&case))?;
    let start = Instant::now();
    for i in 1..=iterations {
        let loss = trainer.step(&samplers)?;
        if i % 10 == 0 || i == 1 {
            let logits = sliding_window_predict(
                &case.image,
                &trainer.model(),
                [64; 3],
                0.5,
                Blend::Gaussian,
            )?;
            let pred = labels_from_logits(&logits, case.image.geometry().clone())?;
            let m = evaluate_case("phantom", &pred, &case.labels, &LabelMap::generic(3))?;
            let fg = |v: &cisunet_core::data::LabelVolume| {
                BinaryMask::new(v.dims(), v.data().iter().map(|&l| l != 0).collect())
            };
            let binary = dsc(&fg(&pred)?, &fg(&case.labels)?)?;
            println!(
                "iter {i:4} loss {loss:.4} fg {binary:.4} mean {:.4} ({:.4}, {:.4}) t {:.1}s",
                m.mean_dsc(),
                m.classes[0].dsc,
                m.classes[1].dsc,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
