//! Times training steps for a given kernel schedule and input size.
//!
//! `cargo run --release --example step_timing -- 64 7,17,35 8`

use std::time::Instant;

use sacnet::data::{generate_synthetic, split_per_subject, SyntheticSpec};
use sacnet::model::{plan_epoch, RunConfig, Trainer};

fn main() -> sacnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let hw: usize = args.get(1).map_or(64, |s| s.parse().expect("input side"));
    let kernels = args.get(2).map_or("7,17,35".to_string(), |s| s.clone());
    let batch: usize = args.get(3).map_or(8, |s| s.parse().expect("batch size"));
    let mut cfg = RunConfig::parse(&format!("input_hw={hw}\nbranch_kernel_sizes={kernels}\nbatch_size={batch}"))?;
    let ds = generate_synthetic(&SyntheticSpec {
        image_hw: hw,
        ..Default::default()
    })?;
    let split = split_per_subject(&ds, 0.5)?;
    cfg.model.n_classes = Some(ds.n_subjects());
    let mut trainer = Trainer::new(cfg)?;
    let labels: Vec<usize> = ds.samples.iter().map(|s| s.subject).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let plan = plan_epoch(&mut rng, &split.train, &labels, batch);
    for b in plan.iter().take(3) {
        let t = Instant::now();
        let r = trainer.train_step(&ds, b)?;
        println!("step {} loss {:.4} {:.3}s", r.step, r.loss, t.elapsed().as_secs_f64());
    }
    Ok(())
}
