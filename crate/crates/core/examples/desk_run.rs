//! Trains on a config and reports held-out EER after every epoch next to
//! the CompCode baseline on the same split. Extra `key=value` arguments
//! override the config file.
//!
//! `cargo run --release --example desk_run -- configs/desk.conf epochs=10`

use std::time::Instant;

use sacnet::data::{correlation_stats, split_per_subject};
use sacnet::model::{resolve_classes, RunConfig, Trainer};
use sacnet::pipeline::{compcode_baseline, evaluate, load_data};

fn main() -> sacnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("config path");
    let mut text = std::fs::read_to_string(&path).expect("readable config");
    for kv in args {
        let key = kv.split('=').next().unwrap_or_default().trim().to_string();
        text = text
            .lines()
            .filter(|l| l.split('=').next().map(str::trim) != Some(key.as_str()))
            .collect::<Vec<_>>()
            .join("\n");
        text.push('\n');
        text.push_str(&kv);
    }
    let mut cfg = RunConfig::parse(&text)?;
    let ds = load_data(&cfg)?;
    let c = correlation_stats(&ds);
    println!(
        "within r {:.4} (min {:.4}), between r {:.4}",
        c.within_mean, c.within_min, c.between_mean
    );
    let split = split_per_subject(&ds, cfg.data.train_fraction)?;
    let cc = compcode_baseline(&cfg, &ds, &split.eval)?;
    println!("compcode eer {:.4}%", cc.eer.eer * 100.0);
    resolve_classes(&mut cfg, ds.n_subjects())?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let t = Instant::now();
    for _ in 0..cfg.model.epochs {
        let records = trainer.run_epoch(&ds, &split.train)?;
        let mean = records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64;
        let ev = evaluate(&trainer.model, &cfg, &ds, &split.eval)?;
        println!(
            "epoch {:3} loss {:.5} eval eer {:.4}% ({:.0}s)",
            trainer.epoch,
            mean,
            ev.eer.eer * 100.0,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
