//! Trains on the synthetic benchmark in memory and prints per-epoch metrics.
//!
//! cargo run --release --example benchmark -- [config] [seed] [key=value ...]
//!
//! Trailing `key=value` pairs override top-level `train` fields (JSON values).

use std::path::Path;
use std::time::Instant;

use mreg::cli::{load_config, RunConfig};
use mreg::trainer::{evaluate, train, Dataset};

fn apply_overrides(cfg: &mut RunConfig, pairs: &[String]) {
    let mut v = serde_json::to_value(&cfg.train).unwrap();
    for p in pairs {
        let (k, x) = p.split_once('=').expect("override is key=value");
        v[k] = serde_json::from_str(x).expect("override value is JSON");
    }
    cfg.train = serde_json::from_value(v).unwrap();
}

fn main() -> mreg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let default = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/benchmark.json");
    let path = args.first().map_or(default, String::as_str);
    let mut cfg = load_config(Path::new(path), &[])?;
    if let Some(seed) = args.get(1) {
        cfg.train.seed = seed.parse().expect("seed is an integer");
    }
    apply_overrides(&mut cfg, args.get(2..).unwrap_or(&[]));
    let config = &cfg.train;

    let t0 = Instant::now();
    let data = Dataset::synthesize(&cfg.dataset, config.seed, &config.dims)?;
    println!("data ready in {:.1?}", t0.elapsed());
    let t1 = Instant::now();
    let out = train(config, &data)?;
    println!("trained in {:.1?}", t1.elapsed());
    for e in &out.history.epochs {
        let steps: Vec<_> = out.history.steps.iter().filter(|s| s.epoch == e.epoch).collect();
        let l2 = steps.iter().map(|s| s.l2cls).sum::<f64>() / steps.len() as f64;
        println!(
            "epoch {:3} loss {:.4} l2cls {:.4} val acc {:6.2} bin {:6.2}",
            e.epoch, e.mean_train_loss, l2, e.val_accuracy, e.val_binary_accuracy
        );
    }
    println!("logit scale {:.3}", out.last.model.head.logit_scale.data()[0]);
    let ev = evaluate(&out.best.model, config, &data.test)?;
    println!(
        "best epoch {} test acc {:.2} bin {:.2} sel {:.1}% means {:?}",
        out.best.epoch,
        ev.report.accuracy,
        ev.binary_accuracy,
        ev.selection.fidelity(),
        ev.mean_regression
    );
    println!("confusion {:?}", ev.report.confusion);
    for g in 0..3u8 {
        let m: Vec<f64> = ev
            .predictions
            .iter()
            .filter(|p| p.grade == g)
            .map(|p| {
                let pr = p.output.mr_probability();
                (pr / (1.0 - pr)).ln()
            })
            .collect();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        let sd = (m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m.len() as f64).sqrt();
        println!("grade {g} stage-1 margin {mean:.3} +- {sd:.3}");
    }
    Ok(())
}
