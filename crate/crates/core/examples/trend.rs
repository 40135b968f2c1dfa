//! Desk-scale comparison of the three training modes on phantom data.
//!
//! Usage: cargo run --release --example trend -- [config|-] [seeds] [workers]

use std::time::Instant;

use dmpct::backbone::SoftmaxBackbone;
use dmpct::config::ExperimentConfig;
use dmpct::cotrain::{run_mode, with_workers, Mode};
use dmpct::metrics::{dsc, evaluate};
use dmpct::phantom::generate_dataset;

fn main() -> dmpct::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let cfg = match args.get(1) {
        Some(p) if p != "-" => ExperimentConfig::parse(&std::fs::read_to_string(p).unwrap())?,
        _ => ExperimentConfig::default(),
    };
    let seeds: u64 = args.get(2).map_or(5, |s| s.parse().unwrap());
    let workers: usize = args.get(3).map_or(1, |s| s.parse().unwrap());
    let start = Instant::now();
    let mut totals = [0.0f64; 3];
    for seed in 0..seeds {
        let g = generate_dataset(&cfg.phantom_spec(), cfg.split_counts(), seed)?;
        let bb = SoftmaxBackbone::new(cfg.num_classes, cfg.train_config());
        let mut cc = cfg.cotrain_config();
        cc.seed = seed;
        let mut line = format!("seed {seed}:");
        for (i, mode) in [Mode::Fcn, Mode::Spsl, Mode::Dmpct].into_iter().enumerate() {
            let t = Instant::now();
            let out = with_workers(workers, || run_mode(mode, &bb, &g.dataset, &cc, None))??;
            let ev = with_workers(workers, || evaluate(&out.bundle, &g.dataset.test, &cc.windows))??;
            let organs: Vec<String> = ev.organs.iter().map(|o| format!("{:.3}", o.mean)).collect();
            let pseudo_q = if out.pseudo_labels.is_empty() {
                String::new()
            } else {
                let q: f64 = out
                    .pseudo_labels
                    .iter()
                    .zip(&g.hidden_masks)
                    .map(|(p, t)| (1..=cfg.num_classes).map(|k| dsc(p, t, k).unwrap()).sum::<f64>() / cfg.num_classes as f64)
                    .sum::<f64>()
                    / out.pseudo_labels.len() as f64;
                format!(" pl={q:.3}")
            };
            line += &format!(
                "  {mode}={:.4} [{}]{pseudo_q} ({:.1}s)",
                ev.overall.mean,
                organs.join(" "),
                t.elapsed().as_secs_f64()
            );
            totals[i] += ev.overall.mean;
        }
        println!("{line}");
    }
    let n = seeds as f64;
    println!(
        "mean: fcn={:.4} spsl={:.4} dmpct={:.4}  gain={:+.2} pts  total {:.1}s",
        totals[0] / n,
        totals[1] / n,
        totals[2] / n,
        100.0 * (totals[2] - totals[0]) / n,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
