use gntk_core::data::{DatasetSplit, FeatureMatrix};
use gntk_core::graph::generate_sbm;
use gntk_core::network::{train_gcn, GcnConfig};
use gntk_core::sampling::SampleConfig;
use rayon::prelude::*;

fn main() {
    let (g, labels) = generate_sbm(200, 0.1, 0.01, 7).unwrap();
    let f = FeatureMatrix::<f64>::identity(200);
    let split = DatasetSplit::stratified(&labels, 20, 0, 11).unwrap();
    // lr grid, depth 2 vs 16
    for depth in [2usize, 16] {
        for lr in [0.5, 0.8, 1.2, 2.0] {
            let cfg = GcnConfig::<f64>::relu_eoc(depth, 1);
            match train_gcn(&g, &f, &labels, &split, &cfg, 256, 300, lr, None, 1) {
                Ok(h) => {
                    let last = h.last().unwrap();
                    println!(
                        "depth {depth:2} lr {lr}: loss {:.4} train {:.3} test {:.3}",
                        last.loss, last.train_accuracy, last.test_accuracy
                    );
                }
                Err(e) => println!("depth {depth:2} lr {lr}: {e}"),
            }
        }
    }
    // 5 seeds, depth 16, with and without critical sampling
    let results: Vec<(u64, f64, f64)> = (0..5u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = GcnConfig::<f64>::relu_eoc(16, 1);
            let plain = train_gcn(&g, &f, &labels, &split, &cfg, 256, 300, 0.5, None, seed)
                .map(|h| h.last().unwrap().test_accuracy)
                .unwrap_or(f64::NAN);
            let sampler = SampleConfig::critical(1000 + seed);
            let crit = train_gcn(&g, &f, &labels, &split, &cfg, 256, 300, 0.5, Some(&sampler), seed)
                .map(|h| h.last().unwrap().test_accuracy)
                .unwrap_or(f64::NAN);
            (seed, plain, crit)
        })
        .collect();
    for (seed, plain, crit) in &results {
        println!("seed {seed}: vanilla {plain:.3} critical {crit:.3}");
    }
}
