use ngpt_core::model::{ModelConfig, Variant};
use ngpt_core::optimizer::OptimConfig;
use ngpt_core::training::{init_state, train, Corpus, TrainOptions};
use std::time::Instant;

fn main() {
    ngpt_core::numerics::tune_allocator();
    let threads: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    ngpt_core::numerics::set_threads(threads);
    let text = ngpt_core::textgen::generate_text(1, 2_000_000);
    let corpus = Corpus::from_bytes(text.into_bytes(), 0.9).unwrap();
    for variant in [Variant::Gpt, Variant::Ngpt] {
        let cfg = ModelConfig::new(variant, 128, 4, 4, 256, 256);
        let ocfg = OptimConfig::for_variant(variant, 1e-3, 5);
        let opts = TrainOptions { batch_size: 32, val_interval: 1000, val_batches: 1, ..Default::default() };
        let mut state = init_state(&cfg, 0).unwrap();
        let t0 = Instant::now();
        train(&cfg, &ocfg, &opts, &corpus, &mut state, None).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("{variant}: {} steps in {:.2}s -> {:.2} s/step ({threads} threads)", 5, dt, dt / 5.0);
    }
}
