use prefflow_core::flowgen::{train_fm, FmTrainConfig, GenSpec};
use prefflow_core::mlp::Activation;
use prefflow_core::rng::RngStream;
use prefflow_core::tasks::TaskParams;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let width: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8000);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let act = match args.get(4).map(|s| s.as_str()) {
        Some("relu") => Activation::Relu,
        _ => Activation::Tanh,
    };
    let spec = GenSpec {
        signal_dim: 32,
        hidden: vec![width, width],
        activation: act,
        cfg_dropout: 0.1,
    };
    let tp = TaskParams::default();
    let cfg = FmTrainConfig { iterations: iters, batch: 64, lr };
    let t0 = std::time::Instant::now();
    let (_gen, curve) = train_fm(spec, &tp, tp.sample_probs, &cfg, &RngStream::new(7, 1)).unwrap();
    let mean = |lo: usize, hi: usize| -> f64 {
        let s = &curve[lo.min(curve.len()-1)..hi.min(curve.len())];
        s.iter().sum::<f64>() / s.len() as f64
    };
    for m in [10, 200, 1000, 2000, 4000, 8000, 12000, 16000, 24000] {
        if m < curve.len() {
            println!("iter {:>6}: {:.3}", m, mean(m.saturating_sub(20), m + 20));
        }
    }
    println!("final mean(last 100): {:.3}  ratio from iter10: {:.2}x  elapsed {:.0}s",
        mean(curve.len()-100, curve.len()), curve[9] / mean(curve.len()-10, curve.len()), t0.elapsed().as_secs_f64());
}
