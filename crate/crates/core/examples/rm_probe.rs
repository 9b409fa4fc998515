use prefflow_core::mlp::Activation;
use prefflow_core::prefdata::read_dataset;
use prefflow_core::reward::{eval_rm_accuracy, train_rm, RmSpec, RmTrainConfig};
use prefflow_core::rng::RngStream;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let hidden: Vec<usize> = args.get(1).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![256, 256]);
    let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let act = match args.get(3).map(|s| s.as_str()) { Some("tanh") => Activation::Tanh, _ => Activation::Relu };
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let train = read_dataset(Path::new("/tmp/run-smoke/pairs_train.jsonl")).unwrap();
    let test = read_dataset(Path::new("/tmp/run-smoke/pairs_test.jsonl")).unwrap();
    let spec = RmSpec { signal_dim: 32, hidden: hidden.clone(), activation: act };
    let cfg = RmTrainConfig { hidden, activation: act, iterations: iters, batch: 64, lr };
    let t0 = std::time::Instant::now();
    let (rm, curve) = train_rm(spec, &cfg, &train, &RngStream::new(42, 4)).unwrap();
    let table = eval_rm_accuracy(&rm, &test);
    let train_table = eval_rm_accuracy(&rm, &train);
    println!("{}", table.to_pretty());
    println!("train acc {:.2}%  final train loss {:.4}  elapsed {:.0}s",
        100.0 * train_table.overall().accuracy(),
        curve[curve.len()-50..].iter().sum::<f64>() / 50.0,
        t0.elapsed().as_secs_f64());
}
