use prefflow_core::flowgen::Generator;
use prefflow_core::params::ParamVector;
use prefflow_core::prefdata::{gen_candidate_sets, label_all, CandidateGenConfig};
use prefflow_core::rng::RngStream;
use prefflow_core::tasks::TaskParams;
use prefflow_core::config::ExperimentConfig;

fn main() {
    let cfg = ExperimentConfig::default();
    let params = ParamVector::load(std::path::Path::new("/tmp/run-smoke/base.ckpt")).unwrap();
    let gen = Generator::from_params(cfg.gen_spec(), params);
    let tp = TaskParams::default();
    let sets = gen_candidate_sets(&gen, &tp, tp.sample_probs, 400, &CandidateGenConfig::default(), &RngStream::new(42, 2)).unwrap();
    for eps in [0.07, 0.08, 0.09] {
        let (_, stats) = label_all(&tp, &sets, eps);
        println!("eps {:>5}: discard {:.1}%  conflicts fill {:.0}%", eps,
            100.0 * stats.discard_rate(),
            100.0 * stats.conflict_fraction(prefflow_core::tasks::TaskId::Fill).unwrap_or(0.0));
    }
}
