// focused probe: effect of spread mean-bias init on K=64 single-step quality
use std::time::Instant;
use gmflow::data_eval::{outlier_mass, tv_distance, CheckerboardSpec, Histogram2D};
use gmflow::solvers::{sample_batch, SolverConfig, SolverKind};
use gmflow::train::{train, TrainConfig};

fn main() {
    gmflow::par::init_thread_pool_from_env();
    let bins = 50;
    let exact = CheckerboardSpec.exact_histogram(bins);
    for iters in [4000usize, 8000] {
        let mut cfg = TrainConfig::toy_default(64, 42);
        cfg.iterations = iters;
        let t0 = Instant::now();
        let r = train(&cfg).unwrap();
        let n = 400_000;
        let s = sample_batch(&r.model, None, &SolverConfig::new(SolverKind::GmSde, 1, 7), n).unwrap();
        let h = Histogram2D::from_samples(&s.data, bins);
        let tv = tv_distance(&h, &exact).unwrap();
        let om = outlier_mass(&s.data, &CheckerboardSpec);
        let s4 = sample_batch(&r.model, None, &SolverConfig::new(SolverKind::GmSde, 4, 7), n).unwrap();
        let h4 = Histogram2D::from_samples(&s4.data, bins);
        let tv4 = tv_distance(&h4, &exact).unwrap();
        println!("iters={iters}: loss {:.3} -> {:.3}, nfe1: tv={tv:.4} om={om:.4}; nfe4: tv={tv4:.4} ({:.0}s)",
            r.curve[99].loss, r.curve.last().unwrap().loss, t0.elapsed().as_secs_f64());
    }
}
