// temporary calibration probe for acceptance thresholds
use std::time::Instant;
use gmflow::data_eval::{outlier_mass, tv_distance, tv_noise_floor, CheckerboardSpec, Histogram2D};
use gmflow::solvers::{sample_batch, SolverConfig, SolverKind};
use gmflow::train::{train, TrainConfig};

fn main() {
    gmflow::par::init_thread_pool_from_env();
    let n_eval = 1_000_000;
    let bins = 50;
    let exact = CheckerboardSpec.exact_histogram(bins);
    let floor = tv_noise_floor(n_eval, bins, 999);
    println!("tv noise floor (two-sample, {bins}x{bins}, {n_eval}): {floor:.4}");

    let mut models = Vec::new();
    for k in [64usize, 8, 1] {
        let cfg = TrainConfig::toy_default(k, 42);
        let t0 = Instant::now();
        let r = train(&cfg).unwrap();
        println!("trained K={k}: {:.1}s, loss {:.3} -> {:.3}", t0.elapsed().as_secs_f64(),
                 r.curve[99].loss, r.curve.last().unwrap().loss);
        models.push((k, r.model));
    }

    let eval = |model, kind, nfe, extra: &str| {
        let cfg = SolverConfig::new(kind, nfe, 7);
        let t0 = Instant::now();
        let s = sample_batch(model, None, &cfg, n_eval).unwrap();
        let h = Histogram2D::from_samples(&s.data, bins);
        let tv = tv_distance(&h, &exact).unwrap();
        let om = outlier_mass(&s.data, &CheckerboardSpec);
        println!("{extra} {} nfe={nfe}: tv={tv:.4} outlier={om:.5} ({:.0}s)",
                 kind.name(), t0.elapsed().as_secs_f64());
        tv
    };

    let m64 = &models[0].1;
    eval(m64, SolverKind::GmSde, 1, "K=64");
    eval(m64, SolverKind::GmOde2, 4, "K=64");
    eval(m64, SolverKind::GmSde2, 4, "K=64");
    eval(m64, SolverKind::Euler, 8, "K=64");
    eval(m64, SolverKind::DdpmSmall, 8, "K=64");
    eval(m64, SolverKind::GmSde, 4, "K=64");
    eval(&models[1].1, SolverKind::GmSde, 4, "K=8");
    eval(&models[2].1, SolverKind::GmSde, 4, "K=1");

    // criterion 9 ablation: K=1 gm-sde-2 NFE=8, with and without conversion.
    let m1 = &models[2].1;
    let mut c = SolverConfig::new(SolverKind::GmSde2, 8, 13);
    let s = sample_batch(m1, None, &c, n_eval).unwrap();
    let om_with = outlier_mass(&s.data, &CheckerboardSpec);
    c.second_order_no_convert = true;
    let s = sample_batch(m1, None, &c, n_eval).unwrap();
    let om_without = outlier_mass(&s.data, &CheckerboardSpec);
    println!("ablation K=1 gm-sde-2 nfe=8: outlier with-convert={om_with:.5} no-convert={om_without:.5}");
}
