// temporary perf probe
use std::time::Instant;
use gmflow::train::{train, TrainConfig};
use gmflow::solvers::{sample_batch, SolverConfig, SolverKind};

fn main() {
    gmflow::par::init_thread_pool_from_env();
    // Training speed: default width 128, K=64, batch 512.
    let mut cfg = TrainConfig::toy_default(64, 1);
    cfg.iterations = 60;
    let t0 = Instant::now();
    let r = train(&cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("train: {} iters in {:.2}s -> {:.1} ms/iter (loss {:.3} -> {:.3})",
        cfg.iterations, dt, 1000.0 * dt / cfg.iterations as f64,
        r.curve.first().unwrap().loss, r.curve.last().unwrap().loss);

    // Inference speed: NFE=4 GM-ODE-2 sampling.
    let t0 = Instant::now();
    let n = 50_000;
    let mut scfg = SolverConfig::new(SolverKind::GmOde2, 4, 2);
    scfg.substeps = Some(32);
    let s = sample_batch(&r.model, None, &scfg, n).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("gm-ode-2 nfe=4 n=32: {} chains in {:.2}s -> {:.0} chains/s (first {:?})",
        n, dt, n as f64 / dt, &s.data[..2]);

    let t0 = Instant::now();
    let scfg = SolverConfig::new(SolverKind::GmSde, 1, 2);
    let s = sample_batch(&r.model, None, &scfg, n).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("gm-sde nfe=1: {} chains in {:.2}s -> {:.0} chains/s ({:?})", n, dt, n as f64/dt, &s.data[..2]);

    let t0 = Instant::now();
    let scfg = SolverConfig::new(SolverKind::Euler, 8, 2);
    let s = sample_batch(&r.model, None, &scfg, n).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("euler nfe=8: {} chains in {:.2}s -> {:.0} chains/s ({:?})", n, dt, n as f64/dt, &s.data[..2]);
}
