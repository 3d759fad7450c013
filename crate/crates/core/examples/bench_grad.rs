use dsem_kalman::model::load_model;
use dsem_kalman::posterior::{GradMode, MarginalTarget, PosteriorOpts, Target};
use dsem_kalman::simgen::{simulate, SimConfig};
use std::time::Instant;

fn main() {
    let spec = load_model("eg1").unwrap();
    let sc = SimConfig { n: 20, t_len: 50, seed: 1, ..SimConfig::for_spec(&spec) };
    let sim = simulate(&spec, &sc).unwrap();
    for (label, grad_mode) in [("checkpointed", GradMode::Checkpointed), ("fulltape", GradMode::FullTape)] {
        let mut opts = PosteriorOpts::default();
        opts.grad = grad_mode;
        let target = MarginalTarget::new(&spec, &sim.data, opts).unwrap();
        let dim = target.dim();
        let x: Vec<f64> = (0..dim).map(|k| 0.05 * ((k % 9) as f64 - 4.0)).collect();
        let mut g = vec![0.0; dim];
        // warm
        target.logp_grad(&x, &mut g);
        let t0 = Instant::now();
        let reps = 50;
        for _ in 0..reps { target.logp_grad(&x, &mut g); }
        let per = t0.elapsed().as_secs_f64() / reps as f64;
        println!("{label}: {:.3} ms per grad eval (dim {dim})", per * 1e3);
    }
    let target = MarginalTarget::new(&spec, &sim.data, PosteriorOpts::default()).unwrap();
    let dim = target.dim();
    let x: Vec<f64> = (0..dim).map(|k| 0.05 * ((k % 9) as f64 - 4.0)).collect();
    target.logp(&x);
    let t0 = Instant::now();
    let reps = 200;
    for _ in 0..reps { target.logp(&x); }
    println!("logp (f64): {:.3} ms per eval", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
