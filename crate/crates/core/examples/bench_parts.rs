use dsem_kalman::compile::{compile_participant, CompileOptions};
use dsem_kalman::kalman::{filter_univariate, Obs, RunState, univariate_segment};
use dsem_kalman::model::load_model;
use dsem_kalman::tape::{Real, Tape, Var};
use std::time::Instant;

fn main() {
    let spec = load_model("eg1").unwrap();
    let theta = vec![0.1; 8];
    let eta2 = vec![0.1, 0.2, -0.1, 0.05];
    let copts = CompileOptions::default();
    let reps = 20000;

    // compile on a tape
    let t0 = Instant::now();
    let mut nodes = 0;
    for _ in 0..reps {
        let tape = Tape::new();
        let th: Vec<Var> = theta.iter().map(|&v| tape.leaf(v)).collect();
        let e2: Vec<Var> = eta2.iter().map(|&v| tape.leaf(v)).collect();
        let pm = compile_participant(&spec, tape.constant(0.0), &th, &e2, &[], &[], 50, &copts).unwrap();
        nodes = tape.len();
        std::hint::black_box(&pm);
    }
    println!("compile+init on tape: {:.2} us ({} nodes)", t0.elapsed().as_secs_f64()/reps as f64*1e6, nodes);

    // compile f64
    let t0 = Instant::now();
    for _ in 0..reps {
        let pm = compile_participant(&spec, 1.0f64, &theta, &eta2, &[], &[], 50, &copts).unwrap();
        std::hint::black_box(&pm);
    }
    println!("compile+init f64: {:.2} us", t0.elapsed().as_secs_f64()/reps as f64*1e6);

    // filter 8 steps on tape (segment-sized)
    let tape = Tape::new();
    let th: Vec<Var> = theta.iter().map(|&v| tape.leaf(v)).collect();
    let e2: Vec<Var> = eta2.iter().map(|&v| tape.leaf(v)).collect();
    let pm = compile_participant(&spec, tape.constant(0.0), &th, &e2, &[], &[], 50, &copts).unwrap();
    let proto = tape.constant(0.0);
    let values: Vec<Var> = (0..50).map(|t| proto.lit(0.1 * t as f64)).collect();
    let obs = Obs::complete(50, 1, values).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut st = RunState::from_init(&pm.init);
        let ll = univariate_segment(&pm, &obs, &mut st, 0, 8, None).unwrap();
        std::hint::black_box(ll);
    }
    println!("8-step segment on existing tape: {:.2} us", t0.elapsed().as_secs_f64()/reps as f64*1e6);

    // full 50-step filter f64
    let pmf = compile_participant(&spec, 1.0f64, &theta, &eta2, &[], &[], 50, &copts).unwrap();
    let valf: Vec<f64> = (0..50).map(|t| 0.1 * t as f64).collect();
    let obsf = Obs::complete(50, 1, valf).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let out = filter_univariate(&pmf, &obsf, false).unwrap();
        std::hint::black_box(out.loglik);
    }
    println!("50-step filter f64: {:.2} us", t0.elapsed().as_secs_f64()/reps as f64*1e6);

    // tape create/drop + 88 leaves
    let xs = vec![0.3; 88];
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|&v| tape.leaf(v)).collect();
        std::hint::black_box(&leaves);
    }
    println!("tape + 88 leaves: {:.2} us", t0.elapsed().as_secs_f64()/reps as f64*1e6);
}
