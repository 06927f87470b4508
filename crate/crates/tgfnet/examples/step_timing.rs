//! Times one training step's phases at a chosen config.
//! Usage: cargo run --release --example step_timing [dim] [n_tokens] [batch]

use std::time::Instant;

use tgfnet::config::RunConfig;
use tgfnet::model::{forward_on_tape, init_params, total_loss};
use tgfnet::nn::{AdamHyper, AdamState};
use tgfnet::synthvqa::{generate_dataset, GenConfig};
use tgfnet::tensor::Tape;
use tgfnet::trainer::build_batch;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dim: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(32);
    let n_tokens: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(12);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
    let mut cfg = RunConfig::default();
    cfg.model.dim = dim;
    cfg.model.mlp_hidden = dim;
    cfg.model.head_hidden = dim;
    cfg.model.n_tokens = n_tokens;
    cfg.model.batch = batch;
    let records = generate_dataset(1, 40, &GenConfig::default()).unwrap();
    let refs: Vec<&_> = records.iter().take(batch).collect();
    let tb = build_batch(&refs, &cfg.model).unwrap();
    let mut store = init_params(&cfg.model, 1);
    let mut adam = AdamState::new(&store);
    // Warm up allocator.
    for _ in 0..2 {
        let mut tape = Tape::new();
        let (outs, bound) = forward_on_tape(&mut tape, &store, &cfg.model, &tb).unwrap();
        let loss = total_loss(&mut tape, &outs, &tb.answers, cfg.model.lambda).unwrap();
        tape.backward(loss).unwrap();
        let g = bound.grads(&tape);
        adam.step(&mut store, &g, &AdamHyper::default());
    }
    let reps = 10;
    let (mut t_fwd, mut t_loss, mut t_bwd, mut t_grad, mut t_adam) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut nodes = 0;
    for _ in 0..reps {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let (outs, bound) = forward_on_tape(&mut tape, &store, &cfg.model, &tb).unwrap();
        let t1 = Instant::now();
        let loss = total_loss(&mut tape, &outs, &tb.answers, cfg.model.lambda).unwrap();
        let t2 = Instant::now();
        tape.backward(loss).unwrap();
        let t3 = Instant::now();
        let g = bound.grads(&tape);
        let t4 = Instant::now();
        adam.step(&mut store, &g, &AdamHyper::default());
        let t5 = Instant::now();
        nodes = tape.len();
        t_fwd += (t1 - t0).as_secs_f64();
        t_loss += (t2 - t1).as_secs_f64();
        t_bwd += (t3 - t2).as_secs_f64();
        t_grad += (t4 - t3).as_secs_f64();
        t_adam += (t5 - t4).as_secs_f64();
    }
    let ms = 1e3 / reps as f64;
    println!(
        "dim={dim} n={n_tokens} b={batch} nodes={nodes}: fwd {:.1}ms loss {:.1}ms bwd {:.1}ms grads {:.1}ms adam {:.1}ms total {:.1}ms",
        t_fwd * ms, t_loss * ms, t_bwd * ms, t_grad * ms, t_adam * ms,
        (t_fwd + t_loss + t_bwd + t_grad + t_adam) * ms
    );
}
