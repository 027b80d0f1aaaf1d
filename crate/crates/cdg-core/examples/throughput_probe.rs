//! Quick wall-clock probe of the model kernels at training shapes.

use std::time::Instant;

use cdg_core::data::fixture;
use cdg_core::nn::{backward_into, forward_into, init_params, Batch, ModelArrays, NnWorkspace};

fn main() {
    let ds = fixture::synthetic_digits(100, 1);
    let batch = Batch::gather(&ds, &(0..100).collect::<Vec<_>>()).unwrap();
    let params = init_params(1);

    let arrays = ModelArrays::<f32>::from_params(&params);
    let mut ws = NnWorkspace::<f32>::new();
    let mut grads = ModelArrays::<f32>::zeros();
    forward_into(&arrays, &batch, &mut ws);

    let reps = 10;
    let t = Instant::now();
    for _ in 0..reps {
        forward_into(&arrays, &batch, &mut ws);
    }
    let fwd = t.elapsed() / reps;
    let t = Instant::now();
    for _ in 0..reps {
        forward_into(&arrays, &batch, &mut ws);
        backward_into(&arrays, &batch, &mut ws, &mut grads);
    }
    let fwdbwd = t.elapsed() / reps;
    // 17.5 MFLOP per image forward.
    let gflops = 100.0 * 17.5e-3 / fwd.as_secs_f64();
    println!("f32 forward batch=100: {:?} ({:.1} GFLOP/s)", fwd, gflops);
    println!("f32 forward+backward batch=100: {:?}", fwdbwd);

    let arrays = ModelArrays::<f64>::from_params(&params);
    let mut ws = NnWorkspace::<f64>::new();
    let mut grads = ModelArrays::<f64>::zeros();
    forward_into(&arrays, &batch, &mut ws);
    let t = Instant::now();
    for _ in 0..reps {
        forward_into(&arrays, &batch, &mut ws);
    }
    let fwd64 = t.elapsed() / reps;
    let t = Instant::now();
    for _ in 0..reps {
        forward_into(&arrays, &batch, &mut ws);
        backward_into(&arrays, &batch, &mut ws, &mut grads);
    }
    let fwdbwd64 = t.elapsed() / reps;
    println!("f64 forward batch=100: {:?}", fwd64);
    println!("f64 forward+backward batch=100: {:?}", fwdbwd64);

    // Desk-scale epoch estimate: 20 train batches fwd+bwd, 100 eval batches.
    let epoch = fwdbwd.as_secs_f64() * 20.0 + fwd.as_secs_f64() * 120.0;
    println!("estimated f32 epoch (train 2000 + eval 12000): {:.2} s", epoch);
    println!("estimated trial (20 epochs): {:.1} s", epoch * 20.0);
}
