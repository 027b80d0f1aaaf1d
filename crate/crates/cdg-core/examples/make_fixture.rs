//! Writes a procedural digit corpus in IDX format, for exercising the
//! training CLI without real data.
//!
//! Usage: `cargo run -p cdg-core --example make_fixture -- DIR [TRAIN] [T10K] [SEED]`

use std::path::PathBuf;

use cdg_core::data::fixture::write_idx_fixture;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "fixture".into()));
    let train: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let t10k: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2026);
    let paths = write_idx_fixture(&dir, train, t10k, seed).expect("write fixture");
    println!(
        "wrote {} ({} samples) and {} ({} samples)",
        paths.train_images.display(),
        train,
        paths.t10k_images.display(),
        t10k
    );
}
