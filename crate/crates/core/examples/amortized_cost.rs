//! Embedding cost tables: bits per byte and nats per token spent on one
//! `n_p * b_p`-bit embedding per window, at a given bytes-per-token ratio.
//!
//!     cargo run --example amortized_cost -- 3.92

use entroscope::entropy::{amortized_bpb, amortized_loss};

fn main() {
    let bpt: f64 = std::env::args().nth(1).map_or(3.92, |s| s.parse().expect("bytes per token"));
    println!("bytes/token {bpt}");
    println!("{:>6} {:>4} {:>6} {:>9} {:>9}", "n_p", "b_p", "n_ctx", "bpb_a", "L_a");
    for n_ctx in [256, 512, 1024] {
        for (n_p, b_p) in [(64, 8), (128, 8), (256, 8), (1024, 4)] {
            let a = amortized_bpb(n_p, b_p, n_ctx, bpt);
            println!("{n_p:>6} {b_p:>4} {n_ctx:>6} {a:>9.4} {:>9.4}", amortized_loss(a, bpt));
        }
    }
}
