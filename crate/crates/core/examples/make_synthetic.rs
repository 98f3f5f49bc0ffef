//! Writes a synthetic interaction log in the MovieLens ratings layout.
//!
//! `cargo run --release -p ebr-core --example make_synthetic -- OUT [USERS ITEMS GENRES MIN_LEN MAX_LEN SEED]`

use std::fs::File;
use std::io::BufWriter;

use ebr_core::synth::{generate, SynthConfig};

fn main() -> ebr_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(out) = args.first() else {
        eprintln!("usage: make_synthetic OUT [USERS ITEMS GENRES MIN_LEN MAX_LEN SEED]");
        std::process::exit(2);
    };
    let num = |i: usize, default: u64| args.get(i).map_or(default, |s| s.parse().expect("numeric argument"));
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        users: num(1, d.users as u64) as usize,
        items: num(2, d.items as u64) as usize,
        genres: num(3, d.genres as u64) as usize,
        min_len: num(4, d.min_len as u64) as usize,
        max_len: num(5, d.max_len as u64) as usize,
        seed: num(6, d.seed),
        ..d
    };
    let corpus = generate(&cfg)?;
    corpus.write_movielens(BufWriter::new(File::create(out)?))?;
    eprintln!("{} interactions written to {out}", corpus.interactions.len());
    Ok(())
}
