//! Generates a small synthetic dubbing corpus on disk.
//!
//! Usage: make_demo_corpus <out_dir> [num_lines] [seed]

use dubvae::fixtures::{small_frame_spec, write_demo_corpus};
use std::path::PathBuf;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir: PathBuf = args
        .next()
        .unwrap_or_else(|| {
            eprintln!("usage: make_demo_corpus <out_dir> [num_lines] [seed]");
            std::process::exit(2);
        })
        .into();
    let num_lines: usize = args
        .next()
        .map(|v| v.parse().expect("num_lines must be an integer"))
        .unwrap_or(8);
    let seed: u64 = args
        .next()
        .map(|v| v.parse().expect("seed must be an integer"))
        .unwrap_or(1);

    let spec = small_frame_spec();
    let corpus = write_demo_corpus(&dir, &spec, num_lines, seed);

    println!("manifest: {}", corpus.manifest.display());
    println!(
        "clean reference: {} / {}",
        corpus.clean_audio.display(),
        corpus.clean_alignment.display()
    );
    println!(
        "{} dialogue lines, {} -> {}",
        corpus.lines.len(),
        corpus.source_locale,
        corpus.target_locale
    );
    for line in &corpus.lines {
        println!(
            "  {}: {} -> {} ({} phrases) \"{}\"",
            line.dialogue_id, line.source_id, line.target_id, line.phrase_count, line.target_text
        );
    }
}
