//! Generates the desk cohort and prints per-user mobility statistics.
//!
//! `cargo run --release --example synth_cohort -- [out.csv]`
//!
//! With a path the target traces are written as session CSV and read back.

use std::path::PathBuf;

use pelican::synth::{generate_cohort, ingest_csv, write_csv_file, CohortSpec};
use pelican::trace::{build_vocab, windowize, Scale};

fn main() -> pelican::Result<()> {
    let out: Option<PathBuf> = std::env::args().nth(1).map(PathBuf::from);
    let spec = CohortSpec::desk();
    let (contributors, targets) = generate_cohort(&spec)?;
    let vocab = build_vocab(&contributors, Scale::Building)?;
    println!(
        "{} contributors, {} targets over {} weeks, {} locations",
        contributors.len(),
        targets.len(),
        spec.weeks,
        vocab.len()
    );

    println!("{:<6} {:>8} {:>9} {:>8} {:>10}", "user", "sessions", "distinct", "windows", "mean dwell");
    for t in &targets {
        let windows = windowize(t, &vocab)?;
        let dwell = t.sessions.iter().map(|s| s.duration as f64).sum::<f64>() / t.len() as f64;
        println!(
            "{:<6} {:>8} {:>9} {:>8} {:>9.0}m",
            t.user_id,
            t.len(),
            t.distinct_locations().len(),
            windows.len(),
            dwell
        );
    }

    let profile = spec.sample_profile(pelican::synth::CohortRole::Target, 0);
    println!(
        "profile of {}: home {}, predictability {:.2}, degree {}",
        profile.user_id, profile.home, profile.predictability, profile.mobility_degree
    );

    if let Some(path) = out {
        write_csv_file(&targets, &path)?;
        let back = ingest_csv(&path)?;
        assert_eq!(back, targets);
        println!("wrote and re-read {}", path.display());
    }
    Ok(())
}
