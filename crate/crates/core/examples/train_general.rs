//! Trains a general model on the desk cohort's contributors and reports its
//! accuracy on their held-out sessions.
//!
//! `cargo run --release --example train_general -- [hidden] [epochs]`

use std::time::Instant;

use pelican::seqnet::{init_model, mean_loss, train, ArchConfig, TrainConfig};
use pelican::synth::{generate_cohort, split_train_test, CohortSpec};
use pelican::trace::{build_vocab, windowize, Scale};

fn main() -> pelican::Result<()> {
    let mut args = std::env::args().skip(1);
    let hidden: usize = args.next().map_or(64, |a| a.parse().expect("hidden size"));
    let epochs: usize = args.next().map_or(20, |a| a.parse().expect("epochs"));

    let spec = CohortSpec::desk();
    let (contributors, _) = generate_cohort(&spec)?;
    let vocab = build_vocab(&contributors, Scale::Building)?;
    let mut train_w = Vec::new();
    let mut test_w = Vec::new();
    for t in &contributors {
        let (tr, te) = split_train_test(t, 0.8)?;
        train_w.extend(windowize(&tr, &vocab)?);
        test_w.extend(windowize(&te, &vocab)?);
    }
    train_w.sort_by_key(|w| w.time);
    let n_val = train_w.len() / 10;
    let val_w = train_w.split_off(train_w.len() - n_val);
    println!(
        "{} locations, {} train / {} val / {} test windows",
        vocab.len(),
        train_w.len(),
        val_w.len(),
        test_w.len()
    );

    let arch = ArchConfig::stacked(vocab.encoded_width(), hidden, 2, vocab.len());
    let model = init_model(&arch, &vocab, 7)?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: epochs,
        patience: 5,
        seed: 7,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (model, history) = train(&model, &train_w, &val_w, &cfg)?;
    let elapsed = start.elapsed();

    let probs = model.predict_windows(&test_w);
    let hits = probs
        .rows()
        .into_iter()
        .zip(&test_w)
        .filter(|(p, w)| pelican::seqnet::argsort_desc(p.as_slice().unwrap())[0] == w.label)
        .count();
    println!(
        "{} epochs in {:.1?} ({:.2?}/epoch), best epoch {:?}",
        history.epochs_run(),
        elapsed,
        elapsed / history.epochs_run().max(1) as u32,
        history.best_epoch
    );
    println!(
        "test loss {:.4}, top-1 {:.2}%",
        mean_loss(&model, &test_w),
        100.0 * hits as f64 / test_w.len() as f64
    );
    Ok(())
}
