//! Character-shuffle noise experiment: trains the standard baseline and the
//! two-stage reweighter on a two-topic synthetic corpus where one topic has
//! been shuffled, then compares clean-topic held-out perplexity.
//!
//! cargo run --release --example noise_experiment -- [seed]

use std::io;

use toremi::corpus::{corrupt_topic, generate_synthetic, split_heldout, SyntheticSpec, Vocab};
use toremi::eval::evaluate;
use toremi::trainer::{Strategy, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let corpus = corrupt_topic(&generate_synthetic(&spec)?, "B", seed)?;
    let (train, heldout) = split_heldout(&corpus, 0.2, seed)?;
    let clean: Vec<_> = heldout.iter().filter(|s| s.has_label("A")).cloned().collect();
    let vocab = Vocab::from_corpus(&corpus)?;

    for strategy in [Strategy::Standard, Strategy::Stage1Only, Strategy::Toremi] {
        let config = TrainConfig {
            seed,
            strategy,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&train, vocab.clone(), config)?;
        let trace = trainer.run(io::sink(), io::sink())?;
        let report = evaluate(trainer.model(), &clean, 8000)?;
        let last = trace.last().expect("at least one interval");
        let b1_max = trace
            .iter()
            .filter(|s| s.step < 4000)
            .filter_map(|s| s.labels.get("B").map(|o| o.weight))
            .fold(0.0, f64::max);
        println!(
            "{strategy:>12}: clean ppl {:.5}  final weights {:?}  max stage-1 B weight {b1_max:.3}",
            report.overall,
            last.labels.iter().map(|(k, v)| (k.as_str(), v.weight)).collect::<Vec<_>>()
        );
    }
    Ok(())
}
