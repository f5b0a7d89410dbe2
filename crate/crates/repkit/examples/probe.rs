// Scratch calibration probe (not part of the deliverable).

use std::time::Instant;

use repkit::eval::{loo_harness, LooConfig};
use repkit::net::ModelConfig;
use repkit::synthgen::{generate_corpus, GenConfig};
use repkit::train::{Phase1Config, Phase2Config, Phase3Config};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REPKIT_LOG", "info")).init();
    let args: Vec<String> = std::env::args().collect();
    let n_ex: usize = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(3);
    let n_subj: usize = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(2);
    let cap: usize = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(1500);
    let e1: usize = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(4);
    let e2: usize = args.get(5).map(|v| v.parse().unwrap()).unwrap_or(6);
    let seed: u64 = args.get(6).map(|v| v.parse().unwrap()).unwrap_or(7);

    let t0 = Instant::now();
    let corpus = generate_corpus(
        n_ex,
        n_subj,
        &GenConfig {
            seed,
            reps_per_set: 15,
            sets: 4,
            ..GenConfig::default()
        },
    )
    .unwrap();
    println!(
        "corpus: {} streams in {:.1}s",
        corpus.entries.len(),
        t0.elapsed().as_secs_f64()
    );

    let cfg = LooConfig {
        seed,
        model: ModelConfig {
            conv_blocks: vec![(16, 5), (32, 3)],
            dropout_p: 0.2,
            pool_size: 2,
            gru_hidden: 40,
            fc_dims: (32, 24),
            t_max: 100,
        },
        phase1: Phase1Config {
            epochs: e1,
            batch_size: 64,
            ..Phase1Config::default()
        },
        phase2: Phase2Config {
            epochs: e2,
            batch_size: 64,
            ..Phase2Config::default()
        },
        phase3: Phase3Config::default(),
        overlap_ratio: 0.5,
        train_window_cap: Some(cap),
        cache_dir: None,
    };

    let t1 = Instant::now();
    let report = loo_harness(&corpus, &cfg).unwrap();
    let elapsed = t1.elapsed().as_secs_f64();

    println!("\n== LOO done in {elapsed:.1}s ==");
    for e in &report.per_exercise {
        let within_1 = e
            .count_results
            .iter()
            .filter(|r| r.abs_error().map(|x| x <= 1).unwrap_or(false))
            .count();
        println!(
            "{}: pre_f1={:.3} post_f1={:.3} e0={:.0}% within1={}/{}",
            e.exercise_id,
            e.pre_metrics.f1,
            e.post_metrics.f1,
            e.histogram.buckets[0],
            within_1,
            e.count_results.len()
        );
    }
    let improved = report
        .per_exercise
        .iter()
        .filter(|e| e.post_metrics.f1 >= e.pre_metrics.f1)
        .count();
    let all: Vec<&repkit::fewshot::CountResult> = report
        .per_exercise
        .iter()
        .flat_map(|e| e.count_results.iter())
        .collect();
    let within_1 = all
        .iter()
        .filter(|r| r.abs_error().map(|x| x <= 1).unwrap_or(false))
        .count();
    println!(
        "macro_f1_pre={:.4} macro_f1_post={:.4} improved={}/{} within_1={}/{} ({:.1}%)",
        report.macro_f1_pre(),
        report.macro_f1_post(),
        improved,
        report.per_exercise.len(),
        within_1,
        all.len(),
        100.0 * within_1 as f64 / all.len().max(1) as f64
    );
}
