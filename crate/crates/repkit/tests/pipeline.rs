//! Cross-module pipeline tests at small scale: train on a few synthetic
//! exercises, register a held-out one, fine-tune, and count.

use repkit::corpus::Corpus;
use repkit::fewshot::{count_set, register, REGISTRATION_REPS};
use repkit::net::{ModelConfig, ModelParams};
use repkit::rng::mix;
use repkit::signal::labeled_windows;
use repkit::synthgen::{generate_corpus, GenConfig};
use repkit::train::{
    fine_tune_phase3, subsample_balanced, train_phase1, train_phase2, Phase1Config, Phase2Config,
    Phase3Config,
};

const T_MAX: usize = 100;

fn small_model_config() -> ModelConfig {
    ModelConfig {
        conv_blocks: vec![(12, 5), (24, 3)],
        dropout_p: 0.2,
        pool_size: 2,
        gru_hidden: 24,
        fc_dims: (24, 12),
        t_max: T_MAX,
    }
}

fn train_base(corpus: &Corpus, holdout: &str, seed: u64) -> ModelParams {
    let entries = corpus.entries_excluding(holdout);
    let windows = corpus.windows_for_entries(&entries, T_MAX, 0.5).unwrap();
    let windows = subsample_balanced(windows, 1200, mix(&[seed, 1]));
    let mut model = ModelParams::init(small_model_config(), mix(&[seed, 2])).unwrap();
    train_phase1(
        &windows,
        &Phase1Config {
            epochs: 4,
            seed: mix(&[seed, 3]),
            ..Phase1Config::default()
        },
        &mut model,
    )
    .unwrap();
    train_phase2(
        &windows,
        &Phase2Config {
            epochs: 6,
            seed: mix(&[seed, 4]),
            ..Phase2Config::default()
        },
        &mut model,
    )
    .unwrap();
    model
}

/// Counting the registration recording against its own supports should be
/// nearly exact, and per-subject fine-tuning must not break it.
#[test]
fn registration_stream_counts_itself() {
    let corpus = generate_corpus(
        4,
        3,
        &GenConfig {
            seed: 2024,
            reps_per_set: 10,
            sets: 1,
            ..GenConfig::default()
        },
    )
    .unwrap();
    let holdout = "ex02";
    let base = train_base(&corpus, holdout, 77);

    let meta = corpus.meta(holdout).unwrap();
    let params = meta.window_params().unwrap();
    let sets = corpus.sets_of(holdout, "s00");
    let reg_stream = sets[0]
        .stream
        .clip_to_first_peaks(REGISTRATION_REPS)
        .unwrap();

    let reg_windows = labeled_windows(&reg_stream, &params, T_MAX, 0.5).unwrap();
    let (adapted, _) = fine_tune_phase3(
        &reg_windows,
        &Phase3Config {
            seed: 5,
            ..Phase3Config::default()
        },
        &base,
    )
    .unwrap();
    let support = register(&reg_stream, meta, &adapted).unwrap();

    let result = count_set(&reg_stream, &support, &adapted, &params, 99).unwrap();
    assert_eq!(result.true_count, Some(REGISTRATION_REPS));
    let err = result.abs_error().unwrap();
    assert!(
        err <= 1,
        "counting the registration stream should be near-exact, got predicted {} vs {}",
        result.predicted_count,
        REGISTRATION_REPS
    );
}

/// Fine-tuning on the registration windows must not hurt window-level F1 on
/// held-out sets of the novel exercise (fixed support sampling on both
/// sides).
#[test]
fn fine_tune_does_not_hurt_f1() {
    let corpus = generate_corpus(
        4,
        3,
        &GenConfig {
            seed: 4242,
            reps_per_set: 10,
            sets: 2,
            ..GenConfig::default()
        },
    )
    .unwrap();
    let holdout = "ex01";
    let base = train_base(&corpus, holdout, 11);
    let meta = corpus.meta(holdout).unwrap();
    let params = meta.window_params().unwrap();

    let mut pre_pred = Vec::new();
    let mut post_pred = Vec::new();
    let mut truth = Vec::new();
    for subject in corpus.subjects_for(holdout) {
        let sets = corpus.sets_of(holdout, &subject);
        let reg_stream = sets[0]
            .stream
            .clip_to_first_peaks(REGISTRATION_REPS)
            .unwrap();
        let reg_windows = labeled_windows(&reg_stream, &params, T_MAX, 0.5).unwrap();
        let support_pre = register(&reg_stream, meta, &base).unwrap();
        let (adapted, _) = fine_tune_phase3(
            &reg_windows,
            &Phase3Config {
                seed: 6,
                ..Phase3Config::default()
            },
            &base,
        )
        .unwrap();
        let support_post = register(&reg_stream, meta, &adapted).unwrap();

        for entry in &sets[1..] {
            let windows = labeled_windows(&entry.stream, &params, T_MAX, 0.5).unwrap();
            truth.extend(windows.iter().map(|w| w.label.unwrap()));
            let seed = mix(&[13, entry.set_index as u64]);
            pre_pred.extend(
                repkit::fewshot::classify_windows(&windows, &support_pre, &base, seed).unwrap(),
            );
            post_pred.extend(
                repkit::fewshot::classify_windows(&windows, &support_post, &adapted, seed)
                    .unwrap(),
            );
        }
    }

    let pre = repkit::eval::compute_metrics(&pre_pred, &truth).unwrap();
    let post = repkit::eval::compute_metrics(&post_pred, &truth).unwrap();
    assert!(
        post.f1 >= pre.f1,
        "fine-tuning degraded held-out F1: pre {:.4}, post {:.4}",
        pre.f1,
        post.f1
    );
}
