//! Library flow through files: synthesize, save, reload, detect, cut patches,
//! train a small model, persist it and score the corpus with it.

use goldspot::dataset::{
    build_balanced, load_annotations, load_patch_set, save_annotations, save_patch_set, AnnotatedImage,
    BalanceOptions,
};
use goldspot::eval::{best_f, pr_sweep, SweepOptions};
use goldspot::imaging::{load_image, save_image};
use goldspot::logdetect::{detect, ScaleBank};
use goldspot::nn::TrainConfig;
use goldspot::sda::{self, load_model, save_model, CorruptionSpec};
use goldspot::synth::{generate, SynthSpec};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        width: 160,
        height: 160,
        n_particles: 12,
        n_distractors: 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn files_round_trip_into_a_working_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = Vec::new();
    for i in 0..4u64 {
        let (image, annotations) = generate(&small_spec(100 + i)).unwrap();
        let img_path = dir.path().join(format!("img_{i}.pgm"));
        let csv_path = dir.path().join(format!("img_{i}.csv"));
        save_image(&image, &img_path).unwrap();
        save_annotations(&annotations, &csv_path).unwrap();

        let back = load_image(&img_path).unwrap();
        assert_eq!(back, image);
        let marks = load_annotations(&csv_path).unwrap();
        assert_eq!(marks.len(), annotations.len());
        for (a, b) in marks.iter().zip(&annotations) {
            assert_eq!((a.x, a.y), (b.x, b.y));
        }
        corpus.push(AnnotatedImage {
            id: format!("img_{i}"),
            image: back,
            annotations: marks,
        });
    }

    let bank = ScaleBank::build(4.0, 1).unwrap();
    let found = detect(&corpus[0].image, &bank, 20.0).unwrap();
    assert!(found.len() >= corpus[0].annotations.len());

    let set = build_balanced(&corpus, &BalanceOptions { seed: 5, ..Default::default() }).unwrap();
    assert_eq!(set.class_counts(), (48, 48));
    let patch_dir = dir.path().join("patches");
    save_patch_set(&set, &patch_dir).unwrap();
    let reloaded = load_patch_set(&patch_dir).unwrap();
    assert_eq!(reloaded.patches, set.patches);

    let cfg = |epochs, learning_rate, seed| TrainConfig {
        learning_rate,
        epochs,
        batch_size: 16,
        seed,
    };
    let corruption = CorruptionSpec { level: 0.1, seed: 1 };
    let model = sda::pretrain(&reloaded.patches, &cfg(5, 0.01, 2), &corruption, &[40, 40]).unwrap();
    let model = sda::fine_tune(&model, &reloaded.patches, &cfg(60, 0.1, 3), &[true, true], true).unwrap();
    assert!(sda::accuracy(&model, &reloaded.patches).unwrap() > 0.9);

    let model_path = dir.path().join("model.json");
    save_model(&model, &model_path).unwrap();
    let model = load_model(&model_path).unwrap();

    let thresholds: Vec<f64> = (1..=24).map(|k| 5.0 * f64::from(k)).collect();
    let opts = SweepOptions {
        match_radius: 4.0,
        patch_side: 20,
    };
    let log = pr_sweep(&corpus, &bank, &thresholds, None, &opts).unwrap();
    let both = pr_sweep(&corpus, &bank, &thresholds, Some(&model), &opts).unwrap();
    for pair in log.windows(2) {
        assert!(pair[1].recall <= pair[0].recall);
    }
    for (l, b) in log.iter().zip(&both) {
        assert!(b.recall <= l.recall);
    }
    assert!(best_f(&log).unwrap().f_measure > 0.8);
}

#[test]
fn same_seed_same_model_bytes() {
    let corpus: Vec<AnnotatedImage> = (0..2u64)
        .map(|i| {
            let (image, annotations) = generate(&small_spec(7 + i)).unwrap();
            AnnotatedImage {
                id: i.to_string(),
                image,
                annotations,
            }
        })
        .collect();
    let train = || {
        let set = build_balanced(&corpus, &BalanceOptions { seed: 1, ..Default::default() }).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 8,
            seed: 4,
        };
        let m = sda::pretrain(&set.patches, &cfg, &CorruptionSpec { level: 0.1, seed: 2 }, &[16]).unwrap();
        sda::fine_tune(&m, &set.patches, &cfg, &[true], true).unwrap().to_json().unwrap()
    };
    assert_eq!(train(), train());
}
