use std::path::Path;

use xmq_core::captioner::{ModelConfig, TrainConfig};
use xmq_core::dataset::generate_synthetic;
use xmq_core::detector::DetectorTrainConfig;
use xmq_core::foa::FoaConfig;
use xmq_core::pipeline::{
    evaluate_run, run_inference, run_training, run_training_on, verify_manifest, DataSource, Layout, PipelineConfig,
    Prediction, Predictor, Run, Stage,
};
use xmq_core::Error;

fn tiny(out: &Path) -> PipelineConfig {
    PipelineConfig {
        seed: 5,
        data: DataSource::Synthetic { images: 20, seed: 2 },
        out_dir: out.to_path_buf(),
        detector_train: DetectorTrainConfig {
            epochs: 2,
            ..Default::default()
        },
        foa: FoaConfig {
            population: 4,
            iterations: 2,
            ..Default::default()
        },
        foa_max_rows: 40,
        captioner: ModelConfig {
            d_model: 16,
            heads: 2,
            blocks: 1,
            ffn: 16,
            ..Default::default()
        },
        captioner_train: TrainConfig {
            epochs: 1,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn reruns_produce_identical_manifests_listing_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_training(&tiny(&dir.path().join("a"))).unwrap();
    let b = run_training(&tiny(&dir.path().join("b"))).unwrap();
    assert_eq!(a.manifest, b.manifest);
    let stages: Vec<&str> = a.manifest.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(stages, Stage::ALL.map(Stage::name));
    assert!(a.manifest.stages.iter().all(|s| !s.outputs.is_empty()));
    let bytes_a = std::fs::read(dir.path().join("a/manifest.json")).unwrap();
    let bytes_b = std::fs::read(dir.path().join("b/manifest.json")).unwrap();
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(a.timings.ggt.len(), 20);

    verify_manifest(dir.path().join("a")).unwrap();
    std::fs::write(dir.path().join("a/foa/trace.csv"), "tampered").unwrap();
    let err = verify_manifest(dir.path().join("a")).unwrap_err();
    assert!(err.to_string().contains("foa/trace.csv"), "{err}");

    let other = run_training(&PipelineConfig {
        seed: 6,
        ..tiny(&dir.path().join("c"))
    })
    .unwrap();
    assert_ne!(other.manifest, a.manifest);
}

#[test]
fn missing_stage_input_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ds = generate_synthetic(20, 2).unwrap();
    let mut run = Run::new(&cfg, &ds).unwrap();
    run.run_stage(Stage::Preprocess).unwrap();
    let first = Layout::new(dir.path()).preprocessed(&xmq_core::pipeline::stem(&ds.samples[run.train[0]]));
    std::fs::remove_file(first).unwrap();
    let err = run.run_stage(Stage::DetectTrain).unwrap_err();
    assert!(
        matches!(
            &err,
            Error::Stage {
                stage: "detect-train",
                ..
            }
        ),
        "{err}"
    );
    assert!(!err.is_validation());
    let err = run.run_stage(Stage::Foa).unwrap_err();
    assert!(err.to_string().contains("foa"), "{err}");
}

#[test]
fn inference_switches_modes_and_records_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg = tiny(&run_dir);
    let ds = generate_synthetic(20, 2).unwrap();
    run_training_on(&cfg, &ds).unwrap();
    let img = dir.path().join("probe.png");
    ds.samples[0].image.save(&img).unwrap();

    let cap = run_inference(&run_dir, &img, None, dir.path().join("inf1")).unwrap();
    assert!(matches!(cap.prediction, Prediction::Caption(_)));
    let again = run_inference(run_dir.join("model.xmq"), &img, None, dir.path().join("inf2")).unwrap();
    assert_eq!(cap.prediction, again.prediction);
    assert!(cap.provenance.iter().any(|f| f.path.ends_with("model.xmq")));
    assert!(cap.provenance.iter().any(|f| f.path.ends_with("graph.json")));
    for f in &cap.provenance {
        assert!(Path::new(&f.path).is_file(), "{}", f.path);
    }
    assert!(dir.path().join("inf1/result.json").is_file());

    let q = &ds.samples[0].questions[0].question;
    let vqa = run_inference(&run_dir, &img, Some(q), dir.path().join("inf3")).unwrap();
    let Prediction::Answer(ans) = vqa.prediction else {
        panic!("expected an answer")
    };
    let p = Predictor::load(&run_dir).unwrap();
    assert!(p.prototypes().unwrap().names.contains(&ans));

    let summary = evaluate_run(&run_dir, Some(&ds)).unwrap();
    assert_eq!(summary.images, 4);
    assert!(summary.report.bleu1.is_some() && summary.report.ggt.is_some());
}

#[test]
fn missing_model_names_the_training_command() {
    let dir = tempfile::tempdir().unwrap();
    let err = Predictor::load(dir.path()).err().unwrap();
    assert!(err.is_validation());
    assert!(err.to_string().contains("xmq train"), "{err}");
}
