use std::path::Path;

use pseudolabel::adapter::{
    run_predict, run_train, AdapterEndpoint, AdapterError, Detector, PredictJob, ProcessDetector, Role, WORKDIR_ENV,
};
use pseudolabel::augment::AugmentationSpec;
use pseudolabel::dataio::{DataError, DatasetManifest, ImageRecord};
use pseudolabel::fusion::FusionConfig;
use pseudolabel::geometry::{BBox, Instance};
use pseudolabel::pipeline::{label_images, LabelingRule};

fn images() -> DatasetManifest {
    let img = |id, w, h| ImageRecord {
        id,
        file_name: format!("{id}.png"),
        width: w,
        height: h,
    };
    DatasetManifest::new(vec![img(1, 100, 50), img(2, 40, 40)], "test").unwrap()
}

fn predict(command: &str) -> AdapterEndpoint {
    AdapterEndpoint::new(command, Role::Predict, 30).unwrap()
}

fn job(dir: &Path, view: AugmentationSpec) -> PredictJob {
    let manifest = dir.join("images.json");
    std::fs::write(&manifest, images().to_canonical_json()).unwrap();
    PredictJob {
        manifest,
        prompt: "spacecraft".into(),
        augmentation: view,
        artifact: None,
    }
}

/// Predict command that writes `body` to `{out}`.
fn writes(dir: &Path, body: &str) -> AdapterEndpoint {
    let src = dir.join("results.src");
    std::fs::write(&src, body).unwrap();
    predict(&format!("cp '{}' {{out}} # {{job}}", src.display()))
}

#[test]
fn results_come_back_in_the_view_frame() {
    let t = tempfile::tempdir().unwrap();
    let ep = writes(
        t.path(),
        r#"[{"image_id": 1, "bbox": [10, 5, 40, 20], "score": 0.9, "aug": "vflip"}]"#,
    );
    let sets = run_predict(&ep, &job(t.path(), AugmentationSpec::VFlip), &images(), &t.path().join("w")).unwrap();
    assert_eq!(sets.len(), 2);
    assert_eq!(sets[0].view, AugmentationSpec::VFlip);
    assert!(!sets[0].original_frame);
    assert_eq!(*sets[0].instances[0].bbox(), BBox::new(0.1, 0.1, 0.5, 0.5).unwrap());
    assert!(sets[1].instances.is_empty());
    let back = sets[0].inverse_mapped();
    assert_eq!(*back.instances[0].bbox(), BBox::new(0.1, 0.5, 0.5, 0.9).unwrap());
}

#[test]
fn nonzero_exit_carries_code_and_stderr() {
    let t = tempfile::tempdir().unwrap();
    let ep = predict("echo 'model weights not found' >&2; exit 3 # {job} {out}");
    match run_predict(&ep, &job(t.path(), AugmentationSpec::Identity), &images(), t.path()) {
        Err(AdapterError::Exit { code, stderr, .. }) => {
            assert_eq!(code, Some(3));
            assert!(stderr.contains("model weights not found"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_json_names_file_and_offset() {
    let t = tempfile::tempdir().unwrap();
    let ep = writes(t.path(), "[\n  {\"image_id\": 1,\n  oops\n]");
    match run_predict(&ep, &job(t.path(), AugmentationSpec::Identity), &images(), t.path()) {
        Err(AdapterError::Schema(DataError::Json { source_name, line, column, .. })) => {
            assert!(source_name.ends_with(".results.json"), "{source_name}");
            assert_eq!(line, 3);
            assert!(column > 0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_image_is_a_schema_error() {
    let t = tempfile::tempdir().unwrap();
    let ep = writes(t.path(), r#"[{"image_id": 99, "bbox": [0, 0, 1, 1], "score": 0.5}]"#);
    let err = run_predict(&ep, &job(t.path(), AugmentationSpec::Identity), &images(), t.path()).unwrap_err();
    assert!(matches!(err, AdapterError::Schema(_)), "{err:?}");
    assert!(err.to_string().contains("99"));
}

#[test]
fn mismatched_view_token_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let ep = writes(t.path(), r#"[{"image_id": 1, "bbox": [0, 0, 10, 10], "score": 0.5, "aug": "hflip"}]"#);
    let err = run_predict(&ep, &job(t.path(), AugmentationSpec::VFlip), &images(), t.path()).unwrap_err();
    assert!(matches!(err, AdapterError::ViewMismatch { .. }), "{err:?}");
}

#[test]
fn missing_output_is_an_error() {
    let t = tempfile::tempdir().unwrap();
    let ep = predict("true {job} {out}");
    let err = run_predict(&ep, &job(t.path(), AugmentationSpec::Identity), &images(), t.path()).unwrap_err();
    assert!(matches!(err, AdapterError::MissingArtifact(_)), "{err:?}");
}

#[test]
fn missing_model_artifact_fails_before_invocation() {
    let t = tempfile::tempdir().unwrap();
    let marker = t.path().join("ran");
    let ep = predict(&format!("touch '{}' # {{job}} {{out}}", marker.display()));
    let mut j = job(t.path(), AugmentationSpec::Identity);
    j.artifact = Some(t.path().join("nope.bin"));
    let err = run_predict(&ep, &j, &images(), t.path()).unwrap_err();
    assert!(matches!(err, AdapterError::MissingArtifact(_)));
    assert!(!marker.exists());
}

#[test]
fn hanging_adapter_times_out() {
    let t = tempfile::tempdir().unwrap();
    let ep = AdapterEndpoint::new("echo started >&2; sleep 20 # {job} {out}", Role::Predict, 1).unwrap();
    let start = std::time::Instant::now();
    match run_predict(&ep, &job(t.path(), AugmentationSpec::Identity), &images(), t.path()) {
        Err(AdapterError::Timeout { secs, stderr, .. }) => {
            assert_eq!(secs, 1);
            assert!(stderr.contains("started"));
        }
        other => panic!("{other:?}"),
    }
    assert!(start.elapsed().as_secs() < 10);
}

#[test]
fn role_is_checked() {
    let t = tempfile::tempdir().unwrap();
    let ep = AdapterEndpoint::new("true {job} {out}", Role::Train, 5).unwrap();
    let err = run_predict(&ep, &job(t.path(), AugmentationSpec::Identity), &images(), t.path()).unwrap_err();
    assert!(matches!(err, AdapterError::Role { .. }));
}

fn labeled() -> DatasetManifest {
    let mut m = images();
    let inst = Instance::new(BBox::new(0.1, 0.1, 0.4, 0.4).unwrap(), 0.8).unwrap();
    m.set_annotations(1, vec![inst.clone()]).unwrap();
    m.set_annotations(2, vec![inst]).unwrap();
    m
}

#[test]
fn train_returns_created_artifact_and_sees_workdir() {
    let t = tempfile::tempdir().unwrap();
    let ep = AdapterEndpoint::new(
        format!("grep -q '\"iteration\": 2' {{job}} && printf \"%s\" \"${WORKDIR_ENV}\" > {{out}}"),
        Role::Train,
        30,
    )
    .unwrap();
    let work = t.path().join("train");
    let artifact = run_train(&ep, &labeled(), 2, &work).unwrap();
    assert_eq!(std::fs::read_to_string(&artifact).unwrap(), work.display().to_string());
}

#[test]
fn train_rejects_unlabeled_manifests_before_invocation() {
    let t = tempfile::tempdir().unwrap();
    let marker = t.path().join("ran");
    let ep = AdapterEndpoint::new(format!("touch '{}' # {{job}} {{out}}", marker.display()), Role::Train, 5).unwrap();
    let err = run_train(&ep, &images(), 1, t.path()).unwrap_err();
    assert!(matches!(err, AdapterError::Precondition(_)));
    let mut partial = images();
    partial
        .set_annotations(1, vec![Instance::annotation(BBox::new(0.0, 0.0, 0.5, 0.5).unwrap())])
        .unwrap();
    assert!(matches!(run_train(&ep, &partial, 1, t.path()), Err(AdapterError::Precondition(_))));
    assert!(!marker.exists());
}

#[test]
fn train_without_artifact_is_an_error() {
    let t = tempfile::tempdir().unwrap();
    let ep = AdapterEndpoint::new("true {job} {out}", Role::Train, 5).unwrap();
    assert!(matches!(run_train(&ep, &labeled(), 1, t.path()), Err(AdapterError::MissingArtifact(_))));
}

#[test]
fn job_files_are_byte_stable() {
    let t = tempfile::tempdir().unwrap();
    let det = ProcessDetector {
        endpoint: predict("echo '[]' > {out} # {job}"),
        prompt: "spacecraft".into(),
    };
    let jobs = || {
        let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(t.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.to_string_lossy().ends_with(".json"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    det.predict(&images(), AugmentationSpec::VFlip, None, t.path()).unwrap();
    let first = jobs();
    det.predict(&images(), AugmentationSpec::VFlip, None, t.path()).unwrap();
    assert_eq!(jobs(), first);
    det.predict(&images(), AugmentationSpec::HFlip, None, t.path()).unwrap();
    assert!(jobs().len() > first.len());
}

#[test]
fn process_views_are_fused_after_inverse_mapping() {
    // The detector reports the same object under identity and vflip, each in
    // its own frame; fusion only merges them once vflip is undone.
    let t = tempfile::tempdir().unwrap();
    let script = t.path().join("det.sh");
    std::fs::write(
        &script,
        r#"job="$1"; out="$2"
if grep -q '"augmentation": "vflip"' "$job"; then
  echo '[{"image_id": 1, "bbox": [10, 30, 40, 15], "score": 0.8, "aug": "vflip"}]' > "$out"
else
  echo '[{"image_id": 1, "bbox": [10, 5, 40, 15], "score": 0.6}]' > "$out"
fi
"#,
    )
    .unwrap();
    let det = ProcessDetector {
        endpoint: predict(&format!("sh '{}' {{job}} {{out}}", script.display())),
        prompt: "spacecraft".into(),
    };
    let fusion = FusionConfig::default();
    let views = [AugmentationSpec::Identity, AugmentationSpec::VFlip];
    let rule = LabelingRule {
        views: &views,
        fusion: &fusion,
        filter: true,
        top1: true,
    };
    let out = label_images(&det, &images(), &rule, None, t.path(), "labels").unwrap();
    let got = out.labeled.annotations_for(1).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(*got[0].bbox(), BBox::new(0.1, 0.1, 0.5, 0.4).unwrap());
    assert!((got[0].score() - 0.7).abs() < 1e-12);
    assert!(out.labeled.annotations_for(2).is_none_or(<[_]>::is_empty));
}
