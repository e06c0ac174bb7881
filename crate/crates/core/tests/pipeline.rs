use std::path::{Path, PathBuf};
use std::time::SystemTime;

use proscore::pipeline::{run_pipeline, PipelineConfig, RunOptions, REPORT_FILE};
use proscore::Error;

fn preset() -> PipelineConfig {
    PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")).unwrap()
}

fn relocate(cfg: &mut PipelineConfig, root: &Path) {
    cfg.paths.manifest = Some(root.join("corpus/manifest.toml"));
    cfg.paths.model_dir = root.join("models");
    cfg.paths.report_dir = root.join("report");
}

fn mtime(p: &Path) -> SystemTime {
    std::fs::metadata(p).unwrap().modified().unwrap()
}

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/v1/report.tsv")
}

#[test]
fn preset_matches_golden_and_caches_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset();
    relocate(&mut cfg, dir.path());
    let first = run_pipeline(&cfg, RunOptions::default()).unwrap();
    let report = std::fs::read_to_string(&first.report_path).unwrap();
    assert_eq!(report, first.report.to_tsv());
    let expected = std::fs::read_to_string(golden()).unwrap();
    assert_eq!(report, expected, "report drifted from the recorded golden file");

    let models = &cfg.paths.model_dir;
    let flow = models.join("flow.pnf1");
    let ubm = models.join("ubm.pgmm");
    let svr = models.join("dnf_svr.psvr");
    let (flow_t, ubm_t, svr_t) = (mtime(&flow), mtime(&ubm), mtime(&svr));

    // unchanged config: every stage is reused
    let again = run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert_eq!(again.report.to_tsv(), report);
    assert_eq!((mtime(&flow), mtime(&ubm), mtime(&svr)), (flow_t, ubm_t, svr_t));

    // an SVR-only change retrains the regressors and nothing upstream
    cfg.svr.c = 2.0;
    run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert_eq!((mtime(&flow), mtime(&ubm)), (flow_t, ubm_t));
    assert_ne!(mtime(&svr), svr_t);

    // restoring it and forcing retrains everything and reproduces the report
    cfg.svr.c = 1.0;
    let forced = run_pipeline(&cfg, RunOptions { force: true, seed: None }).unwrap();
    assert_ne!(mtime(&flow), flow_t);
    assert_eq!(forced.report.to_tsv(), report);
    assert_eq!(std::fs::read_to_string(cfg.paths.report_dir.join(REPORT_FILE)).unwrap(), report);
}

#[test]
fn missing_manifest_field_is_a_config_error() {
    let text = "seed = 7\n[paths]\nmodel_dir = \"m\"\nreport_dir = \"r\"\n";
    match PipelineConfig::from_toml(text, Path::new("/tmp")) {
        Err(Error::Config(msg)) => assert!(msg.contains("paths.manifest"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn gop_only_run_reports_gop_and_humans() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset();
    relocate(&mut cfg, dir.path());
    cfg.systems = vec![proscore::pipeline::System::Gop];
    cfg.fusion_modes.clear();
    let out = run_pipeline(&cfg, RunOptions::default()).unwrap();
    let systems: Vec<&str> = out.report.rows.iter().map(|r| r.system.as_str()).collect();
    assert_eq!(systems, ["human_pairwise", "gop"]);
    assert!(out.report.get("gop").unwrap().pcc > 0.5);
    assert!(!cfg.paths.model_dir.join("flow.pnf1").exists());
}

#[test]
fn preset_uses_the_generator_defaults() {
    let cfg = preset();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.synth, Some(proscore::corpus::SynthConfig::default()));
}

#[test]
fn full_config_parses() {
    let text = r#"
seed = 7
systems = ["gop", "gmm", "ivector", "nf", "dnf"]
fusion_modes = ["score", "feature"]

[paths]
manifest = "corpus/manifest.toml"
model_dir = "models"
report_dir = "report"

[synth]
num_speakers = 60

[gmm]
components = 64
[ivector]
rank = 16
[flow]
layers = 6
hidden = 32
[flow.adam]
epochs = 10
[dnf]
classes = 5
[svr]
c = 1.0
epsilon = 0.1
kernel = "rbf"
gamma = "scale"
[fusion]
normalization = "zscore"
"#;
    let cfg = PipelineConfig::from_toml(text, Path::new("/base")).unwrap();
    assert_eq!(cfg.paths.model_dir, Path::new("/base/models"));
    let back = PipelineConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
    assert_eq!(back, cfg);
}
