use red_core::harness::pipeline::{self, Layout};
use red_core::harness::{read_sinogram, ExperimentConfig};
use red_core::tomo::{forward_project, make_phantom, Ellipse, PhantomSpec, ProjectionGeometry};
use red_core::training::read_loss_trace;
use red_core::{simulate_low_dose, DoseConfig, RedError};

const TINY: &str = "\
data.image_size = 16
data.n_angles = 12
data.n_bins = 24
data.n_train = 4
data.n_test = 2
data.drfs = 4, 20
train.steps = 6
train.dcn_steps = 5
train.batch = 2
train.patch = 8
net.widths = 1, 4, 1
net.time_dim = 4
schedule.t_s = 5
";

fn tiny(out: &std::path::Path, extra: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(&format!("{TINY}{extra}")).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn low_dose_error_grows_with_drf() {
    let geom = ProjectionGeometry::parallel(32, 24, 48).unwrap();
    let spec = PhantomSpec {
        ellipses: vec![Ellipse::disk(0.0, 0.0, 0.6, 1.0)],
    };
    let full = forward_project(&make_phantom(&spec, 32, 32).unwrap(), &geom).unwrap();
    let err = |drf: f64| {
        let low = simulate_low_dose(&full, &DoseConfig::new(drf, 1e5, 3).unwrap()).unwrap();
        low.values
            .iter()
            .zip(&full.values)
            .map(|(l, f)| ((l - f) as f64).powi(2))
            .sum::<f64>()
    };
    let (e4, e20, e100) = (err(4.0), err(20.0), err(100.0));
    assert!(e4 < e20 && e20 < e100, "{e4} {e20} {e100}");
}

#[test]
fn staged_training_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "train.stages = 2\n");
    let layout = Layout::new(&cfg);

    assert!(matches!(
        pipeline::cmd_train_dcn(&cfg),
        Err(RedError::MissingPrerequisite(_))
    ));
    assert_eq!(pipeline::cmd_generate(&cfg).unwrap(), 6 * 2);
    pipeline::cmd_train_ren(&cfg).unwrap();
    assert_eq!(read_loss_trace(&layout.loss_csv("ren")).unwrap().len(), 6);
    let files = pipeline::cmd_train_dcn(&cfg).unwrap();
    assert_eq!(files.len(), 4);

    // Each refresh round appends a full budget with continued step numbers.
    let ren = read_loss_trace(&layout.loss_csv("ren")).unwrap();
    let dcn = read_loss_trace(&layout.loss_csv("dcn")).unwrap();
    assert_eq!(ren.len(), 12);
    assert_eq!(dcn.len(), 10);
    assert!(ren.iter().enumerate().all(|(i, r)| r.step == i));

    pipeline::cmd_reconstruct(&cfg, false).unwrap();
    let out = read_sinogram(&layout.recon().join("test_0000_drf20_red.rsf")).unwrap();
    assert_eq!(out.shape(), (12, 24));
    assert!(out.values.iter().all(|v| v.is_finite() && *v >= 0.0));

    let ev = pipeline::cmd_evaluate(&cfg).unwrap();
    assert!(ev.warnings.iter().any(|w| w.contains("drf4")), "{:?}", ev.warnings);
    let meta = std::fs::read_to_string(layout.eval().join("metrics_meta.csv")).unwrap();
    assert!(meta.starts_with("key,value\n"));
    assert!(meta.contains("nrmse"));
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(&dir.path().join("a"), "");
    let b = tiny(&dir.path().join("b"), "");
    pipeline::cmd_generate(&a).unwrap();
    pipeline::cmd_generate(&b).unwrap();
    for name in ["manifest.csv", "test/0001_low_drf20.rsf", "train/0003_full.rsf"] {
        let x = std::fs::read(a.out_dir.join("data").join(name)).unwrap();
        let y = std::fs::read(b.out_dir.join("data").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn reconstruct_needs_a_drift_estimator_when_correcting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    pipeline::cmd_generate(&cfg).unwrap();
    pipeline::cmd_train_ren(&cfg).unwrap();
    assert!(matches!(
        pipeline::cmd_reconstruct(&cfg, false),
        Err(RedError::MissingPrerequisite(_))
    ));
    let no_dc = tiny(dir.path(), "ablate.no_dc = true\n");
    assert!(!pipeline::cmd_reconstruct(&no_dc, false).unwrap().is_empty());
}
