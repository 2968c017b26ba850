//! Compiles and runs the C example against the freshly built static
//! library, proving the generated header and the ABI agree.

use std::path::PathBuf;
use std::process::Command;

use canids::canlog::Label;
use canids::container::Provenance;
use canids::nn::{MlpModel, ModelSpec};
use canids::quant::{calibrate, quantize, CalibrationSet};
use canids::window::WindowFeature;

fn target_dir() -> PathBuf {
    // test binary sits in target/<profile>/deps/
    let mut dir = std::env::current_exe().expect("test exe path");
    dir.pop();
    dir.pop();
    dir
}

#[test]
fn c_demo_compiles_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler on this host");
        return;
    }
    let staticlib = target_dir().join("libcanids_ffi.a");
    assert!(staticlib.exists(), "staticlib not built at {}", staticlib.display());

    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let tmp = tempfile::tempdir().unwrap();

    // Detector model for the demo to load.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut spec = ModelSpec::default();
    spec.batchnorm = false;
    spec.dropout_rate = 0.0;
    let model = MlpModel::init(spec, 3).unwrap();
    let windows: Vec<WindowFeature> = (0..64)
        .map(|i| WindowFeature {
            values: (0..40).map(|_| rng.gen()).collect(),
            label: Label::Normal,
            newest_timestamp: i as f64,
        })
        .collect();
    let calib = CalibrationSet::from_windows(&windows, 64).unwrap();
    let scales = calibrate(&model, &calib).unwrap();
    let detector = quantize(&model, &scales, None).unwrap();
    let model_path = tmp.path().join("det.qmlp");
    detector.save(&model_path, Provenance::tool()).unwrap();

    let demo_bin = tmp.path().join("demo");
    let compile = Command::new("cc")
        .arg(manifest.join("examples/demo.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&demo_bin)
        .output()
        .expect("run cc");
    assert!(
        compile.status.success(),
        "cc failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&demo_bin).arg(&model_path).output().expect("run demo");
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "demo failed:\n{stdout}\n{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("detector width 40"), "{stdout}");
    // 8 pushes, depth-4 FIFO: exactly five scored messages.
    assert_eq!(stdout.matches("attack probability").count(), 5, "{stdout}");
}
