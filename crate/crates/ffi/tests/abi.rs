use std::ffi::CString;
use std::path::Path;
use std::process::Command;
use std::ptr;

use taskvec::datagen::SampleKind;
use taskvec::experiment::ExperimentConfig;
use taskvec::trainer::BatchMode;
use taskvec::TrainConfig;
use taskvec_ffi::*;

fn header() -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/taskvec.h");
    std::fs::read_to_string(path).expect("header generated by build.rs")
}

#[test]
fn header_declares_every_export() {
    let h = header();
    for f in [
        "tv_last_error",
        "tv_version",
        "tv_basis_new",
        "tv_basis_free",
        "tv_basis_dim",
        "tv_basis_task_vector",
        "tv_basis_save",
        "tv_basis_load",
        "tv_dictionary_new",
        "tv_dictionary_free",
        "tv_dictionary_len",
        "tv_dictionary_token",
        "tv_dictionary_save",
        "tv_dictionary_load",
        "tv_params_init",
        "tv_params_free",
        "tv_params_dim",
        "tv_params_save",
        "tv_params_load",
        "tv_forward",
        "tv_run_experiment",
    ] {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(h.contains("typedef struct TvParams TvParams;"));
    assert!(h.contains("TV_STATUS_OK = 0"));
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"taskvec.h\"\nint f(void) { TvParams *p = 0; return (int)tv_params_dim(p) + TV_STATUS_OK; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler on PATH; skipping");
            return;
        }
    };
    assert!(status.success());
}

#[test]
fn run_experiment_through_the_abi() {
    let mut c = ExperimentConfig::new(TrainConfig {
        d: 20,
        num_tasks: 2,
        num_common: 4,
        prefix_len: 2,
        num_demos: 2,
        test_num_demos: None,
        qaicl_num_demos: None,
        num_train: 6,
        sigma0: 1e-2,
        sigma1: 5e-2,
        noise_sd: 1e-2,
        test_noise_sd: None,
        anchor: 0.1,
        eta: 0.5,
        q_v: 0.5,
        lambda: 0.0,
        epochs: 4,
        epsilon: 0.0,
        early_stop: false,
        seed: 1,
        train_dist: SampleKind::Qa,
        test_dists: vec![SampleKind::Qa],
        log_every: 2,
        batch: BatchMode::Full,
        eval_size: 10,
        probe_size: 5,
        threads: Some(1),
    });
    c.ood = Some(vec![]);
    c.plots.enabled = false;
    let dir = tempfile::tempdir().unwrap();
    let json = CString::new(serde_json::to_string(&c).unwrap()).unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let status = unsafe { tv_run_experiment(json.as_ptr(), out.as_ptr()) };
    assert_eq!(status, TvStatus::Ok);
    assert!(dir.path().join("metrics.csv").exists());

    let params = CString::new(dir.path().join("checkpoints/params.tvm").to_str().unwrap()).unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { tv_params_load(params.as_ptr(), &mut p) }, TvStatus::Ok);
    assert_eq!(unsafe { tv_params_dim(p) }, 20);
    unsafe { tv_params_free(p) };
}
