use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mcd_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = mcd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const SPEC: &str = r#"{"n_samples": 72, "n_val": 12, "n_test": 12, "frames": 4, "dim": 8,
    "n_answer_classes": 4, "n_keywords": 2, "noise_sigma": 0.5, "seed": 3}"#;
const RUN: &str = "[model]\nframes = 4\nblocks = 1\n[train]\nepochs = 2\nbatch_size = 16\n";

#[test]
fn dataset_train_predict_evaluate_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    unsafe {
        let data_c = c(data.to_str().unwrap());
        assert_eq!(mcd_generate_synthetic(data_c.as_ptr(), c(SPEC).as_ptr()), McdStatus::Ok);

        let mut ds = ptr::null_mut();
        assert_eq!(mcd_dataset_open(data_c.as_ptr(), &mut ds), McdStatus::Ok);
        let mut n = 0;
        assert_eq!(mcd_dataset_split_len(ds, MCD_SPLIT_TEST, &mut n), McdStatus::Ok);
        assert_eq!(n, 12);

        let mut model = ptr::null_mut();
        let run_c = c(run.to_str().unwrap());
        assert_eq!(mcd_train(ds, c(RUN).as_ptr(), run_c.as_ptr(), &mut model), McdStatus::Ok);
        let mut answers = 0;
        assert_eq!(mcd_model_num_answers(model, &mut answers), McdStatus::Ok);
        assert_eq!(answers, 4);

        let mut probs = vec![0.0; answers];
        let mut answer = usize::MAX;
        let st = mcd_model_predict(model, ds, MCD_SPLIT_TEST, 0, &mut answer, probs.as_mut_ptr(), probs.len());
        assert_eq!(st, McdStatus::Ok);
        assert!(answer < answers);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // the checkpoint on disk predicts exactly what the in-memory model does
        let mut loaded = ptr::null_mut();
        let ckpt = c(run.join("last.mcdc").to_str().unwrap());
        assert_eq!(mcd_model_load(ckpt.as_ptr(), &mut loaded), McdStatus::Ok);
        let mut again = vec![0.0; answers];
        let mut answer2 = usize::MAX;
        mcd_model_predict(loaded, ds, MCD_SPLIT_TEST, 0, &mut answer2, again.as_mut_ptr(), again.len());
        assert_eq!((answer, &probs), (answer2, &again));

        let mut json = ptr::null_mut();
        assert_eq!(mcd_model_evaluate_json(loaded, ds, MCD_SPLIT_TEST, &mut json), McdStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(report["total"], 12);
        mcd_string_free(json);

        mcd_model_free(loaded);
        mcd_model_free(model);
        mcd_dataset_free(ds);
    }
}

#[test]
fn failures_return_codes_and_messages() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(mcd_dataset_open(ptr::null(), &mut ds), McdStatus::NullArgument);
        assert!(last_error().contains("dir"));
        assert!(ds.is_null());

        let missing = c("/nonexistent/mcd-data");
        assert_eq!(mcd_dataset_open(missing.as_ptr(), &mut ds), McdStatus::Io);
        assert!(last_error().contains("/nonexistent/mcd-data"));

        let bad = [0xffu8, 0];
        assert_eq!(mcd_dataset_open(bad.as_ptr().cast(), &mut ds), McdStatus::InvalidUtf8);

        let not_ckpt = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(not_ckpt.path(), b"MCDF").unwrap();
        let mut model = ptr::null_mut();
        let p = c(not_ckpt.path().to_str().unwrap());
        assert_eq!(mcd_model_load(p.as_ptr(), &mut model), McdStatus::Format);

        let dir = tempfile::tempdir().unwrap();
        let d = c(dir.path().to_str().unwrap());
        assert_eq!(mcd_generate_synthetic(d.as_ptr(), c("{\"dim\": 0}").as_ptr()), McdStatus::Config);
        assert_eq!(mcd_generate_synthetic(d.as_ptr(), c("{\"bogus\": 1}").as_ptr()), McdStatus::Config);

        mcd_dataset_free(ptr::null_mut());
        mcd_model_free(ptr::null_mut());
        mcd_string_free(ptr::null_mut());
    }
}

#[test]
fn argument_validation_on_live_handles() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let d = c(dir.path().to_str().unwrap());
        assert_eq!(mcd_generate_synthetic(d.as_ptr(), c(SPEC).as_ptr()), McdStatus::Ok);
        let mut ds = ptr::null_mut();
        assert_eq!(mcd_dataset_open(d.as_ptr(), &mut ds), McdStatus::Ok);
        let mut n = 0;
        assert_eq!(mcd_dataset_split_len(ds, 7, &mut n), McdStatus::InvalidArgument);

        let mut model = ptr::null_mut();
        let cfg = c("[model]\nframes = 4\nblocks = 1\n[train]\nepochs = 1\n");
        assert_eq!(mcd_train(ds, cfg.as_ptr(), ptr::null(), &mut model), McdStatus::Ok);
        let mut answer = 0;
        let mut small = [0.0; 2];
        let st = mcd_model_predict(model, ds, MCD_SPLIT_TEST, 0, &mut answer, small.as_mut_ptr(), 2);
        assert_eq!(st, McdStatus::BufferTooSmall);
        let st = mcd_model_predict(model, ds, MCD_SPLIT_TEST, 99, &mut answer, ptr::null_mut(), 0);
        assert_eq!(st, McdStatus::OutOfRange);
        assert!(last_error().contains("99"));
        let st = mcd_train(ds, c("[train]\nlr = -1.0\n").as_ptr(), ptr::null(), &mut model);
        assert_eq!(st, McdStatus::Config);
        mcd_model_free(model);
        mcd_dataset_free(ds);
    }
}

#[test]
fn status_names_cover_every_code() {
    for code in 0..=12u32 {
        let name = unsafe { CStr::from_ptr(mcd_status_name(code)) };
        assert_ne!(name.to_str().unwrap(), "unknown", "{code}");
    }
    assert_eq!(unsafe { CStr::from_ptr(mcd_status_name(99)) }.to_str().unwrap(), "unknown");
}

#[test]
fn generated_header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("mcd.h")).unwrap();
    for f in ["mcd_dataset_open", "mcd_model_predict", "mcd_last_error", "MCD_STATUS_OK", "typedef struct McdModel McdModel"] {
        assert!(header.contains(f), "{f}");
    }
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler on PATH; skipped compile check");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mcd.h\"\n\
         int run(const char *dir) {\n\
           McdDataset *ds = NULL;\n\
           McdStatus st = mcd_dataset_open(dir, &ds);\n\
           if (st != MCD_STATUS_OK) return (int)st;\n\
           size_t n = 0;\n\
           st = mcd_dataset_split_len(ds, MCD_SPLIT_TEST, &n);\n\
           mcd_dataset_free(ds);\n\
           return (int)st;\n\
         }\n",
    )
    .unwrap();
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-c", "-o"])
        .arg(tmp.path().join("use.o"))
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
