mod common;

use std::fs;

use common::{stderr, tiny_mnist, vab, write_images, SMALL_MODEL, TEST_IMAGES};
use vab_core::codec::{packed_len, CODE_FILE_HEADER_LEN};

fn train_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["train", "--quiet", "--data-dir", data, "--out-dir", out, "--epochs", "2"];
    if !extra.contains(&"--dim-z") {
        args.extend(["--dim-z", "6"]);
    }
    args.extend(SMALL_MODEL);
    args.extend(extra);
    args
}

#[test]
fn missing_data_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("nothing");
    let out = vab(&["train", "--data-dir", empty.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("missing data file"));
}

#[test]
fn help_documents_exit_codes() {
    let out = vab(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for code in ["2  data", "3  input dimension", "4  unknown baseline", "5  code file"] {
        assert!(text.contains(code), "missing {code:?} in help");
    }
}

#[test]
fn train_writes_checkpoint_and_one_trace_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_mnist(&dir.path().join("data"), 60, 30);
    let out_dir = dir.path().join("run");
    let out = vab(&train_args(data.to_str().unwrap(), out_dir.to_str().unwrap(), &[]));
    assert!(out.status.success(), "{}", stderr(&out));
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "dim_z,bpp,seed,epochs,acc,psnr_db,elbo,wall_seconds");
    assert_eq!(lines.len(), 3);
    // Padded to 1024 pixels by default: 6 bits over 1024 pixels.
    assert!(lines[1].starts_with("6,0.005859375,0,1,"));
    assert!(out_dir.join("checkpoint.vab").is_file());
}

#[test]
fn identical_invocations_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_mnist(&dir.path().join("data"), 60, 30);
    let data = data.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(vab(&train_args(data, a.to_str().unwrap(), &[])).status.success());
    assert!(vab(&train_args(data, b.to_str().unwrap(), &[])).status.success());
    let bytes_a = fs::read(a.join("checkpoint.vab")).unwrap();
    assert_eq!(bytes_a, fs::read(b.join("checkpoint.vab")).unwrap());

    let c = dir.path().join("c");
    assert!(vab(&train_args(data, c.to_str().unwrap(), &["--seed", "1"])).status.success());
    assert_ne!(bytes_a, fs::read(c.join("checkpoint.vab")).unwrap());
}

#[test]
fn eval_appends_a_results_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_mnist(&dir.path().join("data"), 60, 30);
    let data = data.to_str().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    assert!(vab(&train_args(data, run_s, &[])).status.success());
    let ckpt = run.join("checkpoint.vab");
    for _ in 0..2 {
        let out = vab(&["eval", "--data-dir", data, "--out-dir", run_s, "--checkpoint", ckpt.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let results = fs::read_to_string(run.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3);
    let row: Vec<&str> = results.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0].parse::<f64>().unwrap() / 1024.0, row[1].parse::<f64>().unwrap());
}

#[test]
fn baseline_writes_one_row_per_seed_plus_a_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_mnist(&dir.path().join("data"), 10, 45);
    let csv = dir.path().join("km.csv");
    let out = vab(&[
        "baseline", "--method", "kmeans", "--k", "3", "--seeds", "4",
        "--data-dir", data.to_str().unwrap(), "--out", csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert!(lines[5].starts_with("kmeans,mean,3,"));
    // Three clean blocks: k-means separates them exactly.
    assert!(lines[1..5].iter().all(|l| l.split(',').nth(3) == Some("1")), "{text}");
}

#[test]
fn unknown_baseline_method_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_mnist(&dir.path().join("data"), 10, 10);
    let out = vab(&["baseline", "--method", "dbscan", "--data-dir", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("kmeans"), "error should list the known methods");
}

#[test]
fn sweep_writes_runs_then_a_summary_per_dim() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_mnist(&dir.path().join("data"), 40, 20);
    let out_dir = dir.path().join("sweep");
    let mut args = vec![
        "sweep", "--quiet", "--dims", "4,8", "--seeds", "1,2", "--epochs", "1",
        "--data-dir", data.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap(),
    ];
    args.extend(SMALL_MODEL);
    let out = vab(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let seeds: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(seeds, ["1", "2", "mean", "1", "2", "mean"]);
    assert!(out_dir.join("sweep/dz8_seed2.vab").is_file());
}

#[test]
fn encode_then_classify_without_the_images() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_mnist(&dir.path().join("data"), 60, 25);
    let run = dir.path().join("run");
    assert!(vab(&train_args(data.to_str().unwrap(), run.to_str().unwrap(), &[])).status.success());
    let ckpt = run.join("checkpoint.vab");
    let codes = dir.path().join("test.codes");
    let images = data.join(TEST_IMAGES);
    let out = vab(&[
        "encode", "--checkpoint", ckpt.to_str().unwrap(), "--images", images.to_str().unwrap(),
        "--out", codes.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::metadata(&codes).unwrap().len() as usize, CODE_FILE_HEADER_LEN + 25 * packed_len(6));

    fs::remove_dir_all(&data).unwrap();
    let ids = dir.path().join("ids.txt");
    let out = vab(&["classify", "--checkpoint", ckpt.to_str().unwrap(), "--codes", codes.to_str().unwrap(), "--out", ids.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ids: Vec<usize> = fs::read_to_string(ids).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(ids.len(), 25);
    assert!(ids.iter().all(|&c| c < 3));
}

#[test]
fn bad_code_files_exit_with_code_5() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_mnist(&dir.path().join("data"), 60, 10);
    let run = dir.path().join("run");
    assert!(vab(&train_args(data.to_str().unwrap(), run.to_str().unwrap(), &[])).status.success());
    let ckpt = run.join("checkpoint.vab");
    let ckpt = ckpt.to_str().unwrap();

    let garbage = dir.path().join("garbage.codes");
    fs::write(&garbage, b"not a code file").unwrap();
    let out = vab(&["classify", "--checkpoint", ckpt, "--codes", garbage.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));

    // A well-formed file whose codes are wider than the model's.
    let other = dir.path().join("other");
    assert!(vab(&train_args(data.to_str().unwrap(), other.to_str().unwrap(), &["--dim-z", "9"])).status.success());
    let wide = dir.path().join("wide.codes");
    let images = data.join(TEST_IMAGES);
    let enc = vab(&[
        "encode", "--checkpoint", other.join("checkpoint.vab").to_str().unwrap(),
        "--images", images.to_str().unwrap(), "--out", wide.to_str().unwrap(),
    ]);
    assert!(enc.status.success(), "{}", stderr(&enc));
    let out = vab(&["classify", "--checkpoint", ckpt, "--codes", wide.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));
    assert!(stderr(&out).contains("dim_z"));
}

#[test]
fn images_of_the_wrong_size_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_mnist(&dir.path().join("data"), 60, 10);
    let run = dir.path().join("run");
    assert!(vab(&train_args(data.to_str().unwrap(), run.to_str().unwrap(), &[])).status.success());
    let small = dir.path().join("small-images");
    write_images(&small, 20, 20, &vec![0u8; 5 * 400]);
    let out = vab(&[
        "encode", "--checkpoint", run.join("checkpoint.vab").to_str().unwrap(),
        "--images", small.to_str().unwrap(), "--out", dir.path().join("x.codes").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_mnist(&dir.path().join("data"), 30, 10);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small run\nepochs = 5\ndim_z = 5\nhidden = 16\nk = 3\ntrace_rows = 0\n").unwrap();
    let run = dir.path().join("run");
    let out = vab(&[
        "train", "--quiet", "--config", cfg.to_str().unwrap(), "--epochs", "1",
        "--data-dir", data.to_str().unwrap(), "--out-dir", run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    assert!(trace.lines().nth(1).unwrap().starts_with("5,"));
}
