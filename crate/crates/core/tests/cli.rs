use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
num_classes = 4
fusion_channels = 8
stage_widths = 4,8,8,16
max_iter = 6
batch_size = 2
crop_size = 32
image_size = 32
samples = 3
checkpoint_every = 4
seed = 3
";

fn dfdam(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dfdam"));
    for a in args {
        cmd.arg(a);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "labels"] {
        let mut entries: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn gen_data_writes_manifest_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&dfdam(&[&"gen-data", &"--config", &cfg, &"--out", &a]));
    ok(&dfdam(&[&"gen-data", &"--config", &cfg, &"--out", &b]));
    assert!(a.join("manifest.tsv").is_file());
    assert!(a.join("images/s0000.ppm").is_file());
    assert!(a.join("labels/s0002.pgm").is_file());
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn gen_data_rejects_size_off_the_stride() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "image_size = 48\n").unwrap();
    let out = dfdam(&[&"gen-data", &"--config", &cfg, &"--out", &tmp.path().join("d")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiple of 32"));
}

#[test]
fn unknown_config_key_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "colour = blue\n");
    let out = dfdam(&[&"gen-data", &"--config", &cfg, &"--out", &tmp.path().join("d")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data");
    ok(&dfdam(&[&"gen-data", &"--config", &cfg, &"--out", &data]));

    let ckpt = tmp.path().join("model.ckpt");
    let text = ok(&dfdam(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &ckpt]));
    assert!(text.contains("full model"));
    let csv = fs::read_to_string(tmp.path().join("model.loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,lr,L_p,L_c,L_s,joint");
    assert_eq!(lines.len(), 1 + 6);

    let again = tmp.path().join("again.ckpt");
    ok(&dfdam(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &again]));
    assert_eq!(fs::read(tmp.path().join("again.loss.csv")).unwrap().as_slice(), csv.as_bytes());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    let plain = ok(&dfdam(&[&"eval", &"--ckpt", &ckpt, &"--data", &data]));
    let single = ok(&dfdam(&[&"eval", &"--ckpt", &ckpt, &"--data", &data, &"--scales", &"1.0"]));
    assert_eq!(plain, single);
    let names: Vec<&str> = plain.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["background", "rectangle", "disc", "triangle", "mean_iou"]);
    ok(&dfdam(&[&"eval", &"--ckpt", &ckpt, &"--data", &data, &"--scales", &"0.5,1.0", &"--flip"]));

    let image = data.join("images/s0001.ppm");
    let (m1, m2, attn) = (tmp.path().join("m1.pgm"), tmp.path().join("m2.pgm"), tmp.path().join("attn"));
    ok(&dfdam(&[&"predict", &"--ckpt", &ckpt, &"--image", &image, &"--out", &m1, &"--attn", &attn]));
    ok(&dfdam(&[&"predict", &"--ckpt", &ckpt, &"--image", &image, &"--out", &m2]));
    let mask = fs::read(&m1).unwrap();
    assert_eq!(mask, fs::read(&m2).unwrap());
    assert!(mask.starts_with(b"P5\n32 32\n255\n"));
    let alpha = fs::read_to_string(attn.join("alpha_low.csv")).unwrap();
    assert_eq!(alpha.lines().count(), 1 + 8);
    for f in ["alpha_high.csv", "beta.pgm", "spatial_c0.pgm"] {
        assert!(attn.join(f).is_file(), "{f}");
    }
}

#[test]
fn baseline_flag_trains_summation_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data");
    ok(&dfdam(&[&"gen-data", &"--config", &cfg, &"--out", &data]));
    let ckpt = tmp.path().join("base.ckpt");
    let text = ok(&dfdam(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &ckpt, &"--baseline"]));
    assert!(text.contains("baseline model"));
    let full = tmp.path().join("full.ckpt");
    ok(&dfdam(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &full]));
    assert!(fs::metadata(&ckpt).unwrap().len() < fs::metadata(&full).unwrap().len());
    ok(&dfdam(&[&"eval", &"--ckpt", &ckpt, &"--data", &data]));
}

#[test]
fn malformed_inputs_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"DFDMxx").unwrap();
    let out = dfdam(&[&"eval", &"--ckpt", &bad, &"--data", &tmp.path()]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data");
    ok(&dfdam(&[&"gen-data", &"--config", &cfg, &"--out", &data]));
    let ckpt = tmp.path().join("m.ckpt");
    ok(&dfdam(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &ckpt]));
    let ppm = tmp.path().join("bad.ppm");
    fs::write(&ppm, b"P6\n4 4\n255\nabc").unwrap();
    let out = dfdam(&[&"predict", &"--ckpt", &ckpt, &"--image", &ppm, &"--out", &tmp.path().join("o.pgm")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!tmp.path().join("o.pgm").exists());

    let out = dfdam(&[&"eval", &"--ckpt", &tmp.path().join("missing.ckpt"), &"--data", &data]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn predict_handles_sizes_off_the_stride() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data");
    ok(&dfdam(&[&"gen-data", &"--config", &cfg, &"--out", &data]));
    let ckpt = tmp.path().join("m.ckpt");
    ok(&dfdam(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &ckpt]));
    let mut ppm = b"P6\n# odd\n37 21\n255\n".to_vec();
    ppm.extend((0..37 * 21 * 3).map(|i| (i * 7 % 256) as u8));
    let img = tmp.path().join("odd.ppm");
    fs::write(&img, ppm).unwrap();
    let mask = tmp.path().join("odd.pgm");
    ok(&dfdam(&[&"predict", &"--ckpt", &ckpt, &"--image", &img, &"--out", &mask, &"--attn", &tmp.path().join("a")]));
    assert!(fs::read(&mask).unwrap().starts_with(b"P5\n37 21\n255\n"));
}
