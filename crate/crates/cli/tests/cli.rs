use std::path::Path;
use std::process::{Command, Output};

fn fcmh(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcmh"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("FCMH_THREADS", "1")
        .args(args)
        .output()
        .expect("run fcmh")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "[data]\ntrain_images = 40\ntest_images = 8\n\n[task]\nsteps = 5\nbatch = 4\n\n\
[vfcn]\nsteps = 5\nbatch = 2\n\n[hvcn]\nimages = 40\ntest_images = 4\n\n[paths]\nwork_dir = run\n";

#[test]
fn exit_codes_by_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "[vfcn]\nlamda_p = 1\n").unwrap();
    assert_eq!(fcmh(dir.path(), &["-c", "bad.cfg", "gen-data"]).status.code(), Some(2));
    assert_eq!(fcmh(dir.path(), &["-c", "missing.cfg", "gen-data"]).status.code(), Some(3));

    std::fs::write(dir.path().join("junk.fcmh"), b"FCMHjunk").unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let o = fcmh(dir.path(), &["-c", "tiny.cfg", "gen-data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fcmh(dir.path(), &["-c", "tiny.cfg", "decompress", "junk.fcmh", "-o", "x.fpyr"]).status.code(), Some(4));
    // No trained codec yet: missing model file.
    let o = fcmh(dir.path(), &["-c", "tiny.cfg", "compress", "run/sample_0.ppm", "-o", "x.fcmh"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn threads_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fcmh"))
        .current_dir(dir.path())
        .env("FCMH_THREADS", "zero")
        .args(["selftest", "--cases", "3", "--seeds", "0"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bd_of_half_rate_curve() {
    let dir = tempfile::tempdir().unwrap();
    let anchor = "label,bpp,metric\na,0.25,30.1\na,0.5,33\na,1,36.2\na,2,39\n";
    let half = "# kind=psnr\nlabel,bpp,metric\nb,0.125,30.1\nb,0.25,33\nb,0.5,36.2\nb,1,39\n";
    std::fs::write(dir.path().join("a.csv"), format!("# kind=psnr\n{anchor}")).unwrap();
    std::fs::write(dir.path().join("b.csv"), half).unwrap();
    let o = fcmh(dir.path(), &["bd", "a.csv", "b.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "BD-rate -50.00%");
    let o = fcmh(dir.path(), &["bd", "a.csv", "a.csv", "--mode", "quality"]);
    assert_eq!(stdout(&o).trim(), "BD-psnr 0.0000");
}

#[test]
fn selftest_small() {
    let dir = tempfile::tempdir().unwrap();
    let o = fcmh(dir.path(), &["selftest", "--cases", "30", "--seeds", "1", "--per-tensor", "1"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert!(text.contains("0 failures"));
    assert!(text.trim_end().ends_with("selftest passed"));
}

#[test]
fn machine_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    for stage in ["gen-data", "train-head", "train-vfcn"] {
        let o = fcmh(d, &["-c", "tiny.cfg", stage]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = fcmh(d, &["-c", "tiny.cfg", "compress", "run/sample_0.ppm", "-s", "0.8", "-o", "a.fcmh"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = fcmh(d, &["-c", "tiny.cfg", "decompress", "a.fcmh", "-o", "a.fpyr"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("class "));

    // Coding the decoded pyramid again: reported rate matches the file.
    let o = fcmh(d, &["-c", "tiny.cfg", "compress", "a.fpyr", "-s", "0.8", "-o", "b.fcmh"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::metadata(d.join("b.fcmh")).unwrap().len();
    let bpp = (bytes * 8) as f64 / 4096.0;
    assert!(stdout(&o).contains(&format!("{bytes} bytes, {bpp:.4} bpp")), "{}", stdout(&o));
    let o = fcmh(d, &["-c", "tiny.cfg", "decompress", "b.fcmh", "-o", "b.fpyr"]);
    assert!(o.status.success());

    let o = fcmh(d, &["-c", "tiny.cfg", "alloc-map", "--test-image", "2", "-o", "map"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = std::fs::read_to_string(d.join("map.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n# config="));
    assert_eq!(std::fs::read_to_string(d.join("map.csv")).unwrap().lines().count(), 1 + 8);

    // Truncated container is a format error.
    let full = std::fs::read(d.join("b.fcmh")).unwrap();
    std::fs::write(d.join("cut.fcmh"), &full[..full.len() / 2]).unwrap();
    assert_eq!(fcmh(d, &["-c", "tiny.cfg", "decompress", "cut.fcmh", "-o", "c.fpyr"]).status.code(), Some(4));
    // Human mode needs an image input.
    assert_eq!(
        fcmh(d, &["-c", "tiny.cfg", "compress", "a.fpyr", "--mode", "human", "-o", "h.fcmh"]).status.code(),
        Some(5)
    );
}
