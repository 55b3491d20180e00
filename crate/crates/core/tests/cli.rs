mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{deform, speckle, SplitShift};
use dic_core::image::GrayImage;
use dic_core::io;
use dic_core::synthetic::{generate_speckle, SpeckleSpec};

fn dic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dic")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn mig_of_constant_image_warns() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("flat.png");
    GrayImage::new(32, 32, vec![0.5; 32 * 32]).unwrap().save_png8(&p).unwrap();
    let o = dic(&["mig", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout(&o).trim(), "0.00");
    assert!(stderr(&o).contains("below the quality floor"));
}

#[test]
fn mig_of_default_speckle_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("speckle.png");
    generate_speckle(&SpeckleSpec::default()).unwrap().image.save_png8(&p).unwrap();
    let o = dic(&["mig", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).trim().parse::<f64>().unwrap() >= 20.0);
}

#[test]
fn synth_identity_frame_has_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = dic(&["synth", "--out", out.to_str().unwrap(), "--frames", "1", "--alpha-max", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("frames/frame_0000.png").exists());
    assert!(out.join("frames/frame_0001.png").exists());
    assert!(fs::read_to_string(out.join("benchmark.svg")).unwrap().starts_with("<svg"));
    let rows = io::read_benchmark_csv(fs::File::open(out.join("benchmark.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r.frame, 1);
        assert!(r.mae_x.abs() < 1e-6 && r.mae_y.abs() < 1e-6, "{r:?}");
    }
}

#[test]
fn synth_mode_filter() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = dic(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--frames",
        "1",
        "--alpha-max",
        "0",
        "--modes",
        "one-seed",
        "--no-images",
        "--no-plot",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("benchmark.csv")).unwrap();
    assert!(text.starts_with("mode,frame,alpha_deg,mae_x_px,mae_y_px,invalid_count"));
    let rows = io::read_benchmark_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mode.name(), "one-seed");
    assert!(!out.join("frames").exists() && !out.join("benchmark.svg").exists());
}

#[test]
fn synth_rejects_unknown_mode() {
    let dir = tempfile::tempdir().unwrap();
    let o = dic(&["synth", "--out", dir.path().to_str().unwrap(), "--frames", "1", "--modes", "two-seed"]);
    assert_eq!(o.status.code(), Some(2));
}

const ANALYZE: &str = r#"
[paths]
reference = "ref.png"
frames = "frames"
output = "out"
[roi]
x = 30
y = 30
w = 100
h = 100
[correlation]
half_width = 7
step = 5
seeds = [[80.0, 80.0]]
[physical]
scale_mm_per_px = 0.01
"#;

#[test]
fn analyze_identical_frame_gives_zero_field_and_reproducible_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let img = speckle(160, 160, 5);
    img.save_png8(d.join("ref.png")).unwrap();
    fs::create_dir(d.join("frames")).unwrap();
    img.save_png8(d.join("frames/frame_01.png")).unwrap();
    let cfg = write_config(d, ANALYZE);
    let o = dic(&["analyze", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let fields = io::read_field_csv(fs::File::open(d.join("out/fields/frame_0001.csv")).unwrap()).unwrap();
    let f = &fields[0];
    assert_eq!(f.valid_count(), f.grid().len());
    for i in 0..f.grid().len() {
        let (u, v) = f.get_index(i).unwrap();
        assert!(u.abs() < 0.005 && v.abs() < 0.005);
    }

    let manifest = d.join("out/manifest.toml");
    let again = d.join("again");
    let o = dic(&["analyze", "--config", manifest.to_str().unwrap(), "--output", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["frame_0001.csv", "frame_0001.dicf"] {
        assert_eq!(
            fs::read(d.join("out/fields").join(name)).unwrap(),
            fs::read(again.join("fields").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn analyze_reports_config_errors_by_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, &ANALYZE.replace("[[80.0, 80.0]]", "[[10.0, 80.0]]"));
    let o = dic(&["analyze", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("correlation.seeds[0]"), "{}", stderr(&o));

    let cfg = write_config(d, &ANALYZE.replace("w = 100", "w = 100\ncolour = 1"));
    assert_eq!(dic(&["analyze", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn analyze_rejects_unpadded_frame_names() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let img = speckle(160, 160, 5);
    img.save_png8(d.join("ref.png")).unwrap();
    fs::create_dir(d.join("frames")).unwrap();
    for k in [1, 2, 10] {
        img.save_png8(d.join(format!("frames/f{k}.png"))).unwrap();
    }
    let o = dic(&["analyze", "--config", &write_config(d, ANALYZE)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ambiguous frame order"));
}

// Each frame is correlated against its predecessor, which keeps the flank
// motion between correlated images within the Newton–Raphson basin.
const CRACK: &str = r#"
[paths]
reference = "ref.png"
frames = "frames/*.png"
output = "out"
[roi]
x = 22
y = 22
w = 120
h = 192
[correlation]
half_width = 5
step = 12
seeds = [[46.0, 46.0], [106.0, 46.0]]
[incremental]
policy = "every"
every = 1
[physical]
scale_mm_per_px = 0.01
fps = 4.0
[crack]
orientation = "vertical"
delta_c_mm = 0.025
"#;

// Grid columns at 22 + 12k: subsets of 11 px at x = 70 and x = 82 end on
// either side of the crack at x = 76, so no correlation point straddles it.
const XC: f64 = 76.0;

fn crack_sequence(d: &Path, frames: &[SplitShift]) {
    let img = speckle(160, 240, 9);
    img.save_png8(d.join("ref.png")).unwrap();
    fs::create_dir(d.join("frames")).unwrap();
    for (k, s) in frames.iter().enumerate() {
        deform(&img, s).save_png8(d.join(format!("frames/frame_{:02}.png", k + 1))).unwrap();
    }
}

#[test]
fn crack_rigid_opening_flags_first_frame_above_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Opening grows by 0.01 mm (1 px) per frame.
    let frames: Vec<SplitShift> = (1..=5).map(|k| SplitShift::rigid(XC, 0.0, k as f64)).collect();
    crack_sequence(d, &frames);
    let o = dic(&["crack", "--config", &write_config(d, CRACK)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("first flagged frame: 3"), "{}", stdout(&o));
    let rows = io::read_crack_csv(fs::File::open(d.join("out/crack.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows[..2].iter().all(|r| r.n_edge_points == 0));
    assert!(rows[2..].iter().all(|r| r.n_edge_points > 0));
    let edges = io::read_edges_csv(fs::File::open(d.join("out/edges/frame_0004.csv")).unwrap()).unwrap();
    assert!(edges.iter().all(|e| e.low.ref_mm.0 < 0.76 && e.high.ref_mm.0 > 0.76));
    assert!(d.join("out/overlays/frame_0003.png").exists());
    assert!(!d.join("out/overlays/frame_0002.png").exists());
}

#[test]
fn crack_free_sequence_reports_no_crack() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let frames: Vec<SplitShift> = (1..=3).map(|k| SplitShift::rigid(XC, 0.7 * k as f64, 0.7 * k as f64)).collect();
    crack_sequence(d, &frames);
    let o = dic(&["crack", "--config", &write_config(d, CRACK)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("no crack detected"));
    let rows = io::read_crack_csv(fs::File::open(d.join("out/crack.csv")).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.n_edge_points == 0 && r.tip_x_mm.is_none()));
}

#[test]
fn crack_tip_speed_follows_advancing_wedge() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Tip climbs 24 px (two grid steps) per frame: 0.24 mm/frame at 4 fps
    // is 0.96 mm/s.
    let frames: Vec<SplitShift> = (1..=5)
        .map(|k| SplitShift { xc: XC, left: -2.0, right: 2.0, tip_y: 190.0 - 24.0 * k as f64, ramp: 48.0 })
        .collect();
    crack_sequence(d, &frames);
    let o = dic(&["crack", "--config", &write_config(d, CRACK)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = io::read_crack_csv(fs::File::open(d.join("out/crack.csv")).unwrap()).unwrap();
    let speeds: Vec<f64> = rows.iter().filter_map(|r| r.speed_mm_s).collect();
    assert!(speeds.len() >= 3, "{rows:?}");
    let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
    // One grid step per frame: 12 px * 0.01 mm * 4 fps.
    assert!((mean - 0.96).abs() <= 0.48, "mean speed {mean}, rows {rows:?}");
}

#[test]
fn crack_without_scale_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, &CRACK.replace("scale_mm_per_px = 0.01\n", ""));
    let o = dic(&["crack", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}
