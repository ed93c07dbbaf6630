use std::path::Path;
use std::process::{Command, Output};

use sketchparse::raster::{load_gray, save_gray, save_labels, write_manifest, GrayImage, LabelMap, ManifestEntry};

fn sketchparse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sketchparse")).arg("--quiet").args(args).current_dir(dir).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A 5-pixel-wide black cross on white.
fn thick_cross(dir: &Path) -> GrayImage {
    let mut img = GrayImage::blank(40, 30).unwrap();
    for y in 0..30 {
        for x in 0..40 {
            if (12..17).contains(&y) && (4..36).contains(&x) || (18..23).contains(&x) && (3..27).contains(&y) {
                img.set(x, y, 0);
            }
        }
    }
    save_gray(&img, dir.join("cross.pgm")).unwrap();
    img
}

fn has_block(img: &GrayImage) -> bool {
    (1..img.height()).any(|y| {
        (1..img.width())
            .any(|x| [(x - 1, y - 1), (x, y - 1), (x - 1, y), (x, y)].iter().all(|&(a, b)| img.get(a, b) == 0))
    })
}

#[test]
fn no_arguments_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sketchparse")).current_dir(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sketchparse(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(sketchparse(dir.path(), &["ht", "--out", "x.pgm"]).status.code(), Some(1));
    assert_eq!(sketchparse(dir.path(), &["--threads", "0", "loss-check"]).status.code(), Some(1));
    assert_eq!(sketchparse(dir.path(), &["train", "--mode", "bogus"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = sketchparse(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("loss-check"));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sketchparse(dir.path(), &["ht", "--in", "nope.pgm", "--out", "out.pgm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.pgm"));
}

#[test]
fn ht_thins_a_thick_cross() {
    let dir = tempfile::tempdir().unwrap();
    let src = thick_cross(dir.path());
    let o = sketchparse(dir.path(), &["ht", "--in", "cross.pgm", "--out", "thin/cross.pgm"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let thin = load_gray(dir.path().join("thin/cross.pgm")).unwrap();
    assert_eq!((thin.width(), thin.height()), (src.width(), src.height()));
    assert!(thin.data().iter().all(|&v| v == 0 || v == 255));
    assert!(thin.data().iter().zip(src.data()).all(|(t, s)| *t == 255 || *s == 0));
    assert!(!has_block(&thin));
    let ink = thin.data().iter().filter(|&&v| v == 0).count();
    assert!(ink > 20 && ink < src.data().iter().filter(|&&v| v == 0).count() / 3, "{ink} stroke pixels");
}

#[test]
fn ht_manifest_mode_copies_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    thick_cross(d);
    let labels = LabelMap::new(40, 30, 3, (0..1200).map(|i| (i % 3) as u8).collect()).unwrap();
    save_labels(&labels, d.join("cross_labels.pgm")).unwrap();
    write_manifest(
        d.join("m.tsv"),
        &[ManifestEntry {
            image: "cross.pgm".into(),
            labels: "cross_labels.pgm".into(),
            category: "plus".into(),
            super_category: "shapes".into(),
        }],
    )
    .unwrap();
    let o = sketchparse(d, &["ht", "--manifest", "m.tsv", "--out-dir", "out"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("out/cross.pgm").exists());
    assert_eq!(load_gray(d.join("out/cross_labels.pgm")).unwrap().data(), labels.data());
    assert!(std::fs::read_to_string(d.join("out/manifest.tsv")).unwrap().contains("plus"));
}

#[test]
fn render_writes_a_palette_png() {
    let dir = tempfile::tempdir().unwrap();
    let labels = LabelMap::new(4, 2, 10, vec![0, 1, 2, 3, 4, 5, 6, 9]).unwrap();
    save_labels(&labels, dir.path().join("l.pgm")).unwrap();
    let o = sketchparse(dir.path(), &["render", "--in", "l.pgm", "--out", "l.png"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(dir.path().join("l.png")).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
    assert_eq!(reader.info().color_type, png::ColorType::Indexed);
    let palette = reader.info().palette.as_ref().unwrap().to_vec();
    assert_eq!(&palette[..3], &sketchparse_cli::palette::color(0));
    assert_eq!(&palette[27..30], &sketchparse_cli::palette::color(9));
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let frame = reader.next_frame(&mut buf).unwrap();
    assert_eq!(&buf[..frame.buffer_size()], labels.data());
}

#[test]
fn synth_then_stats_prints_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o =
        sketchparse(d, &["--seed", "3", "synth", "--out-dir", "s", "--per-category", "2", "--test-per-category", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["s/train/manifest.tsv", "s/test/manifest.tsv", "s/taxonomy.tsv", "s/classes.tsv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let o = sketchparse(d, &["stats", "--manifest", "s/train/manifest.tsv", "--classes", "10", "--out", "w.tsv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("class\tt\tn\tphi\talpha\n"));
    assert_eq!(text.lines().count(), 12);
    assert!(d.join("w.tsv").exists());
    let boosted = sketchparse(
        d,
        &["stats", "--manifest", "s/train/manifest.tsv", "--classes", "10", "--bg-boost", "2", "--out", "b.tsv"],
    );
    let alpha0 = |s: &str| s.lines().nth(1).unwrap().split('\t').nth(4).unwrap().parse::<f64>().unwrap();
    assert!((alpha0(&stdout(&boosted)) - 2.0 * alpha0(&text)).abs() < 1e-5);
}

#[test]
fn loss_check_reports_both_suites() {
    let dir = tempfile::tempdir().unwrap();
    let o = sketchparse(dir.path(), &["loss-check", "--cases", "10", "--coords", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().nth(1).unwrap().starts_with("loss\t10\t"));
    assert!(text.lines().nth(2).unwrap().starts_with("network\t1\t5\t"));
}

#[test]
fn eval_scores_manifests_and_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(sketchparse(d, &["synth", "--out-dir", "s", "--per-category", "1", "--test-per-category", "1"])
        .status
        .success());
    let o = sketchparse(d, &["eval", "--pred-manifest", "s/test/manifest.tsv", "--gt-manifest", "s/test/manifest.tsv"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().last().unwrap().starts_with("average\t4\t1.000000"));
    let o = sketchparse(d, &["eval", "--pred-manifest", "s/train/manifest.tsv", "--gt-manifest", "missing.tsv"]);
    assert_eq!(o.status.code(), Some(2));
}
