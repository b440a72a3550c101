use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fvgenre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fvgenre"))
        .args(args)
        .env_remove("FVGENRE_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture(dir: &Path, kind: &str) -> PathBuf {
    let out = fvgenre(&["make-fixture", "--out", dir.to_str().unwrap(), "--kind", kind]);
    PathBuf::from(ok(&out).trim())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_on_frame_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(&dir.path().join("fx"), "frames");
    let work = dir.path().join("work");
    let base = ["--manifest", s(&manifest), "--work", s(&work), "--k", "4", "--keyframes", "4"];
    let run = |extra: &[&str]| ok(&fvgenre(&[&base[..], extra].concat()));

    assert!(run(&["extract-visual"]).contains("extracted 12 videos"));
    run(&["train-gmm"]);
    run(&["encode-fv"]);
    run(&["train-svm"]);
    run(&["predict"]);
    run(&["train-text"]);
    run(&["--modality", "text", "train-svm"]);
    run(&["--modality", "text", "predict"]);
    run(&["--fusion", "sum", "fuse", "--modalities", "visual,text"]);

    for name in ["visual", "text", "fusion-sum"] {
        let report = run(&["evaluate", "--scores", name]);
        let map_line = report.lines().last().unwrap();
        let map: f64 = map_line.split('\t').next_back().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&map), "{name}: {report}");
    }
    let json = run(&["evaluate", "--json"]);
    assert!(json.lines().last().unwrap().starts_with("{\"map\":"));
    assert!(work.join("features/visual/index.jsonl").is_file());
    assert!(work.join("tfidf.json").is_file());
}

#[test]
fn evaluate_before_predict_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(&dir.path().join("fx"), "frames");
    let out = fvgenre(&["--manifest", s(&manifest), "--work", s(&dir.path().join("w")), "evaluate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run predict first"));
}

fn two_video_manifest(dir: &Path, second_frames: &str) -> PathBuf {
    let src = fixture(&dir.join("fx"), "frames");
    let frames = src.parent().unwrap().join("frames");
    let text = format!(
        "video_id\tsplit\tgenre\tframes_dir\tdescriptors\tmetadata_path\n\
         a\ttrain\tx\t{}\t\t\n\
         b\ttest\ty\t{second_frames}\t\t{}\n",
        frames.join("music-0").display(),
        src.parent().unwrap().join("metadata/music-0.txt").display(),
    );
    let path = dir.join("two.tsv");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn extract_visual_writes_descriptors() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("fx/frames/sports-1");
    let manifest = two_video_manifest(dir.path(), s(&frames));
    let work = dir.path().join("w");
    ok(&fvgenre(&["--manifest", s(&manifest), "--work", s(&work), "extract-visual"]));
    for id in ["a", "b"] {
        let bytes = std::fs::read(work.join(format!("descriptors/visual/{id}.fvd"))).unwrap();
        assert_eq!(&bytes[..4], b"FVD1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 92);
    }
}

#[test]
fn extract_visual_skips_missing_frames_dir() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = two_video_manifest(dir.path(), "");
    let work = dir.path().join("w");
    let out = fvgenre(&["--manifest", s(&manifest), "--work", s(&work), "extract-visual"]);
    assert!(ok(&out).contains("extracted 1 videos, skipped 1"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("WARN"));
    assert!(work.join("descriptors/visual/a.fvd").is_file());
    assert!(!work.join("descriptors/visual/b.fvd").exists());
}

#[test]
fn unreadable_frame_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("broken");
    std::fs::create_dir_all(&frames).unwrap();
    std::fs::write(frames.join("f000.ppm"), b"P6\n4 4\n255\nshort").unwrap();
    let manifest = two_video_manifest(dir.path(), s(&frames));
    let out = fvgenre(&["--manifest", s(&manifest), "--work", s(&dir.path().join("w")), "extract-visual"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("f000.ppm"));
}

#[test]
fn sweep_tags_rows_by_k() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), "descriptors");
    let out = ok(&fvgenre(&[
        "--manifest",
        s(&manifest),
        "sweep",
        "--ks",
        "4,16,64",
        "--norms",
        "PN + L2 Norm",
    ]));
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{out}");
    for (row, k) in rows.iter().zip(["4", "16", "64"]) {
        let cells: Vec<&str> = row.split('\t').collect();
        assert_eq!(cells[0], k);
        assert_eq!(cells[1], "PN + L2 Norm");
        assert!((0.0..=1.0).contains(&cells[2].parse::<f64>().unwrap()));
    }
}

fn timing(manifest: &Path, work: &Path) -> Vec<(String, f64)> {
    let out = ok(&fvgenre(&["--manifest", s(manifest), "--work", s(work), "--k", "4", "timing"]));
    out.lines()
        .skip(1)
        .take(7)
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            (c[0].to_string(), c[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn timing_visual_only_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(&dir.path().join("fx"), "frames");
    // same videos, metadata column cleared
    let text = std::fs::read_to_string(&manifest).unwrap();
    let visual_only: String = text
        .lines()
        .map(|l| {
            let mut c: Vec<&str> = l.split('\t').collect();
            if c[0] != "video_id" {
                c[5] = "";
            }
            c.join("\t") + "\n"
        })
        .collect();
    let vo = dir.path().join("fx/visual_only.tsv");
    std::fs::write(&vo, visual_only).unwrap();

    let (wa, wb) = (dir.path().join("a"), dir.path().join("b"));
    let stages = timing(&vo, &wa);
    let names: Vec<&str> = stages.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["visual-features", "gmm-train", "fv-encode", "text", "svm", "fuse", "evaluate"]);
    let total: f64 = stages.iter().map(|(_, p)| p).sum();
    assert!((total - 100.0).abs() <= 0.1 * 7.0, "{stages:?}");
    assert_eq!(stages[3].1, 0.0);
    timing(&vo, &wb);
    for rel in ["gmm-visual.bin", "svm-visual.bin", "scores/visual.tsv", "reports/visual.tsv"] {
        assert_eq!(std::fs::read(wa.join(rel)).unwrap(), std::fs::read(wb.join(rel)).unwrap(), "{rel}");
    }

    let with_text = timing(&manifest, &dir.path().join("c"));
    assert!(dir.path().join("c/scores/fusion-max.tsv").is_file());
    assert_eq!(with_text.len(), 7);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(&dir.path().join("fx"), "frames");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("manifest = \"{}\"\nwork = \"w\"\nk = 64\nkeyframes = 3\n", s(&manifest))).unwrap();
    let c = s(&cfg);
    ok(&fvgenre(&["--config", c, "extract-visual"]));
    // 9 training videos x 3 keyframes = 27 descriptors < 64
    let out = fvgenre(&["--config", c, "train-gmm"]);
    assert!(!out.status.success());
    let out = ok(&fvgenre(&["--config", c, "--k", "5", "train-gmm"]));
    assert!(out.contains("K=5 on 27 of 27"), "{out}");
    assert!(dir.path().join("w/gmm-visual.bin").is_file());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(&dir.path().join("fx"), "frames");
    let m = s(&manifest);
    assert!(!fvgenre(&["--manifest", "/nonexistent.tsv", "train-gmm"]).status.success());
    assert!(!fvgenre(&["--manifest", m, "--norm", "l7", "train-gmm"]).status.success());
    assert!(!fvgenre(&["--manifest", m, "--fusion", "mean", "fuse"]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_fvgenre"))
        .args(["--manifest", m, "--work", s(&dir.path().join("w")), "extract-visual"])
        .env("FVGENRE_THREADS", "lots")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("FVGENRE_THREADS"));
    let out = Command::new(env!("CARGO_BIN_EXE_fvgenre"))
        .args(["--manifest", m, "--work", s(&dir.path().join("w")), "extract-visual"])
        .env("FVGENRE_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
}
