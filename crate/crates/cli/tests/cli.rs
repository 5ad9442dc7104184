use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use codemap::image::Channel;
use codemap::io::{load_sequence, read_float_image, save_sequence, write_float_image};
use nalgebra::Vector3;

fn codemap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codemap")).args(args).env("CODEMAP_LOG", "warn").output().expect("runs")
}

fn ok(args: &[&str]) -> String {
    let out = codemap(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// `(stage, mean mae)` from metrics.csv.
fn mean_mae(csv: &str, stage: &str) -> f64 {
    let v: Vec<f64> = csv
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1] == stage).then(|| f[2].parse().unwrap())
        })
        .collect();
    assert!(!v.is_empty());
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn simulate_round_trips_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["simulate", "--scene", "plane", "--frames", "3", "--out", s(&a), "--seed", "4"]);
    ok(&["simulate", "--scene", "plane", "--frames", "3", "--out", s(&b), "--seed", "4"]);
    assert_eq!(files(&a), files(&b));
    let packets = load_sequence(&a).unwrap();
    assert_eq!(packets.len(), 3);
    for p in &packets {
        p.validate().unwrap();
        assert!(p.gt_depth.is_some());
    }
}

#[test]
fn simulate_with_noise_writes_reprojection_errors() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path().join("seq");
    ok(&["simulate", "--scene", "wall", "--frames", "3", "--noise", "--out", s(&dir)]);
    let p = &load_sequence(&dir).unwrap()[1];
    let noisy = p.rep_error.data().iter().filter(|&&r| r > 0.0 && r != 10.0).count();
    assert!(noisy > 100, "{noisy} noisy points");
}

#[test]
fn simulate_rejects_unknown_scene() {
    let t = tempfile::tempdir().unwrap();
    let out = codemap(&["simulate", "--scene", "nowhere", "--out", s(&t.path().join("x"))]);
    assert!(!out.status.success());
}

#[test]
fn perturb_emits_one_pair_per_eligible_frame() {
    let t = tempfile::tempdir().unwrap();
    let (seq, pairs) = (t.path().join("seq"), t.path().join("pairs"));
    ok(&["simulate", "--scene", "wall", "--frames", "4", "--out", s(&seq)]);
    // Move the last keyframe far from the others.
    let mut packets = load_sequence(&seq).unwrap();
    let last = packets.last_mut().unwrap();
    last.pose = last.pose.compose(&codemap::geometry::Pose::from_translation(Vector3::new(5.0, 0.0, 0.0)));
    let far = t.path().join("far");
    save_sequence(&far, &packets).unwrap();

    let out = codemap(&["perturb", "--in", s(&far), "--out", s(&pairs), "--points", "300"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("within 2 m"));
    let written = load_sequence(&pairs).unwrap();
    assert_eq!(written.len(), 3);
    assert_eq!(written.iter().map(|p| p.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    for p in &written {
        assert!(p.sparse_depth.valid_count() > 200);
        assert!(p.rep_error.data().iter().any(|&r| r > 0.0));
        assert!(p.matches.is_empty());
    }
}

#[test]
fn perturb_rejects_bad_emg() {
    let t = tempfile::tempdir().unwrap();
    let out = codemap(&["perturb", "--in", s(t.path()), "--out", s(t.path()), "--emg", "4.31,0.44"]);
    assert!(!out.status.success());
}

#[test]
fn map_refines_and_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let seq = t.path().join("seq");
    ok(&["simulate", "--scene", "wall", "--frames", "5", "--out", s(&seq)]);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let csv = ok(&["map", "--in", s(&seq), "--out", s(&a)]);
    ok(&["--jobs", "2", "map", "--in", s(&seq), "--out", s(&b)]);
    assert_eq!(files(&a), files(&b));
    assert_eq!(fs::read_to_string(a.join("metrics.csv")).unwrap(), csv);
    assert!(mean_mae(&csv, "refined") <= mean_mae(&csv, "initial"), "{csv}");
    assert_eq!(fs::read_dir(a.join("refined")).unwrap().count(), 5);
}

#[test]
fn map_with_prior_only_returns_decoder_priors() {
    let t = tempfile::tempdir().unwrap();
    let seq = t.path().join("seq");
    ok(&["simulate", "--scene", "wall", "--frames", "3", "--out", s(&seq)]);
    let out = t.path().join("map");
    ok(&["map", "--in", s(&seq), "--out", s(&out), "--factors", "prior"]);
    for id in 0..3 {
        let name = format!("{id:06}.pfm");
        let init = read_float_image(&out.join("initial").join(&name), Channel::Depth).unwrap();
        let refined = read_float_image(&out.join("refined").join(&name), Channel::Depth).unwrap();
        assert_eq!(init, refined);
    }
}

#[test]
fn map_reads_config_and_threaded_mode_covers_all_keyframes() {
    let t = tempfile::tempdir().unwrap();
    let seq = t.path().join("seq");
    ok(&["simulate", "--scene", "wall", "--frames", "4", "--out", s(&seq)]);
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "codemap-config 1\nsolver.max_iterations 5\nwindow_size 3\n").unwrap();
    let out = t.path().join("map");
    ok(&["map", "--in", s(&seq), "--out", s(&out), "--config", s(&cfg), "--threaded"]);
    assert_eq!(fs::read_dir(out.join("initial")).unwrap().count(), 4);
    fs::write(&cfg, "window_size 1\n").unwrap();
    assert!(!codemap(&["map", "--in", s(&seq), "--out", s(&out), "--config", s(&cfg)]).status.success());
}

#[test]
fn fused_ground_truth_box_lies_on_the_surface() {
    let t = tempfile::tempdir().unwrap();
    let seq = t.path().join("box");
    ok(&["simulate", "--scene", "box", "--frames", "12", "--out", s(&seq)]);
    let ply = t.path().join("box.ply");
    ok(&["fuse", "--in", s(&seq), "--depths", "gt", "--out", s(&ply)]);
    let text = fs::read_to_string(&ply).unwrap();
    let count: usize = text.lines().find_map(|l| l.strip_prefix("element vertex ")).unwrap().parse().unwrap();
    let body = text.split("end_header\n").nth(1).unwrap();
    let mut near = 0;
    for line in body.lines().take(count) {
        let v: Vec<f64> = line.split_whitespace().take(3).map(|x| x.parse().unwrap()).collect();
        // Distance to the surface of the 0.6 m cube centred at the origin.
        let q = Vector3::new(v[0].abs() - 0.3, v[1].abs() - 0.3, v[2].abs() - 0.3);
        let outside = q.map(|c| c.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        if (outside + inside).abs() <= 0.02 {
            near += 1;
        }
    }
    assert!(count > 1000);
    assert!(near as f64 >= 0.95 * count as f64, "{near}/{count} within one voxel");
}

#[test]
fn fuse_needs_maps_for_refined_depths() {
    let t = tempfile::tempdir().unwrap();
    let seq = t.path().join("seq");
    ok(&["simulate", "--scene", "plane", "--frames", "2", "--out", s(&seq)]);
    let out = codemap(&["fuse", "--in", s(&seq), "--out", s(&t.path().join("m.ply"))]);
    assert!(!out.status.success());
}

#[test]
fn eval_identical_and_offset_maps() {
    let t = tempfile::tempdir().unwrap();
    let seq = t.path().join("seq");
    ok(&["simulate", "--scene", "plane", "--frames", "2", "--out", s(&seq)]);
    let same = ok(&["eval", "--pred", s(&seq), "--gt", s(&seq)]);
    assert!(same.lines().last().unwrap() == "mean,0.000000,0.000000", "{same}");

    let shifted = t.path().join("shifted");
    fs::create_dir_all(&shifted).unwrap();
    for p in load_sequence(&seq).unwrap() {
        let mut d = p.gt_depth.unwrap();
        d.data_mut().iter_mut().for_each(|v| *v += 0.5);
        write_float_image(&shifted.join(format!("{:06}.pfm", p.id)), &d).unwrap();
    }
    let table_path = t.path().join("eval.csv");
    let table = ok(&["eval", "--pred", s(&shifted), "--gt", s(&seq), "--out", s(&table_path)]);
    assert_eq!(fs::read_to_string(&table_path).unwrap(), table);
    for line in table.lines().skip(1) {
        let f: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!((f[0] - 0.5).abs() < 1e-6 && (f[1] - 0.5).abs() < 1e-6, "{line}");
    }
}
