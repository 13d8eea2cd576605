use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_road-atlas"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Simulates `frames` curb-road frames and builds a 0.2 m map of them.
fn curb_map(dir: &TempDir, frames: usize) -> (PathBuf, PathBuf) {
    let log = dir.path().join("log");
    let map = dir.path().join("map.lra");
    ok(&[
        "synth",
        "--scene",
        "curb-road",
        "--frames",
        &frames.to_string(),
        "--out",
        p(&log),
    ]);
    ok(&["build", "--frames", p(&log), "--out", p(&map), "--resolution", "0.2"]);
    (log, map)
}

#[test]
fn synth_writes_a_complete_log() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("log");
    ok(&["synth", "--scene", "curb-road", "--frames", "3", "--out", p(&log)]);
    for i in 0..3 {
        assert!(log.join(format!("velodyne/{i:06}.bin")).is_file());
        assert!(log.join(format!("labels/{i:06}.label")).is_file());
    }
    assert!(!log.join("velodyne/000003.bin").exists());
    assert_eq!(
        std::fs::read_to_string(log.join("poses.txt")).unwrap().lines().count(),
        3
    );
    assert!(std::fs::read_to_string(log.join("lidar.toml"))
        .unwrap()
        .contains("elevations_deg"));
}

#[test]
fn build_prints_per_frame_timing_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (log, map) = curb_map(&dir, 3);
    let again = dir.path().join("again.lra");
    let out = ok(&[
        "build",
        "--frames",
        p(&log),
        "--out",
        p(&again),
        "--resolution",
        "0.2",
        "--threads",
        "1",
    ]);
    assert_eq!(
        out.lines()
            .filter(|l| l.starts_with("frame ") && l.contains("fuse_ms"))
            .count(),
        3
    );
    assert!(out.contains("compaction_ratio"));
    assert_eq!(std::fs::read(&map).unwrap(), std::fs::read(&again).unwrap());
    let stats = ok(&["stats", "--map", p(&map)]);
    assert!(stats.contains("keyframes            3"), "{stats}");
}

#[test]
fn build_rejects_bad_input_with_exit_2() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("log");
    ok(&["synth", "--scene", "curb-road", "--frames", "2", "--out", p(&log)]);
    let out = dir.path().join("m.lra");
    let o = run(&["build", "--frames", p(&log), "--out", p(&out), "--resolution", "0"]);
    assert_eq!(code(&o), 2);

    let short = dir.path().join("short.txt");
    let first = std::fs::read_to_string(log.join("poses.txt")).unwrap();
    std::fs::write(&short, first.lines().next().unwrap()).unwrap();
    let o = run(&["build", "--frames", p(&log), "--poses", p(&short), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("2 frames but 1 poses"));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(
        code(&run(&[
            "build",
            "--frames",
            p(&empty),
            "--poses",
            p(&short),
            "--out",
            p(&out)
        ])),
        2
    );
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["stats"])), 2);
    assert_eq!(
        code(&run(&["synth", "--scene", "atlantis", "--out", "/nonexistent/x"])),
        2
    );
    assert_eq!(code(&run(&["--threads", "0", "stats", "--map", "/nonexistent.lra"])), 2);
    assert_eq!(
        code(&run(&["export", "--map", "m.lra", "--format", "las", "--out", "x"])),
        2
    );
    assert_eq!(code(&run(&["--help"])), 0);
}

const PLATFORM: &str = r#"
name = "platform"

[lidar]
preset = "hdl64"

[[primitive]]
kind = "plane"
z = 0.0

# 1 m high block with a drivable top.
[[primitive]]
kind = "curb"
min = [5.0, -10.0, 0.0]
max = [25.0, 10.0, 1.0]
top = "road"

[route]
waypoints = [[-10.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
spacing = 2.0
"#;

#[test]
fn plan_climbs_a_kerb_and_rejects_off_map_points() {
    let dir = TempDir::new().unwrap();
    let (_, map) = curb_map(&dir, 3);
    let route = dir.path().join("route.txt");
    let out = ok(&[
        "plan",
        "--map",
        p(&map),
        "--start",
        "-100 -1 0",
        "--goal",
        "-94 6.3 0.15",
        "--out",
        p(&route),
    ]);
    assert!(out.starts_with("waypoints "));
    let pts: Vec<Vec<f64>> = std::fs::read_to_string(&route)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().skip(3).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(pts.len() > 2);
    assert!(pts.windows(2).all(|w| (w[1][2] - w[0][2]).abs() <= 0.3 + 1e-9));
    assert!((pts.last().unwrap()[2] - 0.15).abs() < 0.05);

    let o = run(&[
        "plan",
        "--map",
        p(&map),
        "--start",
        "-100 -1 9",
        "--goal",
        "-94 6.3 0.15",
        "--out",
        p(&route),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn plan_exits_3_when_a_step_is_too_high() {
    let dir = TempDir::new().unwrap();
    let scene = dir.path().join("platform.toml");
    std::fs::write(&scene, PLATFORM).unwrap();
    let log = dir.path().join("log");
    let map = dir.path().join("map.lra");
    ok(&["synth", "--scene", p(&scene), "--out", p(&log)]);
    ok(&["build", "--frames", p(&log), "--out", p(&map), "--resolution", "0.2"]);
    let route = dir.path().join("route.txt");
    let o = run(&[
        "plan",
        "--map",
        p(&map),
        "--start",
        "-5 0 0",
        "--goal",
        "8 0 1",
        "--out",
        p(&route),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!route.exists());
    ok(&[
        "plan",
        "--map",
        p(&map),
        "--start",
        "8 0 1",
        "--goal",
        "12 3 1",
        "--out",
        p(&route),
    ]);
}

fn parse_rows(text: &str, header: &str) -> Vec<(f64, f64, f64, u8)> {
    let body = text.split_once(header).expect("header").1;
    body.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<&str> = l.split_whitespace().collect();
            assert_eq!(v.len(), 4, "{l}");
            (
                v[0].parse().unwrap(),
                v[1].parse().unwrap(),
                v[2].parse().unwrap(),
                v[3].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn export_writes_parseable_point_files() {
    let dir = TempDir::new().unwrap();
    let (_, map) = curb_map(&dir, 2);
    let pcd = dir.path().join("m.pcd");
    ok(&["export", "--map", p(&map), "--format", "pcd", "--out", p(&pcd)]);
    let text = std::fs::read_to_string(&pcd).unwrap();
    let n: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("POINTS "))
        .unwrap()
        .parse()
        .unwrap();
    let rows = parse_rows(&text, "DATA ascii\n");
    assert_eq!(rows.len(), n);
    assert!(rows.iter().any(|r| r.3 == 0) && rows.iter().any(|r| r.3 == 1));
    assert!(rows
        .iter()
        .all(|r| r.0.is_finite() && r.1.is_finite() && r.2.is_finite() && r.3 <= 1));

    let ply = dir.path().join("m.ply");
    ok(&["export", "--map", p(&map), "--format", "ply", "--out", p(&ply)]);
    let text = std::fs::read_to_string(&ply).unwrap();
    assert!(text.starts_with("ply\nformat ascii 1.0\n"));
    assert_eq!(parse_rows(&text, "end_header\n"), rows);
}

#[test]
fn localize_tracks_a_structured_street() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("log");
    let map = dir.path().join("map.lra");
    // 0.5 m steps along the first street, then build and track the same log.
    let trajectory = dir.path().join("trajectory.txt");
    let lines: String = (0..16)
        .map(|i| format!("1 0 0 {} 0 1 0 0 0 0 1 1.8\n", 0.5 * i as f64))
        .collect();
    std::fs::write(&trajectory, lines).unwrap();
    ok(&[
        "synth",
        "--scene",
        "urban-street",
        "--trajectory",
        p(&trajectory),
        "--out",
        p(&log),
    ]);
    ok(&[
        "build",
        "--frames",
        p(&log),
        "--out",
        p(&map),
        "--resolution",
        "0.2",
        "--radius",
        "30",
    ]);
    let traj = dir.path().join("traj.txt");
    let out = ok(&[
        "localize",
        "--map",
        p(&map),
        "--frames",
        p(&log),
        "--init",
        "0.3 -0.2 1.8 0 0 0 1",
        "--truth",
        p(&trajectory),
        "--out",
        p(&traj),
    ]);
    let rows: Vec<Vec<f64>> = std::fs::read_to_string(&traj)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r.len() == 10));
    let rmse: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("translation_rmse_m "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(rmse < 0.1, "{out}");
}
