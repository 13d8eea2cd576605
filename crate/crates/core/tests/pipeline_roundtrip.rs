use road_atlas::localization::{localize_frame, LocalizationConfig};
use road_atlas::pipeline::{MapBuilder, PipelineConfig};
use road_atlas::sim::{builtin_scene, simulate_scan};
use road_atlas::store::{encode_atlas, load_atlas, save_atlas, stats};
use road_atlas::traversability::TraversabilityConfig;
use road_atlas::{Execution, Pose};

fn build(frames: usize) -> (road_atlas::fusion::Atlas, Vec<(road_atlas::PointCloudFrame, Pose)>) {
    build_with(frames, Execution::Parallel)
}

fn build_with(
    frames: usize,
    execution: Execution,
) -> (road_atlas::fusion::Atlas, Vec<(road_atlas::PointCloudFrame, Pose)>) {
    let scene = builtin_scene("urban-street").unwrap();
    let channels = scene.lidar.channels().unwrap();
    let logs: Vec<_> = scene
        .route_poses()
        .unwrap()
        .into_iter()
        .take(frames)
        .enumerate()
        .map(|(i, p)| (simulate_scan(&scene, &p, i).unwrap().0, p))
        .collect();
    let mut b =
        MapBuilder::new(PipelineConfig::new(channels, scene.lidar.width, 0.2, 30.0).with_execution(execution)).unwrap();
    for (f, p) in &logs {
        let r = b.add_frame(f, p).unwrap();
        assert!(r.ground_points > 0 && r.obstacle_points > 0);
    }
    (b.into_atlas().unwrap(), logs)
}

#[test]
fn saved_map_reloads_and_localizes() {
    let (atlas, logs) = build(6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("street.lra");
    let written = save_atlas(&atlas, &path).unwrap();
    let loaded = load_atlas(&path).unwrap();
    assert!(loaded.is_read_only());
    assert_eq!(written, std::fs::metadata(&path).unwrap().len());
    assert_eq!(encode_atlas(&loaded).unwrap(), std::fs::read(&path).unwrap());
    let (a, b) = (stats(&atlas), stats(&loaded));
    assert_eq!(
        (a.cells, a.layers, a.descriptor_cells),
        (b.cells, b.layers, b.descriptor_cells)
    );
    assert_eq!(b.serialized_bytes, written);

    let scene = builtin_scene("urban-street").unwrap();
    let config = LocalizationConfig {
        traversability: TraversabilityConfig::for_image(scene.lidar.channels().unwrap(), scene.lidar.width),
        ..LocalizationConfig::default()
    };
    let (frame, truth) = &logs[3];
    let start = truth.compose(&Pose::from_xyz_yaw(0.3, -0.2, 0.0, 1f64.to_radians()));
    let r = localize_frame(&loaded, frame, &start, &config).unwrap();
    assert!(r.pose.translation_distance(truth) < 0.05, "{:?}", r.pose);
    assert!(r.pose.rotation_angle_to(truth).to_degrees() < 0.5);
}

#[test]
fn identical_inputs_build_identical_files() {
    let (a, _) = build(3);
    let (b, _) = build(3);
    assert_eq!(encode_atlas(&a).unwrap(), encode_atlas(&b).unwrap());
}

#[test]
fn sequential_and_parallel_builds_match() {
    let (a, _) = build_with(3, Execution::Sequential);
    let (b, _) = build_with(3, Execution::Parallel);
    assert_eq!(encode_atlas(&a).unwrap(), encode_atlas(&b).unwrap());
}
