mod common;

use std::path::Path;

use common::oracle_hit;

use densescan::corpus::synthetic::{generate_corpus, CameraRig};
use densescan::corpus::{
    generate_synthetic_scene, load_manifest, CorpusError, SyntheticSpec,
};
use image::{GrayImage, Luma};
use nalgebra::Vector3;

fn small_spec(frames: usize) -> SyntheticSpec {
    SyntheticSpec {
        cameras: CameraRig::Ring {
            count: frames,
            radius: 3.2,
            height: 1.6,
            target: [0.0, 0.0, 0.3],
        },
        width: 160,
        height: 120,
        focal: 130.0,
        points_per_m2: 800.0,
        ..SyntheticSpec::default()
    }
}

fn edit_json(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn two_frame_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate_synthetic_scene(1, &small_spec(2), dir.path()).unwrap();
    let scene = load_manifest(&gen.manifest_path).unwrap();
    assert_eq!(scene.frames.len(), 2);
    assert_eq!(scene.instances.len(), 3);
}

#[test]
fn seed7_round_trip_equals_in_memory_record() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        superpoints: true,
        ..small_spec(8)
    };
    let gen = generate_synthetic_scene(7, &spec, dir.path()).unwrap();
    assert_eq!(gen.record.instances.len(), 3);
    assert_eq!(gen.record.frames.len(), 8);
    let loaded = load_manifest(&gen.manifest_path).unwrap();
    assert_eq!(loaded, gen.record);
    assert!(loaded.superpoint_ids.is_some());
}

#[test]
fn round_trip_across_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        spheres: 2,
        floor: true,
        ..small_spec(2)
    };
    for seed in 0..6 {
        let spec = SyntheticSpec {
            scene_id: format!("s{seed}"),
            ..spec.clone()
        };
        let gen = generate_synthetic_scene(seed, &spec, dir.path()).unwrap();
        assert_eq!(load_manifest(&gen.manifest_path).unwrap(), gen.record);
        // Disjointness is part of validation, but check it directly too.
        let mut seen = std::collections::HashSet::new();
        for inst in &gen.record.instances {
            for &i in &inst.point_indices {
                assert!(seen.insert(i));
            }
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_assets() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic_scene(7, &small_spec(3), a.path()).unwrap();
    generate_synthetic_scene(7, &small_spec(3), b.path()).unwrap();
    let mut files = Vec::new();
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap().to_path_buf();
        files.push(rel);
    }
    assert!(files.len() >= 3 + 6);
    for rel in files {
        assert_eq!(
            std::fs::read(a.path().join(&rel)).unwrap(),
            std::fs::read(b.path().join(&rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn zero_objects_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        boxes: 0,
        ..small_spec(2)
    };
    let gen = generate_synthetic_scene(3, &spec, dir.path()).unwrap();
    let scene = load_manifest(&gen.manifest_path).unwrap();
    assert!(scene.instances.is_empty());
    assert_eq!(scene.frames.len(), 2);
}

#[test]
fn out_of_range_index_is_invariant_violation() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate_synthetic_scene(1, &small_spec(1), dir.path()).unwrap();
    let n = gen.record.points.len();
    let inst_path = gen.manifest_path.parent().unwrap().join("instances.json");
    edit_json(&inst_path, |v| {
        v[0]["point_indices"].as_array_mut().unwrap().push(n.into());
    });
    match load_manifest(&gen.manifest_path) {
        Err(CorpusError::InvariantViolation { field, detail }) => {
            assert!(field.contains("instances[0]"), "{field}");
            assert!(detail.contains("out of range"), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn eight_bit_depth_is_schema_violation() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate_synthetic_scene(1, &small_spec(1), dir.path()).unwrap();
    let depth_path = &gen.record.frames[0].depth_path;
    GrayImage::from_pixel(160, 120, Luma([9])).save(depth_path).unwrap();
    match load_manifest(&gen.manifest_path) {
        Err(CorpusError::SchemaViolation { field, .. }) => assert_eq!(field, "depth bit depth"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_asset_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate_synthetic_scene(1, &small_spec(2), dir.path()).unwrap();
    std::fs::remove_file(&gen.record.frames[1].rgb_path).unwrap();
    match load_manifest(&gen.manifest_path) {
        Err(CorpusError::MissingFile { field, path }) => {
            assert_eq!(field, "frames[1].rgb");
            assert_eq!(path, gen.record.frames[1].rgb_path);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn schema_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate_synthetic_scene(1, &small_spec(1), dir.path()).unwrap();
    edit_json(&gen.manifest_path, |v| {
        v["frames"][0]["intrinsics"]["fx"] = "wide".into();
    });
    match load_manifest(&gen.manifest_path) {
        Err(CorpusError::SchemaViolation { field, .. }) => {
            assert_eq!(field, "manifest.frames[0].intrinsics.fx")
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_c2w_convention_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate_synthetic_scene(1, &small_spec(1), dir.path()).unwrap();
    edit_json(&gen.manifest_path, |v| v["pose_convention"] = "w2c".into());
    match load_manifest(&gen.manifest_path) {
        Err(CorpusError::SchemaViolation { field, .. }) => assert_eq!(field, "pose_convention"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn category_normalized_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate_synthetic_scene(1, &small_spec(1), dir.path()).unwrap();
    let inst_path = gen.manifest_path.parent().unwrap().join("instances.json");
    edit_json(&inst_path, |v| v[0]["category"] = "  Office   Chair ".into());
    let scene = load_manifest(&gen.manifest_path).unwrap();
    assert_eq!(scene.instances[0].category, "office chair");
}

#[test]
fn non_rigid_pose_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate_synthetic_scene(1, &small_spec(1), dir.path()).unwrap();
    edit_json(&gen.manifest_path, |v| {
        v["frames"][0]["pose_c2w"][0] = 2.0.into();
    });
    assert!(matches!(
        load_manifest(&gen.manifest_path),
        Err(CorpusError::InvariantViolation { .. })
    ));
}

#[test]
fn depth_matches_analytic_ray_hits_within_1mm() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        spheres: 2,
        floor: true,
        ..small_spec(4)
    };
    let scenes = generate_corpus(11, 3, &spec, dir.path()).unwrap();
    let mut checked = 0usize;
    let mut grazing = 0usize;
    for s in &scenes {
        for f in &s.record.frames {
            let depth = f.load_depth().unwrap();
            let rot = f.pose_c2w.rotation();
            let eye = f.pose_c2w.translation();
            let k = f.intrinsics;
            for v in 0..k.height {
                for u in 0..k.width {
                    let d_cam = Vector3::new(
                        (u as f64 - k.cx) / k.fx,
                        (v as f64 - k.cy) / k.fy,
                        1.0,
                    );
                    let d = rot * d_cam;
                    let hit = s
                        .primitives
                        .iter()
                        .filter_map(|p| oracle_hit(&p.shape, &eye, &d))
                        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
                    let raw = depth.get_pixel(u, v).0[0];
                    match hit {
                        Some(t) => {
                            // Camera z of the hit equals t because d_cam.z == 1.
                            if raw == 0 {
                                grazing += 1;
                                continue;
                            }
                            let err = (raw as f64 / 1000.0 - t).abs();
                            assert!(err <= 1e-3, "pixel ({u},{v}) err {err}");
                            checked += 1;
                        }
                        None => {
                            if raw != 0 {
                                grazing += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 10_000);
    // Hit/miss may disagree only for rays that graze an edge to rounding.
    assert!(grazing * 10_000 <= checked, "{grazing} disagreements");
}
