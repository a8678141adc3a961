use super::*;
use crate::geometry::relative_pose;
use crate::warp::forward_warp;

fn plane_cfg(kind: SceneKind) -> SceneConfig {
    SceneConfig {
        kind,
        ..SceneConfig::default()
    }
}

#[test]
fn fronto_plane_depth_is_exact() {
    let cfg = SceneConfig {
        plane_depth: Some(5.0),
        ..plane_cfg(SceneKind::FrontoPlane)
    };
    let s = generate_sample(&cfg, 3).unwrap();
    assert_eq!(s.depth1.valid_count(), 64 * 64);
    assert!(s.depth1.values().iter().all(|&z| z == 5.0));
}

#[test]
fn zero_motion_repeats_the_first_view() {
    let cfg = SceneConfig {
        max_rotation_deg: 0.0,
        max_translation: 0.0,
        ..SceneConfig::default()
    };
    let s = generate_sample(&cfg, 11).unwrap();
    assert_eq!(s.rgb1, s.rgb2);
    assert_eq!(s.depth1, s.depth2);
    assert_eq!(s.pose1, s.pose2);
}

#[test]
fn generation_is_deterministic() {
    let cfg = SceneConfig::default();
    assert_eq!(generate_sample(&cfg, 5).unwrap(), generate_sample(&cfg, 5).unwrap());
    assert_ne!(
        generate_sample(&cfg, 5).unwrap().rgb1,
        generate_sample(&cfg, 6).unwrap().rgb1
    );
    assert_eq!(
        generate_dataset(&cfg, 10, 2).unwrap(),
        generate_dataset(&cfg, 10, 2).unwrap()
    );
}

#[test]
fn config_validation() {
    let mut cfg = SceneConfig {
        primitives: 0,
        ..SceneConfig::default()
    };
    assert!(matches!(generate_sample(&cfg, 0), Err(Error::Config(_))));
    cfg.primitives = 2;
    cfg.min_depth = 5.0;
    cfg.max_depth = 6.0;
    assert!(cfg.validate().is_err());
    let cfg = SceneConfig {
        plane_depth: Some(50.0),
        ..SceneConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert_eq!(SceneKind::parse("fronto_plane").unwrap(), SceneKind::FrontoPlane);
    assert!(SceneKind::parse("cube").is_err());
}

#[test]
fn motion_respects_bounds() {
    let cfg = SceneConfig::default();
    for seed in 0..30 {
        let s = generate_sample(&cfg, seed).unwrap();
        let rel = relative_pose(&s.pose1, &s.pose2);
        assert!(rel.angle() <= 5f64.to_radians() + 1e-9);
        assert!(rel.translation.norm() <= cfg.max_translation + 1e-9);
    }
}

#[test]
fn depths_lie_in_range() {
    let cfg = SceneConfig::default();
    let s = generate_sample(&cfg, 4).unwrap();
    for d in [&s.depth1, &s.depth2] {
        assert!(d.valid_count() > 64 * 64 / 2);
        for (&z, &ok) in d.values().iter().zip(d.valid()) {
            if ok {
                assert!(z as f64 >= cfg.min_depth && z as f64 <= cfg.max_depth);
            } else {
                assert_eq!(z, 0.0);
            }
        }
    }
}

#[test]
fn split_sizes_and_disjointness() {
    assert_eq!(split_sizes(10).unwrap(), (8, 1, 1));
    assert_eq!(split_sizes(200).unwrap(), (160, 20, 20));
    assert_eq!(split_sizes(3).unwrap(), (1, 1, 1));
    assert!(split_sizes(2).is_err());
    let ds = generate_dataset(&plane_cfg(SceneKind::Plane), 10, 1).unwrap();
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (8, 1, 1));
    let mut ids: Vec<&str> = Split::ALL
        .iter()
        .flat_map(|&s| ds.split(s))
        .map(|s| s.id.as_str())
        .collect();
    let n = ids.len();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), n);
}

#[test]
fn photometric_consistency_on_planes() {
    let cfg = plane_cfg(SceneKind::Plane);
    for seed in 0..40 {
        let s = generate_sample(&cfg, seed).unwrap();
        let rel = relative_pose(&s.pose1, &s.pose2);
        let warped = forward_warp(&s.rgb1, &s.depth1, &s.intrinsics, &rel).unwrap();
        let plane = 64 * 64;
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..plane {
            if warped.hit_mask[i] && s.depth2.valid()[i] {
                for c in 0..3 {
                    sum += (warped.image[c * plane + i] - s.rgb2.values()[c * plane + i] as f64).abs();
                    n += 1;
                }
            }
        }
        let mean = sum / n as f64;
        assert!(n > 3 * plane / 2, "seed {seed}: only {n} hits");
        assert!(mean < 0.02, "seed {seed}: photometric error {mean}");
    }
}

#[test]
fn depth_consistency_on_analytic_planes() {
    for seed in 0..5 {
        let mut cfg = plane_cfg(SceneKind::FrontoPlane);
        cfg.max_rotation_deg = 0.0;
        let s = generate_sample(&cfg, seed).unwrap();
        let mut rel = relative_pose(&s.pose1, &s.pose2);
        rel.translation.z = 0.0;
        rel.rotation = nalgebra::Matrix3::identity();
        let warped = forward_warp(&s.rgb1, &s.depth1, &s.intrinsics, &rel).unwrap();
        let z = s.depth1.values()[0] as f64;
        let mut hits = 0;
        for (i, &hit) in warped.hit_mask.iter().enumerate() {
            if hit {
                assert!((warped.depth[i] - z).abs() < 1e-3, "pixel {i}");
                hits += 1;
            }
        }
        assert!(hits > 64 * 64 / 2);
    }
}

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn sample_round_trip() {
    let dir = scratch();
    let s = generate_sample(&SceneConfig::default(), 8).unwrap();
    let path = dir.path().join("pair");
    save_sample(&s, &path).unwrap();
    let back = load_sample(&path).unwrap();
    assert_eq!(back.rgb1, s.rgb1);
    assert_eq!(back.rgb2, s.rgb2);
    assert_eq!(back.depth1, s.depth1);
    assert_eq!(back.depth2, s.depth2);
    assert_eq!(back.pose1, s.pose1);
    assert_eq!(back.pose2, s.pose2);
    assert_eq!(back.intrinsics, s.intrinsics);
    assert_eq!(back.id, "pair");
}

#[test]
fn dataset_round_trip() {
    let dir = scratch();
    let ds = generate_dataset(&plane_cfg(SceneKind::Plane), 5, 3).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn png_depth_convention() {
    let dir = scratch();
    let path = dir.path().join("d.png");
    let depth = DepthMap::new(2, 1, vec![20.0, 0.0], vec![true, false]).unwrap();
    write_depth_png(&path, &depth).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let back = read_depth_png(&path).unwrap();
    assert_eq!(back, depth);

    let raw = dir.path().join("raw.png");
    let file = std::fs::File::create(&raw).unwrap();
    let mut enc = png::Encoder::new(file, 2, 1);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut w = enc.write_header().unwrap();
    w.write_image_data(&[0x14, 0x00, 0x00, 0x00]).unwrap();
    drop(w);
    let d = read_depth_png(&raw).unwrap();
    assert_eq!(d.get(0, 0), Some(20.0));
    assert_eq!(d.get(1, 0), None);
}

#[test]
fn png_depth_replaces_pfm() {
    let dir = scratch();
    let s = generate_sample(&SceneConfig::default(), 2).unwrap();
    let path = dir.path().join("pair");
    save_sample(&s, &path).unwrap();
    std::fs::remove_file(path.join("depth1.pfm")).unwrap();
    write_depth_png(&path.join("depth1.png"), &s.depth1).unwrap();
    let back = load_sample(&path).unwrap();
    for (a, b) in back.depth1.values().iter().zip(s.depth1.values()) {
        assert!((a - b).abs() <= 0.5 / 256.0 + 1e-6);
    }
}

#[test]
fn pfm_layout_and_errors() {
    let dir = scratch();
    let path = dir.path().join("d.pfm");
    let depth = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 0.0], vec![true, true, true, false]).unwrap();
    write_pfm(&path, &depth).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
    let payload = &bytes[bytes.len() - 16..];
    assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 3.0);
    assert_eq!(f32::from_le_bytes(payload[4..8].try_into().unwrap()), f32::INFINITY);
    assert_eq!(read_pfm(&path).unwrap(), depth);

    write_pfm_raw(&path, 1, 1, &[-2.0]).unwrap();
    let err = read_pfm(&path).unwrap_err();
    assert!(matches!(&err, Error::Ingestion { path: p, .. } if p == &path));

    std::fs::write(&path, b"PF\n1 1\n-1.0\n\0\0\0\0").unwrap();
    assert!(matches!(read_pfm(&path), Err(Error::Ingestion { .. })));
    std::fs::write(&path, b"Pf\n1 1\n-1.0\n\0\0").unwrap();
    assert!(matches!(read_pfm(&path), Err(Error::Ingestion { .. })));
}

#[test]
fn missing_files_name_the_file() {
    let dir = scratch();
    let s = generate_sample(&SceneConfig::default(), 2).unwrap();
    save_sample(&s, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("pose2.txt")).unwrap();
    match load_sample(dir.path()) {
        Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("pose2.txt")),
        other => panic!("unexpected {other:?}"),
    }
    std::fs::write(dir.path().join("pose2.txt"), "1 2 3").unwrap();
    assert!(matches!(load_sample(dir.path()), Err(Error::Ingestion { .. })));
}

#[test]
fn netpbm_round_trip_and_header_comments() {
    let dir = scratch();
    let path = dir.path().join("m.pgm");
    write_pgm(&path, 3, 1, &[0, 128, 255]).unwrap();
    assert_eq!(read_pgm(&path).unwrap(), (3, 1, vec![0, 128, 255]));
    let ppm = dir.path().join("c.ppm");
    std::fs::write(&ppm, b"P6\n# comment\n1 1\n255\n\x10\x20\x30").unwrap();
    let im = read_ppm(&ppm).unwrap();
    assert_eq!(im.to_rgb8(), vec![0x10, 0x20, 0x30]);
    std::fs::write(&ppm, b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap();
    assert!(read_ppm(&ppm).is_err());
}

#[test]
fn scene_config_from_text() {
    let cfg = SceneConfig::from_kv_text(
        "# desk\nscene.width = 32\nscene.height=32\nscene.focal=32\nscene.kind = plane\nepochs = 3\n",
    )
    .unwrap();
    assert_eq!((cfg.width, cfg.height, cfg.kind), (32, 32, SceneKind::Plane));
    assert!(SceneConfig::from_kv_text("scene.colour = 1").is_err());
    assert!(SceneConfig::from_kv_text("scene.width = wide").is_err());
    assert!(SceneConfig::from_kv_text("scene.width").is_err());
}
