mod common;

use common::{rng, scene_with_boxes};
use mtu_core::datapipe::{
    classic_augment, crrp, flip_horizontal, flip_vertical, gaussian_blur, load_manifest, normalize, read_scene,
    rotate90, save_manifest, stitch, synth_scenes, tile, tile_scene, write_image_png, write_mask_png, AugmentConfig,
    BitDepth, CrrpConfig, GrayImage, ManifestEntry, NoiseSpec, Scene, Split, TargetSpec,
};
use mtu_core::postprocess::{cluster8, BoundingBox};
use mtu_core::{ModelVariant, MtuNet, Raster};
use proptest::prelude::*;
use rand::Rng;

fn ratio(scene: &Scene) -> f64 {
    let fg = scene.mask().count_foreground() as f64;
    fg / (scene.mask().len() as f64 - fg)
}

fn overlaps(a: [usize; 4], b: &BoundingBox) -> bool {
    a[0] <= b.row_max && b.row_min <= a[2] && a[1] <= b.col_max && b.col_min <= a[3]
}

#[test]
fn tile_round_trip_on_random_rasters() {
    let mut r = rng(400);
    let sizes = [(64, 64), (70, 33), (100, 129), (32, 32), (45, 97)];
    for i in 0..10 {
        let (h, w) = sizes[i % sizes.len()];
        let size = [32, 48, 64][i % 3];
        let raster: Raster<u16> = Raster::from_fn(h, w, |_, _| r.random());
        let set = tile(&raster, size).unwrap();
        assert_eq!(stitch(&set).unwrap(), raster);
        let mask: Raster<bool> = Raster::from_fn(h, w, |_, _| r.random_bool(0.3));
        assert_eq!(stitch(&tile(&mask, size).unwrap()).unwrap(), mask);
        let floats: Raster<f32> = Raster::from_fn(h, w, |_, _| r.random());
        let back = stitch(&tile(&floats, size).unwrap()).unwrap();
        assert!(back.data().iter().zip(floats.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let layout = set.layout();
        assert_eq!(layout.origins.len(), h.div_ceil(size) * w.div_ceil(size));
        assert_eq!(layout.padding, (h.div_ceil(size) * size - h, w.div_ceil(size) * size - w));
    }
}

#[test]
fn scene_tiles_keep_image_and_mask_aligned() {
    let scene = scene_with_boxes(80, &[(5, 5, 3), (40, 70, 4)]);
    let tiles = tile_scene(&scene, 32).unwrap();
    assert_eq!(tiles.len(), 9);
    for (t, (row, col)) in &tiles {
        assert_eq!(t.id, format!("boxes_r{row}_c{col}"));
        for y in 0..32 {
            for x in 0..32 {
                let bright = t.image().pixels().get(y, x) == 220;
                assert_eq!(bright, t.mask().get(y, x));
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let net: MtuNet<f32> = MtuNet::new(common::k2_config(16), ModelVariant::default()).unwrap();
    let path = dir.path().join("model.mtuw");
    net.save(&path).unwrap();
    let back = MtuNet::<f32>::load(&path).unwrap();
    assert_eq!(back.config(), net.config());
    assert_eq!(back.variant(), net.variant());
    for ((na, ta), (nb, tb)) in net.params().named().zip(back.params().named()) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        assert!(ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    net.save(dir.path().join("again.mtuw")).unwrap();
    back.save(dir.path().join("twice.mtuw")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("again.mtuw")).unwrap(),
        std::fs::read(dir.path().join("twice.mtuw")).unwrap()
    );

    let ablated: MtuNet<f32> = MtuNet::new(common::k2_config(16), ModelVariant { mvtm: false }).unwrap();
    ablated.save(&path).unwrap();
    assert_eq!(MtuNet::<f32>::load(&path).unwrap().variant(), ModelVariant { mvtm: false });
}

#[test]
fn normalize_examples() {
    let ramp = GrayImage::new(BitDepth::Eight, Raster::from_fn(16, 16, |r, c| (r * 16 + c) as u16)).unwrap();
    let n: Raster<f64> = normalize(&ramp);
    assert!(n.data().iter().enumerate().all(|(i, &v)| v == i as f64 / 255.0));

    let flat = GrayImage::new(BitDepth::Sixteen, Raster::filled(4, 4, 700)).unwrap();
    assert!(normalize::<f64>(&flat).data().iter().all(|&v| v == 0.0));

    let pixels = Raster::new(1, 3, vec![100u16, 200, 300]).unwrap();
    let n: Raster<f64> = normalize(&GrayImage::new(BitDepth::Sixteen, pixels).unwrap());
    assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
}

#[test]
fn augmentations_move_image_and_mask_together() {
    let scenes = synth_scenes(8, 48, &TargetSpec::default(), &NoiseSpec::default(), 3).unwrap();
    let cfg = AugmentConfig {
        flip_probability: 0.5,
        blur_probability: 0.0,
        blur_sigma: 0.5,
    };
    for (i, scene) in scenes.iter().enumerate() {
        // Replace the image with the mask itself to compare geometry directly.
        let as_image = GrayImage::new(BitDepth::Eight, scene.mask().map(|b| if b { 255 } else { 0 })).unwrap();
        let probe = Scene::new(scene.id.clone(), as_image, scene.mask().clone()).unwrap();
        let (out, _) = classic_augment(&probe, &cfg, i as u64).unwrap();
        assert_eq!(out.image().pixels().map(|v| v == 255), *out.mask());
        assert_eq!(out.mask().count_foreground(), scene.mask().count_foreground());
    }
}

#[test]
fn flips_rotations_and_blur() {
    let mut r = rng(401);
    let raster: Raster<u16> = Raster::from_fn(7, 5, |_, _| r.random());
    assert_eq!(flip_horizontal(&flip_horizontal(&raster)), raster);
    assert_eq!(flip_vertical(&flip_vertical(&raster)), raster);
    assert_eq!(rotate90(&rotate90(&raster, 1), 3), raster);
    assert_eq!(rotate90(&raster, 2), flip_vertical(&flip_horizontal(&raster)));
    assert_eq!(rotate90(&raster, 1).dims(), (5, 7));

    let flat = Raster::filled(9, 6, 0.42f64);
    assert!(gaussian_blur(&flat, 0.5).data().iter().all(|&v| (v - 0.42).abs() < 1e-15));
    let mut spike = Raster::filled(9, 9, 0.0f64);
    spike.set(4, 4, 1.0);
    let blurred = gaussian_blur(&spike, 0.8);
    assert!((blurred.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(blurred.get(3, 4), blurred.get(5, 4));
}

#[test]
fn crrp_single_paste_properties() {
    let scenes = synth_scenes(50, 64, &TargetSpec::default(), &NoiseSpec::default(), 17).unwrap();
    let cfg = CrrpConfig::default();
    let mut successes = 0;
    for (i, scene) in scenes.iter().enumerate() {
        let regions = cluster8(scene.mask());
        let (out, log) = crrp(scene, &regions, &cfg, i as u64).unwrap();
        assert_eq!(log.scene_id, scene.id);
        assert_eq!(log.pastes.len() + log.failures.len(), cfg.paste_count);
        if let Some(p) = log.pastes.first() {
            successes += 1;
            assert!(ratio(&out) > ratio(scene), "scene {i}");
            assert!(regions.iter().all(|r| !overlaps(p.target_bbox, &r.bbox)));
            assert_eq!(
                out.mask().count_foreground(),
                scene.mask().count_foreground() + p.target_pixels
            );
            assert!(cfg.angles.contains(&p.angle));
            assert!(p.scale >= cfg.scale_range.0 && p.scale <= cfg.scale_range.1);
            assert!(p.source_region < regions.len());
            assert!(cluster8(out.mask()).len() > regions.len());
        } else {
            assert_eq!(&out, scene);
        }
    }
    assert!(successes >= 45, "only {successes} of 50 pastes succeeded");
}

#[test]
fn crrp_repeated_pastes_avoid_every_earlier_target() {
    let scenes = synth_scenes(20, 64, &TargetSpec::default(), &NoiseSpec::default(), 18).unwrap();
    let cfg = CrrpConfig {
        paste_count: 3,
        ..CrrpConfig::default()
    };
    for (i, scene) in scenes.iter().enumerate() {
        let regions = cluster8(scene.mask());
        let (out, log) = crrp(scene, &regions, &cfg, 100 + i as u64).unwrap();
        assert_eq!(log.pastes.len() + log.failures.len(), 3);
        let mut boxes: Vec<BoundingBox> = regions.iter().map(|r| r.bbox).collect();
        let mut added = 0;
        for p in &log.pastes {
            assert!(boxes.iter().all(|b| !overlaps(p.target_bbox, b)));
            boxes.push(BoundingBox {
                row_min: p.target_bbox[0],
                col_min: p.target_bbox[1],
                row_max: p.target_bbox[2],
                col_max: p.target_bbox[3],
            });
            added += p.target_pixels;
        }
        assert_eq!(out.mask().count_foreground(), scene.mask().count_foreground() + added);
        assert!(cluster8(out.mask()).len() >= regions.len());
    }
}

#[test]
fn crrp_identity_paste_copies_exactly() {
    let scene = scene_with_boxes(64, &[(10, 10, 3)]);
    let cfg = CrrpConfig {
        scale_range: (1.0, 1.0),
        angles: vec![0],
        ..CrrpConfig::default()
    };
    let regions = cluster8(scene.mask());
    let (out, log) = crrp(&scene, &regions, &cfg, 5).unwrap();
    let p = &log.pastes[0];
    assert_eq!(p.target_pixels, 9);
    assert_eq!(out.mask().count_foreground(), 18);
    assert_eq!(p.size, (11, 11));
    let (dr, dc) = p.destination;
    for y in 0..11 {
        for x in 0..11 {
            assert_eq!(out.image().pixels().get(dr + y, dc + x), scene.image().pixels().get(6 + y, 6 + x));
        }
    }
}

#[test]
fn crrp_reports_infeasible_placement() {
    let scene = scene_with_boxes(32, &[(2, 2, 26)]);
    let regions = cluster8(scene.mask());
    let (out, log) = crrp(&scene, &regions, &CrrpConfig::default(), 1).unwrap();
    assert!(log.pastes.is_empty());
    assert_eq!(log.failures.len(), 1);
    assert_eq!(out, scene);

    let empty = scene_with_boxes(32, &[]);
    assert!(crrp(&empty, &[], &CrrpConfig::default(), 1).is_err());
    let bad = CrrpConfig {
        angles: vec![45],
        ..CrrpConfig::default()
    };
    assert!(crrp(&scene, &regions, &bad, 1).is_err());
}

#[test]
fn synth_counts_and_determinism() {
    let spec = TargetSpec::default();
    let a = synth_scenes(12, 64, &spec, &NoiseSpec::default(), 9).unwrap();
    let b = synth_scenes(12, 64, &spec, &NoiseSpec::default(), 9).unwrap();
    assert_eq!(a, b);
    let fixed = TargetSpec {
        count: (3, 3),
        ..spec.clone()
    };
    for s in synth_scenes(12, 64, &fixed, &NoiseSpec::default(), 10).unwrap() {
        assert_eq!(cluster8(s.mask()).len(), 3, "{}", s.id);
    }
    let none = TargetSpec {
        count: (0, 0),
        ..spec.clone()
    };
    for s in synth_scenes(3, 32, &none, &NoiseSpec::default(), 11).unwrap() {
        assert_eq!(s.mask().count_foreground(), 0);
    }
    assert!(synth_scenes(1, 16, &spec, &NoiseSpec::default(), 0).is_err());
    let ids: Vec<_> = a.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids[0], "synth_0000");
}

#[test]
fn synthetic_targets_stand_out_locally() {
    let noise = NoiseSpec::default();
    let spec = TargetSpec::default();
    let amplitude = spec.peak_snr * noise.sigma;
    for s in synth_scenes(10, 64, &spec, &noise, 12).unwrap() {
        let scale = s.image().depth().max_value() as f64;
        let value = |r: usize, c: usize| s.image().pixels().get(r, c) as f64 / scale;
        for region in cluster8(s.mask()) {
            let peak = region.pixels.iter().map(|&(r, c)| value(r, c)).fold(f64::MIN, f64::max);
            let b = region.bbox;
            let (r0, c0) = (b.row_min.saturating_sub(3), b.col_min.saturating_sub(3));
            let (r1, c1) = ((b.row_max + 3).min(63), (b.col_max + 3).min(63));
            let ring: Vec<f64> = (r0..=r1)
                .flat_map(|r| (c0..=c1).map(move |c| (r, c)))
                .filter(|&(r, c)| !s.mask().get(r, c))
                .map(|(r, c)| value(r, c))
                .collect();
            let surround = ring.iter().sum::<f64>() / ring.len() as f64;
            assert!(peak - surround > 0.5 * amplitude, "{} at {:?}", s.id, region.centroid);
        }
    }
}

#[test]
fn manifest_loading_is_order_stable() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = synth_scenes(4, 32, &TargetSpec::default(), &NoiseSpec::default(), 13).unwrap();
    let mut entries = Vec::new();
    for s in &scenes {
        let image_path = format!("{}_img.png", s.id);
        let mask_path = format!("{}_mask.png", s.id);
        write_image_png(dir.path().join(&image_path), s.image()).unwrap();
        write_mask_png(dir.path().join(&mask_path), s.mask()).unwrap();
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image_path: image_path.into(),
            mask_path: mask_path.into(),
            split: Split::Train,
        });
    }
    save_manifest(dir.path().join("manifest.json"), &entries).unwrap();
    let loaded = load_manifest(dir.path().join("manifest.json")).unwrap();
    let back: Vec<Scene> = loaded.iter().map(|e| read_scene(e).unwrap()).collect();
    assert_eq!(back, scenes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tiling_is_lossless(h in 1usize..90, w in 1usize..90, size in 32usize..70, seed in any::<u64>()) {
        let mut r = rng(seed);
        let raster: Raster<u8> = Raster::from_fn(h, w, |_, _| r.random());
        prop_assert_eq!(stitch(&tile(&raster, size).unwrap()).unwrap(), raster);
    }
}
