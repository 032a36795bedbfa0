use super::*;
use crate::forward_models::srgb_encode;

fn flat_light(mut p: SceneParams) -> SceneParams {
    p.light_falloff = 0.0;
    p.light_intensity = 1.0;
    p.shadow_strength = 0.0;
    p
}

#[test]
fn uniform_light_limit() {
    let p = flat_light(SceneParams { specular_count: 2, ..SceneParams::default() });
    let s = synth_scene(&p).unwrap();
    assert!(s.shading.image.data.iter().all(|&v| v == 1.0));
    let mut radiance = s.albedo.image.clone();
    for (r, sp) in radiance.data.iter_mut().zip(&s.specular.image.data) {
        *r += sp;
    }
    assert_eq!(s.composed, srgb_encode(&radiance).unwrap().0);
}

#[test]
fn no_specular_models_agree() {
    let s = synth_scene(&SceneParams { specular_count: 0, ..SceneParams::default() }).unwrap();
    assert_eq!(s.composed_with(&ForwardModel::lambertian()).unwrap(), s.composed);
}

#[test]
fn same_seed_same_tuple() {
    let p = SceneParams { specular_count: 3, seed: 9, light_seed: 4, ..SceneParams::default() };
    assert_eq!(synth_scene(&p).unwrap(), synth_scene(&p).unwrap());
}

#[test]
fn ranges_hold() {
    let ranges = SceneRanges { specular_count: (0, 3), ..SceneRanges::default() };
    let ds = synth_dataset(40, 3, &ranges).unwrap();
    for s in &ds.scenes {
        let (lo, hi) = s.albedo.image.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        let (lo, hi) = s.shading.image.min_max();
        assert!(lo > 0.0 && hi <= 2.0);
        assert!(s.specular.image.min_max().0 >= 0.0);
        let (lo, hi) = s.composed.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        s.verify().unwrap();
        // Stored components are exactly representable in f32.
        for c in s.components() {
            assert!(c.image.data.iter().all(|&v| v == v as f32 as f64));
        }
    }
}

#[test]
fn moving_the_light_keeps_albedo() {
    let p = SceneParams { specular_count: 2, ..SceneParams::default() };
    let a = synth_scene(&p).unwrap();
    let b = synth_scene(&SceneParams { light_pos: [30.0, 2.0], light_seed: 77, ..p }).unwrap();
    assert_eq!(a.albedo, b.albedo);
    assert_ne!(a.shading, b.shading);
    assert_ne!(a.specular, b.specular);
}

#[test]
fn shading_is_smooth_without_shadows() {
    // Largest slope of I / (1 + f r^2) over r bounds any one-pixel difference.
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SceneRanges::default().sample(&mut rng);
        p.shadow_strength = 0.0;
        let s = synth_scene(&p).unwrap();
        let (i, f) = (p.light_intensity, p.light_falloff);
        let bound = (0..100_000)
            .map(|k| {
                let r = k as f64 * 1e-3;
                i * 2.0 * f * r / (1.0 + f * r * r).powi(2)
            })
            .fold(0.0, f64::max)
            * 1.0001
            + 1e-6;
        let img = &s.shading.image;
        let n = p.image_size;
        for y in 0..n {
            for x in 0..n - 1 {
                assert!((img.at(y, x + 1, 0) - img.at(y, x, 0)).abs() <= bound);
                assert!((img.at(x + 1, y, 0) - img.at(x, y, 0)).abs() <= bound);
            }
        }
    }
}

#[test]
fn split_counts() {
    let ds = synth_dataset(10, 1, &SceneRanges::default().with_size(8)).unwrap();
    assert_eq!((ds.train.len(), ds.test.len()), (7, 3));
    assert!(ds.train.iter().all(|i| !ds.test.contains(i)));
    let (tr, te) = split_indices(100, 5);
    assert_eq!((tr.len(), te.len()), (70, 30));
    let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert!(synth_dataset(1, 1, &SceneRanges::default()).is_err());
    let (tr, te) = split_indices(2, 5);
    assert_eq!((tr.len(), te.len()), (1, 1));
}

#[test]
fn invalid_params_rejected() {
    for p in [
        SceneParams { image_size: 2, ..SceneParams::default() },
        SceneParams { light_intensity: 2.5, ..SceneParams::default() },
        SceneParams { specular_sigma: 0.0, ..SceneParams::default() },
        SceneParams { albedo_palette: vec![], ..SceneParams::default() },
        SceneParams { albedo_palette: vec![[1.2, 0.0, 0.0]], ..SceneParams::default() },
        SceneParams { light_falloff: -1.0, ..SceneParams::default() },
    ] {
        assert!(synth_scene(&p).is_err());
    }
}

fn small_dataset() -> Dataset {
    let ranges = SceneRanges { specular_count: (0, 2), ..SceneRanges::default().with_size(12) };
    synth_dataset(6, 11, &ranges).unwrap()
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset();
    let manifest_path = export_dataset(&ds, dir.path()).unwrap();
    let back = import_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);

    let manifest: Manifest = io::read_json(&manifest_path).unwrap();
    let mut ids: Vec<&str> = manifest.scenes.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 6);
    assert_eq!(manifest.count(Split::Train) + manifest.count(Split::Test), 6);
}

#[test]
fn export_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = export_dataset(&small_dataset(), a.path()).unwrap();
    let pb = export_dataset(&small_dataset(), b.path()).unwrap();
    assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
}

#[test]
fn tampered_pfm_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&small_dataset(), dir.path()).unwrap();
    let path = dir.path().join("scenes").join(Dataset::scene_id(2)).join("shading.pfm");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    assert!(matches!(import_dataset(dir.path()), Err(Error::Checksum { .. })));
}

#[test]
fn missing_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&small_dataset(), dir.path()).unwrap();
    fs::remove_file(dir.path().join("scenes").join(Dataset::scene_id(0)).join("albedo.pfm")).unwrap();
    assert!(matches!(import_dataset(dir.path()), Err(Error::MissingFile(_))));
}

#[test]
fn joint_images_stack_channels() {
    let ds = small_dataset();
    let imgs = ds.joint_images(&ds.train, &[ComponentTag::Albedo, ComponentTag::Shading]).unwrap();
    assert_eq!(imgs.len(), ds.train.len());
    assert_eq!(imgs[0].shape(), (12, 12, 6));
    let alb = ds.tonemapped_images(&ds.train[..1], ComponentTag::Albedo).unwrap();
    assert_eq!(imgs[0].channels_range(0, 3).unwrap(), alb[0]);
}
