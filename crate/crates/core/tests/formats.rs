use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsesplat::io::synthetic::random_scene;
use sparsesplat::io::{
    dump_framebuffer, framebuffer_from_bytes, framebuffer_to_bytes, load_framebuffer, load_query_set, load_scene,
    save_query_set, save_scene, scene_from_bytes, scene_to_bytes, FormatError, QueryEntry, QuerySetFile,
};
use sparsesplat::raster::{ChannelTag, Framebuffer};
use sparsesplat::{Error, Scene, SceneConfig};

fn scene(seed: u64) -> Scene {
    random_scene(
        seed,
        40,
        SceneConfig {
            num_levels: 3,
            num_atoms: 32,
            top_k: 4,
            feature_dim: 6,
        },
    )
    .unwrap()
}

fn framebuffer(seed: u64) -> Framebuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..9 * 5 * 4).map(|_| rng.random_range(-10.0f32..10.0)).collect();
    Framebuffer::from_data(9, 5, 4, ChannelTag::DenseFeature, data).unwrap()
}

fn query_set(seed: u64) -> QuerySetFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = || (0..5).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
    QuerySetFile {
        dim: 5,
        canonicals: vec![v(), v(), v()],
        queries: (0..4)
            .map(|i| QueryEntry {
                name: format!("q{i}"),
                vector: v(),
                gt_mask_path: (i % 2 == 0).then(|| format!("masks/q{i}.json")),
            })
            .collect(),
    }
}

#[test]
fn files_round_trip_byte_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let s = scene(seed);
        let path = dir.path().join(format!("s{seed}.lsv2"));
        save_scene(&path, &s).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(scene_to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());

        let fb = framebuffer(seed);
        let path = dir.path().join(format!("f{seed}.lsfb"));
        dump_framebuffer(&path, &fb).unwrap();
        let back = load_framebuffer(&path).unwrap();
        assert_eq!(back, fb);
        assert_eq!(framebuffer_to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());

        let q = query_set(seed);
        let path = dir.path().join(format!("q{seed}.json"));
        save_query_set(&path, &q).unwrap();
        let back = load_query_set(&path).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.to_json().unwrap().as_bytes(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn special_float_values_survive() {
    let data = vec![0.0, -0.0, f32::MIN_POSITIVE, f32::MAX, -f32::MAX, 1e-40, f32::EPSILON, 1.0 / 3.0];
    let fb = Framebuffer::from_data(2, 2, 2, ChannelTag::Coefficient, data.clone()).unwrap();
    let back = framebuffer_from_bytes(&framebuffer_to_bytes(&fb).unwrap()).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.data), bits(&data));
}

#[test]
fn every_truncation_is_a_typed_error() {
    let sb = scene_to_bytes(&scene(1)).unwrap();
    for cut in 0..sb.len() {
        match scene_from_bytes(&sb[..cut]) {
            Err(Error::Format(FormatError::Truncated { offset, .. })) => assert_eq!(offset, cut),
            other => panic!("scene cut at {cut}: {other:?}"),
        }
    }
    let fb = framebuffer_to_bytes(&framebuffer(1)).unwrap();
    for cut in 0..fb.len() {
        assert!(
            matches!(framebuffer_from_bytes(&fb[..cut]), Err(Error::Format(FormatError::Truncated { .. }))),
            "framebuffer cut at {cut}"
        );
    }
}

#[test]
fn header_corruption_is_classified() {
    let mut sb = scene_to_bytes(&scene(2)).unwrap();
    sb[1] = b'?';
    assert!(matches!(scene_from_bytes(&sb), Err(Error::Format(FormatError::BadMagic { .. }))));

    let mut fb = framebuffer_to_bytes(&framebuffer(2)).unwrap();
    fb[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        framebuffer_from_bytes(&fb),
        Err(Error::Format(FormatError::UnsupportedVersion { found: 2, .. }))
    ));

    let mut fb = framebuffer_to_bytes(&framebuffer(2)).unwrap();
    fb[20] = 0xff;
    assert!(matches!(framebuffer_from_bytes(&fb), Err(Error::Format(FormatError::UnknownTag(0xff)))));

    // a scene file fed to the framebuffer reader
    let sb = scene_to_bytes(&scene(2)).unwrap();
    assert!(matches!(framebuffer_from_bytes(&sb), Err(Error::Format(FormatError::BadMagic { .. }))));

    let mut sb = scene_to_bytes(&scene(2)).unwrap();
    sb.extend_from_slice(&[1, 2, 3]);
    assert!(matches!(
        scene_from_bytes(&sb),
        Err(Error::Format(FormatError::TrailingBytes { count: 3, .. }))
    ));

    // K larger than L in the header
    let mut sb = scene_to_bytes(&scene(2)).unwrap();
    sb[20..24].copy_from_slice(&64u32.to_le_bytes());
    assert!(matches!(scene_from_bytes(&sb), Err(Error::Format(_))));
}

#[test]
fn random_byte_flips_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sb = scene_to_bytes(&scene(3)).unwrap();
    let fb = framebuffer_to_bytes(&framebuffer(3)).unwrap();
    for _ in 0..2000 {
        let mut s = sb.clone();
        let at = rng.random_range(0..s.len());
        s[at] ^= 1 << rng.random_range(0..8);
        // payload flips may still decode to a valid scene; anything else must be a format error
        if let Err(e) = scene_from_bytes(&s) {
            assert!(matches!(e, Error::Format(_)), "flip at {at}: {e}");
        }
        let mut f = fb.clone();
        let at = rng.random_range(0..f.len());
        f[at] ^= 1 << rng.random_range(0..8);
        if let Err(e) = framebuffer_from_bytes(&f) {
            assert!(matches!(e, Error::Format(_) | Error::Validation(_)), "flip at {at}: {e}");
        }
    }
}

#[test]
fn malformed_query_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    for text in ["", "[]", "{\"D\": 2, \"canonicals\": []}", "{\"D\": \"two\", \"canonicals\": [], \"queries\": []}"] {
        std::fs::write(&path, text).unwrap();
        assert!(
            matches!(load_query_set(&path), Err(Error::Format(FormatError::Json(_)))),
            "{text:?}"
        );
    }
    std::fs::write(&path, [0xff, 0xfe, 0x00]).unwrap();
    assert!(matches!(load_query_set(&path), Err(Error::Format(FormatError::Json(_)))));

    let mut dup = query_set(4);
    dup.queries[1].name = dup.queries[0].name.clone();
    assert!(matches!(QuerySetFile::from_json(&serde_json::to_string(&dup).unwrap()), Err(Error::Validation(_))));
}

#[test]
fn missing_files_report_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.lsv2");
    match load_scene(&path) {
        Err(Error::Io { path: p, .. }) => assert_eq!(p, path),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load_framebuffer(&path), Err(Error::Io { .. })));
    assert!(matches!(load_query_set(&path), Err(Error::Io { .. })));
}
