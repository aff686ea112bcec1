mod common;

use common::{equivalence_scene, EQUIVALENCE_SCENES};
use sparsesplat::io::synthetic::{default_camera, random_scene};
use sparsesplat::query::QueryEmbedding;
use sparsesplat::raster::{render_dense, ChannelSource, DenseChannels, RenderOptions};
use sparsesplat::sparse::{
    decode, query_pipeline, query_pipeline_with, render_coefficients_dense, splat_multilevel, splat_multilevel_with_stats, splat_sparse,
    QuerySettings, QueryWorkspace, RenderMethod,
};
use sparsesplat::{Error, Scene, SceneConfig, SparseCoefficients};

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn sparse_splat_matches_dense_coefficient_render() {
    for seed in 0..EQUIVALENCE_SCENES {
        let (scene, cam) = equivalence_scene(seed, 16);
        let sparse = splat_sparse(&scene, &cam, 0).unwrap();
        let (dense, _) = render_coefficients_dense(&scene, &cam, &[0], &RenderOptions::default()).unwrap();
        let gap = sparse.fb.max_abs_diff(&dense.fb);
        assert!(gap <= 1e-6, "seed {seed}: {gap}");
        sparse.check_invariants().unwrap();
    }
}

#[test]
fn decoding_matches_rendering_reconstructed_features() {
    for seed in 0..EQUIVALENCE_SCENES {
        let (scene, cam) = equivalence_scene(seed, 16);
        let decoded = decode(&splat_sparse(&scene, &cam, 0).unwrap(), &scene.codebooks).unwrap();
        let direct = render_dense(&scene, &cam, &ChannelSource::Features { level: 0 }, &RenderOptions::default()).unwrap();
        let gap = decoded.maps[0].max_abs_diff(&direct);
        assert!(gap <= 1e-5, "seed {seed}: {gap}");
    }
}

#[test]
fn full_support_is_bitwise_dense() {
    // K = L: every channel receives exactly one add per Gaussian in both paths
    let cfg = SceneConfig {
        num_levels: 1,
        num_atoms: 8,
        top_k: 8,
        feature_dim: 4,
    };
    let scene = random_scene(6, 300, cfg).unwrap();
    let cam = default_camera(40, 40).unwrap();
    let sparse = splat_sparse(&scene, &cam, 0).unwrap();
    let (dense, _) = render_coefficients_dense(&scene, &cam, &[0], &RenderOptions::default()).unwrap();
    assert_eq!(bits(&sparse.fb.data), bits(&dense.fb.data));
}

fn three_level_scene(seed: u64) -> Scene {
    random_scene(
        seed,
        400,
        SceneConfig {
            num_levels: 3,
            num_atoms: 64,
            top_k: 4,
            feature_dim: 8,
        },
    )
    .unwrap()
}

#[test]
fn fused_levels_equal_sequential_renders() {
    let scene = three_level_scene(2);
    let cam = default_camera(48, 48).unwrap();
    let fused = splat_multilevel(&scene, &cam).unwrap();
    let split = fused.split_levels();
    for level in 0..3 {
        let single = splat_sparse(&scene, &cam, level).unwrap();
        assert_eq!(split[level].levels, vec![level]);
        assert_eq!(bits(&split[level].fb.data), bits(&single.fb.data));
    }
}

#[test]
fn fused_pass_blends_twelve_channels_per_gaussian() {
    let scene = three_level_scene(3);
    let cam = default_camera(48, 48).unwrap();
    let (_, stats) = splat_multilevel_with_stats(&scene, &cam).unwrap();
    assert!(stats.blends > 0);
    assert_eq!(stats.channel_updates, 12 * stats.blends);
    assert_eq!(scene.config.blend_width(), 12);
}

#[test]
fn coefficient_mass_equals_coverage() {
    let scene = three_level_scene(4);
    let cam = default_camera(40, 40).unwrap();
    let cmap = splat_multilevel(&scene, &cam).unwrap();
    let ones = DenseChannels::new(1, vec![1.0; scene.len()]).unwrap();
    let coverage = render_dense(&scene, &cam, &ChannelSource::Custom(ones), &RenderOptions::default()).unwrap();
    for row in 0..cam.height {
        for col in 0..cam.width {
            for slot in 0..3 {
                let mass: f32 = cmap.level_at(col, row, slot).iter().sum();
                assert!((mass - coverage.pixel(col, row)[0]).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn shared_one_hot_lights_a_single_channel() {
    let mut scene = three_level_scene(5);
    for g in &mut scene.gaussians {
        g.coeffs[0] = SparseCoefficients::one_hot_k(7, 4, 64).unwrap();
    }
    let cam = default_camera(32, 32).unwrap();
    let cmap = splat_sparse(&scene, &cam, 0).unwrap();
    let ones = DenseChannels::new(1, vec![1.0; scene.len()]).unwrap();
    let coverage = render_dense(&scene, &cam, &ChannelSource::Custom(ones), &RenderOptions::default()).unwrap();
    for (px, cov) in cmap.fb.pixels().zip(coverage.pixels()) {
        for (j, &v) in px.iter().enumerate() {
            if j == 7 {
                assert!((v - cov[0]).abs() <= 1e-6);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn out_of_range_index_is_rejected_before_rendering() {
    let mut scene = three_level_scene(6);
    let cam = default_camera(16, 16).unwrap();
    scene.gaussians[0].coeffs[1] = SparseCoefficients::new(vec![1, 2, 3, 64], vec![0.25; 4]).unwrap();
    assert!(matches!(splat_sparse(&scene, &cam, 1), Err(Error::Validation(_))));
    assert!(matches!(splat_multilevel(&scene, &cam), Err(Error::Validation(_))));
    assert!(splat_sparse(&scene, &cam, 0).is_ok());
}

#[test]
fn decode_rejects_mismatched_codebooks() {
    let scene = three_level_scene(7);
    let cam = default_camera(16, 16).unwrap();
    let cmap = splat_multilevel(&scene, &cam).unwrap();
    let other = random_scene(
        7,
        1,
        SceneConfig {
            num_levels: 3,
            num_atoms: 32,
            top_k: 4,
            feature_dim: 8,
        },
    )
    .unwrap();
    assert!(matches!(decode(&cmap, &other.codebooks), Err(Error::DimensionMismatch { .. })));
    assert!(decode(&cmap, &scene.codebooks[..1]).is_err());
}

fn query_inputs(scene: &Scene) -> (QueryEmbedding, Vec<Vec<f32>>) {
    let atom = |level: usize, j: usize| scene.codebooks[level].atom(j).to_vec();
    (QueryEmbedding::new("probe", atom(0, 3)), vec![atom(0, 10), atom(1, 20)])
}

#[test]
fn instrumentation_does_not_change_outputs() {
    let scene = three_level_scene(8);
    let cam = default_camera(40, 40).unwrap();
    let (q, canon) = query_inputs(&scene);
    let timed = query_pipeline(&scene, &cam, &q, &canon, &QuerySettings::default()).unwrap();
    let plain = query_pipeline(
        &scene,
        &cam,
        &q,
        &canon,
        &QuerySettings {
            instrument: false,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(timed.maps, plain.maps);
    assert_eq!(timed.chosen_level, plain.chosen_level);
    let t = timed.timings.unwrap();
    assert!(t.render_ms >= 0.0 && t.decode_ms >= 0.0 && t.post_ms >= 0.0);
    assert!((t.total_ms() - (t.render_ms + t.decode_ms + t.post_ms)).abs() < 1e-9);
    assert!(plain.timings.is_none());
}

#[test]
fn dense_and_sparse_pipelines_agree() {
    let scene = three_level_scene(9);
    let cam = default_camera(40, 40).unwrap();
    let (q, canon) = query_inputs(&scene);
    let sparse = query_pipeline(&scene, &cam, &q, &canon, &QuerySettings::default()).unwrap();
    let dense = query_pipeline(
        &scene,
        &cam,
        &q,
        &canon,
        &QuerySettings {
            method: RenderMethod::Dense,
            ..Default::default()
        },
    )
    .unwrap();
    for (a, b) in sparse.maps.iter().zip(&dense.maps) {
        let gap = a.scores.iter().zip(&b.scores).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(gap <= 1e-5, "{gap}");
    }
}

#[test]
fn reused_workspace_gives_identical_results() {
    let cam = default_camera(40, 40).unwrap();
    let mut ws = QueryWorkspace::default();
    for seed in [10, 11, 10] {
        let scene = three_level_scene(seed);
        let (q, canon) = query_inputs(&scene);
        let fresh = query_pipeline(&scene, &cam, &q, &canon, &QuerySettings::default()).unwrap();
        let reused = query_pipeline_with(&mut ws, &scene, &cam, &q, &canon, &QuerySettings::default()).unwrap();
        assert_eq!(fresh.maps, reused.maps);
        assert_eq!(ws.coefficients().fb, splat_multilevel(&scene, &cam).unwrap().fb);
    }
}
