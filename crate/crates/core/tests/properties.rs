use hgg::graph::{build_graph, face_hop_neighbors, nearest_vertex_assign, HumanGaussianGraph};
use hgg::graphops::{refine_gaussians, run_blocks, GraphConfig, GraphParams};
use hgg::skinning::lbs_pose_vertices;
use hgg::splat::{composite_pixel, Fragment};
use hgg::synthlab::{icosphere, make_body, make_scene_with, oracle_hops, oracle_nearest, SceneConfig};
use hgg::types::Vec3;
use hgg::Pose;
use proptest::prelude::*;

fn vec3() -> impl Strategy<Value = Vec3> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn small_graph(seed: u64) -> HumanGaussianGraph {
    let cfg = SceneConfig { frames: 2, gaussians: 40, cameras: 1, image_size: 4, seed, ..SceneConfig::default() };
    let scene = make_scene_with(&make_body(1, 3), &cfg).unwrap();
    build_graph(scene.frames, scene.poses, scene.template, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_assignment_matches_scan(
        vertices in prop::collection::vec(vec3(), 1..60),
        centers in prop::collection::vec(vec3(), 0..120),
    ) {
        prop_assert_eq!(nearest_vertex_assign(&centers, &vertices).unwrap(), oracle_nearest(&centers, &vertices));
    }

    #[test]
    fn hop_neighborhoods_are_symmetric_and_nested(subdivisions in 0usize..2, d0 in 0usize..4) {
        let (v, f) = icosphere(subdivisions);
        let near = face_hop_neighbors(&f, v.len(), d0);
        let far = face_hop_neighbors(&f, v.len(), d0 + 1);
        prop_assert_eq!(&near, &oracle_hops(&f, v.len(), d0));
        for (u, list) in near.iter().enumerate() {
            prop_assert!(list.contains(&u));
            for &w in list {
                prop_assert!(near[w].contains(&u));
                prop_assert!(far[u].contains(&w));
            }
        }
    }

    #[test]
    fn composited_alpha_stays_in_unit_interval(
        frags in prop::collection::vec((0.0..1.0f64, 0.0..0.99f64), 0..40),
    ) {
        let frags: Vec<Fragment<f64>> =
            frags.into_iter().map(|(c, a)| Fragment { color: [c, 1.0 - c, 0.5], alpha: a }).collect();
        let (rgb, alpha, _) = composite_pixel(&frags);
        prop_assert!((0.0..=1.0).contains(&alpha));
        for c in rgb {
            prop_assert!(c >= 0.0 && c <= alpha + 1e-12);
        }
    }

    #[test]
    fn root_translation_shifts_every_vertex(t in vec3(), joints in 2usize..5) {
        let body = make_body(0, joints);
        let mut pose = Pose::identity(joints);
        pose.root_translation = t;
        let posed = lbs_pose_vertices(&body, &pose).unwrap();
        for (p, v) in posed.iter().zip(&body.rest_vertices) {
            prop_assert!((p - (v + t)).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_refinement_is_identity(seed in 0u64..1000, layers in 0usize..3) {
        let graph = small_graph(seed);
        let cfg = GraphConfig { dim: 8, layers, heads: 2, share_kv: seed % 2 == 0 };
        let mut params = GraphParams::init(&cfg, graph.n_vertices(), seed).unwrap();
        params.zero_residuals();
        let state = run_blocks(&graph, &params).unwrap();
        let frame = &graph.frames[0].gaussians;
        let refined = refine_gaussians(frame, &graph.evg[0], &state, &params).unwrap();
        for (a, b) in refined.iter().zip(frame) {
            for (x, y) in a.to_raw().iter().zip(b.to_raw().iter()) {
                prop_assert!((x - y).abs() < 1e-7);
            }
        }
    }
}
