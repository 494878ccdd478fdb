use nalgebra::{Matrix4, SymmetricEigen, Vector3};
use occsplat::am_vae::{quantize, tokens_from_bytes, tokens_to_bytes, Codebook, LatentField, SceneTokens, TokenGrid};
use occsplat::geometry::{build_covariance, project_covariance};
use occsplat::imageio::{decode_pfm, decode_pgm, encode_pfm, encode_pgm};
use occsplat::metrics::{binary_iou, l2_trajectory, miou};
use occsplat::occupancy::{recombine, split_air};
use occsplat::splat::rasterize;
use occsplat::world::{lovasz_binary, lovasz_softmax, FrameInput, WorldConfig, WorldModel};
use occsplat::{CameraModel, ClassSet, Gaussian, GaussianSet, Rotation, ScaleVector, SemanticVoxelGrid};
use proptest::prelude::*;

fn grid_strategy(classes: u16) -> impl Strategy<Value = SemanticVoxelGrid> {
    (1usize..6, 1usize..6, 1usize..4).prop_flat_map(move |(x, y, z)| {
        proptest::collection::vec(0..classes as u8, x * y * z).prop_map(move |labels| {
            SemanticVoxelGrid::new([x, y, z], 0.5, [-1.0, -1.0, 0.0], classes, labels).unwrap()
        })
    })
}

fn grid_pair(classes: u16) -> impl Strategy<Value = (SemanticVoxelGrid, SemanticVoxelGrid)> {
    grid_strategy(classes).prop_flat_map(move |g| {
        let n = g.len();
        (Just(g), proptest::collection::vec(0..classes as u8, n))
            .prop_map(|(g, labels)| (g.clone(), g.with_labels(labels).unwrap()))
    })
}

fn quat() -> impl Strategy<Value = [f64; 4]> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
        .prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
}

fn gaussian(classes: usize) -> impl Strategy<Value = Gaussian> {
    (
        (-1.5..1.5f64, -1.5..1.5f64, 1.0..6.0f64),
        quat(),
        [-2.5..-0.8f64, -2.5..-0.8f64, -2.5..-0.8f64],
        -3.0..3.0f64,
        proptest::collection::vec(-2.0..2.0f64, classes),
    )
        .prop_map(|((x, y, z), q, s, o, c)| Gaussian {
            mean: Vector3::new(x, y, z),
            rotation: Rotation::from_raw(q),
            scale: ScaleVector::from_log(s),
            opacity_logit: o,
            class_logits: c,
            anchor: None,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn split_then_recombine_is_identity(g in grid_strategy(6)) {
        let s = split_air(&g, &ClassSet::all_non_air(6));
        prop_assert_eq!(recombine(&s.air_part, &s.nonair_part).unwrap(), g);
    }

    #[test]
    fn split_parts_are_disjoint(g in grid_strategy(6)) {
        let s = split_air(&g, &ClassSet::all_non_air(6));
        for (a, b) in s.air_part.labels().iter().zip(s.nonair_part.labels()) {
            prop_assert!(*a == 0 || *b == 0);
        }
    }

    #[test]
    fn grid_bytes_round_trip(g in grid_strategy(17)) {
        prop_assert_eq!(SemanticVoxelGrid::from_bytes(&g.to_bytes()).unwrap(), g);
    }

    #[test]
    fn covariance_is_symmetric_psd(q in quat(), s in [0.01..3.0f64, 0.01..3.0f64, 0.01..3.0f64]) {
        let sigma = build_covariance(&Rotation::from_raw(q), &ScaleVector::from_scales(s));
        prop_assert_eq!(sigma, sigma.transpose());
        let eig = SymmetricEigen::new(sigma).eigenvalues;
        prop_assert!(eig.iter().all(|v| *v > -1e-12));
        let trace: f64 = s.iter().map(|v| v * v).sum();
        prop_assert!((sigma.trace() - trace).abs() < 1e-9 * trace.max(1.0));
    }

    #[test]
    fn projected_covariance_keeps_the_floor(q in quat(), s in [0.01..1.0f64, 0.01..1.0f64, 0.01..1.0f64],
                                             p in (-1.0..1.0f64, -1.0..1.0f64, 0.5..10.0f64)) {
        let cam = CameraModel::simple(50.0, 64, 48, Matrix4::identity(), 0.1).unwrap();
        let sigma = build_covariance(&Rotation::from_raw(q), &ScaleVector::from_scales(s));
        let c = project_covariance(&sigma, &cam, &Vector3::new(p.0, p.1, p.2)).unwrap();
        prop_assert_eq!(c, c.transpose());
        let eig = SymmetricEigen::new(c).eigenvalues;
        prop_assert!(eig.iter().all(|v| *v >= 0.3 - 1e-9));
    }

    #[test]
    fn lovasz_is_bounded_and_zero_when_perfect(n in 1usize..64, seed in any::<u64>()) {
        let fg: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let probs: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f64) / 999.0).collect();
        let l = lovasz_binary(&probs, &fg);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
        let perfect: Vec<f64> = fg.iter().map(|f| f64::from(u8::from(*f))).collect();
        prop_assert_eq!(lovasz_binary(&perfect, &fg), 0.0);
    }

    #[test]
    fn lovasz_softmax_is_bounded(labels in proptest::collection::vec(0u8..4, 1..40), raw in proptest::collection::vec(0.01..1.0f64, 160)) {
        let n = labels.len();
        let mut probs = raw[..n * 4].to_vec();
        for row in probs.chunks_mut(4) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let l = lovasz_softmax(&probs, 4, &labels);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
    }

    #[test]
    fn iou_scores_lie_in_unit_interval((a, b) in grid_pair(5)) {
        let (_, m) = miou(&a, &b, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((0.0..=1.0).contains(&binary_iou(&a, &b).unwrap()));
        prop_assert_eq!(miou(&a, &a, None).unwrap().1, 1.0);
        prop_assert_eq!(binary_iou(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn l2_of_identical_trajectories_is_zero(d in proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 6..10)) {
        let d: Vec<[f64; 2]> = d.into_iter().map(|(x, y)| [x, y]).collect();
        prop_assert_eq!(l2_trajectory(&d, &d).unwrap().marks, [0.0; 3]);
    }

    #[test]
    fn image_codecs_round_trip(w in 1usize..8, h in 1usize..8, seed in any::<u32>()) {
        let depth: Vec<f64> = (0..w * h).map(|i| f64::from((seed as f32) * 1e-3 + i as f32)).collect();
        let (dw, dh, back) = decode_pfm(&encode_pfm(w, h, &depth)).unwrap();
        prop_assert_eq!((dw, dh), (w, h));
        prop_assert!(back.iter().zip(&depth).all(|(a, b)| f64::from(*a) == *b));
        let labels: Vec<u8> = (0..w * h).map(|i| ((seed as usize + i) % 17) as u8).collect();
        prop_assert_eq!(decode_pgm(&encode_pgm(w, h, &labels, 17)).unwrap(), (w, h, labels));
    }

    #[test]
    fn token_bytes_round_trip(dims in (1usize..4, 1usize..4, 1usize..3), k in 2usize..600, seed in any::<u64>()) {
        let n = dims.0 * dims.1 * dims.2;
        let grid = |off: u64| TokenGrid {
            dims: [dims.0, dims.1, dims.2],
            codebook_size: k,
            tokens: (0..n).map(|i| (seed.wrapping_add(off).wrapping_mul(i as u64 + 7) % k as u64) as u16).collect(),
        };
        let t = SceneTokens { air: grid(0), nonair: grid(1) };
        prop_assert_eq!(tokens_from_bytes(&tokens_to_bytes(&t).unwrap()).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rendered_mass_is_consistent(gs in proptest::collection::vec(gaussian(3), 1..12)) {
        let cam = CameraModel::simple(20.0, 16, 12, Matrix4::identity(), 0.1).unwrap();
        let mut set = GaussianSet::new(3);
        let (zmin, zmax) = gs.iter().fold((f64::MAX, 0.0f64), |(lo, hi), g| (lo.min(g.mean.z), hi.max(g.mean.z)));
        for g in gs {
            set.push(g);
        }
        let v = rasterize(&set, &cam).unwrap();
        for px in 0..16 * 12 {
            let a = v.alpha_sum[px];
            prop_assert!((0.0..1.0).contains(&a));
            let mass: f64 = v.class_dist[px * 3..px * 3 + 3].iter().sum();
            prop_assert!((mass - a).abs() < 1e-12);
            prop_assert!(v.depth[px] >= zmin * a - 1e-12 && v.depth[px] <= zmax * a + 1e-12);
        }
    }

    #[test]
    fn quantizer_picks_a_nearest_entry(entries in proptest::collection::vec(-1.0..1.0f32, 8 * 4),
                                      data in proptest::collection::vec(-1.0..1.0f32, 5 * 4)) {
        let book = Codebook::from_entries("p", 4, entries.clone());
        let field = LatentField { dims: [5, 1, 1], channels: 4, data: data.clone() };
        let (tokens, q) = quantize(&field, &book).unwrap();
        for (i, z) in data.chunks(4).enumerate() {
            let dist = |e: usize| -> f64 {
                z.iter().zip(&entries[e * 4..e * 4 + 4]).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum()
            };
            let t = tokens.tokens[i] as usize;
            prop_assert!((0..8).all(|e| dist(t) <= dist(e)));
            prop_assert_eq!(&q.data[i * 4..i * 4 + 4], &entries[t * 4..t * 4 + 4]);
        }
    }

    #[test]
    fn world_outputs_ignore_the_future(seed in any::<u64>(), tau in 0usize..3) {
        let cfg = WorldConfig { embed_dim: 8, token_width: 2, heads: 2, layers: 1, context: 4, seed, ..WorldConfig::default() };
        let model = WorldModel::new(cfg, [2, 3, 2], 4).unwrap();
        let frame = |s: u64| FrameInput {
            air: (0..12).map(|i| ((s + i) % 4) as u16).collect(),
            nonair: (0..12).map(|i| ((s * 3 + i) % 4) as u16).collect(),
            prev_disp: [s as f32 * 0.1, -0.2],
        };
        let a: Vec<FrameInput> = (0..4).map(|t| frame(seed % 97 + t)).collect();
        let mut b = a.clone();
        for (t, f) in b.iter_mut().enumerate().skip(tau + 1) {
            *f = frame(seed % 89 + 50 + t as u64);
        }
        let (ta, tb) = (model.forward(&a).unwrap(), model.forward(&b).unwrap());
        let width = 2 * 2 * 4;
        for s in 0..6 {
            let lo = s * 4 * width;
            prop_assert_eq!(&ta.logits[lo..lo + (tau + 1) * width], &tb.logits[lo..lo + (tau + 1) * width]);
        }
        prop_assert_eq!(&ta.ego[..2 * (tau + 1)], &tb.ego[..2 * (tau + 1)]);
    }
}
