use std::path::Path;

use kpred_core::cage::{apply_cage, deform_cage, mean_value_coordinates, mvc_matrix, Cage, CageTemplate, InfluenceField};
use kpred_core::data::io::{encode_ply_binary, format_obj, parse_obj, parse_ply};
use kpred_core::data::{latin_hypercube, Family};
use kpred_core::geometry::{
    chamfer_distance, farthest_point_sampling, normalize_unit_cube, random_slice, unilateral_chamfer, FpsStart, Point,
    PointCloud, TriMesh,
};
use kpred_core::retrieval::global_l1;
use kpred_core::storage::{decode_blob, encode_blob, BlobData, TensorBlob};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point() -> impl Strategy<Value = Point> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Point::new(x, y, z))
}

fn cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(point(), 1..=max).prop_map(|p| PointCloud::new(p).unwrap())
}

fn blob_data(n: usize) -> BoxedStrategy<BlobData> {
    prop_oneof![
        prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n).prop_map(BlobData::F32),
        prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n).prop_map(BlobData::F64),
        prop::collection::vec(any::<u32>(), n).prop_map(BlobData::U32),
    ]
    .boxed()
}

fn blob() -> impl Strategy<Value = TensorBlob> {
    prop::collection::vec(0u32..5, 0..=4).prop_flat_map(|dims| {
        let n = dims.iter().product::<u32>() as usize;
        blob_data(n).prop_map(move |data| TensorBlob::new(dims.clone(), data).unwrap())
    })
}

fn bits(b: &TensorBlob) -> Vec<u64> {
    match &b.data {
        BlobData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
        BlobData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
        BlobData::U32(v) => v.iter().map(|&x| x as u64).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blob_round_trip_is_bit_exact(b in blob()) {
        let bytes = encode_blob(&b);
        prop_assert_eq!(bytes.len(), 12 + 4 * b.dims.len() + bits(&b).len() * match b.data {
            BlobData::F64(_) => 8,
            _ => 4,
        });
        let back = decode_blob(&bytes, Path::new("p")).unwrap();
        prop_assert_eq!(&back.dims, &b.dims);
        prop_assert_eq!(bits(&back), bits(&b));
        prop_assert_eq!(encode_blob(&back), bytes);
    }

    #[test]
    fn truncated_blobs_are_rejected(b in blob(), cut in 1usize..8) {
        let bytes = encode_blob(&b);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_blob(&bytes[..keep], Path::new("p")).is_err());
    }

    #[test]
    fn chamfer_is_sum_of_unilateral_terms(a in cloud(40), b in cloud(40)) {
        let cd = chamfer_distance(&a, &b).unwrap();
        prop_assert_eq!(cd, unilateral_chamfer(&a, &b).unwrap() + unilateral_chamfer(&b, &a).unwrap());
        prop_assert_eq!(cd, chamfer_distance(&b, &a).unwrap());
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn slices_are_subsets(pc in cloud(60), gamma in 0.0..0.95f64, seed in any::<u64>()) {
        let removed = (gamma * pc.len() as f64).ceil() as usize;
        if removed >= pc.len() {
            prop_assert!(random_slice(&pc, gamma, seed).is_err());
            return Ok(());
        }
        let s = random_slice(&pc, gamma, seed).unwrap();
        prop_assert_eq!(s.cloud.len(), pc.len() - removed);
        prop_assert!(s.kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(unilateral_chamfer(&s.cloud, &pc).unwrap(), 0.0);
    }

    #[test]
    fn fps_picks_distinct_points(pc in cloud(50), k in 1usize..50) {
        let k = k.min(pc.len());
        let idx = farthest_point_sampling(&pc, k, FpsStart::Lexicographic).unwrap();
        prop_assert_eq!(idx.len(), k);
        let distinct: std::collections::BTreeSet<_> = pc.select(&idx).unwrap().points().iter()
            .map(|p| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits())).collect();
        let unique_points: std::collections::BTreeSet<_> = pc.points().iter()
            .map(|p| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits())).collect();
        prop_assert_eq!(distinct.len(), k.min(unique_points.len()));
    }

    #[test]
    fn normalization_fits_unit_cube(pc in cloud(40).prop_filter("extent", |pc| {
        let (lo, hi) = pc.bounding_box();
        (hi - lo).max() > 1e-6
    })) {
        let (n, t) = normalize_unit_cube(&pc).unwrap();
        let (lo, hi) = n.bounding_box();
        prop_assert!(((hi - lo).max() - 1.0).abs() < 1e-12);
        prop_assert!((lo.coords + hi.coords).norm() < 1e-12);
        for (a, b) in t.invert_cloud(&n).points().iter().zip(pc.points()) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn mvc_reproduces_interior_points(
        scale in (0.5..2.0f64, 0.5..2.0f64, 0.5..2.0f64),
        dir in point(),
        t in 0.0..0.9f64,
    ) {
        let mesh = CageTemplate::Icosphere1.unit_mesh().map_vertices(|p| Point::new(p.x * scale.0, p.y * scale.1, p.z * scale.2));
        let cage = Cage::new(mesh, None).unwrap();
        // Scaling the unit sphere by the smallest factor keeps the point inside the inscribed region.
        let r = scale.0.min(scale.1).min(scale.2) * 0.8 * t;
        let x = Point::from(dir.coords.try_normalize(1e-9).unwrap_or(dir.coords) * r);
        let w = mean_value_coordinates(&x, &cage);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let rec = cage.vertices().iter().zip(&w).fold(Point::origin(), |acc, (v, wi)| acc + v.coords * *wi);
        prop_assert!((rec - x).norm() < 1e-9);
    }

    #[test]
    fn equal_keypoints_leave_shape_unchanged(kps in prop::collection::vec(point(), 1..5), values in prop::collection::vec(-1.0..1.0f64, 60)) {
        let cage = Cage::new(CageTemplate::Icosphere0.unit_mesh().map_vertices(|p| Point::from(p.coords * 2.0)), None).unwrap();
        let pts: Vec<Point> = kps.iter().map(|p| Point::from(p.coords * 0.5)).collect();
        let w = mvc_matrix(&pts, &cage);
        let n_k = kps.len();
        let inf = InfluenceField::new(n_k, 12, values[..n_k * 12].to_vec(), vec![true; n_k * 12]).unwrap();
        let moved = deform_cage(cage.vertices(), &kps, &kps, &inf).unwrap();
        prop_assert_eq!(&moved[..], cage.vertices());
        for (a, b) in apply_cage(&w, &moved).unwrap().iter().zip(&pts) {
            prop_assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn global_distance_is_sum_of_region_distances(
        rows in 1usize..6, dim in 1usize..6, seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let per_region: f64 = (0..rows)
            .map(|i| (0..dim).map(|j| (a[i * dim + j] - b[i * dim + j]).abs()).sum::<f64>())
            .sum();
        prop_assert_eq!(global_l1(&a, &b, dim), per_region);
    }

    #[test]
    fn latin_hypercube_uses_every_stratum(n in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = latin_hypercube(Family::Chair, n, &mut rng);
        for (p, r) in Family::Chair.ranges().iter().enumerate() {
            if r.integer {
                continue;
            }
            let mut strata: Vec<usize> = samples
                .iter()
                .map(|s| (((s[p] - r.lo) / (r.hi - r.lo)) * n as f64).floor().min(n as f64 - 1.0) as usize)
                .collect();
            strata.sort_unstable();
            prop_assert_eq!(strata, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mesh_files_round_trip(verts in prop::collection::vec(point(), 3..30), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = verts.len() as u32;
        let faces: Vec<[u32; 3]> = (0..10).map(|_| [rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n)]).collect();
        let mesh = TriMesh { vertices: verts, faces };
        let ply = parse_ply(&encode_ply_binary(&mesh.vertices, &mesh.faces), Path::new("m.ply")).unwrap();
        prop_assert_eq!(&ply.vertices, &mesh.vertices);
        prop_assert_eq!(&ply.faces, &mesh.faces);
        let obj = parse_obj(&format_obj(&mesh), Path::new("m.obj")).unwrap();
        prop_assert_eq!(obj, mesh);
    }
}
