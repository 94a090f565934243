//! Fixtures shared by the criterion benchmarks in `benches/`.

use kpred_core::data::{generate_shape, latin_hypercube, ShapeSpec};
use kpred_core::geometry::{normalize_unit_cube, sample_mesh_surface};
use kpred_core::{Family, PointCloud, Result, TriMesh};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One table from the procedural family, normalized, with `n` surface samples.
pub fn table(n: usize, seed: u64) -> Result<(TriMesh, PointCloud)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = latin_hypercube(Family::Table, 1, &mut rng).remove(0);
    let mesh = generate_shape(&ShapeSpec::new(Family::Table, params, seed)?)?;
    let cloud = sample_mesh_surface(&mesh, n, seed)?;
    let (cloud, t) = normalize_unit_cube(&cloud)?;
    let mesh = mesh.map_vertices(|p| t.apply(p));
    Ok((mesh, cloud))
}
