//! Synthetic shape families, dataset splits, and mesh/point file formats.

pub mod dataset;
pub mod io;
pub mod shapes;

pub use dataset::{
    generate_dataset, latin_hypercube, load_split, materialize, read_manifest, write_dataset, Dataset,
    DatasetManifest, DatasetSplit, LoadedShape, ManifestShape, Materialized, ShapeEntry, Split, SplitCounts,
    DATASET_MANIFEST,
};
pub use io::{load_mesh, load_obj, load_ply, load_points, save_obj, save_ply, PlyData};
pub use shapes::{generate_shape, Family, ParamRange, ShapeSpec};
