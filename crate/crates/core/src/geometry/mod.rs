//! Tagged triangle meshes and the displacement-field library.

pub mod field;
pub mod mesh;

pub use field::{
    c2_norm_estimate, field_library, params, spectral_norm, Coordinate, DisplacementField,
    FieldSpec, Mat2, Modulation, Profile, Support, Window,
};
pub use mesh::{
    boundary_normal, build_annulus, build_annulus_tagged, build_rectangle, deform, edge_index,
    BoundaryEdge, Mesh, MeshDoc, MeshMeta, Point, SideTags, Tag,
};
