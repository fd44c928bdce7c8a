//! Dense tensors, gridded field sequences and the GRD1 file format.

mod field;
mod grd1;
mod tensor;

pub use field::{subsample, upsample_bilinear, FieldSequence, GridMeta};
pub(crate) use field::{upsample_planes, upsample_planes_adjoint};
pub use grd1::{
    decode_grd1, encode_grd1, read_grd1, write_grd1, write_grd1_as, write_sidecar, GRD1_MAGIC,
};
pub use tensor::{make_field, Dtype, Real, Tensor};
