pub mod autodiff;
pub mod gradcheck;
pub mod opt;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod vec3;

pub use scalar::Scalar;
