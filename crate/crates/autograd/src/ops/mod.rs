pub mod conv;
pub mod deform;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod reduce;
pub mod resample;
pub mod shape;
