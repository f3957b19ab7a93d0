pub(crate) mod arith;
pub(crate) mod conv;
pub(crate) mod linalg;
pub(crate) mod loss;
pub(crate) mod norm;
pub(crate) mod shape;
