pub mod dataset;
pub mod text;
pub mod model;
pub mod training;
pub mod eval;
