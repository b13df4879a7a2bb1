pub mod audio;
pub mod corpus;
pub mod grad;
pub mod models;
pub mod losses;
pub mod trainer;
pub mod eval;
