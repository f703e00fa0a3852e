pub mod autodiff;
pub mod classifier;
pub mod cli;
pub mod error;
pub mod eval;
pub mod icl;
pub mod metalearn;
pub mod textdata;
