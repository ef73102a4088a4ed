pub mod classifier;
pub mod error;
pub mod eval;
pub mod io;
pub mod prototype;
pub mod synth;
pub mod tensor;
pub mod trainer;
