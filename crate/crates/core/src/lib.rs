pub mod image;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sig;
pub mod tensor;
pub mod train;
