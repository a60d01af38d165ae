pub mod certify;
pub mod flow;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod probe;
pub mod rng;
pub mod runner;
