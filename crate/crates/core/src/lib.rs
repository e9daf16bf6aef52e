pub mod blur;
pub mod cli;
pub mod image;
pub mod io;
pub mod lie;
pub mod metrics;
pub mod optim;
pub mod projection;
pub mod rasterizer;
pub mod scene;
pub mod synth;
