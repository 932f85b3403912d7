mod elementwise;
mod linalg;
mod nn;
mod shape;
mod spatial;

pub use spatial::conv_out_len;
