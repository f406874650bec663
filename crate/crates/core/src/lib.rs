pub mod cli;
pub mod corpus;
pub mod diffcore;
pub mod disentangle;
pub mod graphbuild;
pub mod inter_encoder;
pub mod intra_encoder;
pub mod objective;
pub mod trainer;
