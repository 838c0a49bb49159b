pub mod adapt;
pub mod config;
pub mod eval;
pub mod graph;
pub mod metatest;
pub mod metatrain;
pub mod nf;
pub mod persistence;
pub mod run;
pub mod scoring;
pub mod seeds;
pub mod signals;
