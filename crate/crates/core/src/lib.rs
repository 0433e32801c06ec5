//! Randomized Skorokhod embeddings of centered integer laws into the simple
//! symmetric random walk.

pub mod azema_yor;
pub mod cli;
pub mod figures;
pub mod markovian;
pub mod measure;
pub mod montecarlo;
pub mod numerics;
pub mod oracle;
