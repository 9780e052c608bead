pub mod baselines;
pub mod catalog;
pub mod config;
pub mod datagen;
pub mod distance;
pub mod em;
pub mod error;
pub mod index;
pub mod metrics;
pub mod ngram;
pub mod oracle;
pub mod perturb;
pub mod pipeline;
pub mod reconstruct;
pub mod report;
pub mod rng;
pub mod stc;
pub mod time;
pub mod trajectory;
