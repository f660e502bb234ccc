pub mod attribution;
pub mod audit;
pub mod baselines;
pub mod datasets;
pub mod dmta;
pub mod evalkit;
pub mod fingerprint;
pub mod molgraph;
pub mod nestmodel;
pub mod tensor;
pub mod training;
