//! Household load-pattern analysis: daily profile ingestion, K-Medoids
//! pattern discovery, feature selection, and softmax-coupled neural
//! ensembles predicting each household's pattern distribution.

pub mod baselines;
pub mod cluster;
pub mod featsel;
pub mod gbt;
pub mod ingest;
pub mod neural;
pub mod pipeline;
pub mod synthgen;
