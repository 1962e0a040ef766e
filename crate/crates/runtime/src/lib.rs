//! Multi-rank execution: the distributed sample store, collective
//! communication, the data-parallel trainer, the scaling harness and the
//! hyperparameter search.

pub mod comm;
pub mod ddstore;
pub mod hpo;
pub mod launch;
pub mod scaling;
pub mod timing;
pub mod trainer;
