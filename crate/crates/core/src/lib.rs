//! Capacity-table scheduling for overcommitted serverless clusters.
//!
//! The crate is `no_std` (with `alloc`): every algorithm, including the
//! discrete-event simulator, is pure computation over in-memory values. File
//! formats, configuration parsing and the command line live in the `capsched`
//! companion crate.
#![no_std]
extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod capacity;
pub mod cluster;
pub mod model;
pub mod oracle;
pub mod predictor;
pub mod rng;
pub mod scaling;
pub mod scheduler;
pub mod sim;
pub mod time;

pub use model::{
    qos_threshold, validate_spec, CapacityEntry, Colocation, ConcurrencyInfo, FunctionId,
    FunctionRegistry, FunctionSpec, InstanceId, InstanceRecord, InstanceState, NodeId, NodeState,
    ProfileVector, Resources,
};
pub use time::SimTime;
