pub mod augment;
pub mod batchnorm;
pub mod cli;
pub mod continual;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

// Training allocates and frees multi-megabyte buffers every step; the system
// allocator returns them to the OS each time and pays for the page faults.
#[cfg(feature = "mimalloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
