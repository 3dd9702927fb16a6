//! Command-line orchestration for SPM inpainting: the benchmark harness and
//! the mask-review HTTP service.

pub mod bench;
pub mod review;
pub mod server;

pub use bench::{
    run_benchmark, BenchConfig, BenchError, BenchMethod, BenchRecord, BenchReport, MethodSummary,
};
pub use review::{export_reviewed, ReviewError, ReviewState, ReviewStatus, ReviewStore};
pub use server::{bind_review, router, ReviewService};
