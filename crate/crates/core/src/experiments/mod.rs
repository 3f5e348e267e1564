//! Toy data, pretraining, the discovery loop, evaluation drivers, the
//! memory/throughput benchmark and model files.

pub mod bench;
pub mod eval;
pub mod gradcheck;
pub mod store;
pub mod toy;
pub mod train;

pub use bench::{benchmark, measure, reports_to_csv, MeasureConfig, BENCH_CSV_HEADER};
pub use eval::{
    direction_response, homogeneity, invert_and_edit, rca_eval, rms_diff, seeded_noise, traversal_magnitudes,
    traverse, DirectionResponse, HomogeneityReport,
};
pub use gradcheck::{check_gradients, GradCheck};
pub use store::{load_denoiser, load_discovery, save_denoiser, save_discovery, DiscoveryBundle};
pub use toy::{estimate_factors, make_dataset, render, Factors, ToyFactorDataset, FACTOR_RANGES, PIXELS, SIDE};
pub use train::{
    discover, discovery_chain, final_loss, pretrain, smoothed, DiscoveryModels, DiscoveryTrainer, MetricsLog,
    MetricsRow,
};
