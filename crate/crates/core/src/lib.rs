pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod operators;
pub mod oracle;
pub mod priors;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use error::{Result, SnipsError};
pub use operators::{
    make_block_average, make_inpainting_mask, make_random_projection, make_uniform_blur,
    svd_decompose, Boundary, DegradationSVD, LinearOperator,
};
pub use schedule::{
    make_geometric_schedule, partition_level, partition_spectrum, validate_crossing,
    CrossingReport, NoiseSchedule, Regime, SpectrumPartition,
};
pub use priors::{
    gaussian_score, gmm_denoise, gmm_score, ExternalDenoiser, GaussianPrior, GmmPrior, ScoreModel,
};
pub use score::{conditional_score, step_sizes, ConditionalScore, ConditionalScoreInputs, StepSizeVector};
pub use sampler::{
    snips_sample, snips_sample_chain, snips_sample_many, Init, LevelDiagnostics, SampleBatch,
    SampleResult, SamplerConfig, TracePolicy,
};
pub use oracle::{
    carve_noise_sequence, conditional_score_bruteforce, exact_gaussian_posterior,
    gaussian_posterior_schur, CarvedNoise, GaussianPosterior, GridSpec,
};
pub use diagnostics::{
    dagostino_k2, faithfulness, psnr, sample_vs_mean_gap, FaithfulnessReport, GapReport,
};
pub use harness::{check_names, junit_xml, run_suite, text_table, SuiteEntry, DEFAULT_SUITE_SEED};
