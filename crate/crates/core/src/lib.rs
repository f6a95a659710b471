//! Exact computations on rank-one cutting-and-stacking constructions.
//!
//! Everything is measured with rationals over floors of finite towers, so
//! any value reported as exact is exact.

pub mod correlation;
pub mod error;
pub mod floorset;
pub mod joint;
pub mod poisson;
pub mod ratio;
pub mod sidon;
pub mod spectral;
pub mod tower;

pub use correlation::{brute_force_oracle, CorrelationEngine, CorrelationValue, IntersectionQuery};
pub use error::{Error, Result};
pub use floorset::FloorSet;
pub use ratio::Rational;
pub use tower::{
    extend_stage, floorset_measure, lift_floor_set, new_construction, q_offsets, Construction,
    ConstructionSpec, Schedule, StageParams, StageRule, StageState,
};
pub use sidon::{
    check_growth, check_sidon, classify_tensor_powers, generate_cnu, CnuDescriptor, PhaseReport,
};
pub use spectral::{
    indicator_support_check, lemma_disjointness_check, pk_norm, product_rhs, verify_41, LagFamily,
    PkBlock, PkNormReport,
};
pub use poisson::{
    cylinder_measure, image_conjunction, mc_estimate, sample_configuration, Configuration,
    CylinderConjunction, CylinderEvent, ExactExp,
};
pub use joint::{
    build_sigma, DivergenceScenario, IntPoly, IntervalPermutation, Level, RepulsionScenario,
    SequencePair, WindowRule,
};
