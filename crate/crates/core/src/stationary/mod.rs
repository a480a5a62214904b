//! Stationary-profile machinery for the adder model: the birth-size fixed
//! point `eta*`, the density `pi*`, weighted total-variation distances, the
//! Foster–Lyapunov drift check and a numerical Doeblin minorant.

mod density;
mod doeblin;
mod drift;
mod ergodicity;
mod profile;

pub use density::{default_v, weighted_tv, CellGrid, Density2D};
pub use doeblin::{
    compare_minorant, doeblin_minorant, skeleton_density, DoeblinConfig, DoeblinConstants, Minorant, MinorantCheck,
    SkeletonEstimate, WindowConstants,
};
pub use drift::{adder_drift_constants, adder_markov, check_adder_drift, check_drift, drift_grid, DriftReport};
pub use ergodicity::{
    ergodicity_report, pi_star_moment, rescaled_profiles, stationary_target, DecayRow, DecayTable,
    ErgodicityOptions,
};
pub use profile::{solve_eta_star, solve_with, EtaOperator, EtaStar, EtaStarOptions};
