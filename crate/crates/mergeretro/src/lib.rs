//! Panel econometrics for merger retrospectives: difference-in-differences
//! estimators, a conduct-parameter structural model of price-setting,
//! synthetic-control weighting, weighted GMM, and a Monte Carlo simulator.

pub mod did;
pub mod error;
pub mod estimator;
pub mod guide;
pub mod linalg;
pub mod panel;
pub mod report;
pub mod sgmm;
pub mod sim;
pub mod structural;
pub mod weights;

pub use error::{Error, Result};
