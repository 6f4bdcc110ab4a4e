//! Changes-in-changes and distributional synthetic control estimators for
//! panels with group-level heterogeneity.
//!
//! Outcomes are modelled as `Y = h(U, V, t)` with an individual unobservable
//! `U` and a group-level unobservable `V`. Each estimator first aggregates
//! every (group, period) cell into its within-group quantile function and
//! then works with quantiles of those quantiles: across groups for
//! changes-in-changes ([`cic`]), or across time for the synthetic control
//! ([`dsc`]).
//!
//! The [`sim`] module generates panels with analytic counterfactuals and
//! runs Monte Carlo checks of the estimators against them.

pub mod cic;
pub mod cli;
pub mod diagnostics;
pub mod dsc;
pub mod error;
pub mod panel;
pub mod quantile;
pub mod sim;
pub mod simplex;

pub use error::{Error, Result};
pub use panel::{
    cross_group_curve, load_panel, within_group_quantiles, CellQuantiles, LoadOptions,
    PanelDataset, Role, Schema,
};
pub use quantile::{ecdf, empirical_quantile, QuantileCurve, QuantileGrid, QuantileRule, Sample};
