//! Simulated panels with analytic counterfactuals.
//!
//! A [`DgpSpec`] describes either a two-period changes-in-changes design or a
//! long-panel synthetic-control design. [`generate_panel`] draws data from
//! it and the `oracle_*` functions evaluate the true untreated quantile from
//! the closed-form quantile functions of the same spec.

mod dist;
mod mc;

pub use dist::Dist;
pub use mc::{run_monte_carlo, Estimator, McResult, Replication};

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelBuilder, PanelDataset, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub seed: u64,
    pub units_per_group: usize,
    /// Applied to the treated outcomes after treatment.
    #[serde(default)]
    pub effect: Effect,
    pub design: Design,
    /// Estimator whose identifying conditions the design satisfies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<Estimator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Design {
    Cic(CicDesign),
    Dsc(DscDesign),
}

/// Two periods, 0 and 1; treated groups are treated in period 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CicDesign {
    pub treated_groups: usize,
    pub control_groups: usize,
    pub u_treated: Dist,
    pub u_control: Dist,
    pub v_treated: Dist,
    pub v_control: Dist,
    pub outcome: Outcome,
    #[serde(default)]
    pub group_effects: GroupEffects,
    /// Whether the treated supports are claimed to lie inside the control
    /// supports; checked by [`validate`].
    #[serde(default)]
    pub claims_support: bool,
}

/// How `V_gt` evolves within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupEffects {
    /// One draw per group, shared by both periods.
    #[default]
    Persistent,
    /// A fresh draw per (group, period).
    Redrawn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Outcome {
    /// `h(u, v, t) = alpha_t u + beta_t v + delta_t`.
    Additive {
        #[serde(default = "unit_pair")]
        alpha: [f64; 2],
        #[serde(default = "unit_pair")]
        beta: [f64; 2],
        delta: [f64; 2],
    },
    /// `h(u, v, t) = H_t(u + v)`.
    Index { transforms: [Transform; 2] },
}

fn unit_pair() -> [f64; 2] {
    [1.0, 1.0]
}

impl Outcome {
    pub fn eval(&self, u: f64, v: f64, t: usize) -> f64 {
        match self {
            Outcome::Additive { alpha, beta, delta } => alpha[t] * u + beta[t] * v + delta[t],
            Outcome::Index { transforms } => transforms[t].apply(u + v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Exp,
    Affine { intercept: f64, slope: f64 },
}

impl Transform {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Transform::Identity => x,
            Transform::Exp => x.exp(),
            Transform::Affine { intercept, slope } => intercept + slope * x,
        }
    }
}

/// Long panel with one treated group `treated` and controls `c01, c02, ...`.
///
/// `Y_igt = U_igt + delta_j + V_gt` with `U` drawn from `u_pre` or `u_post`
/// and `delta_j` the regime shift, so `Y_gt(tau_u) = a_j(tau_u) + V_gt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DscDesign {
    pub pre_periods: usize,
    pub post_periods: usize,
    pub u_pre: Dist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_post: Option<Dist>,
    /// Regime shifts `[delta_pre, delta_post]`.
    #[serde(default)]
    pub delta: [f64; 2],
    /// True weights on the controls.
    pub lambda: Vec<f64>,
    pub v_model: VModel,
}

impl DscDesign {
    fn u(&self, post: bool) -> &Dist {
        match (&self.u_post, post) {
            (Some(d), true) => d,
            _ => &self.u_pre,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum VModel {
    /// `V_gt` iid over `t` from a per-control family, independently across
    /// groups; the treated family is the quantile mixture of the controls.
    Independent { controls: Vec<Dist> },
    /// `V_gt = mu_g theta_t` with a common `theta_t`; the treated loading is
    /// `sum_g lambda_g mu_g`.
    Factor { loadings: Vec<f64>, theta: Dist },
    /// One rank `r_t ~ U(0, 1)` per period shared by all groups:
    /// `V_gt = Q_g(r_t)`, and the treated `V` is the mixture quantile at
    /// `r_t`. The treated series is then an exact combination of the controls.
    Comonotone { controls: Vec<Dist> },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    #[default]
    None,
    Shift { delta: f64 },
    Affine { intercept: f64, slope: f64 },
}

impl Effect {
    pub fn apply(&self, y: f64) -> f64 {
        match *self {
            Effect::None => y,
            Effect::Shift { delta } => y + delta,
            Effect::Affine { intercept, slope } => intercept + slope * y,
        }
    }
}

impl DgpSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DgpSpec = serde_json::from_str(text)?;
        validate(&spec)?;
        Ok(spec)
    }

    /// Multiplies the size knobs: groups per arm and units for changes-in-
    /// changes, periods per regime and units for synthetic control.
    pub fn scaled(&self, factor: usize) -> Self {
        let mut s = self.clone();
        s.units_per_group *= factor;
        match &mut s.design {
            Design::Cic(c) => {
                c.treated_groups *= factor;
                c.control_groups *= factor;
            }
            Design::Dsc(d) => {
                d.pre_periods *= factor;
                d.post_periods *= factor;
            }
        }
        s
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}

fn on_simplex(lambda: &[f64]) -> bool {
    !lambda.is_empty() && lambda.iter().all(|&l| l >= 0.0) && (lambda.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

/// Probe points spanning the central 99.8% of the given distributions.
fn probe(dists: &[&Dist], n: usize) -> Vec<f64> {
    let lo = dists.iter().map(|d| d.quantile(0.001)).fold(f64::INFINITY, f64::min);
    let hi = dists.iter().map(|d| d.quantile(0.999)).fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Strict monotonicity of `h(., ., t)` in both arguments on a 50 x 50 grid.
pub fn check_monotone(c: &CicDesign) -> Result<()> {
    let us = probe(&[&c.u_treated, &c.u_control], 50);
    let vs = probe(&[&c.v_treated, &c.v_control], 50);
    for t in 0..2 {
        for (i, &u) in us.iter().enumerate() {
            for (j, &v) in vs.iter().enumerate() {
                let y = c.outcome.eval(u, v, t);
                let right = us.get(i + 1).map(|&u2| c.outcome.eval(u2, v, t));
                let up = vs.get(j + 1).map(|&v2| c.outcome.eval(u, v2, t));
                if right.is_some_and(|r| r <= y) || up.is_some_and(|r| r <= y) {
                    return Err(Error::Validation(format!(
                        "outcome is not strictly increasing near (u, v, t) = ({u}, {v}, {t})"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Treated supports inside control supports: the treated 0.001 and 0.999
/// quantiles must lie within the control support `[Q(0), Q(1)]`.
pub fn check_support(c: &CicDesign) -> Result<()> {
    for (name, treated, control) in [("U", &c.u_treated, &c.u_control), ("V", &c.v_treated, &c.v_control)] {
        let tol = 1e-12;
        let inside = treated.quantile(0.001) >= control.quantile(0.0) - tol
            && treated.quantile(0.999) <= control.quantile(1.0) + tol;
        check(inside, || format!("treated support of {name} is not inside the control support"))?;
    }
    Ok(())
}

pub fn validate(spec: &DgpSpec) -> Result<()> {
    check(spec.units_per_group >= 1, || "units_per_group must be positive".into())?;
    if let Effect::Affine { slope, .. } = spec.effect {
        check(slope > 0.0, || "affine effect needs a positive slope".into())?;
    }
    match &spec.design {
        Design::Cic(c) => {
            check(c.treated_groups >= 1 && c.control_groups >= 1, || "each arm needs at least one group".into())?;
            for d in [&c.u_treated, &c.u_control, &c.v_treated, &c.v_control] {
                d.validate()?;
            }
            match &c.outcome {
                Outcome::Additive { alpha, beta, delta } => {
                    check(alpha.iter().chain(beta).all(|&b| b > 0.0), || "additive outcome needs alpha, beta > 0".into())?;
                    check(delta.iter().all(|d| d.is_finite()), || "delta must be finite".into())?;
                }
                Outcome::Index { transforms } => {
                    for t in transforms {
                        if let Transform::Affine { slope, .. } = t {
                            check(*slope > 0.0, || "affine transform needs a positive slope".into())?;
                        }
                    }
                }
            }
            check_monotone(c)?;
            if c.claims_support {
                check_support(c)?;
            }
        }
        Design::Dsc(d) => {
            check(d.pre_periods >= 1 && d.post_periods >= 1, || "both regimes need periods".into())?;
            d.u_pre.validate()?;
            if let Some(u) = &d.u_post {
                u.validate()?;
            }
            check(on_simplex(&d.lambda), || format!("lambda {:?} is not on the simplex", d.lambda))?;
            match &d.v_model {
                VModel::Independent { controls } | VModel::Comonotone { controls } => {
                    check(controls.len() == d.lambda.len(), || "one control family per weight".into())?;
                    controls.iter().try_for_each(Dist::validate)?;
                }
                VModel::Factor { loadings, theta } => {
                    check(loadings.len() == d.lambda.len(), || "one loading per weight".into())?;
                    check(loadings.iter().all(|&m| m > 0.0), || "factor loadings must be positive".into())?;
                    theta.validate()?;
                }
            }
        }
    }
    Ok(())
}

const BUNDLED: [(&str, &str); 8] = [
    ("case1", include_str!("../../scenarios/case1.json")),
    ("case2", include_str!("../../scenarios/case2.json")),
    ("case3", include_str!("../../scenarios/case3.json")),
    ("case2_violated", include_str!("../../scenarios/case2_violated.json")),
    ("case3_violated", include_str!("../../scenarios/case3_violated.json")),
    ("dsc_location", include_str!("../../scenarios/dsc_location.json")),
    ("dsc_factor", include_str!("../../scenarios/dsc_factor.json")),
    ("dsc_spread", include_str!("../../scenarios/dsc_spread.json")),
];

/// Names of the scenarios shipped with the crate.
pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

/// A shipped scenario by name.
pub fn bundled(name: &str) -> Result<DgpSpec> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Validation(format!("unknown scenario `{name}`; bundled: {}", bundled_names().join(", "))))?;
    DgpSpec::from_json(text)
}

/// The stream-`rep` generator of a master seed.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

fn group_name(prefix: &str, k: usize, total: usize) -> String {
    let width = total.to_string().len().max(2);
    format!("{prefix}{:0width$}", k + 1)
}

/// Draws a panel from stream 0 of the scenario seed.
pub fn generate_panel(spec: &DgpSpec) -> Result<PanelDataset> {
    generate_replication(spec, 0)
}

/// Draws the panel of replication `rep`, as used by [`run_monte_carlo`].
pub fn generate_replication(spec: &DgpSpec, rep: u64) -> Result<PanelDataset> {
    validate(spec)?;
    generate_with(spec, &mut replication_rng(spec.seed, rep))
}

pub(crate) fn generate_with(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> Result<PanelDataset> {
    let n = spec.units_per_group;
    let mut b = PanelBuilder::new();
    let mut u = Vec::with_capacity(n);
    match &spec.design {
        Design::Cic(c) => {
            let arms = [
                (Role::Treated, "t", c.treated_groups, &c.u_treated, &c.v_treated),
                (Role::Control, "c", c.control_groups, &c.u_control, &c.v_control),
            ];
            for (role, prefix, count, u_dist, v_dist) in arms {
                for k in 0..count {
                    let g = b.add_group(group_name(prefix, k, count), role);
                    let persistent = v_dist.sample(rng);
                    for t in 0..2usize {
                        let v = match c.group_effects {
                            GroupEffects::Persistent => persistent,
                            GroupEffects::Redrawn if t == 0 => persistent,
                            GroupEffects::Redrawn => v_dist.sample(rng),
                        };
                        u_dist.fill(rng, &mut u, n);
                        let treated_now = role == Role::Treated && t == 1;
                        let ys = u
                            .iter()
                            .map(|&ui| {
                                let y = c.outcome.eval(ui, v, t);
                                if treated_now { spec.effect.apply(y) } else { y }
                            })
                            .collect();
                        b.push_cell(g, t as i64, ys);
                    }
                }
            }
            b.build(Some(0), 1)
        }
        Design::Dsc(d) => {
            let k = d.lambda.len();
            let treated = b.add_group("treated", Role::Treated);
            let controls: Vec<usize> = (0..k).map(|c| b.add_group(group_name("c", c, k), Role::Control)).collect();
            let t_total = d.pre_periods + d.post_periods;
            let treated_v = treated_v_dist(d);
            for t in 1..=t_total {
                let post = t > d.pre_periods;
                let shift = d.delta[usize::from(post)];
                let theta = match &d.v_model {
                    VModel::Factor { theta, .. } => theta.sample(rng),
                    VModel::Comonotone { .. } => rng.sample(Open01),
                    VModel::Independent { .. } => 0.0,
                };
                for (idx, g) in std::iter::once(treated).chain(controls.iter().copied()).enumerate() {
                    let v = match &d.v_model {
                        VModel::Independent { .. } if idx == 0 => treated_v.sample(rng),
                        VModel::Independent { controls } => controls[idx - 1].sample(rng),
                        VModel::Factor { loadings, .. } if idx == 0 => {
                            d.lambda.iter().zip(loadings).map(|(l, m)| l * m).sum::<f64>() * theta
                        }
                        VModel::Factor { loadings, .. } => loadings[idx - 1] * theta,
                        VModel::Comonotone { .. } if idx == 0 => treated_v.quantile(theta),
                        VModel::Comonotone { controls } => controls[idx - 1].quantile(theta),
                    };
                    d.u(post).fill(rng, &mut u, n);
                    let ys = u
                        .iter()
                        .map(|&ui| {
                            let y = ui + shift + v;
                            if idx == 0 && post { spec.effect.apply(y) } else { y }
                        })
                        .collect();
                    b.push_cell(g, t as i64, ys);
                }
            }
            b.build(Some(d.pre_periods as i64), 1)
        }
    }
}

/// Distribution of the treated group's `V`; for the factor model, of the
/// treated loading times `theta`.
fn treated_v_dist(d: &DscDesign) -> Dist {
    match &d.v_model {
        VModel::Independent { controls } | VModel::Comonotone { controls } => {
            Dist::QuantileMixture { components: controls.clone(), weights: d.lambda.clone() }
        }
        VModel::Factor { loadings, theta } => {
            let mu: f64 = d.lambda.iter().zip(loadings).map(|(l, m)| l * m).sum();
            Dist::QuantileMixture { components: vec![theta.clone()], weights: vec![1.0] }.scaled(mu)
        }
    }
}

impl Dist {
    /// Distribution of `factor * X` for `factor > 0`, as a mixture.
    fn scaled(self, factor: f64) -> Dist {
        match self {
            Dist::QuantileMixture { components, weights } => Dist::QuantileMixture {
                components,
                weights: weights.into_iter().map(|w| w * factor).collect(),
            },
            other => Dist::QuantileMixture { components: vec![other], weights: vec![factor] },
        }
    }
}

/// `h(Q_{U_I}(tau_u*), Q_{V_I}(tau_v*), 1)`: the treated arm's untreated
/// post-period quantile.
pub fn oracle_cic_truth(spec: &DgpSpec, tau_u_star: f64, tau_v_star: f64) -> Result<f64> {
    match &spec.design {
        Design::Cic(c) => Ok(c.outcome.eval(c.u_treated.quantile(tau_u_star), c.v_treated.quantile(tau_v_star), 1)),
        Design::Dsc(_) => Err(Error::Validation(format!("scenario `{}` is not a changes-in-changes design", spec.name))),
    }
}

/// Control cross-group quantile levels matched by the treated arm under
/// case II: the `tau_u'` with `Q_{U_N}(tau_u') = Q_{U_I}(tau_u*)`, found by
/// bisection on the control quantile function.
pub fn oracle_tau_u_prime(spec: &DgpSpec, tau_u_star: f64) -> Result<f64> {
    let Design::Cic(c) = &spec.design else {
        return Err(Error::Validation(format!("scenario `{}` is not a changes-in-changes design", spec.name)));
    };
    let target = c.u_treated.quantile(tau_u_star);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if c.u_control.quantile(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// True synthetic-control counterfactual `a_post(tau_u*) + Q_{V_1}(tau_v*)`
/// and the weights used to build the treated group.
pub fn oracle_dsc_truth(spec: &DgpSpec, tau_u_star: f64, tau_v_star: f64) -> Result<(f64, Vec<f64>)> {
    let Design::Dsc(d) = &spec.design else {
        return Err(Error::Validation(format!("scenario `{}` is not a synthetic-control design", spec.name)));
    };
    check(on_simplex(&d.lambda), || "lambda is not on the simplex".into())?;
    if let VModel::Factor { loadings, .. } = &d.v_model {
        check(loadings.iter().all(|&m| m > 0.0), || "non-positive loadings break exact representability".into())?;
    }
    let a_post = d.u(true).quantile(tau_u_star) + d.delta[1];
    Ok((a_post + treated_v_dist(d).quantile(tau_v_star), d.lambda.clone()))
}

/// Truth for whichever design the scenario describes.
pub fn oracle_truth(spec: &DgpSpec, tau_u_star: f64, tau_v_star: f64) -> Result<f64> {
    match spec.design {
        Design::Cic(_) => oracle_cic_truth(spec, tau_u_star, tau_v_star),
        Design::Dsc(_) => oracle_dsc_truth(spec, tau_u_star, tau_v_star).map(|(v, _)| v),
    }
}
