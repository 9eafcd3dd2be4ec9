//! The two concrete systems: a fed-batch bioreactor with Haldane kinetics and
//! the two-dimensional Bloch equation (MRI), with analytic derivatives,
//! parameter validation and the model-specific closed forms.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg::*;
use crate::ode::{integrate_with_events, EventSpec, OdeTol};
use crate::planar_system::{DomainBox, PlanarAffineSystem, VectorField2};

fn default_mu_h() -> f64 {
    1.0
}
fn default_k() -> f64 {
    0.1
}
fn default_k_i() -> f64 {
    10.0
}
fn default_s_in() -> f64 {
    10.0
}
fn default_q_max() -> f64 {
    1.0
}
fn default_v_max() -> f64 {
    10.0
}
fn default_s_ref() -> f64 {
    0.1
}

/// Fed-batch bioreactor parameters, state (s, v).
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedBatchParams {
    #[serde(default = "default_mu_h")]
    pub mu_h: f64,
    #[serde(default = "default_k", rename = "K")]
    pub k: f64,
    #[serde(default = "default_k_i", rename = "K_I")]
    pub k_i: f64,
    #[serde(default = "default_s_in")]
    pub s_in: f64,
    #[serde(default = "default_q_max", rename = "Q_max")]
    pub q_max: f64,
    #[serde(default)]
    pub m: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    #[serde(default = "default_s_ref")]
    pub s_ref: f64,
}

impl Default for FedBatchParams {
    fn default() -> Self {
        FedBatchParams {
            mu_h: 1.0,
            k: 0.1,
            k_i: 10.0,
            s_in: 10.0,
            q_max: 1.0,
            m: 0.0,
            v_max: 10.0,
            s_ref: 0.1,
        }
    }
}

impl FedBatchParams {
    /// Haldane growth rate and its first two derivatives.
    pub fn mu(&self, s: f64) -> f64 {
        self.mu_h * s / (self.k + s + s * s / self.k_i)
    }

    fn mu_d1(&self, s: f64) -> f64 {
        let d = self.k + s + s * s / self.k_i;
        self.mu_h * (self.k - s * s / self.k_i) / (d * d)
    }

    fn mu_d2(&self, s: f64) -> f64 {
        let d = self.k + s + s * s / self.k_i;
        let dp = 1.0 + 2.0 * s / self.k_i;
        self.mu_h * (-2.0 * s / self.k_i * d - 2.0 * dp * (self.k - s * s / self.k_i)) / (d * d * d)
    }

    /// Maximizer of the Haldane kinetics, s* = sqrt(K K_I).
    pub fn s_star(&self) -> f64 {
        (self.k * self.k_i).sqrt()
    }

    /// Saturation volume v* = 2 Q_max / mu(s*) - M / (s_in - s*).
    pub fn v_star(&self) -> f64 {
        2.0 * self.q_max / self.mu(self.s_star()) - self.m / (self.s_in - self.s_star())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_kinetics()?;
        let v_star = self.v_star();
        if !(v_star > 0.0 && v_star < self.v_max) {
            return Err(Error::ParamInvariantViolated(format!(
                "saturation volume v* = {v_star} must lie in (0, v_max)"
            )));
        }
        Ok(())
    }

    /// Everything `validate` checks except the saturation-volume hypothesis
    /// v* < v_max; the certification report needs to evaluate parameter sets
    /// that violate that hypothesis rather than reject them outright.
    pub fn validate_kinetics(&self) -> Result<()> {
        if !(self.mu_h > 0.0 && self.k > 0.0 && self.k_i > 0.0 && self.q_max > 0.0) {
            return Err(Error::ParamInvariantViolated(
                "mu_h, K, K_I, Q_max must be positive".into(),
            ));
        }
        let s_star = self.s_star();
        if !(s_star > 0.0 && s_star < self.s_in) {
            return Err(Error::ParamInvariantViolated(format!(
                "s* = {s_star} must lie in (0, s_in)"
            )));
        }
        if !(self.s_ref > 0.0 && self.s_ref < self.s_in) {
            return Err(Error::ParamInvariantViolated(
                "s_ref must lie in (0, s_in)".into(),
            ));
        }
        if !(self.v_max > 0.0) {
            return Err(Error::ParamInvariantViolated("v_max must be positive".into()));
        }
        Ok(())
    }

    /// Control-affine split: f carries the growth term plus half the pump,
    /// g the controlled half of the pump (Q_max(1+u)/2 = Q_max/2 + u Q_max/2).
    pub fn system(&self) -> Result<PlanarAffineSystem> {
        self.validate()?;
        Ok(self.assemble_system())
    }

    /// System assembly with kinetics-only validation; used by the
    /// certification report on parameter sets that violate the
    /// saturation-volume hypothesis.
    pub fn system_lenient(&self) -> Result<PlanarAffineSystem> {
        self.validate_kinetics()?;
        Ok(self.assemble_system())
    }

    fn assemble_system(&self) -> PlanarAffineSystem {
        let p = *self;
        let q = self.q_max;
        let s_in = self.s_in;
        let m = self.m;

        let g_eval = move |x: Vec2| [q * (s_in - x[0]) / (2.0 * x[1]), q / 2.0];
        let g_jac = move |x: Vec2| {
            [
                [-q / (2.0 * x[1]), -q * (s_in - x[0]) / (2.0 * x[1] * x[1])],
                [0.0, 0.0],
            ]
        };
        let g_hess = move |x: Vec2| {
            let v = x[1];
            [
                [
                    [0.0, q / (2.0 * v * v)],
                    [q / (2.0 * v * v), q * (s_in - x[0]) / (v * v * v)],
                ],
                [[0.0, 0.0], [0.0, 0.0]],
            ]
        };

        let f_eval = move |x: Vec2| {
            let xconc = m / x[1] + s_in - x[0];
            [
                -p.mu(x[0]) * xconc + q * (s_in - x[0]) / (2.0 * x[1]),
                q / 2.0,
            ]
        };
        let f_jac = move |x: Vec2| {
            let (s, v) = (x[0], x[1]);
            let xconc = m / v + s_in - s;
            [
                [
                    -p.mu_d1(s) * xconc + p.mu(s) - q / (2.0 * v),
                    p.mu(s) * m / (v * v) - q * (s_in - s) / (2.0 * v * v),
                ],
                [0.0, 0.0],
            ]
        };
        let f_hess = move |x: Vec2| {
            let (s, v) = (x[0], x[1]);
            let xconc = m / v + s_in - s;
            let dss = -p.mu_d2(s) * xconc + 2.0 * p.mu_d1(s);
            let dsv = p.mu_d1(s) * m / (v * v) + q / (2.0 * v * v);
            let dvv = -2.0 * p.mu(s) * m / (v * v * v) + q * (s_in - s) / (v * v * v);
            [[[dss, dsv], [dsv, dvv]], [[0.0, 0.0], [0.0, 0.0]]]
        };

        PlanarAffineSystem::new(
            VectorField2::new(f_eval, f_jac, f_hess),
            VectorField2::new(g_eval, g_jac, g_hess),
            Some(DomainBox {
                lo: [0.0, 0.0],
                hi: [self.s_in, f64::INFINITY],
            }),
        )
    }

    /// Volume at which the bracket feedback on the locus reaches the control
    /// bound (psi(s*, v) = 1): Q_max/mu(s*) - M/(s_in - s*).
    pub fn v_pump_saturation(&self) -> f64 {
        self.q_max / self.mu(self.s_star()) - self.m / (self.s_in - self.s_star())
    }

    /// Closed-form singular pump fraction u_s[v] along the locus
    /// {s*} x (0, v_max], written for the pump fraction (1+u)/2 in [0, 1];
    /// the bracket feedback (the actual control) is psi(s*, v) = 2 u_s[v] + 1.
    pub fn singular_volume_feedback(&self, v: f64) -> f64 {
        let s_star = self.s_star();
        self.mu(s_star) * (self.m + v * (self.s_in - s_star)) / ((self.s_in - s_star) * self.q_max)
            - 1.0
    }

    /// Integrates s_hat(v) backward in v from s_hat(v_max) = s* and returns
    /// the largest v_* in (0, v*) with s_hat(v_*) = s*, if any.
    pub fn backward_witness(&self) -> Result<Option<f64>> {
        self.validate()?;
        let p = *self;
        let s_star = self.s_star();
        let v_star = self.v_star();
        let rhs = move |v: f64, y: &[f64; 1]| -> crate::error::Result<[f64; 1]> {
            let s = y[0];
            Ok([
                -p.mu(s) / p.q_max * (p.m / v + p.s_in - s) + (p.s_in - s) / v,
            ])
        };
        // Integrate from v_max down to a small positive floor, watching for
        // returns of s_hat to s* strictly below v*.
        let v_floor = 1e-3 * v_star;
        let mut events = vec![EventSpec::new(move |v: f64, y: &[f64; 1]| {
            if v < v_star {
                y[0] - s_star
            } else {
                // Inactive above v*: keep the sign of the initial departure.
                1.0
            }
        })
        .armed_after(1e-9)];
        let (_, hit) = integrate_with_events(
            &rhs,
            self.v_max,
            v_floor,
            [s_star],
            OdeTol::default(),
            &mut events,
        )?;
        Ok(hit.map(|h| h.t))
    }
}

fn default_gamma_small() -> f64 {
    0.1
}
fn default_gamma_big() -> f64 {
    0.5
}

/// Bloch-equation relaxation parameters, state (x1, x2).
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MriParams {
    #[serde(default = "default_gamma_small")]
    pub gamma: f64,
    #[serde(default = "default_gamma_big", rename = "Gamma")]
    pub gamma_big: f64,
}

impl Default for MriParams {
    fn default() -> Self {
        MriParams {
            gamma: 0.1,
            gamma_big: 0.5,
        }
    }
}

/// Per-bullet admissibility report for the MRI parameter couple.
#[derive(Debug, Clone)]
pub struct MriAdmissibility {
    pub delta: f64,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub t0: Option<f64>,
    pub third_bullet_value: Option<f64>,
    pub gamma_positive: bool,
    pub saturation_regime: bool,
    pub third_bullet_pass: bool,
    /// Filled once a prior-saturation lift is available.
    pub x_e_in_bloch_ball: Option<bool>,
}

impl MriParams {
    pub fn delta(&self) -> f64 {
        self.gamma - self.gamma_big
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::ParamInvariantViolated("gamma must be positive".into()));
        }
        if !(self.gamma <= 2.0 * self.gamma_big) {
            return Err(Error::ParamInvariantViolated(
                "physical constraint 0 < gamma <= 2 Gamma violated".into(),
            ));
        }
        if !(3.0 * self.gamma <= 2.0 * self.gamma_big) {
            return Err(Error::ParamInvariantViolated(
                "saturation regime requires 3 gamma <= 2 Gamma".into(),
            ));
        }
        Ok(())
    }

    /// f = (-Gamma x1, gamma (1 - x2)), g = (-x2, x1); both affine, so the
    /// hessians vanish.
    pub fn system(&self) -> Result<PlanarAffineSystem> {
        self.validate()?;
        let gam = self.gamma;
        let gam_big = self.gamma_big;
        let zero_hess = |_: Vec2| [[[0.0; 2]; 2]; 2];
        let f = VectorField2::new(
            move |x: Vec2| [-gam_big * x[0], gam * (1.0 - x[1])],
            move |_| [[-gam_big, 0.0], [0.0, -gam]],
            zero_hess,
        );
        let g = VectorField2::new(
            |x: Vec2| [-x[1], x[0]],
            |_| [[0.0, -1.0], [1.0, 0.0]],
            zero_hess,
        );
        Ok(PlanarAffineSystem::new(
            f,
            g,
            // The fields are polynomial, so the evaluation guard is generous;
            // Bloch-ball membership is checked where it matters (targets,
            // admissibility), not here.
            Some(DomainBox {
                lo: [-4.0, -4.0],
                hi: [4.0, 4.0],
            }),
        ))
    }

    /// x2-level of the horizontal singular line.
    pub fn horizontal_locus_level(&self) -> f64 {
        self.gamma / (2.0 * self.delta())
    }

    /// Closed-form saturation point on the horizontal singular line.
    pub fn saturation_point(&self) -> Result<Vec2> {
        self.validate()?;
        let delta = self.delta();
        Ok([
            self.gamma * (2.0 * self.gamma_big - self.gamma) / (2.0 * delta),
            self.gamma / (2.0 * delta),
        ])
    }

    /// Singular feedback on the horizontal line.
    pub fn horizontal_feedback(&self, x1: f64) -> f64 {
        self.gamma * (2.0 * self.gamma_big - self.gamma) / (2.0 * self.delta() * x1)
    }

    /// Evaluates the three admissibility bullets for the parameter couple.
    pub fn admissibility(&self) -> MriAdmissibility {
        let delta = self.delta();
        let alpha = delta / 2.0;
        let gamma_positive = self.gamma > 0.0;
        let saturation_regime = gamma_positive && 3.0 * self.gamma <= 2.0 * self.gamma_big;
        let (beta, t0, third_val) = if alpha.abs() <= 1.0 {
            let beta = (1.0 - alpha * alpha).sqrt();
            if beta > 0.0 {
                let t0 = (-beta / alpha).atan() / beta;
                let val = (2.0 * self.gamma_big * self.gamma_big - self.gamma * self.gamma_big
                    + 1.0)
                    * ((alpha - self.gamma) * t0).exp()
                    - 2.0 * delta;
                (Some(beta), Some(t0), Some(val))
            } else {
                (Some(beta), None, None)
            }
        } else {
            (None, None, None)
        };
        MriAdmissibility {
            delta,
            alpha,
            beta,
            t0,
            third_bullet_value: third_val,
            gamma_positive,
            saturation_regime,
            third_bullet_pass: third_val.map(|v| v >= 0.0).unwrap_or(false),
            x_e_in_bloch_ball: None,
        }
    }
}

/// A bundled model plus its parameters, as ingested from JSON configs:
/// {"model": "fedbatch" | "mri", "params": {...}}.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "model", content = "params", rename_all = "lowercase")]
pub enum ModelConfig {
    #[serde(rename = "fedbatch")]
    FedBatch(FedBatchParams),
    Mri(MriParams),
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::FedBatch(_) => "fedbatch",
            ModelConfig::Mri(_) => "mri",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::FedBatch(p) => p.validate(),
            ModelConfig::Mri(p) => p.validate(),
        }
    }

    pub fn system(&self) -> Result<PlanarAffineSystem> {
        match self {
            ModelConfig::FedBatch(p) => p.system(),
            ModelConfig::Mri(p) => p.system(),
        }
    }
}
