//! Shooting systems and their Newton solver: the bang-singular-bang
//! boundary-value residual, the generic prior-saturation-lift residual F
//! with its G block, the two model instantiations, and the assumption
//! certificates attached to a converged lift.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hamiltonian::{
    exp_map, lift, singular_control_z, ControlLaw, CotangentPoint, LiftField,
};
use crate::linalg::*;
use crate::models::{FedBatchParams, MriParams};
use crate::ode::{integrate_with_events, EventDir, EventSpec, OdeTol};
use crate::planar_system::PlanarAffineSystem;

/// Which shooting system a residual belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualId {
    SBsb,
    FEx,
    FBio,
    FMri,
    FGeneric(usize),
}

impl std::fmt::Display for ResidualId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ResidualId::SBsb => write!(f, "S_bsb"),
            ResidualId::FEx => write!(f, "F_ex"),
            ResidualId::FBio => write!(f, "F_bio"),
            ResidualId::FMri => write!(f, "F_mri"),
            ResidualId::FGeneric(k) => write!(f, "F_generic({k})"),
        }
    }
}

/// A square nonlinear system F: R^dim -> R^dim.
pub struct ResidualSystem<'a> {
    pub dim: usize,
    pub id: ResidualId,
    eval: Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + 'a>,
}

impl<'a> ResidualSystem<'a> {
    pub fn new(
        dim: usize,
        id: ResidualId,
        eval: impl Fn(&[f64]) -> Result<Vec<f64>> + 'a,
    ) -> Self {
        ResidualSystem {
            dim,
            id,
            eval: Box::new(eval),
        }
    }

    pub fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        debug_assert_eq!(y.len(), self.dim);
        let r = (self.eval)(y)?;
        debug_assert_eq!(r.len(), self.dim);
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonCfg {
    pub tol: f64,
    pub max_iters: usize,
    pub cond_limit: f64,
}

impl Default for NewtonCfg {
    fn default() -> Self {
        NewtonCfg {
            tol: 1e-10,
            max_iters: 100,
            cond_limit: 1e14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShootingSolution {
    pub y: Vec<f64>,
    pub residual_norm: f64,
    pub jac_condition: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Forward-difference Jacobian, step sqrt(machine eps) * (1 + |y_i|).
pub fn fd_jacobian(f: &ResidualSystem<'_>, y: &[f64], fy: &[f64]) -> Result<DMatrix<f64>> {
    let n = f.dim;
    let mut jac = DMatrix::zeros(n, n);
    let mut yh = y.to_vec();
    for col in 0..n {
        let h = f64::EPSILON.sqrt() * (1.0 + y[col].abs());
        yh[col] = y[col] + h;
        let fh = f.eval(&yh)?;
        yh[col] = y[col];
        for row in 0..n {
            jac[(row, col)] = (fh[row] - fy[row]) / h;
        }
    }
    Ok(jac)
}

fn condition_of(jac: &DMatrix<f64>) -> f64 {
    let svd = jac.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Damped Newton with Armijo backtracking on the residual norm; converged
/// when the infinity norm drops below cfg.tol.
pub fn newton_solve(
    f: &ResidualSystem<'_>,
    y0: &[f64],
    cfg: &NewtonCfg,
) -> Result<ShootingSolution> {
    let mut y = y0.to_vec();
    let mut fy = f.eval(&y)?;
    let mut iterations = 0;
    loop {
        let rnorm = inf_norm(&fy);
        if rnorm <= cfg.tol {
            let jac = fd_jacobian(f, &y, &fy)?;
            return Ok(ShootingSolution {
                y,
                residual_norm: rnorm,
                jac_condition: condition_of(&jac),
                iterations,
                converged: true,
            });
        }
        if iterations >= cfg.max_iters {
            return Err(Error::MaxIterations(iterations, rnorm));
        }
        let jac = fd_jacobian(f, &y, &fy)?;
        let cond = condition_of(&jac);
        if !cond.is_finite() || cond > cfg.cond_limit {
            return Err(Error::SingularJacobian(cond));
        }
        let rhs = DVector::from_iterator(f.dim, fy.iter().map(|v| -v));
        let lu = jac.lu();
        let step = lu.solve(&rhs).ok_or(Error::SingularJacobian(cond))?;
        let f0 = two_norm(&fy);
        let mut alpha = 1.0;
        loop {
            let y_try: Vec<f64> = y
                .iter()
                .zip(step.iter())
                .map(|(yi, di)| yi + alpha * di)
                .collect();
            match f.eval(&y_try) {
                Ok(f_try) if two_norm(&f_try) <= (1.0 - 1e-4 * alpha) * f0 => {
                    y = y_try;
                    fy = f_try;
                    break;
                }
                _ => {
                    alpha *= 0.5;
                    if alpha < 1e-12 {
                        return Err(Error::LineSearchStall(rnorm));
                    }
                }
            }
        }
        iterations += 1;
    }
}

// ---------------------------------------------------------------------------
// Bang-singular-bang boundary-value residual (13 unknowns).
// ---------------------------------------------------------------------------

/// Unknown layout y = (p0 in R^2, t1, t2, tf, z1 in R^4, z2 in R^4); the six
/// residual blocks pin the two non-ordinary switching conditions at z1, the
/// terminal normalization and target, and the two matching conditions.
pub fn residual_bsb(
    sys: &PlanarAffineSystem,
    x0: Vec2,
    xf: Vec2,
    y: &[f64],
    tol: OdeTol,
) -> Result<Vec<f64>> {
    assert_eq!(y.len(), 13);
    let p0 = [y[0], y[1]];
    let (t1, t2, tf) = (y[2], y[3], y[4]);
    let z1 = CotangentPoint::from_vec4([y[5], y[6], y[7], y[8]]);
    let z2 = CotangentPoint::from_vec4([y[9], y[10], y[11], y[12]]);

    let mut r = Vec::with_capacity(13);
    r.push(lift(sys, LiftField::G, z1)?);
    r.push(lift(sys, LiftField::FG, z1)?);

    let z_end = exp_map(sys, ControlLaw::BangPlus, tf - t2, z2, tol)?;
    r.push(lift(sys, LiftField::Plus, z_end)? - 1.0);
    r.push(z_end.x[0] - xf[0]);
    r.push(z_end.x[1] - xf[1]);

    let z1_flow = exp_map(sys, ControlLaw::BangMinus, t1, CotangentPoint::new(x0, p0), tol)?;
    for i in 0..4 {
        r.push(z1.to_vec4()[i] - z1_flow.to_vec4()[i]);
    }
    let z2_flow = exp_map(sys, ControlLaw::SingularFeedback, t2 - t1, z1, tol)?;
    for i in 0..4 {
        r.push(z2.to_vec4()[i] - z2_flow.to_vec4()[i]);
    }
    Ok(r)
}

pub fn bsb_system<'a>(
    sys: &'a PlanarAffineSystem,
    x0: Vec2,
    xf: Vec2,
    tol: OdeTol,
) -> ResidualSystem<'a> {
    ResidualSystem::new(13, ResidualId::SBsb, move |y| {
        residual_bsb(sys, x0, xf, y, tol)
    })
}

// ---------------------------------------------------------------------------
// Prior-saturation-lift residual F = (H_FG o back; G).
// ---------------------------------------------------------------------------

pub type PsiFn =
    Box<dyn Fn(&PlanarAffineSystem, CotangentPoint, &[f64]) -> Result<Vec<f64>> + Send + Sync>;

/// The bridge-extremity system: unknowns (t_b, z_b, lambda), residual
/// F(t_b, z_b, lambda) = (H_FG(back), H_g(back), H_bang(z_b) + p0, Psi)
/// where back = exp(-t_b H_bang)(z_b) and p0 = -1.
pub struct PriorLiftProblem {
    pub sys: PlanarAffineSystem,
    pub id: ResidualId,
    pub k: usize,
    /// BangPlus by default; BangMinus supported per the H- variant.
    pub bang: ControlLaw,
    pub psi: PsiFn,
    pub tol: OdeTol,
}

impl PriorLiftProblem {
    pub fn dim(&self) -> usize {
        5 + self.k
    }

    fn bang_lift(&self) -> LiftField {
        match self.bang {
            ControlLaw::BangMinus => LiftField::Minus,
            _ => LiftField::Plus,
        }
    }

    pub fn back_flow(&self, t_b: f64, z_b: CotangentPoint) -> Result<CotangentPoint> {
        exp_map(&self.sys, self.bang, -t_b, z_b, self.tol)
    }

    /// Full residual, dimension 5 + k.
    pub fn residual(&self, t_b: f64, z_b: CotangentPoint, lambda: &[f64]) -> Result<Vec<f64>> {
        let back = self.back_flow(t_b, z_b)?;
        let mut r = Vec::with_capacity(self.dim());
        r.push(lift(&self.sys, LiftField::FG, back)?);
        r.push(lift(&self.sys, LiftField::G, back)?);
        r.push(lift(&self.sys, self.bang_lift(), z_b)? - 1.0);
        r.extend((self.psi)(&self.sys, z_b, lambda)?);
        Ok(r)
    }

    /// The G block (everything except the leading H_FG equation), dimension
    /// 4 + k; this is the map whose invertibility in (z_b, lambda) at fixed
    /// t_b drives the switching-curve continuation.
    pub fn g_block(&self, t_b: f64, z_b: CotangentPoint, lambda: &[f64]) -> Result<Vec<f64>> {
        Ok(self.residual(t_b, z_b, lambda)?.split_off(1))
    }

    fn unpack(y: &[f64]) -> (f64, CotangentPoint, &[f64]) {
        (
            y[0],
            CotangentPoint::from_vec4([y[1], y[2], y[3], y[4]]),
            &y[5..],
        )
    }

    pub fn residual_system(&self) -> ResidualSystem<'_> {
        ResidualSystem::new(self.dim(), self.id, move |y| {
            let (t_b, z_b, lambda) = Self::unpack(y);
            self.residual(t_b, z_b, lambda)
        })
    }

    /// F_bio: Psi(z_b) = (H_g(z_b), v_b - v_max), k = 0.
    pub fn fbio(params: &FedBatchParams) -> Result<Self> {
        let sys = params.system()?;
        let v_max = params.v_max;
        Ok(PriorLiftProblem {
            sys,
            id: ResidualId::FBio,
            k: 0,
            bang: ControlLaw::BangPlus,
            psi: Box::new(move |sys, z_b, _| {
                Ok(vec![lift(sys, LiftField::G, z_b)?, z_b.x[1] - v_max])
            }),
            tol: OdeTol::tight(),
        })
    }

    /// F_mri: Psi(z_b) = (H_FG(z_b), H_g(z_b)), k = 0.
    pub fn fmri(params: &MriParams) -> Result<Self> {
        let sys = params.system()?;
        Ok(PriorLiftProblem {
            sys,
            id: ResidualId::FMri,
            k: 0,
            bang: ControlLaw::BangPlus,
            psi: Box::new(move |sys, z_b, _| {
                Ok(vec![
                    lift(sys, LiftField::FG, z_b)?,
                    lift(sys, LiftField::G, z_b)?,
                ])
            }),
            tol: OdeTol::tight(),
        })
    }

    /// F_ex: Psi(z_b) = pi(z_b) - xf, k = 0 (bridge ending on a point
    /// target).
    pub fn fex(sys: PlanarAffineSystem, xf: Vec2) -> Self {
        PriorLiftProblem {
            sys,
            id: ResidualId::FEx,
            k: 0,
            bang: ControlLaw::BangPlus,
            psi: Box::new(move |_, z_b, _| Ok(vec![z_b.x[0] - xf[0], z_b.x[1] - xf[1]])),
            tol: OdeTol::tight(),
        }
    }

    /// k = 1 example: after the bridge the trajectory switches at z_b
    /// (ordinary switch, H_g = 0) and follows the opposite bang for the time
    /// lambda down to a point target — the last switching time is the extra
    /// unknown.
    pub fn generic_k1(sys: PlanarAffineSystem, xf: Vec2) -> Self {
        PriorLiftProblem {
            sys,
            id: ResidualId::FGeneric(1),
            k: 1,
            bang: ControlLaw::BangPlus,
            psi: Box::new(move |sys, z_b, lambda| {
                let end = exp_map(sys, ControlLaw::BangMinus, lambda[0], z_b, OdeTol::tight())?;
                Ok(vec![
                    lift(sys, LiftField::G, z_b)?,
                    end.x[0] - xf[0],
                    end.x[1] - xf[1],
                ])
            }),
            tol: OdeTol::tight(),
        }
    }
}

/// Deterministic initial guesses (the source states the equations only).
#[derive(Debug, Clone)]
pub struct LiftGuess {
    pub t_b: f64,
    pub z_b: CotangentPoint,
    pub lambda: Vec<f64>,
}

impl LiftGuess {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut y = vec![self.t_b];
        y.extend_from_slice(&self.z_b.to_vec4());
        y.extend_from_slice(&self.lambda);
        y
    }
}

/// Canonical adjoint over a singular-locus point: the solution of
/// H_g(z) = 0, H_f(z) = 1 (the normal normalization with phi = 0).
pub fn locus_adjoint(sys: &PlanarAffineSystem, x: Vec2) -> Result<Vec2> {
    let g = sys.g.eval(x);
    let f = sys.f.eval(x);
    solve2([[g[0], g[1]], [f[0], f[1]]], [0.0, 1.0])
        .ok_or(Error::CollinearityDegenerate(x[0], x[1]))
}

/// Fed-batch guess: locate the locus departure volume by one-dimensional
/// bisection, then lift.
///
/// A bridge candidate departing the singular locus at (s*, v_e) with the
/// canonical adjoint already satisfies four of the five residual equations
/// (both back-flow conditions, the Hamiltonian normalization, and — via the
/// v = v_max stopping event — the volume target), so the lift reduces to a
/// scalar root-find: phi(t_b) = 0 as a function of v_e. The switching
/// function along the u = +1 arc obeys phi' = (beta - alpha) phi + alpha
/// with phi(0) = 0, which depends on the state arc only, so the scan stays
/// well conditioned even where the full cotangent flow would overflow (the
/// substrate boundary layer amplifies adjoints by hundreds of orders of
/// magnitude; candidates that plunge through it before reaching v_max
/// report astronomically negative phi, which is still a usable sign).
pub fn fbio_guess(params: &FedBatchParams) -> Result<LiftGuess> {
    let sys = params.system()?;
    let s_star = params.s_star();
    let v_max = params.v_max;
    let horizon = 2.0 * params.v_max / params.q_max + 10.0;
    let phi_at_vmax = |ve: f64| -> Result<f64> {
        let rhs = |_t: f64, y: &[f64; 3]| -> Result<[f64; 3]> {
            let x = [y[0], y[1]];
            let fv = sys.f.eval(x);
            let gv = sys.g.eval(x);
            let (alpha, beta) = sys.alpha_beta(x)?;
            Ok([fv[0] + gv[0], fv[1] + gv[1], (beta - alpha) * y[2] + alpha])
        };
        let mut events = [EventSpec::new(move |_t: f64, y: &[f64; 3]| y[1] - v_max).dir(EventDir::Up)];
        let y0 = [s_star, ve, 0.0];
        let (_, hit) = integrate_with_events(&rhs, 0.0, horizon, y0, OdeTol::default(), &mut events)?;
        hit.map(|h| h.y[2]).ok_or(Error::EventNotFound(horizon))
    };
    // Bracket the sign change of phi(t_b) over the pre-saturation volumes.
    let v_hi = params.v_pump_saturation().min(v_max);
    let n = 64usize;
    let mut bracket = None;
    let mut prev: Option<(f64, f64)> = None;
    for i in 1..n {
        let ve = v_hi * i as f64 / n as f64;
        let r = match phi_at_vmax(ve) {
            Ok(r) if r.is_finite() => r,
            _ => {
                prev = None;
                continue;
            }
        };
        if let Some((ve0, r0)) = prev {
            if r0 * r <= 0.0 {
                bracket = Some((ve0, r0, ve));
                break;
            }
        }
        prev = Some((ve, r));
    }
    let (mut a, mut ra, mut b) = bracket.ok_or(Error::NoBracket)?;
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        let rm = phi_at_vmax(m)?;
        if rm * ra > 0.0 {
            a = m;
            ra = rm;
        } else {
            b = m;
        }
        if b - a <= 1e-13 * (1.0 + v_hi) {
            break;
        }
    }
    let v_e = 0.5 * (a + b);
    // Lift the located departure point through the full cotangent flow.
    let x = [s_star, v_e];
    let p = locus_adjoint(&sys, x)?;
    let z0 = CotangentPoint::new(x, p);
    let rhs = |_t: f64, y: &Vec4| {
        crate::hamiltonian::hamiltonian_vector_field(
            &sys,
            ControlLaw::BangPlus,
            CotangentPoint::from_vec4(*y),
        )
    };
    let mut events = [EventSpec::new(move |_t: f64, y: &Vec4| y[1] - v_max).dir(EventDir::Up)];
    let (_, hit) = integrate_with_events(
        &rhs,
        0.0,
        horizon,
        z0.to_vec4(),
        OdeTol::tight(),
        &mut events,
    )?;
    let hit = hit.ok_or(Error::EventNotFound(horizon))?;
    Ok(LiftGuess {
        t_b: hit.t,
        z_b: CotangentPoint::from_vec4(hit.y),
        lambda: vec![],
    })
}

/// MRI guess: place z_b on the vertical singular axis halfway between the
/// horizontal locus level and the origin, then scan the backward bang flow
/// for the first transversal zero of H_FG.
pub fn fmri_guess(params: &MriParams) -> Result<LiftGuess> {
    let sys = params.system()?;
    let x2 = 0.5 * params.horizontal_locus_level();
    let x = [0.0, x2];
    let p = [0.0, 1.0 / (params.gamma * (1.0 - x2))];
    let z_b = CotangentPoint::new(x, p);
    let sys2 = sys.clone();
    let rhs = move |_t: f64, y: &Vec4| {
        let v = crate::hamiltonian::hamiltonian_vector_field(
            &sys2,
            ControlLaw::BangPlus,
            CotangentPoint::from_vec4(*y),
        )?;
        Ok([-v[0], -v[1], -v[2], -v[3]])
    };
    let sys3 = sys.clone();
    let mut events = [EventSpec::new(move |_t: f64, y: &Vec4| {
        lift(&sys3, LiftField::FG, CotangentPoint::from_vec4(*y)).unwrap_or(f64::NAN)
    })
    .armed_after(1e-4)];
    let horizon = 50.0;
    let (_, hit) = integrate_with_events(
        &rhs,
        0.0,
        horizon,
        z_b.to_vec4(),
        OdeTol::default(),
        &mut events,
    )?;
    let hit = hit.ok_or(Error::EventNotFound(horizon))?;
    Ok(LiftGuess {
        t_b: hit.t,
        z_b,
        lambda: vec![],
    })
}

// ---------------------------------------------------------------------------
// Solved lifts and certificates.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub h_gfg_at_ze: f64,
    pub us_at_ze: f64,
    /// a = H_FFG(z_e) + H_GFG(z_e), the leading entry of dF/dt_b.
    pub a: f64,
    pub g_block_condition: f64,
    pub f_jacobian_condition: f64,
    pub verdict_a2: bool,
    pub verdict_a3: bool,
}

#[derive(Clone)]
pub struct PriorSaturationLift {
    pub id: ResidualId,
    pub t_b_star: f64,
    pub z_b_star: CotangentPoint,
    pub lambda_star: Vec<f64>,
    pub z_e: CotangentPoint,
    pub solution: ShootingSolution,
}

/// Newton-solve a prior-lift problem and reconstruct z_e by backward flow.
pub fn solve_prior_lift(
    problem: &PriorLiftProblem,
    guess: &LiftGuess,
    cfg: &NewtonCfg,
) -> Result<PriorSaturationLift> {
    let f = problem.residual_system();
    let solution = newton_solve(&f, &guess.to_vec(), cfg)?;
    let (t_b, z_b, lambda) = PriorLiftProblem::unpack(&solution.y);
    let z_e = problem.back_flow(t_b, z_b)?;
    Ok(PriorSaturationLift {
        id: problem.id,
        t_b_star: t_b,
        z_b_star: z_b,
        lambda_star: lambda.to_vec(),
        z_e,
        solution,
    })
}

/// Evaluate Assumptions 2 and 3 at a converged lift.
pub fn check_assumptions(
    problem: &PriorLiftProblem,
    lift_sol: &PriorSaturationLift,
) -> Result<AssumptionReport> {
    let sys = &problem.sys;
    let z_e = lift_sol.z_e;
    let h_gfg = lift(sys, LiftField::GFG, z_e)?;
    let us = singular_control_z(sys, z_e).unwrap_or(f64::NAN);
    let a = lift(sys, LiftField::FFG, z_e)? + h_gfg;

    // G-block Jacobian in (z_b, lambda) at fixed t_b.
    let n = 4 + problem.k;
    let t_b = lift_sol.t_b_star;
    let g = ResidualSystem::new(n, problem.id, |w: &[f64]| {
        let z_b = CotangentPoint::from_vec4([w[0], w[1], w[2], w[3]]);
        problem.g_block(t_b, z_b, &w[4..])
    });
    let mut w = lift_sol.z_b_star.to_vec4().to_vec();
    w.extend_from_slice(&lift_sol.lambda_star);
    let gw = g.eval(&w)?;
    let g_cond = condition_of(&fd_jacobian(&g, &w, &gw)?);

    let f = problem.residual_system();
    let y = {
        let mut y = vec![t_b];
        y.extend_from_slice(&lift_sol.z_b_star.to_vec4());
        y.extend_from_slice(&lift_sol.lambda_star);
        y
    };
    let fy = f.eval(&y)?;
    let f_cond = condition_of(&fd_jacobian(&f, &y, &fy)?);

    Ok(AssumptionReport {
        h_gfg_at_ze: h_gfg,
        us_at_ze: us,
        a,
        g_block_condition: g_cond,
        f_jacobian_condition: f_cond,
        verdict_a2: h_gfg.abs() > 1e-8 && us < 1.0 - 1e-6,
        verdict_a3: g_cond < 1e10,
    })
}

/// First column of the FD Jacobian of F at the solution (the t_b column);
/// by the lift's structure it equals (-a, 0, ..., 0).
pub fn f_prime_tb_column(
    problem: &PriorLiftProblem,
    lift_sol: &PriorSaturationLift,
) -> Result<Vec<f64>> {
    let t_b = lift_sol.t_b_star;
    let h = 1e-6 * (1.0 + t_b.abs());
    let rp = problem.residual(t_b + h, lift_sol.z_b_star, &lift_sol.lambda_star)?;
    let rm = problem.residual(t_b - h, lift_sol.z_b_star, &lift_sol.lambda_star)?;
    Ok(rp
        .iter()
        .zip(rm.iter())
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect())
}
