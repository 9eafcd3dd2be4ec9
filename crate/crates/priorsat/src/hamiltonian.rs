//! Hamiltonian lifts H_f(z) = p·f(x), Hamiltonian vector fields, the
//! exponential map on the cotangent bundle and switching-function data along
//! extremals.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::*;
use crate::ode::{self, OdeSolution, OdeTol};
use crate::output::g17;
use crate::planar_system::{BracketId, PlanarAffineSystem};

/// z = (x, p) on the cotangent bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CotangentPoint {
    pub x: Vec2,
    pub p: Vec2,
}

impl CotangentPoint {
    pub fn new(x: Vec2, p: Vec2) -> Self {
        CotangentPoint { x, p }
    }

    pub fn from_vec4(y: Vec4) -> Self {
        CotangentPoint {
            x: [y[0], y[1]],
            p: [y[2], y[3]],
        }
    }

    pub fn to_vec4(self) -> Vec4 {
        [self.x[0], self.x[1], self.p[0], self.p[1]]
    }
}

/// The control laws arcs are integrated with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlLaw {
    BangPlus,
    BangMinus,
    SingularFeedback,
    Constant(f64),
}

impl ControlLaw {
    pub fn validate(&self) -> Result<()> {
        if let ControlLaw::Constant(c) = self {
            if c.abs() > 1.0 {
                return Err(Error::Config(format!("constant control {c} outside [-1,1]")));
            }
        }
        Ok(())
    }

    pub fn short_label(&self) -> String {
        match self {
            ControlLaw::BangPlus => "B+".into(),
            ControlLaw::BangMinus => "B-".into(),
            ControlLaw::SingularFeedback => "S".into(),
            ControlLaw::Constant(c) if *c == 0.0 => "S0".into(),
            ControlLaw::Constant(c) => format!("C({c})"),
        }
    }
}

/// Scalar lifts over the cotangent bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiftField {
    F,
    G,
    FG,
    FFG,
    GFG,
    Plus,
    Minus,
    Sing,
}

/// H_field(z) = p · (field at x), or the Plus/Minus/Sing combination.
pub fn lift(sys: &PlanarAffineSystem, field: LiftField, z: CotangentPoint) -> Result<f64> {
    match field {
        LiftField::F => {
            sys.check_domain(z.x)?;
            Ok(dot2(z.p, sys.f.eval(z.x)))
        }
        LiftField::G => {
            sys.check_domain(z.x)?;
            Ok(dot2(z.p, sys.g.eval(z.x)))
        }
        LiftField::FG => Ok(dot2(z.p, sys.lie_bracket(BracketId::FG, z.x)?)),
        LiftField::FFG => Ok(dot2(z.p, sys.lie_bracket(BracketId::FFG, z.x)?)),
        LiftField::GFG => Ok(dot2(z.p, sys.lie_bracket(BracketId::GFG, z.x)?)),
        LiftField::Plus => Ok(lift(sys, LiftField::F, z)? + lift(sys, LiftField::G, z)?),
        LiftField::Minus => Ok(lift(sys, LiftField::F, z)? - lift(sys, LiftField::G, z)?),
        LiftField::Sing => {
            let us = singular_control_z(sys, z)?;
            Ok(lift(sys, LiftField::F, z)? + us * lift(sys, LiftField::G, z)?)
        }
    }
}

/// u_s(z) = -H_[f,[f,g]](z) / H_[g,[f,g]](z).
pub fn singular_control_z(sys: &PlanarAffineSystem, z: CotangentPoint) -> Result<f64> {
    let gfg = sys.lie_bracket(BracketId::GFG, z.x)?;
    let den = dot2(z.p, gfg);
    let tol = 1e-12 * (1.0 + norm2(z.p) * norm2(gfg));
    if den.abs() <= tol {
        return Err(Error::LegendreDegenerate(den));
    }
    let ffg = sys.lie_bracket(BracketId::FFG, z.x)?;
    Ok(-dot2(z.p, ffg) / den)
}

fn control_value(sys: &PlanarAffineSystem, law: ControlLaw, z: CotangentPoint) -> Result<f64> {
    match law {
        ControlLaw::BangPlus => Ok(1.0),
        ControlLaw::BangMinus => Ok(-1.0),
        ControlLaw::Constant(c) => Ok(c),
        ControlLaw::SingularFeedback => singular_control_z(sys, z),
    }
}

/// H⃗ = (∂_p H, −∂_x H) for the law's Hamiltonian H_f + u·H_g; the singular
/// law substitutes u = u_s(z) after differentiation (the ∂u terms vanish on
/// the singular surface where H_g = H_[f,g] = 0).
pub fn hamiltonian_vector_field(
    sys: &PlanarAffineSystem,
    law: ControlLaw,
    z: CotangentPoint,
) -> Result<Vec4> {
    sys.check_domain(z.x)?;
    let u = control_value(sys, law, z)?;
    let fv = sys.f.eval(z.x);
    let gv = sys.g.eval(z.x);
    let df = sys.f.jacobian(z.x);
    let dg = sys.g.jacobian(z.x);
    let xdot = add2(fv, scale2(gv, u));
    let mut a = df;
    for i in 0..2 {
        for j in 0..2 {
            a[i][j] += u * dg[i][j];
        }
    }
    let pdot = scale2(mattvec(a, z.p), -1.0);
    Ok([xdot[0], xdot[1], pdot[0], pdot[1]])
}

/// An integrated extremal arc with dense output.
pub struct ExtremalTrajectory {
    pub sys: PlanarAffineSystem,
    pub law: ControlLaw,
    pub sol: OdeSolution<4>,
}

impl ExtremalTrajectory {
    pub fn z_at(&self, t: f64) -> Result<CotangentPoint> {
        Ok(CotangentPoint::from_vec4(self.sol.eval(t)?))
    }

    pub fn end(&self) -> CotangentPoint {
        CotangentPoint::from_vec4(self.sol.y_end)
    }

    pub fn control_at(&self, t: f64) -> Result<f64> {
        control_value(&self.sys, self.law, self.z_at(t)?)
    }

    /// (φ, φ̇) = (H_g, H_[f,g]) at time t.
    pub fn switching_data(&self, t: f64) -> Result<(f64, f64)> {
        let z = self.z_at(t)?;
        Ok((
            lift(&self.sys, LiftField::G, z)?,
            lift(&self.sys, LiftField::FG, z)?,
        ))
    }

    /// H_f + u H_g at time t.
    pub fn hamiltonian_at(&self, t: f64) -> Result<f64> {
        let z = self.z_at(t)?;
        let u = control_value(&self.sys, self.law, z)?;
        Ok(lift(&self.sys, LiftField::F, z)? + u * lift(&self.sys, LiftField::G, z)?)
    }

    /// Maximal |H(t) − H(0)| over the accepted-step grid.
    pub fn hamiltonian_drift(&self) -> Result<f64> {
        let h0 = self.hamiltonian_at(self.sol.t0)?;
        let mut drift: f64 = 0.0;
        for t in self.sol.sample_times() {
            drift = drift.max((self.hamiltonian_at(t)? - h0).abs());
        }
        Ok(drift)
    }

    /// CSV export: t, x1, x2, p1, p2, u, phi, phidot (17 significant digits).
    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "t,x1,x2,p1,p2,u,phi,phidot")?;
        for t in self.sol.sample_times() {
            let z = self.z_at(t)?;
            let u = self.control_at(t)?;
            let (phi, phidot) = self.switching_data(t)?;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                g17(t),
                g17(z.x[0]),
                g17(z.x[1]),
                g17(z.p[0]),
                g17(z.p[1]),
                g17(u),
                g17(phi),
                g17(phidot)
            )?;
        }
        Ok(())
    }
}

/// exp(t H⃗)(z0): endpoint of the Hamiltonian flow; t may be negative.
pub fn exp_map(
    sys: &PlanarAffineSystem,
    law: ControlLaw,
    t: f64,
    z0: CotangentPoint,
    tol: OdeTol,
) -> Result<CotangentPoint> {
    Ok(exp_map_traj(sys, law, t, z0, tol)?.end())
}

/// As exp_map but keeps the dense trajectory.
pub fn exp_map_traj(
    sys: &PlanarAffineSystem,
    law: ControlLaw,
    t: f64,
    z0: CotangentPoint,
    tol: OdeTol,
) -> Result<ExtremalTrajectory> {
    law.validate()?;
    let rhs = move |_t: f64, y: &Vec4| -> Result<Vec4> {
        hamiltonian_vector_field(sys, law, CotangentPoint::from_vec4(*y))
    };
    let sol = ode::integrate(&rhs, 0.0, t, z0.to_vec4(), tol)?;
    Ok(ExtremalTrajectory {
        sys: sys.clone(),
        law,
        sol,
    })
}

/// γ_u(x) = β(x) − α(x)·u from the [f,g] = αf + βg decomposition.
pub fn gamma_u(sys: &PlanarAffineSystem, x: Vec2, u: f64) -> Result<f64> {
    let (alpha, beta) = sys.alpha_beta(x)?;
    Ok(beta - alpha * u)
}
