//! Shared sampling helpers and the bracket-identity suite used by the
//! invariants and acceptance tests.

use priorsat::linalg::*;
use priorsat::models::{FedBatchParams, MriParams};
use priorsat::planar_system::{BracketId, PlanarAffineSystem};
use priorsat::switching_geometry::singular_det_gradient;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Interior sample points for the fed-batch model (margins keep the pump
/// singularity 1/v and the boundary layer away).
pub fn fed_batch_free_points(n: usize, rng: &mut ChaCha12Rng) -> Vec<Vec2> {
    let p = FedBatchParams::default();
    (0..n)
        .map(|_| {
            [
                rng.gen_range(0.05..0.95) * p.s_in,
                rng.gen_range(0.05..0.95) * p.v_max,
            ]
        })
        .collect()
}

/// Points on the fed-batch vertical singular locus s = s*.
pub fn fed_batch_locus_points(n: usize, rng: &mut ChaCha12Rng) -> Vec<Vec2> {
    let p = FedBatchParams::default();
    (0..n)
        .map(|_| [p.s_star(), rng.gen_range(0.05..2.0)])
        .collect()
}

/// Interior sample points for the MRI model (inside the Bloch ball, away
/// from the collinearity set).
pub fn mri_free_points(n: usize, rng: &mut ChaCha12Rng, sys: &PlanarAffineSystem) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = [rng.gen_range(-0.95..0.95), rng.gen_range(-0.95..0.95)];
        if norm2(x) < 0.97 && sys.collinearity_det(x).map(|d| d.abs() > 1e-4).unwrap_or(false) {
            out.push(x);
        }
    }
    out
}

/// Points on the MRI horizontal singular locus x2 = gamma / (2 delta).
pub fn mri_locus_points(n: usize, rng: &mut ChaCha12Rng) -> Vec<Vec2> {
    let p = MriParams::default();
    let level = p.horizontal_locus_level();
    (0..n)
        .map(|_| [rng.gen_range(-0.95..-0.02), level])
        .collect()
}

/// Worst-case relative errors of the bracket identity suite.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityStats {
    /// delta_SA + alpha * delta_0 = 0 at free points (closed-form alpha).
    pub max_rel_alpha: f64,
    /// det(g,[g,[f,g]]) = -delta_0 (grad alpha . g) and
    /// det(g,[f,[f,g]]) = -delta_0 (grad alpha . f) at singular points.
    pub max_rel_signe: f64,
    /// grad delta_SA . (f +/- g) = det(g,[g,[f,g]]) (+/-1 - psi).
    pub max_rel_excl: f64,
    /// Finite-difference vs analytic [f,g].
    pub max_rel_fd_bracket: f64,
}

fn fd_jacobian_of(field: &dyn Fn(Vec2) -> Vec2, x: Vec2) -> Mat2 {
    let mut j = [[0.0; 2]; 2];
    for c in 0..2 {
        let h = 1e-6 * (1.0 + x[c].abs());
        let mut xp = x;
        let mut xm = x;
        xp[c] += h;
        xm[c] -= h;
        let (fp, fm) = (field(xp), field(xm));
        for r in 0..2 {
            j[r][c] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    j
}

fn fd_alpha_gradient(sys: &PlanarAffineSystem, x: Vec2) -> Vec2 {
    let mut grad = [0.0; 2];
    for c in 0..2 {
        let h = 1e-6 * (1.0 + x[c].abs());
        let mut xp = x;
        let mut xm = x;
        xp[c] += h;
        xm[c] -= h;
        let ap = sys.alpha_beta(xp).unwrap().0;
        let am = sys.alpha_beta(xm).unwrap().0;
        grad[c] = (ap - am) / (2.0 * h);
    }
    grad
}

/// Evaluate the three bracket identities plus the FD bracket cross-check.
pub fn identity_suite(
    sys: &PlanarAffineSystem,
    free_points: &[Vec2],
    locus_points: &[Vec2],
) -> IdentityStats {
    let mut stats = IdentityStats::default();
    for &x in free_points {
        let d0 = sys.collinearity_det(x).unwrap();
        if d0.abs() <= 1e-8 * (1.0 + norm2(sys.f.eval(x)) * norm2(sys.g.eval(x))) {
            continue;
        }
        let dsa = sys.singular_det(x).unwrap();
        let (alpha, _) = sys.alpha_beta(x).unwrap();
        let rel = (dsa + alpha * d0).abs() / (1.0 + dsa.abs());
        stats.max_rel_alpha = stats.max_rel_alpha.max(rel);

        let fg_analytic = sys.lie_bracket(BracketId::FG, x).unwrap();
        let df = fd_jacobian_of(&|y| sys.f.eval(y), x);
        let dg = fd_jacobian_of(&|y| sys.g.eval(y), x);
        let fg_fd = sub2(matvec(dg, sys.f.eval(x)), matvec(df, sys.g.eval(x)));
        let rel = norm2(sub2(fg_fd, fg_analytic)) / (1.0 + norm2(fg_analytic));
        stats.max_rel_fd_bracket = stats.max_rel_fd_bracket.max(rel);
    }
    for &x in locus_points {
        let d0 = sys.collinearity_det(x).unwrap();
        let gv = sys.g.eval(x);
        let fv = sys.f.eval(x);
        let gfg = sys.lie_bracket(BracketId::GFG, x).unwrap();
        let ffg = sys.lie_bracket(BracketId::FFG, x).unwrap();
        let det_ggfg = det2(gv, gfg);
        let det_gffg = det2(gv, ffg);
        let grad_a = fd_alpha_gradient(sys, x);

        let lhs1 = det_ggfg;
        let rhs1 = -d0 * dot2(grad_a, gv);
        let rel1 = (lhs1 - rhs1).abs() / (1.0 + lhs1.abs());
        let lhs2 = det_gffg;
        let rhs2 = -d0 * dot2(grad_a, fv);
        let rel2 = (lhs2 - rhs2).abs() / (1.0 + lhs2.abs());
        stats.max_rel_signe = stats.max_rel_signe.max(rel1.max(rel2));

        let psi = sys.singular_feedback(x).unwrap();
        let grad_dsa = singular_det_gradient(sys, x).unwrap();
        let lhs_p = dot2(grad_dsa, add2(fv, gv));
        let rhs_p = det_ggfg * (1.0 - psi);
        let lhs_m = dot2(grad_dsa, sub2(fv, gv));
        let rhs_m = det_ggfg * (-1.0 - psi);
        let rel_p = (lhs_p - rhs_p).abs() / (1.0 + rhs_p.abs());
        let rel_m = (lhs_m - rhs_m).abs() / (1.0 + rhs_m.abs());
        stats.max_rel_excl = stats.max_rel_excl.max(rel_p.max(rel_m));
    }
    stats
}
