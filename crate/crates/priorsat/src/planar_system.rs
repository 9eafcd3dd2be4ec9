//! Single-input planar control-affine systems dx/dt = f(x) + u g(x) and the
//! bracket-based scalar fields (collinearity and singular-locus determinants,
//! the alpha/beta decomposition of [f,g] and the singular feedback).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::*;

type EvalFn = dyn Fn(Vec2) -> Vec2 + Send + Sync;
type JacFn = dyn Fn(Vec2) -> Mat2 + Send + Sync;
type HessFn = dyn Fn(Vec2) -> [Mat2; 2] + Send + Sync;

/// A smooth vector field on the plane with derivative access up to second
/// order. `hessian(x)[i]` is the Hessian of the i-th output component.
#[derive(Clone)]
pub struct VectorField2 {
    eval: Arc<EvalFn>,
    jac: Option<Arc<JacFn>>,
    hess: Option<Arc<HessFn>>,
}

impl VectorField2 {
    pub fn new(
        eval: impl Fn(Vec2) -> Vec2 + Send + Sync + 'static,
        jac: impl Fn(Vec2) -> Mat2 + Send + Sync + 'static,
        hess: impl Fn(Vec2) -> [Mat2; 2] + Send + Sync + 'static,
    ) -> Self {
        VectorField2 {
            eval: Arc::new(eval),
            jac: Some(Arc::new(jac)),
            hess: Some(Arc::new(hess)),
        }
    }

    /// Field with analytic first derivatives only; nested brackets will
    /// report `DerivativeUnavailable`.
    pub fn first_order(
        eval: impl Fn(Vec2) -> Vec2 + Send + Sync + 'static,
        jac: impl Fn(Vec2) -> Mat2 + Send + Sync + 'static,
    ) -> Self {
        VectorField2 {
            eval: Arc::new(eval),
            jac: Some(Arc::new(jac)),
            hess: None,
        }
    }

    /// Generic fallback: derivatives by central finite differences with step
    /// h = cbrt(machine eps) * (1 + |x|).
    pub fn from_eval(eval: impl Fn(Vec2) -> Vec2 + Send + Sync + 'static) -> Self {
        let eval = Arc::new(eval) as Arc<EvalFn>;
        let e1 = eval.clone();
        let jac = Arc::new(move |x: Vec2| fd_jacobian(&*e1, x)) as Arc<JacFn>;
        let e2 = eval.clone();
        let hess = Arc::new(move |x: Vec2| {
            let j = |y: Vec2| fd_jacobian(&*e2, y);
            fd_hessian_from_jac(&j, x)
        }) as Arc<HessFn>;
        VectorField2 {
            eval,
            jac: Some(jac),
            hess: Some(hess),
        }
    }

    pub fn eval(&self, x: Vec2) -> Vec2 {
        (self.eval)(x)
    }

    pub fn jacobian(&self, x: Vec2) -> Mat2 {
        match &self.jac {
            Some(j) => j(x),
            None => fd_jacobian(&*self.eval, x),
        }
    }

    pub fn hessian(&self, x: Vec2) -> Result<[Mat2; 2]> {
        match &self.hess {
            Some(h) => Ok(h(x)),
            None => Err(Error::DerivativeUnavailable),
        }
    }

    pub fn has_hessian(&self) -> bool {
        self.hess.is_some()
    }
}

fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + x.abs())
}

fn fd_jacobian(eval: &EvalFn, x: Vec2) -> Mat2 {
    let mut j = [[0.0; 2]; 2];
    for col in 0..2 {
        let h = fd_step(x[col]);
        let mut xp = x;
        let mut xm = x;
        xp[col] += h;
        xm[col] -= h;
        let fp = eval(xp);
        let fm = eval(xm);
        for row in 0..2 {
            j[row][col] = (fp[row] - fm[row]) / (2.0 * h);
        }
    }
    j
}

fn fd_hessian_from_jac(jac: &dyn Fn(Vec2) -> Mat2, x: Vec2) -> [Mat2; 2] {
    // hess[i][j][k] = d^2 field_i / dx_j dx_k, via central differences of the
    // jacobian in the k direction.
    let mut h = [[[0.0; 2]; 2]; 2];
    for k in 0..2 {
        let step = fd_step(x[k]);
        let mut xp = x;
        let mut xm = x;
        xp[k] += step;
        xm[k] -= step;
        let jp = jac(xp);
        let jm = jac(xm);
        for i in 0..2 {
            for j in 0..2 {
                h[i][j][k] = (jp[i][j] - jm[i][j]) / (2.0 * step);
            }
        }
    }
    // Symmetrize.
    for m in &mut h {
        let avg = 0.5 * (m[0][1] + m[1][0]);
        m[0][1] = avg;
        m[1][0] = avg;
    }
    h
}

/// Rectangular validity region in state space.
#[derive(Debug, Clone, Copy)]
pub struct DomainBox {
    pub lo: Vec2,
    pub hi: Vec2,
}

impl DomainBox {
    pub fn contains(&self, x: Vec2) -> bool {
        let slack = 1e-12;
        (0..2).all(|i| {
            let w = self.hi[i] - self.lo[i];
            x[i] >= self.lo[i] - slack * (1.0 + w) && x[i] <= self.hi[i] + slack * (1.0 + w)
        })
    }
}

/// Nested bracket selector: FG = [f,g], FFG = [f,[f,g]], GFG = [g,[f,g]].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BracketId {
    FG,
    FFG,
    GFG,
}

#[derive(Clone)]
pub struct PlanarAffineSystem {
    pub f: VectorField2,
    pub g: VectorField2,
    pub domain: Option<DomainBox>,
}

impl PlanarAffineSystem {
    pub fn new(f: VectorField2, g: VectorField2, domain: Option<DomainBox>) -> Self {
        PlanarAffineSystem { f, g, domain }
    }

    pub fn check_domain(&self, x: Vec2) -> Result<()> {
        if let Some(d) = &self.domain {
            if !d.contains(x) {
                return Err(Error::DomainError(x[0], x[1]));
            }
        }
        Ok(())
    }

    /// Jacobian of [f,g]; needs hessians of both fields.
    fn bracket_fg_jacobian(&self, x: Vec2) -> Result<Mat2> {
        let hf = self.f.hessian(x)?;
        let hg = self.g.hessian(x)?;
        let df = self.f.jacobian(x);
        let dg = self.g.jacobian(x);
        let fv = self.f.eval(x);
        let gv = self.g.eval(x);
        // D[f,g] = (Hg . f) + Dg Df - (Hf . g) - Df Dg,
        // with (H . v)_{ij} = sum_k H_i[j][k] v_k.
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += hg[i][j][k] * fv[k] - hf[i][j][k] * gv[k];
                }
                out[i][j] = acc;
            }
        }
        let dgdf = matmul(dg, df);
        let dfdg = matmul(df, dg);
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] += dgdf[i][j] - dfdg[i][j];
            }
        }
        Ok(out)
    }

    /// [a,b](x) = Db(x) a(x) - Da(x) b(x).
    pub fn lie_bracket(&self, pair: BracketId, x: Vec2) -> Result<Vec2> {
        self.check_domain(x)?;
        let fv = self.f.eval(x);
        let gv = self.g.eval(x);
        let df = self.f.jacobian(x);
        let dg = self.g.jacobian(x);
        let fg = sub2(matvec(dg, fv), matvec(df, gv));
        match pair {
            BracketId::FG => Ok(fg),
            BracketId::FFG => {
                let dfg = self.bracket_fg_jacobian(x)?;
                Ok(sub2(matvec(dfg, fv), matvec(df, fg)))
            }
            BracketId::GFG => {
                let dfg = self.bracket_fg_jacobian(x)?;
                Ok(sub2(matvec(dfg, gv), matvec(dg, fg)))
            }
        }
    }

    /// delta_0(x) = det(f(x), g(x)).
    pub fn collinearity_det(&self, x: Vec2) -> Result<f64> {
        self.check_domain(x)?;
        Ok(det2(self.f.eval(x), self.g.eval(x)))
    }

    /// delta_SA(x) = det(g(x), [f,g](x)).
    pub fn singular_det(&self, x: Vec2) -> Result<f64> {
        self.check_domain(x)?;
        let fg = self.lie_bracket(BracketId::FG, x)?;
        Ok(det2(self.g.eval(x), fg))
    }

    /// Scale-aware collinearity degeneracy guard.
    pub fn collinearity_tol(&self, x: Vec2) -> f64 {
        1e-12 * (1.0 + norm2(self.f.eval(x)) * norm2(self.g.eval(x)))
    }

    /// Coefficients of [f,g] = alpha f + beta g where f, g span the plane.
    pub fn alpha_beta(&self, x: Vec2) -> Result<(f64, f64)> {
        self.check_domain(x)?;
        let d0 = self.collinearity_det(x)?;
        if d0.abs() <= self.collinearity_tol(x) {
            return Err(Error::CollinearityDegenerate(x[0], x[1]));
        }
        let fg = self.lie_bracket(BracketId::FG, x)?;
        let alpha = -det2(self.g.eval(x), fg) / d0;
        let beta = det2(self.f.eval(x), fg) / d0;
        Ok((alpha, beta))
    }

    /// det(g, [g,[f,g]]); positive values certify the strict
    /// Legendre-Clebsch condition at admissible singular points.
    pub fn legendre_clebsch_margin(&self, x: Vec2) -> Result<f64> {
        self.check_domain(x)?;
        let gfg = self.lie_bracket(BracketId::GFG, x)?;
        Ok(det2(self.g.eval(x), gfg))
    }

    /// Singular feedback psi(x) = -det(g,[f,[f,g]]) / det(g,[g,[f,g]]).
    pub fn singular_feedback(&self, x: Vec2) -> Result<f64> {
        self.check_domain(x)?;
        let gv = self.g.eval(x);
        let ffg = self.lie_bracket(BracketId::FFG, x)?;
        let gfg = self.lie_bracket(BracketId::GFG, x)?;
        let den = det2(gv, gfg);
        let tol = 1e-12 * (1.0 + norm2(gv) * norm2(gfg));
        if den.abs() <= tol {
            return Err(Error::LegendreDegenerate(den));
        }
        Ok(-det2(gv, ffg) / den)
    }
}

/// Default tolerance on |delta_SA| for "x belongs to the singular locus".
pub const DEFAULT_LOCUS_TOL: f64 = 1e-10;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FedBatchParams, MriParams};
    use approx::assert_relative_eq;

    fn mri() -> PlanarAffineSystem {
        MriParams::default().system().unwrap()
    }

    fn fedbatch() -> PlanarAffineSystem {
        FedBatchParams::default().system().unwrap()
    }

    #[test]
    fn bracket_fg_mri_closed_form() {
        let sys = mri();
        // [f,g](x) = (delta x2 - gamma, delta x1), delta = gamma - Gamma.
        let delta = 0.1 - 0.5;
        for x in [[0.0, 0.0], [1.0, 1.0], [-0.3, 0.7]] {
            let b = sys.lie_bracket(BracketId::FG, x).unwrap();
            assert_relative_eq!(b[0], delta * x[1] - 0.1, max_relative = 1e-12, epsilon = 1e-14);
            assert_relative_eq!(b[1], delta * x[0], max_relative = 1e-12, epsilon = 1e-14);
        }
        let b = sys.lie_bracket(BracketId::FG, [0.0, 0.0]).unwrap();
        assert_relative_eq!(b[0], -0.1, epsilon = 1e-14);
        assert_relative_eq!(b[1], 0.0, epsilon = 1e-14);
        let b = sys.lie_bracket(BracketId::FG, [1.0, 1.0]).unwrap();
        assert_relative_eq!(b[0], -0.5, epsilon = 1e-13);
        assert_relative_eq!(b[1], -0.4, epsilon = 1e-13);
    }

    #[test]
    fn bracket_constant_fields_vanishes() {
        let f = VectorField2::from_eval(|_| [1.0, 2.0]);
        let g = VectorField2::from_eval(|_| [-0.5, 3.0]);
        let sys = PlanarAffineSystem::new(f, g, None);
        for pair in [BracketId::FG, BracketId::FFG, BracketId::GFG] {
            let b = sys.lie_bracket(pair, [0.3, -0.7]).unwrap();
            assert!(norm2(b) < 1e-9, "{:?} -> {:?}", pair, b);
        }
        assert!(sys.legendre_clebsch_margin([0.1, 0.2]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn collinearity_det_examples() {
        let sys = fedbatch();
        // delta_0(s,v) = -mu(s)(M/v + s_in - s) Q_max/2 at (1,1), M=0.
        let d0 = sys.collinearity_det([1.0, 1.0]).unwrap();
        assert_relative_eq!(d0, -3.75, max_relative = 1e-12);

        let sys = mri();
        assert_relative_eq!(sys.collinearity_det([0.0, 0.0]).unwrap(), 0.0, epsilon = 1e-15);

        // g = f forces collinearity everywhere.
        let f = VectorField2::from_eval(|x| [x[0] + 1.0, x[1] * 2.0]);
        let g = VectorField2::from_eval(|x| [x[0] + 1.0, x[1] * 2.0]);
        let same = PlanarAffineSystem::new(f, g, None);
        assert_relative_eq!(same.collinearity_det([0.4, -1.2]).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_det_loci() {
        let sys = mri();
        let delta = -0.4;
        // Horizontal branch x2 = gamma/(2 delta).
        for x1 in [-0.9, -0.2, 0.5] {
            let d = sys.singular_det([x1, 0.1 / (2.0 * delta)]).unwrap();
            assert!(d.abs() < 1e-12, "{d}");
        }
        // Vertical branch x1 = 0.
        assert!(sys.singular_det([0.0, 0.3]).unwrap().abs() < 1e-12);

        // Fed-batch locus is s = s* = 1.
        let sys = fedbatch();
        for v in [0.5, 1.0, 2.4, 7.0] {
            assert!(sys.singular_det([1.0, v]).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_beta_reconstruction() {
        for (sys, pts) in [
            (mri(), vec![[-0.2, -0.125], [-0.5, 0.3]]),
            (fedbatch(), vec![[2.0, 1.0], [0.5, 3.0]]),
        ] {
            for x in pts {
                let (a, b) = sys.alpha_beta(x).unwrap();
                let fg = sys.lie_bracket(BracketId::FG, x).unwrap();
                let rec = add2(scale2(sys.f.eval(x), a), scale2(sys.g.eval(x), b));
                let resid = norm2(sub2(rec, fg));
                assert!(resid <= 1e-9 * (1.0 + norm2(fg)), "residual {resid}");
            }
        }
    }

    #[test]
    fn alpha_vanishes_on_locus() {
        let sys = fedbatch();
        let (a, _b) = sys.alpha_beta([1.0, 1.5]).unwrap();
        assert!(a.abs() < 1e-10, "{a}");
    }

    #[test]
    fn singular_feedback_values() {
        let sys = mri();
        let delta = -0.4_f64;
        let x_sat = [0.1 * (2.0 * 0.5 - 0.1) / (2.0 * delta), 0.1 / (2.0 * delta)];
        assert_relative_eq!(sys.singular_feedback(x_sat).unwrap(), 1.0, epsilon = 1e-10);
        assert_relative_eq!(
            sys.singular_feedback([-0.225, -0.125]).unwrap(),
            0.5,
            epsilon = 1e-10
        );

        // Fed-batch: the bracket feedback saturates where the pump does,
        // at v = Q_max/mu(s*), which is 1.2 for the default parameters.
        let sys = fedbatch();
        assert_relative_eq!(sys.singular_feedback([1.0, 1.2]).unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(sys.singular_feedback([1.0, 2.4]).unwrap(), 3.0, epsilon = 1e-9);
    }

    #[test]
    fn legendre_clebsch_sign() {
        let sys = fedbatch();
        assert!(sys.legendre_clebsch_margin([1.0, 1.0]).unwrap() > 0.0);

        let sys = mri();
        // Points of the horizontal locus with x1 < 0 and |psi| <= 1.
        for x1 in [-0.9, -0.5, -0.15] {
            let x = [x1, -0.125];
            if sys.singular_feedback(x).unwrap().abs() <= 1.0 {
                assert!(sys.legendre_clebsch_margin(x).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn domain_guard() {
        let sys = fedbatch();
        assert!(matches!(
            sys.collinearity_det([20.0, 1.0]),
            Err(Error::DomainError(_, _))
        ));
    }

    #[test]
    fn first_order_field_rejects_nested_brackets() {
        let f = VectorField2::first_order(|x| [x[1], -x[0]], |_| [[0.0, 1.0], [-1.0, 0.0]]);
        let g = VectorField2::first_order(|x| [x[0], x[1]], |_| [[1.0, 0.0], [0.0, 1.0]]);
        let sys = PlanarAffineSystem::new(f, g, None);
        assert!(sys.lie_bracket(BracketId::FG, [0.1, 0.2]).is_ok());
        assert!(matches!(
            sys.lie_bracket(BracketId::FFG, [0.1, 0.2]),
            Err(Error::DerivativeUnavailable)
        ));
    }
}
