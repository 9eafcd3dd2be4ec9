//! Event-driven forward simulation of declared arc structures, classification
//! of initial conditions into path types, and grid datasets for the two
//! benchmark models.
//!
//! Arcs are integrated in the state plane (bang and feedback laws need no
//! adjoint); the bridge arc is integrated on the cotangent bundle from the
//! lifted departure point so that the switching-function record
//! (phi and its derivative at both ends, interior sign) is available.

use std::io::Write;

use crate::error::{Error, Result};
use crate::hamiltonian::{exp_map_traj, lift, ControlLaw, LiftField};
use crate::linalg::*;
use crate::models::{FedBatchParams, MriParams};
use crate::ode::{integrate_with_events, EventDir, EventHit, EventSpec, OdeSolution, OdeTol};
use crate::output::g17;
use crate::planar_system::PlanarAffineSystem;
use crate::shooting::{
    fbio_guess, fmri_guess, solve_prior_lift, NewtonCfg, PriorLiftProblem, PriorSaturationLift,
};
use crate::switching_geometry::continue_switching_curve_auto;

/// Why an arc ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// v reached v_max (fed-batch) or x1 reached 0 (MRI bridge).
    TerminalManifold,
    /// Substrate reached s_ref.
    SubstrateTarget,
    /// The singular arc reached the departure point of the lift.
    LocusDeparture,
    /// First switch located on the computed switching-curve projection.
    SwitchingCurve,
    /// x2 reached 0 on the relaxation axis (MRI).
    AxisTarget,
    /// The arc has zero length (its stop condition already held at entry).
    ZeroLength,
}

/// One simulated arc.
#[derive(Debug, Clone)]
pub struct Arc {
    pub law: ControlLaw,
    pub t0: f64,
    pub duration: f64,
    pub x_start: Vec2,
    pub x_end: Vec2,
    pub stop: StopReason,
    /// |stop function| at the located exit (0 for zero-length arcs).
    pub stop_residual: f64,
    /// State gap to the previous arc's endpoint (0 for the first arc).
    pub entry_gap: f64,
}

impl Arc {
    fn zero(law: ControlLaw, t0: f64, x: Vec2) -> Self {
        Arc {
            law,
            t0,
            duration: 0.0,
            x_start: x,
            x_end: x,
            stop: StopReason::ZeroLength,
            stop_residual: 0.0,
            entry_gap: 0.0,
        }
    }
}

/// Switching-function record along a bridge arc, taken from the lifted flow.
#[derive(Debug, Clone, Copy)]
pub struct BridgeRecord {
    pub duration: f64,
    pub phi_entry: f64,
    pub phi_dot_entry: f64,
    pub phi_exit: f64,
    pub phi_dot_exit: f64,
    /// Terminal-manifold defect at exit: v(t_b) - v_max for the fed-batch
    /// model, x1(t_b) for the MRI model.
    pub exit_constraint: f64,
    /// min phi over interior samples; sign consistency for u = +1 requires
    /// this to be nonnegative up to roundoff.
    pub min_interior_phi: f64,
}

/// A fully simulated concatenation of arcs.
#[derive(Debug, Clone)]
pub struct TrajectoryStructure {
    pub structure: String,
    pub arcs: Vec<Arc>,
    pub total_time: f64,
    pub terminal: Vec2,
    /// Junction states between consecutive arcs.
    pub switch_points: Vec<Vec2>,
    pub bridge: Option<BridgeRecord>,
    pub target_reached: bool,
}

impl TrajectoryStructure {
    pub fn n_switches(&self) -> usize {
        self.switch_points.len()
    }

    /// Largest state gap across all arc junctions.
    pub fn max_chain_gap(&self) -> f64 {
        self.arcs
            .iter()
            .map(|a| a.entry_gap)
            .fold(0.0, f64::max)
    }
}

const CHAIN_GAP_TOL: f64 = 1e-9;

fn chain_gap(prev_end: Vec2, next_start: Vec2) -> Result<f64> {
    let gap = norm2(sub2(next_start, prev_end));
    if gap > CHAIN_GAP_TOL * (1.0 + norm2(prev_end)) {
        return Err(Error::ChainBroken(gap));
    }
    Ok(gap)
}

// ---------------------------------------------------------------------------
// State-plane arc runner.
// ---------------------------------------------------------------------------

fn state_control(sys: &PlanarAffineSystem, law: ControlLaw, x: Vec2) -> Result<f64> {
    match law {
        ControlLaw::BangPlus => Ok(1.0),
        ControlLaw::BangMinus => Ok(-1.0),
        ControlLaw::Constant(c) => Ok(c),
        ControlLaw::SingularFeedback => sys.singular_feedback(x),
    }
}

/// Integrate xdot = f + u g from x0 until the stop function crosses zero in
/// the requested direction. Singular arcs additionally monitor |psi| <= 1
/// (admissibility) and the collinearity defect delta_SA along the way.
fn run_state_arc(
    sys: &PlanarAffineSystem,
    law: ControlLaw,
    x0: Vec2,
    horizon: f64,
    stop: &dyn Fn(&Vec2) -> f64,
    dir: EventDir,
    tol: OdeTol,
) -> Result<(OdeSolution<2>, EventHit<2>)> {
    let rhs = |_t: f64, y: &Vec2| -> Result<Vec2> {
        let u = state_control(sys, law, *y)?;
        sys.check_domain(*y)?;
        Ok(add2(sys.f.eval(*y), scale2(sys.g.eval(*y), u)))
    };
    let singular = law == ControlLaw::SingularFeedback;
    // Slack keeps an arc that reaches |psi| = 1 exactly at its endpoint
    // admissible; only a strict crossing trips the monitor.
    let slack = 1.0 + 1e-9;
    let mut events: Vec<EventSpec<'_, 2>> = vec![EventSpec::new(|_t, y: &Vec2| stop(y)).dir(dir)];
    if singular {
        events.push(
            EventSpec::new(|_t, y: &Vec2| sys.singular_feedback(*y).unwrap_or(slack) - slack)
                .dir(EventDir::Up),
        );
        events.push(
            EventSpec::new(|_t, y: &Vec2| sys.singular_feedback(*y).unwrap_or(-slack) + slack)
                .dir(EventDir::Down),
        );
    }
    let (sol, hit) = integrate_with_events(&rhs, 0.0, horizon, x0, tol, &mut events)?;
    let hit = match hit {
        None => return Err(Error::EventNotFound(horizon)),
        Some(h) if h.index > 0 => {
            let psi = sys.singular_feedback(h.y).unwrap_or(f64::NAN);
            return Err(Error::SingularInadmissible(h.t, psi));
        }
        Some(h) => h,
    };
    if singular {
        // The feedback law is only meaningful on the singular locus; check
        // the trajectory has not drifted off it.
        let mut worst = 0.0f64;
        for i in 0..=32 {
            let t = hit.t * i as f64 / 32.0;
            let x = sol.eval(t)?;
            let defect = sys.singular_det(x)?.abs() / (1.0 + sys.collinearity_det(x)?.abs());
            worst = worst.max(defect);
        }
        if worst > 1e-6 {
            return Err(Error::AssumptionViolated(format!(
                "singular arc drifted off the locus (relative defect {worst:.3e})"
            )));
        }
    }
    Ok((sol, hit))
}

fn arc_from_run(
    law: ControlLaw,
    t0: f64,
    x0: Vec2,
    hit: &EventHit<2>,
    stop: StopReason,
    stop_residual: f64,
    entry_gap: f64,
) -> Arc {
    Arc {
        law,
        t0,
        duration: hit.t,
        x_start: x0,
        x_end: hit.y,
        stop,
        stop_residual,
        entry_gap,
    }
}

fn bridge_record(
    sys: &PlanarAffineSystem,
    z_e: crate::hamiltonian::CotangentPoint,
    t_b: f64,
    exit_constraint: impl Fn(Vec2) -> f64,
    tol: OdeTol,
) -> Result<(BridgeRecord, crate::hamiltonian::CotangentPoint)> {
    let traj = exp_map_traj(sys, ControlLaw::BangPlus, t_b, z_e, tol)?;
    let (phi0, phid0) = traj.switching_data(0.0)?;
    let (phi1, phid1) = traj.switching_data(t_b)?;
    let mut min_phi = f64::INFINITY;
    for i in 1..128 {
        let t = t_b * i as f64 / 128.0;
        min_phi = min_phi.min(traj.switching_data(t)?.0);
    }
    let z_end = traj.end();
    Ok((
        BridgeRecord {
            duration: t_b,
            phi_entry: phi0,
            phi_dot_entry: phid0,
            phi_exit: phi1,
            phi_dot_exit: phid1,
            exit_constraint: exit_constraint(z_end.x),
            min_interior_phi: min_phi,
        },
        z_end,
    ))
}

// ---------------------------------------------------------------------------
// Fed-batch synthesis.
// ---------------------------------------------------------------------------

/// Path-type synthesis for the fed-batch model. Construction solves the
/// prior-saturation lift, so `v_e` and the bridge data are available to the
/// classifier and the simulator.
pub struct FedBatchSynthesis {
    pub params: FedBatchParams,
    pub sys: PlanarAffineSystem,
    pub problem: PriorLiftProblem,
    pub lift: PriorSaturationLift,
    sigma_pi: std::sync::OnceLock<std::result::Result<Vec<(f64, f64)>, String>>,
}

impl FedBatchSynthesis {
    pub fn new(params: FedBatchParams) -> Result<Self> {
        let sys = params.system()?;
        let problem = PriorLiftProblem::fbio(&params)?;
        let guess = fbio_guess(&params)?;
        let lift = solve_prior_lift(&problem, &guess, &NewtonCfg::default())?;
        Ok(FedBatchSynthesis {
            params,
            sys,
            problem,
            lift,
            sigma_pi: std::sync::OnceLock::new(),
        })
    }

    /// Departure volume of the singular arc.
    pub fn v_e(&self) -> f64 {
        self.lift.z_e.x[1]
    }

    /// Substrate level at the end of the bridge arc (arrival at v = v_max).
    pub fn s_b(&self) -> f64 {
        self.lift.z_b_star.x[1 - 1]
    }

    fn tol(&self) -> OdeTol {
        OdeTol::default()
    }

    /// State projection of the switching curve near the departure point,
    /// as (v, s) pairs sorted by v. Only the continuation-computed portion
    /// exists; the branch folds a short distance past the seed.
    pub fn sigma_pi_samples(&self) -> Result<&[(f64, f64)]> {
        let cached = self.sigma_pi.get_or_init(|| {
            continue_switching_curve_auto(&self.problem, &self.lift, 2e-2, 16)
                .map(|curve| {
                    let mut pts: Vec<(f64, f64)> = curve
                        .samples
                        .iter()
                        .map(|s| (s.sigma_big.x[1], s.sigma_big.x[0]))
                        .collect();
                    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    pts
                })
                .map_err(|e| e.to_string())
        });
        match cached {
            Ok(pts) => Ok(pts),
            Err(msg) => Err(Error::Config(format!("switching-curve layer failed: {msg}"))),
        }
    }

    fn sigma_pi_substrate(&self, v: f64) -> Result<f64> {
        let pts = self.sigma_pi_samples()?;
        let (vmin, vmax) = (pts.first().unwrap().0, pts.last().unwrap().0);
        if v < vmin || v > vmax {
            return Err(Error::Unclassified(format!(
                "v = {v:.6} outside the computed switching-curve window [{vmin:.6}, {vmax:.6}]"
            )));
        }
        let i = pts.partition_point(|p| p.0 < v).min(pts.len() - 1).max(1);
        let (v0, s0) = pts[i - 1];
        let (v1, s1) = pts[i];
        Ok(s0 + (s1 - s0) * (v - v0) / (v1 - v0))
    }

    /// Paper-classified path type for an initial condition, or Unclassified.
    pub fn classify_initial_condition(&self, x0: Vec2) -> Result<&'static str> {
        let p = &self.params;
        let (s0, v0) = (x0[0], x0[1]);
        let on_locus = (s0 - p.s_star()).abs() <= 1e-9 * (1.0 + p.s_star());
        let at_inflow = (s0 - p.s_in).abs() <= 1e-9 * (1.0 + p.s_in);
        let v_e = self.v_e();
        if on_locus && v0 > 0.0 && v0 < v_e {
            Ok("S B+b B-")
        } else if on_locus && v0 >= v_e && v0 < p.v_max {
            Ok("B+ B-")
        } else if at_inflow && v0 >= v_e && v0 < p.v_max {
            Ok("B- B+ B-")
        } else {
            Err(Error::Unclassified(format!(
                "({s0:.6}, {v0:.6}) is not on the singular locus or the inflow line \
                 with v in the classified range"
            )))
        }
    }

    /// Classify, then simulate the classified structure.
    pub fn simulate(&self, x0: Vec2) -> Result<TrajectoryStructure> {
        let structure = self.classify_initial_condition(x0)?;
        self.simulate_structure(x0, structure)
    }

    /// Simulate a declared arc structure from x0.
    pub fn simulate_structure(&self, x0: Vec2, structure: &str) -> Result<TrajectoryStructure> {
        match structure {
            "S B+b B-" => self.sim_singular_bridge(x0, self.v_e()),
            "B+ B-" => self.sim_bang_bang(x0),
            "B- B+ B-" => self.sim_inflow(x0),
            other => Err(Error::Config(format!("unknown fed-batch structure '{other}'"))),
        }
    }

    /// sigma_s held until v = v_leave, then bang+ to v_max, then bang- to
    /// s_ref. v_leave = v_e gives the classified structure; larger values
    /// realise the singular-extension experiment (the admissibility monitor
    /// aborts once the feedback exceeds the control bound).
    pub fn singular_extension(&self, x0: Vec2, v_leave: f64) -> Result<TrajectoryStructure> {
        self.sim_singular_bridge(x0, v_leave)
    }

    fn sim_singular_bridge(&self, x0: Vec2, v_leave: f64) -> Result<TrajectoryStructure> {
        let p = &self.params;
        let tol = self.tol();
        let mut arcs = Vec::new();
        let mut switch_points = Vec::new();

        // Singular arc to v = v_leave (volume grows ~ Q v / v_sat, so the
        // time is logarithmic in the volume ratio).
        let horizon = 2.0 * p.v_pump_saturation() / p.q_max * (v_leave / x0[1]).ln().abs() + 1.0;
        let (_, hit) = run_state_arc(
            &self.sys,
            ControlLaw::SingularFeedback,
            x0,
            horizon,
            &|y| y[1] - v_leave,
            EventDir::Up,
            tol,
        )?;
        arcs.push(arc_from_run(
            ControlLaw::SingularFeedback,
            0.0,
            x0,
            &hit,
            StopReason::LocusDeparture,
            (hit.y[1] - v_leave).abs(),
            0.0,
        ));
        switch_points.push(hit.y);
        let mut t = hit.t;
        let departure = hit.y;

        // Bridge: lift the departure point. At v_leave = v_e this is the
        // solved lift; deeper departures reuse the locus-canonical adjoint.
        let (bridge, arc, z_end) = if (v_leave - self.v_e()).abs() <= 1e-9 {
            let gap = chain_gap(departure, self.lift.z_e.x)?;
            let t_b = self.lift.t_b_star;
            let (rec, z_end) =
                bridge_record(&self.sys, self.lift.z_e, t_b, |x| x[1] - p.v_max, tol)?;
            let arc = Arc {
                law: ControlLaw::BangPlus,
                t0: t,
                duration: t_b,
                x_start: self.lift.z_e.x,
                x_end: z_end.x,
                stop: StopReason::TerminalManifold,
                stop_residual: rec.exit_constraint.abs(),
                entry_gap: gap,
            };
            (Some(rec), arc, Some(z_end))
        } else {
            // Plain bang+ state arc to v_max (no bridge certificate away
            // from the lift).
            let horizon = 1.1 * (p.v_max - departure[1]) / p.q_max + 1.0;
            let (_, hit) = run_state_arc(
                &self.sys,
                ControlLaw::BangPlus,
                departure,
                horizon,
                &|y| y[1] - p.v_max,
                EventDir::Up,
                tol,
            )?;
            let arc = arc_from_run(
                ControlLaw::BangPlus,
                t,
                departure,
                &hit,
                StopReason::TerminalManifold,
                (hit.y[1] - p.v_max).abs(),
                0.0,
            );
            (None, arc, None)
        };
        t += arc.duration;
        let x_b = arc.x_end;
        switch_points.push(x_b);
        arcs.push(arc);
        let _ = z_end;

        // Terminal bang-: may be empty when the bridge already arrives with
        // s <= s_ref (the case at the default parameters).
        let terminal = self.terminal_bang_minus(&mut arcs, t, x_b)?;
        let total_time = arcs.iter().map(|a| a.duration).sum();
        let target_reached =
            terminal[1] >= p.v_max - 1e-9 && terminal[0] <= p.s_ref + 1e-9;
        Ok(TrajectoryStructure {
            structure: "S B+b B-".into(),
            arcs,
            total_time,
            terminal,
            switch_points,
            bridge,
            target_reached,
        })
    }

    fn terminal_bang_minus(&self, arcs: &mut Vec<Arc>, t: f64, x_b: Vec2) -> Result<Vec2> {
        let p = &self.params;
        if x_b[0] <= p.s_ref {
            arcs.push(Arc::zero(ControlLaw::BangMinus, t, x_b));
            return Ok(x_b);
        }
        let (_, hit) = run_state_arc(
            &self.sys,
            ControlLaw::BangMinus,
            x_b,
            100.0,
            &|y| y[0] - p.s_ref,
            EventDir::Down,
            self.tol(),
        )?;
        let arc = arc_from_run(
            ControlLaw::BangMinus,
            t,
            x_b,
            &hit,
            StopReason::SubstrateTarget,
            (hit.y[0] - p.s_ref).abs(),
            0.0,
        );
        let end = arc.x_end;
        arcs.push(arc);
        Ok(end)
    }

    fn sim_bang_bang(&self, x0: Vec2) -> Result<TrajectoryStructure> {
        let p = &self.params;
        let horizon = 1.1 * (p.v_max - x0[1]) / p.q_max + 1.0;
        let (_, hit) = run_state_arc(
            &self.sys,
            ControlLaw::BangPlus,
            x0,
            horizon,
            &|y| y[1] - p.v_max,
            EventDir::Up,
            self.tol(),
        )?;
        let mut arcs = vec![arc_from_run(
            ControlLaw::BangPlus,
            0.0,
            x0,
            &hit,
            StopReason::TerminalManifold,
            (hit.y[1] - p.v_max).abs(),
            0.0,
        )];
        let switch_points = vec![hit.y];
        let terminal = self.terminal_bang_minus(&mut arcs, hit.t, hit.y)?;
        let total_time = arcs.iter().map(|a| a.duration).sum();
        let target_reached =
            terminal[1] >= p.v_max - 1e-9 && terminal[0] <= p.s_ref + 1e-9;
        Ok(TrajectoryStructure {
            structure: "B+ B-".into(),
            arcs,
            total_time,
            terminal,
            switch_points,
            bridge: None,
            target_reached,
        })
    }

    /// From the inflow line: bang- at frozen volume until the computed
    /// switching-curve projection, then bang+ to v_max, then bang- to s_ref.
    /// Only volumes inside the continuation window can be simulated; the
    /// remainder of the curve is out of computed scope.
    fn sim_inflow(&self, x0: Vec2) -> Result<TrajectoryStructure> {
        let p = &self.params;
        let s_switch = self.sigma_pi_substrate(x0[1])?;
        if x0[0] <= s_switch {
            return Err(Error::Unclassified(format!(
                "initial substrate {:.6} already below the switching curve at {:.6}",
                x0[0], s_switch
            )));
        }
        let (_, hit) = run_state_arc(
            &self.sys,
            ControlLaw::BangMinus,
            x0,
            200.0,
            &|y| y[0] - s_switch,
            EventDir::Down,
            self.tol(),
        )?;
        let mut arcs = vec![arc_from_run(
            ControlLaw::BangMinus,
            0.0,
            x0,
            &hit,
            StopReason::SwitchingCurve,
            (hit.y[0] - s_switch).abs(),
            0.0,
        )];
        let mut switch_points = vec![hit.y];
        let mut t = hit.t;
        let x1 = hit.y;
        let horizon = 1.1 * (p.v_max - x1[1]) / p.q_max + 1.0;
        let (_, hit) = run_state_arc(
            &self.sys,
            ControlLaw::BangPlus,
            x1,
            horizon,
            &|y| y[1] - p.v_max,
            EventDir::Up,
            self.tol(),
        )?;
        arcs.push(arc_from_run(
            ControlLaw::BangPlus,
            t,
            x1,
            &hit,
            StopReason::TerminalManifold,
            (hit.y[1] - p.v_max).abs(),
            0.0,
        ));
        switch_points.push(hit.y);
        t += hit.t;
        let terminal = self.terminal_bang_minus(&mut arcs, t, hit.y)?;
        let total_time = arcs.iter().map(|a| a.duration).sum();
        let target_reached =
            terminal[1] >= p.v_max - 1e-9 && terminal[0] <= p.s_ref + 1e-9;
        Ok(TrajectoryStructure {
            structure: "B- B+ B-".into(),
            arcs,
            total_time,
            terminal,
            switch_points,
            bridge: None,
            target_reached,
        })
    }

    /// Times for the classified path and the plain bang-bang alternative
    /// from the same locus point (s*, v0), v0 < v_e. Returns
    /// (classified_time, bang_bang_time).
    pub fn turnpike_comparison(&self, v0: f64) -> Result<(f64, f64)> {
        let x0 = [self.params.s_star(), v0];
        let classified = self.sim_singular_bridge(x0, self.v_e())?;
        let bang = self.sim_bang_bang(x0)?;
        if !classified.target_reached || !bang.target_reached {
            return Err(Error::Config("comparison path missed the target".into()));
        }
        Ok((classified.total_time, bang.total_time))
    }

    /// Singular-extension experiment: leave the locus at depth fractions of
    /// the admissible extension (v_sat - v_e) past v_e and compare times
    /// with the classified departure. A fraction of 1 reaches the
    /// saturation volume exactly; continuing beyond it is flagged.
    pub fn exclusion_experiment(
        &self,
        v0: f64,
        fractions: &[f64],
    ) -> Result<Vec<ExclusionRecord>> {
        let v_e = self.v_e();
        let v_sat = self.params.v_pump_saturation();
        let x0 = [self.params.s_star(), v0];
        let mut out = Vec::new();
        for &q in fractions {
            let v_leave = v_e + q * (v_sat - v_e);
            let time = self
                .sim_singular_bridge(x0, v_leave)
                .map(|t| t.total_time);
            let mut inadmissible_beyond = false;
            if (q - 1.0).abs() <= 1e-12 {
                // Push past the saturation volume: the feedback exceeds the
                // control bound and the monitor must trip.
                let probe = self.sim_singular_bridge(x0, v_sat * 1.05);
                inadmissible_beyond =
                    matches!(probe, Err(Error::SingularInadmissible(_, _)));
            }
            out.push(ExclusionRecord {
                depth_fraction: q,
                v_leave,
                time: time.map_err(|e| e.to_string()),
                inadmissible_beyond,
            });
        }
        Ok(out)
    }

    /// Grid dataset over (0, s_in] x (0, v_max]. The column nearest s* is
    /// snapped onto the locus and the last column sits on the inflow line,
    /// so both classified families appear in the dataset. Per-node failures
    /// are recorded, not fatal.
    pub fn synthesize_grid(&self, n1: usize, n2: usize) -> GridDataset {
        let p = &self.params;
        let mut s_vals: Vec<f64> = (1..=n1).map(|i| p.s_in * i as f64 / n1 as f64).collect();
        let nearest = (0..n1)
            .min_by(|&a, &b| {
                (s_vals[a] - p.s_star())
                    .abs()
                    .partial_cmp(&(s_vals[b] - p.s_star()).abs())
                    .unwrap()
            })
            .unwrap();
        s_vals[nearest] = p.s_star();
        let v_vals: Vec<f64> = (1..=n2).map(|j| p.v_max * j as f64 / n2 as f64).collect();
        let mut rows = Vec::with_capacity(n1 * n2);
        for &s in &s_vals {
            for &v in &v_vals {
                rows.push(self.grid_row([s, v]));
            }
        }
        GridDataset { rows, n1, n2 }
    }

    fn grid_row(&self, x0: Vec2) -> GridRow {
        match self.classify_initial_condition(x0) {
            Err(e) => GridRow::unclassified(x0, e.to_string()),
            Ok(structure) => match self.simulate_structure(x0, structure) {
                Ok(traj) => GridRow::from_trajectory(x0, &traj),
                Err(e) => GridRow {
                    x0,
                    structure: structure.into(),
                    total_time: None,
                    switches: Vec::new(),
                    error: Some(e.to_string()),
                },
            },
        }
    }

    /// Singular-locus layer: (s, v, psi) samples over the admissible span.
    pub fn locus_layer(&self, n: usize) -> Result<Vec<[f64; 3]>> {
        let p = &self.params;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let v = p.v_max * (i + 1) as f64 / (n + 1) as f64;
            let x = [p.s_star(), v];
            let psi = self.sys.singular_feedback(x)?;
            out.push([x[0], x[1], psi]);
        }
        Ok(out)
    }

    /// Bridge layer: (t, s, v, phi) samples along the lifted bridge arc.
    pub fn bridge_layer(&self, n: usize) -> Result<Vec<[f64; 4]>> {
        let t_b = self.lift.t_b_star;
        let traj = exp_map_traj(
            &self.sys,
            ControlLaw::BangPlus,
            t_b,
            self.lift.z_e,
            self.tol(),
        )?;
        let mut out = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let t = t_b * i as f64 / n as f64;
            let z = traj.z_at(t)?;
            let phi = lift(&self.sys, LiftField::G, z)?;
            out.push([t, z.x[0], z.x[1], phi]);
        }
        Ok(out)
    }
}

/// One record of the singular-extension experiment.
#[derive(Debug, Clone)]
pub struct ExclusionRecord {
    pub depth_fraction: f64,
    pub v_leave: f64,
    /// Total time of the extended path, or why it failed.
    pub time: std::result::Result<f64, String>,
    /// Whether pushing past the saturation volume tripped the
    /// admissibility monitor (only probed at depth 1).
    pub inadmissible_beyond: bool,
}

// ---------------------------------------------------------------------------
// MRI synthesis.
// ---------------------------------------------------------------------------

/// Path-type synthesis for the MRI model.
pub struct MriSynthesis {
    pub params: MriParams,
    pub sys: PlanarAffineSystem,
    pub problem: PriorLiftProblem,
    pub lift: PriorSaturationLift,
}

impl MriSynthesis {
    pub fn new(params: MriParams) -> Result<Self> {
        let sys = params.system()?;
        let problem = PriorLiftProblem::fmri(&params)?;
        let guess = fmri_guess(&params)?;
        let lift = solve_prior_lift(&problem, &guess, &NewtonCfg::default())?;
        Ok(MriSynthesis {
            params,
            sys,
            problem,
            lift,
        })
    }

    /// Departure point of the bridge on the horizontal locus.
    pub fn x_e(&self) -> Vec2 {
        self.lift.z_e.x
    }

    fn tol(&self) -> OdeTol {
        OdeTol::default()
    }

    pub fn classify_initial_condition(&self, x0: Vec2) -> Result<&'static str> {
        let level = self.params.horizontal_locus_level();
        let x_e = self.x_e();
        if norm2(sub2(x0, x_e)) <= 1e-9 {
            return Ok("B+b S0");
        }
        let on_locus = (x0[1] - level).abs() <= 1e-9 * (1.0 + level.abs());
        if on_locus && x0[0] < x_e[0] && norm2(x0) < 1.0 {
            return Ok("S B+b S0");
        }
        Err(Error::Unclassified(format!(
            "({:.6}, {:.6}) is not on the classified portion of the horizontal locus",
            x0[0], x0[1]
        )))
    }

    pub fn simulate(&self, x0: Vec2) -> Result<TrajectoryStructure> {
        let structure = self.classify_initial_condition(x0)?;
        self.simulate_structure(x0, structure)
    }

    pub fn simulate_structure(&self, x0: Vec2, structure: &str) -> Result<TrajectoryStructure> {
        match structure {
            "S B+b S0" => self.sim_singular_bridge_axis(x0, true),
            "B+b S0" => self.sim_singular_bridge_axis(x0, false),
            other => Err(Error::Config(format!("unknown MRI structure '{other}'"))),
        }
    }

    fn sim_singular_bridge_axis(
        &self,
        x0: Vec2,
        with_singular: bool,
    ) -> Result<TrajectoryStructure> {
        let tol = self.tol();
        let x_e = self.x_e();
        let mut arcs = Vec::new();
        let mut switch_points = Vec::new();
        let mut t = 0.0;
        let mut entry = x0;
        let mut structure = String::new();

        if with_singular {
            let (_, hit) = run_state_arc(
                &self.sys,
                ControlLaw::SingularFeedback,
                x0,
                100.0,
                &|y| y[0] - x_e[0],
                EventDir::Up,
                tol,
            )?;
            arcs.push(arc_from_run(
                ControlLaw::SingularFeedback,
                0.0,
                x0,
                &hit,
                StopReason::LocusDeparture,
                (hit.y[0] - x_e[0]).abs(),
                0.0,
            ));
            switch_points.push(hit.y);
            t = hit.t;
            entry = hit.y;
            structure.push_str("S ");
        }

        let gap = chain_gap(entry, x_e)?;
        let t_b = self.lift.t_b_star;
        let (rec, z_end) = bridge_record(&self.sys, self.lift.z_e, t_b, |x| x[0], tol)?;
        arcs.push(Arc {
            law: ControlLaw::BangPlus,
            t0: t,
            duration: t_b,
            x_start: x_e,
            x_end: z_end.x,
            stop: StopReason::TerminalManifold,
            stop_residual: rec.exit_constraint.abs(),
            entry_gap: gap,
        });
        switch_points.push(z_end.x);
        t += t_b;
        structure.push_str("B+b S0");

        // Relaxation along the vertical axis (u = 0) until x2 crosses zero;
        // x1 decays exponentially from its (tiny) bridge-exit value.
        let (_, hit) = run_state_arc(
            &self.sys,
            ControlLaw::Constant(0.0),
            z_end.x,
            100.0,
            &|y| y[1],
            EventDir::Up,
            tol,
        )?;
        arcs.push(arc_from_run(
            ControlLaw::Constant(0.0),
            t,
            z_end.x,
            &hit,
            StopReason::AxisTarget,
            hit.y[1].abs(),
            0.0,
        ));
        let terminal = hit.y;
        let total_time = arcs.iter().map(|a| a.duration).sum();
        let target_reached = norm2(terminal) <= 1e-8;
        Ok(TrajectoryStructure {
            structure,
            arcs,
            total_time,
            terminal,
            switch_points,
            bridge: Some(rec),
            target_reached,
        })
    }

    /// Grid dataset over {x1 <= 0} inside the Bloch ball. The row nearest
    /// the horizontal-locus level is snapped onto the locus and the exact
    /// departure point x_e is appended as a final row.
    pub fn synthesize_grid(&self, n1: usize, n2: usize) -> GridDataset {
        let level = self.params.horizontal_locus_level();
        let x1_vals: Vec<f64> = (0..n1)
            .map(|i| -0.99 + 0.99 * i as f64 / (n1 - 1) as f64)
            .collect();
        let mut x2_vals: Vec<f64> = (0..n2)
            .map(|j| -0.99 + 1.98 * j as f64 / (n2 - 1) as f64)
            .collect();
        let nearest = (0..n2)
            .min_by(|&a, &b| {
                (x2_vals[a] - level)
                    .abs()
                    .partial_cmp(&(x2_vals[b] - level).abs())
                    .unwrap()
            })
            .unwrap();
        x2_vals[nearest] = level;
        let mut rows = Vec::with_capacity(n1 * n2 + 1);
        for &x1 in &x1_vals {
            for &x2 in &x2_vals {
                let x0 = [x1, x2];
                if norm2(x0) >= 1.0 {
                    rows.push(GridRow::unclassified(x0, "outside the Bloch ball".into()));
                    continue;
                }
                rows.push(self.grid_row(x0));
            }
        }
        rows.push(self.grid_row(self.x_e()));
        GridDataset { rows, n1, n2 }
    }

    fn grid_row(&self, x0: Vec2) -> GridRow {
        match self.classify_initial_condition(x0) {
            Err(e) => GridRow::unclassified(x0, e.to_string()),
            Ok(structure) => match self.simulate_structure(x0, structure) {
                Ok(traj) => GridRow::from_trajectory(x0, &traj),
                Err(e) => GridRow {
                    x0,
                    structure: structure.into(),
                    total_time: None,
                    switches: Vec::new(),
                    error: Some(e.to_string()),
                },
            },
        }
    }

    /// Horizontal-locus layer: (x1, x2, psi) samples on the admissible span.
    pub fn locus_layer(&self, n: usize) -> Result<Vec<[f64; 3]>> {
        let level = self.params.horizontal_locus_level();
        let reach = (1.0 - level * level).sqrt() * 0.99;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x1 = -reach + (reach - 1e-3) * i as f64 / (n - 1) as f64;
            let x = [x1, level];
            let psi = self.sys.singular_feedback(x)?;
            out.push([x[0], x[1], psi]);
        }
        Ok(out)
    }

    /// Bridge layer: (t, x1, x2, phi) along the lifted bridge arc.
    pub fn bridge_layer(&self, n: usize) -> Result<Vec<[f64; 4]>> {
        let t_b = self.lift.t_b_star;
        let traj = exp_map_traj(
            &self.sys,
            ControlLaw::BangPlus,
            t_b,
            self.lift.z_e,
            self.tol(),
        )?;
        let mut out = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let t = t_b * i as f64 / n as f64;
            let z = traj.z_at(t)?;
            let phi = lift(&self.sys, LiftField::G, z)?;
            out.push([t, z.x[0], z.x[1], phi]);
        }
        Ok(out)
    }

    /// Switching-curve layer as (t_b, x1, x2, stratum) rows.
    pub fn sigma_pi_layer(&self) -> Result<Vec<(f64, Vec2, String)>> {
        let curve = continue_switching_curve_auto(&self.problem, &self.lift, 0.5, 16)?;
        Ok(curve
            .samples
            .iter()
            .map(|s| (s.t_b, s.sigma_big.x, s.stratum.to_string()))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Grid dataset.
// ---------------------------------------------------------------------------

/// One grid node: initial condition, classified structure and outcome.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub x0: Vec2,
    pub structure: String,
    pub total_time: Option<f64>,
    pub switches: Vec<Vec2>,
    pub error: Option<String>,
}

impl GridRow {
    fn unclassified(x0: Vec2, why: String) -> Self {
        GridRow {
            x0,
            structure: "unclassified".into(),
            total_time: None,
            switches: Vec::new(),
            error: Some(why),
        }
    }

    fn from_trajectory(x0: Vec2, traj: &TrajectoryStructure) -> Self {
        GridRow {
            x0,
            structure: traj.structure.clone(),
            total_time: Some(traj.total_time),
            switches: traj.switch_points.clone(),
            error: if traj.target_reached {
                None
            } else {
                Some("target not reached".into())
            },
        }
    }
}

/// Classified grid over initial conditions.
#[derive(Debug, Clone)]
pub struct GridDataset {
    pub rows: Vec<GridRow>,
    pub n1: usize,
    pub n2: usize,
}

const GRID_SWITCH_SLOTS: usize = 3;

impl GridDataset {
    pub fn n_classified(&self) -> usize {
        self.rows.iter().filter(|r| r.structure != "unclassified").count()
    }

    pub fn write_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        write!(w, "x1_0,x2_0,structure,total_time,n_switches")?;
        for i in 1..=GRID_SWITCH_SLOTS {
            write!(w, ",sw{i}_x1,sw{i}_x2")?;
        }
        writeln!(w, ",error")?;
        for row in &self.rows {
            write!(
                w,
                "{},{},{},{},{}",
                g17(row.x0[0]),
                g17(row.x0[1]),
                row.structure,
                row.total_time.map(g17).unwrap_or_default(),
                row.switches.len()
            )?;
            for i in 0..GRID_SWITCH_SLOTS {
                match row.switches.get(i) {
                    Some(p) => write!(w, ",{},{}", g17(p[0]), g17(p[1]))?,
                    None => write!(w, ",,")?,
                }
            }
            let err = row.error.as_deref().unwrap_or("").replace(',', ";");
            writeln!(w, ",{err}")?;
        }
        Ok(())
    }
}

/// Write a (t or parameter, x1, x2, value) layer as CSV.
pub fn write_layer_csv(
    header: &str,
    rows: &[Vec<f64>],
    w: &mut dyn Write,
) -> std::io::Result<()> {
    writeln!(w, "{header}")?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&x| g17(x)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn fed() -> FedBatchSynthesis {
        FedBatchSynthesis::new(FedBatchParams::default()).unwrap()
    }

    fn mri() -> MriSynthesis {
        MriSynthesis::new(MriParams::default()).unwrap()
    }

    #[test]
    fn classification_flips_exactly_at_departure_volume() {
        let syn = fed();
        let s = syn.params.s_star();
        let v_e = syn.v_e();
        assert_eq!(
            syn.classify_initial_condition([s, v_e - 1e-4]).unwrap(),
            "S B+b B-"
        );
        assert_eq!(
            syn.classify_initial_condition([s, v_e + 1e-4]).unwrap(),
            "B+ B-"
        );
        assert_eq!(syn.classify_initial_condition([s, v_e]).unwrap(), "B+ B-");
        assert!(matches!(
            syn.classify_initial_condition([0.5 * s, v_e]),
            Err(Error::Unclassified(_))
        ));
    }

    #[test]
    fn classified_fed_batch_paths_reach_target() {
        let syn = fed();
        let s = syn.params.s_star();
        let v_e = syn.v_e();
        for x0 in [[s, 0.5 * v_e], [s, v_e + 0.1], [s, 5.0]] {
            let traj = syn.simulate(x0).unwrap();
            assert!(traj.target_reached, "missed target from {x0:?}");
            assert!(traj.max_chain_gap() <= 1e-9 * 11.0);
            assert!(traj.total_time > 0.0);
        }
    }

    #[test]
    fn locus_starts_leave_at_the_same_departure_point() {
        let syn = fed();
        let s = syn.params.s_star();
        let v_e = syn.v_e();
        for v0 in [0.25 * v_e, 0.5 * v_e, 0.9 * v_e] {
            let traj = syn.simulate([s, v0]).unwrap();
            assert_eq!(traj.structure, "S B+b B-");
            let departure = traj.arcs[0].x_end;
            assert!((departure[0] - s).abs() <= 1e-6);
            assert!((departure[1] - v_e).abs() <= 1e-6);
        }
    }

    #[test]
    fn bridge_record_certifies_tangential_entry_and_sign() {
        let syn = fed();
        let traj = syn.simulate([syn.params.s_star(), 0.5 * syn.v_e()]).unwrap();
        let b = traj.bridge.unwrap();
        assert!(b.phi_entry.abs() <= 1e-8);
        assert!(b.phi_dot_entry.abs() <= 1e-8);
        assert!(b.phi_exit.abs() <= 1e-8);
        assert!(b.exit_constraint.abs() <= 1e-8);
        // Sign consistency: u = +1 on the bridge, so phi >= 0 inside.
        assert!(b.min_interior_phi >= -1e-9);
        assert!(b.min_interior_phi > 1e-6, "phi should be positive inside");
    }

    #[test]
    fn terminal_bang_minus_is_empty_at_defaults() {
        // The bridge arrives below s_ref, so the terminal arc degenerates;
        // the simulator must tolerate a zero-length closing arc.
        let syn = fed();
        assert!(syn.s_b() < syn.params.s_ref);
        let traj = syn.simulate([syn.params.s_star(), 0.5 * syn.v_e()]).unwrap();
        assert_eq!(traj.arcs.len(), 3);
        let last = traj.arcs.last().unwrap();
        assert_eq!(last.stop, StopReason::ZeroLength);
        assert_eq!(last.duration, 0.0);
    }

    #[test]
    fn classified_turnpike_beats_plain_bang_bang() {
        // Below v_e an immediate bang+ arc is dominated by feed dilution:
        // the substrate is pushed up toward s_in and a long terminal arc is
        // needed, so holding the singular arc until v_e is strictly faster.
        let syn = fed();
        let v_e = syn.v_e();
        for v0 in [0.1 * v_e, 0.25 * v_e, 0.5 * v_e, 0.75 * v_e, 0.9 * v_e] {
            let (classified, bang) = syn.turnpike_comparison(v0).unwrap();
            assert!(
                classified < bang,
                "v0 = {v0}: classified {classified} vs bang {bang}"
            );
        }
    }

    #[test]
    fn singular_extensions_never_beat_the_classified_departure() {
        let syn = fed();
        let v0 = 0.5 * syn.v_e();
        let classified = syn
            .simulate([syn.params.s_star(), v0])
            .unwrap()
            .total_time;
        let records = syn
            .exclusion_experiment(v0, &[0.25, 0.5, 0.75, 0.95, 1.0])
            .unwrap();
        for rec in &records {
            let time = rec.time.as_ref().unwrap();
            assert!(
                *time > classified,
                "extension to v = {} beat the classified time",
                rec.v_leave
            );
        }
        assert!(records.last().unwrap().inadmissible_beyond);
    }

    #[test]
    fn inflow_start_switches_on_the_computed_curve() {
        let syn = fed();
        let v0 = syn.v_e() + 1e-3;
        // The inflow line itself is an equilibrium of the bang- flow when
        // maintenance is zero; start just inside it.
        let x0 = [0.999 * syn.params.s_in, v0];
        let traj = syn.simulate_structure(x0, "B- B+ B-").unwrap();
        assert_eq!(traj.arcs.len(), 3);
        assert!(traj.target_reached);
        // First switch sits on the computed switching-curve projection,
        // at the frozen volume of the bang- arc.
        let sw = traj.switch_points[0];
        let s_curve = syn.sigma_pi_substrate(v0).unwrap();
        assert!((sw[0] - s_curve).abs() <= 1e-6);
        assert!((sw[1] - v0).abs() <= 1e-9);
        // Volumes outside the continuation window are out of computed scope.
        assert!(matches!(
            syn.simulate_structure([0.999 * syn.params.s_in, 5.0], "B- B+ B-"),
            Err(Error::Unclassified(_))
        ));
    }

    #[test]
    fn fed_batch_grid_records_classified_and_failed_nodes() {
        let syn = fed();
        let grid = syn.synthesize_grid(9, 9);
        assert_eq!(grid.rows.len(), 81);
        assert!(grid.n_classified() > 0);
        // Every classified locus node reaches the target.
        for row in &grid.rows {
            if row.structure == "B+ B-" || row.structure == "S B+b B-" {
                assert!(row.error.is_none(), "{:?}", row);
                assert!(row.total_time.unwrap() > 0.0);
            }
        }
        // The inflow column classifies but mostly cannot be simulated from
        // the locally computed switching curve; those errors are recorded.
        assert!(grid
            .rows
            .iter()
            .any(|r| r.structure == "B- B+ B-" && r.error.is_some()));
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1_0,x2_0,structure,total_time,n_switches"));
        assert_eq!(text.lines().count(), 82);
    }

    #[test]
    fn mri_classification_and_simulation() {
        let syn = mri();
        let x_e = syn.x_e();
        let level = syn.params.horizontal_locus_level();
        assert_eq!(
            syn.classify_initial_condition([x_e[0] - 0.3, level]).unwrap(),
            "S B+b S0"
        );
        assert_eq!(syn.classify_initial_condition(x_e).unwrap(), "B+b S0");
        assert!(syn.classify_initial_condition([0.1, level]).is_err());

        let traj = syn.simulate([x_e[0] - 0.3, level]).unwrap();
        assert_eq!(traj.structure, "S B+b S0");
        assert!(traj.target_reached, "terminal {:?}", traj.terminal);
        let b = traj.bridge.unwrap();
        // All four switching-function zeros of the double tangency.
        assert!(b.phi_entry.abs() <= 1e-8);
        assert!(b.phi_dot_entry.abs() <= 1e-8);
        assert!(b.phi_exit.abs() <= 1e-8);
        assert!(b.phi_dot_exit.abs() <= 1e-8);
        assert!(b.min_interior_phi >= -1e-9);

        let short = syn.simulate(x_e).unwrap();
        assert_eq!(short.structure, "B+b S0");
        assert!(short.target_reached);
        assert!(short.total_time < traj.total_time);
    }

    #[test]
    fn mri_grid_snaps_locus_row() {
        let syn = mri();
        let grid = syn.synthesize_grid(7, 7);
        assert_eq!(grid.rows.len(), 50);
        let classified: Vec<&GridRow> = grid
            .rows
            .iter()
            .filter(|r| r.structure != "unclassified")
            .collect();
        assert!(!classified.is_empty());
        for row in &classified {
            assert!(row.error.is_none(), "{:?}", row);
        }
        assert_eq!(grid.rows.last().unwrap().structure, "B+b S0");
    }

    #[test]
    fn singular_monitor_trips_past_the_saturation_volume() {
        let syn = fed();
        let err = syn
            .sim_singular_bridge(
                [syn.params.s_star(), 0.5 * syn.v_e()],
                1.1 * syn.params.v_pump_saturation(),
            )
            .unwrap_err();
        match err {
            Error::SingularInadmissible(_, psi) => assert!(psi > 1.0),
            other => panic!("expected SingularInadmissible, got {other}"),
        }
    }

    #[test]
    fn layers_have_expected_shapes() {
        let syn = fed();
        let locus = syn.locus_layer(32).unwrap();
        assert_eq!(locus.len(), 32);
        let bridge = syn.bridge_layer(16).unwrap();
        assert_eq!(bridge.len(), 17);
        // phi vanishes at both bridge ends.
        assert!(bridge.first().unwrap()[3].abs() <= 1e-8);
        assert!(bridge.last().unwrap()[3].abs() <= 1e-8);
        let pts = syn.sigma_pi_samples().unwrap();
        assert!(pts.len() >= 8);
        assert!(pts.first().unwrap().0 < syn.v_e());
        assert!(pts.last().unwrap().0 > syn.v_e());
    }
}
