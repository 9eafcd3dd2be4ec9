//! Embedded Dormand-Prince 5(4) integrator with 4th-order dense output and
//! event location by bisection on the continuous extension.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeTol {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for OdeTol {
    fn default() -> Self {
        OdeTol {
            rtol: 1e-10,
            atol: 1e-12,
        }
    }
}

impl OdeTol {
    pub fn new(rtol: f64, atol: f64) -> Self {
        OdeTol { rtol, atol }
    }
    /// Tight tolerances for certificate computations.
    pub fn tight() -> Self {
        OdeTol {
            rtol: 1e-12,
            atol: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OdeStats {
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

/// One accepted step with the coefficients of the dense interpolant.
#[derive(Debug, Clone)]
pub struct DenseStep<const N: usize> {
    pub t0: f64,
    pub h: f64,
    rcont: [[f64; N]; 5],
}

impl<const N: usize> DenseStep<N> {
    fn eval(&self, t: f64) -> [f64; N] {
        let theta = (t - self.t0) / self.h;
        let th1 = 1.0 - theta;
        let mut y = [0.0; N];
        for i in 0..N {
            y[i] = self.rcont[0][i]
                + theta
                    * (self.rcont[1][i]
                        + th1
                            * (self.rcont[2][i]
                                + theta * (self.rcont[3][i] + th1 * self.rcont[4][i])));
        }
        y
    }
}

/// Integrated solution over [t0, tf] (tf may be < t0) with dense output.
#[derive(Debug, Clone)]
pub struct OdeSolution<const N: usize> {
    pub t0: f64,
    pub tf: f64,
    pub y0: [f64; N],
    pub y_end: [f64; N],
    pub steps: Vec<DenseStep<N>>,
    pub stats: OdeStats,
    pub tol: OdeTol,
}

impl<const N: usize> OdeSolution<N> {
    pub fn span(&self) -> (f64, f64) {
        if self.t0 <= self.tf {
            (self.t0, self.tf)
        } else {
            (self.tf, self.t0)
        }
    }

    pub fn eval(&self, t: f64) -> Result<[f64; N]> {
        let (lo, hi) = self.span();
        let slack = 1e-10 * (1.0 + hi - lo);
        if t < lo - slack || t > hi + slack {
            return Err(Error::OutOfSpan(t, lo, hi));
        }
        if self.steps.is_empty() {
            return Ok(self.y0);
        }
        // Steps are ordered in integration direction.
        let dir = (self.tf - self.t0).signum();
        for st in &self.steps {
            let t1 = st.t0 + st.h;
            if (t - t1) * dir <= 0.0 {
                return Ok(st.eval(t));
            }
        }
        Ok(self.steps.last().unwrap().eval(t))
    }

    /// Accepted step endpoints, including t0.
    pub fn sample_times(&self) -> Vec<f64> {
        let mut ts = Vec::with_capacity(self.steps.len() + 1);
        ts.push(self.t0);
        for st in &self.steps {
            ts.push(st.t0 + st.h);
        }
        if let Some(last) = ts.last_mut() {
            *last = self.tf;
        }
        ts
    }
}

/// Crossing direction an event responds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventDir {
    Any,
    Up,
    Down,
}

pub struct EventSpec<'a, const N: usize> {
    pub f: Box<dyn Fn(f64, &[f64; N]) -> f64 + 'a>,
    pub dir: EventDir,
    /// The event stays inactive until |f| once exceeds this threshold.
    /// Used to skip tangential zeros at the start of an arc.
    pub arm_threshold: f64,
}

impl<'a, const N: usize> EventSpec<'a, N> {
    pub fn new(f: impl Fn(f64, &[f64; N]) -> f64 + 'a) -> Self {
        EventSpec {
            f: Box::new(f),
            dir: EventDir::Any,
            arm_threshold: 0.0,
        }
    }
    pub fn dir(mut self, dir: EventDir) -> Self {
        self.dir = dir;
        self
    }
    pub fn armed_after(mut self, threshold: f64) -> Self {
        self.arm_threshold = threshold;
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EventHit<const N: usize> {
    pub index: usize,
    pub t: f64,
    pub y: [f64; N],
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Dense output weights (Hairer's DOPRI5 continuous extension).
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

pub type Rhs<'a, const N: usize> = dyn Fn(f64, &[f64; N]) -> Result<[f64; N]> + 'a;

/// Integrate from t0 to tf (either direction). Local error controlled to tol.
pub fn integrate<const N: usize>(
    rhs: &Rhs<'_, N>,
    t0: f64,
    tf: f64,
    y0: [f64; N],
    tol: OdeTol,
) -> Result<OdeSolution<N>> {
    integrate_with_events(rhs, t0, tf, y0, tol, &mut []).map(|(sol, _)| sol)
}

/// Integrate until tf or until the first event triggers, whichever comes
/// first. Event times are located to |dt| <= 1e-12 * span.
pub fn integrate_with_events<const N: usize>(
    rhs: &Rhs<'_, N>,
    t0: f64,
    tf: f64,
    y0: [f64; N],
    tol: OdeTol,
    events: &mut [EventSpec<'_, N>],
) -> Result<(OdeSolution<N>, Option<EventHit<N>>)> {
    let mut sol = OdeSolution {
        t0,
        tf,
        y0,
        y_end: y0,
        steps: Vec::new(),
        stats: OdeStats::default(),
        tol,
    };
    if t0 == tf {
        return Ok((sol, None));
    }
    let dir = (tf - t0).signum();
    let span = (tf - t0).abs();

    let mut armed: Vec<bool> = events.iter().map(|e| e.arm_threshold <= 0.0).collect();
    let mut prev_val: Vec<f64> = events.iter().map(|e| (e.f)(t0, &y0)).collect();
    for (i, e) in events.iter().enumerate() {
        if !armed[i] && prev_val[i].abs() > e.arm_threshold {
            armed[i] = true;
        }
    }

    let mut t = t0;
    let mut y = y0;
    let mut k1 = rhs(t, &y)?;
    sol.stats.rhs_evals += 1;
    let mut h = initial_step(&k1, &y, span, dir, tol);

    let h_min = 1e-14 * (1.0 + span);
    while (tf - t) * dir > 1e-14 * span.max(1.0) {
        if h.abs() < h_min {
            return Err(Error::IntegrationFailure(t));
        }
        if (t + h - tf) * dir > 0.0 {
            h = tf - t;
        }
        let mut ks = [[0.0; N]; 7];
        ks[0] = k1;
        let mut stage_failed = false;
        for s in 1..7 {
            let mut ys = y;
            for i in 0..N {
                let mut acc = 0.0;
                for (j, kj) in ks.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                ys[i] += h * acc;
            }
            // A trial stage probing outside the validity region rejects the
            // step instead of aborting; genuine exits end in step underflow.
            match rhs(t + C[s] * h, &ys) {
                Ok(k) => ks[s] = k,
                Err(_) => {
                    stage_failed = true;
                    break;
                }
            }
            sol.stats.rhs_evals += 1;
        }
        if stage_failed {
            sol.stats.rejected += 1;
            h *= 0.25;
            continue;
        }
        // 5th-order solution is the last stage (FSAL).
        let mut y1 = y;
        for i in 0..N {
            let mut acc = 0.0;
            for (j, kj) in ks.iter().enumerate().take(6) {
                acc += A[6][j] * kj[i];
            }
            y1[i] += h * acc;
        }
        // Error estimate.
        let mut err = 0.0;
        for i in 0..N {
            let mut e = 0.0;
            for (j, kj) in ks.iter().enumerate() {
                e += E[j] * kj[i];
            }
            e *= h;
            let sc = tol.atol + tol.rtol * y[i].abs().max(y1[i].abs());
            err += (e / sc) * (e / sc);
        }
        err = (err / N as f64).sqrt();

        if err <= 1.0 {
            // Dense output coefficients.
            let mut rcont = [[0.0; N]; 5];
            for i in 0..N {
                let ydiff = y1[i] - y[i];
                let bspl = h * ks[0][i] - ydiff;
                rcont[0][i] = y[i];
                rcont[1][i] = ydiff;
                rcont[2][i] = bspl;
                rcont[3][i] = ydiff - h * ks[6][i] - bspl;
                let mut acc = 0.0;
                for (j, kj) in ks.iter().enumerate() {
                    acc += D[j] * kj[i];
                }
                rcont[4][i] = h * acc;
            }
            let step = DenseStep { t0: t, h, rcont };

            // Event scan on the dense interpolant of this step.
            if !events.is_empty() {
                if let Some(hit) =
                    scan_events(&step, t, h, span, events, &mut armed, &mut prev_val)?
                {
                    sol.steps.push(step);
                    sol.tf = hit.t;
                    sol.y_end = hit.y;
                    sol.stats.steps += 1;
                    return Ok((sol, Some(hit)));
                }
            }

            sol.steps.push(step);
            sol.stats.steps += 1;
            t += h;
            y = y1;
            k1 = ks[6]; // FSAL
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            h *= factor;
        } else {
            sol.stats.rejected += 1;
            h *= (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
        }
    }
    sol.tf = tf;
    sol.y_end = y;
    Ok((sol, None))
}

fn initial_step<const N: usize>(
    k1: &[f64; N],
    y0: &[f64; N],
    span: f64,
    dir: f64,
    tol: OdeTol,
) -> f64 {
    let _ = tol;
    let d0 = y0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let d1 = k1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h0 = if d1 > 1e-10 {
        0.01 * (d0.max(1.0) / d1)
    } else {
        1e-4 * span
    };
    dir * h0.min(0.1 * span).max(1e-10 * (1.0 + span))
}

fn scan_events<const N: usize>(
    step: &DenseStep<N>,
    t: f64,
    h: f64,
    span: f64,
    events: &[EventSpec<'_, N>],
    armed: &mut [bool],
    prev_val: &mut [f64],
) -> Result<Option<EventHit<N>>> {
    const SUB: usize = 8;
    let mut best: Option<EventHit<N>> = None;
    let dirsgn = h.signum();
    for (idx, ev) in events.iter().enumerate() {
        let mut ta = t;
        let mut va = prev_val[idx];
        let mut found: Option<f64> = None;
        for s in 1..=SUB {
            let tb = t + h * (s as f64) / (SUB as f64);
            let yb = step.eval(tb);
            let vb = (ev.f)(tb, &yb);
            if !armed[idx] {
                if vb.abs() > ev.arm_threshold {
                    armed[idx] = true;
                }
            } else if crossing(va, vb, ev.dir, dirsgn) {
                found = Some(locate_root(step, &ev.f, ta, va, tb, vb, span));
                break;
            }
            ta = tb;
            va = vb;
        }
        if let Some(te) = found {
            let better = match &best {
                None => true,
                Some(b) => (te - b.t) * dirsgn < 0.0,
            };
            if better {
                best = Some(EventHit {
                    index: idx,
                    t: te,
                    y: step.eval(te),
                });
            }
        }
    }
    if best.is_none() {
        let t1 = t + h;
        let y1 = step.eval(t1);
        for (idx, ev) in events.iter().enumerate() {
            prev_val[idx] = (ev.f)(t1, &y1);
        }
    }
    Ok(best)
}

fn crossing(va: f64, vb: f64, dir: EventDir, _time_dir: f64) -> bool {
    let sign_change = (va <= 0.0 && vb > 0.0)
        || (va >= 0.0 && vb < 0.0)
        || (va < 0.0 && vb >= 0.0)
        || (va > 0.0 && vb <= 0.0);
    if !sign_change || (va == 0.0 && vb == 0.0) {
        return false;
    }
    match dir {
        EventDir::Any => true,
        EventDir::Up => va < vb,
        EventDir::Down => va > vb,
    }
}

fn locate_root<const N: usize>(
    step: &DenseStep<N>,
    f: &(dyn Fn(f64, &[f64; N]) -> f64 + '_),
    mut ta: f64,
    mut va: f64,
    mut tb: f64,
    _vb: f64,
    span: f64,
) -> f64 {
    // Bisection on the dense output to |dt| <= 1e-12 * span.
    let tol = 1e-12 * span.max(1.0);
    for _ in 0..200 {
        if (tb - ta).abs() <= tol {
            break;
        }
        let tm = 0.5 * (ta + tb);
        let vm = f(tm, &step.eval(tm));
        if (va <= 0.0) == (vm <= 0.0) {
            ta = tm;
            va = vm;
        } else {
            tb = tm;
        }
    }
    0.5 * (ta + tb)
}
