//! Command-line interface: saturation points, prior-saturation lifts,
//! certification reports, synthesis datasets and single-trajectory
//! simulation for the bundled models.
//!
//! Exit codes: 0 success, 2 no solution for the request (no saturation
//! bracket, unclassified initial condition, inadmissible arc), 3 invalid
//! configuration, 4 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use priorsat::config::load_model_config;
use priorsat::error::{Error, Result};
use priorsat::hamiltonian::CotangentPoint;
use priorsat::models::{FedBatchParams, ModelConfig, MriParams};
use priorsat::ode::OdeTol;
use priorsat::output::{jbool, jint, jnum, jstr, jvec, JsonValue};
use priorsat::shooting::{
    check_assumptions, fbio_guess, fmri_guess, solve_prior_lift, AssumptionReport, LiftGuess,
    NewtonCfg, PriorLiftProblem, PriorSaturationLift,
};
use priorsat::switching_geometry::{
    certify_prior_saturation_setting, certify_tangency, certify_transversality,
    find_saturation_point, SingularLocus,
};
use priorsat::synthesis::{write_layer_csv, FedBatchSynthesis, MriSynthesis, TrajectoryStructure};

#[derive(Parser)]
#[command(
    name = "priorsat",
    about = "Singular-arc saturation geometry, bridge lifts and time-optimal synthesis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Model name: fedbatch | mri (optional when --params names it).
    #[arg(long)]
    model: Option<String>,
    /// JSON configuration file {"model": ..., "params": {...}}.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Directory for output artifacts (reports always go to stdout too).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Relative integration tolerance override.
    #[arg(long)]
    rtol: Option<f64>,
    /// Absolute integration tolerance override.
    #[arg(long)]
    atol: Option<f64>,
    /// RNG seed for sampled invariant checks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Locate the saturation point |psi| = 1 on a singular locus branch.
    Saturation {
        #[command(flatten)]
        common: Common,
        /// Locus branch: vertical (fedbatch, mri) or horizontal (mri).
        #[arg(long)]
        branch: Option<String>,
    },
    /// Solve the prior-saturation lift (bridge shooting problem).
    PriorLift {
        #[command(flatten)]
        common: Common,
    },
    /// Tangency, transversality and setting certificates at the lift.
    Certify {
        #[command(flatten)]
        common: Common,
    },
    /// Grid dataset of classified path types plus geometry layers.
    Synthesis {
        #[command(flatten)]
        common: Common,
        /// Grid dimensions, e.g. 41x41.
        #[arg(long, default_value = "41x41")]
        grid: String,
    },
    /// Simulate the classified (or a declared) arc structure from x0.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Initial condition, comma separated: "s0,v0" or "x1,x2".
        #[arg(long)]
        x0: String,
        /// Arc structure to force (default: classify first).
        #[arg(long)]
        structure: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("priorsat: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NoBracket
        | Error::Unclassified(_)
        | Error::SingularInadmissible(_, _)
        | Error::EventNotFound(_) => 2,
        Error::Config(_) | Error::ParamInvariantViolated(_) | Error::Io(_) => 3,
        _ => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Saturation { common, branch } => cmd_saturation(&common, branch.as_deref()),
        Cmd::PriorLift { common } => cmd_prior_lift(&common),
        Cmd::Certify { common } => cmd_certify(&common),
        Cmd::Synthesis { common, grid } => cmd_synthesis(&common, &grid),
        Cmd::Simulate {
            common,
            x0,
            structure,
        } => cmd_simulate(&common, &x0, structure.as_deref()),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

fn load_config(common: &Common) -> Result<ModelConfig> {
    let cfg = match (&common.model, &common.params) {
        (model, Some(path)) => {
            let cfg = load_model_config(path)?;
            if let Some(name) = model {
                if cfg.name() != name {
                    return Err(Error::Config(format!(
                        "--model {name} does not match '{}' in {}",
                        cfg.name(),
                        path.display()
                    )));
                }
            }
            cfg
        }
        (Some(name), None) => match name.as_str() {
            "fedbatch" => ModelConfig::FedBatch(FedBatchParams::default()),
            "mri" => ModelConfig::Mri(MriParams::default()),
            other => {
                return Err(Error::Config(format!(
                    "unknown model '{other}' (expected fedbatch or mri)"
                )))
            }
        },
        (None, None) => {
            return Err(Error::Config(
                "one of --model or --params is required".into(),
            ))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolved_tol(common: &Common, base: OdeTol) -> OdeTol {
    OdeTol::new(
        common.rtol.unwrap_or(base.rtol),
        common.atol.unwrap_or(base.atol),
    )
}

fn build_problem(cfg: &ModelConfig) -> Result<(PriorLiftProblem, LiftGuess)> {
    match cfg {
        ModelConfig::FedBatch(p) => Ok((PriorLiftProblem::fbio(p)?, fbio_guess(p)?)),
        ModelConfig::Mri(p) => Ok((PriorLiftProblem::fmri(p)?, fmri_guess(p)?)),
    }
}

fn params_json(cfg: &ModelConfig) -> JsonValue {
    let mut j = JsonValue::obj();
    match cfg {
        ModelConfig::FedBatch(p) => {
            j.push("mu_h", jnum(p.mu_h))
                .push("K", jnum(p.k))
                .push("K_I", jnum(p.k_i))
                .push("s_in", jnum(p.s_in))
                .push("Q_max", jnum(p.q_max))
                .push("m", jnum(p.m))
                .push("v_max", jnum(p.v_max))
                .push("s_ref", jnum(p.s_ref));
        }
        ModelConfig::Mri(p) => {
            j.push("gamma", jnum(p.gamma)).push("Gamma", jnum(p.gamma_big));
        }
    }
    j
}

fn tol_json(tol: OdeTol) -> JsonValue {
    let mut j = JsonValue::obj();
    j.push("rtol", jnum(tol.rtol)).push("atol", jnum(tol.atol));
    j
}

fn header_json(command: &str, cfg: &ModelConfig, tol: OdeTol) -> JsonValue {
    let mut j = JsonValue::obj();
    j.push("command", jstr(command))
        .push("model", jstr(cfg.name()))
        .push("params", params_json(cfg))
        .push("tolerances", tol_json(tol));
    j
}

fn cotangent_json(z: CotangentPoint) -> JsonValue {
    let mut j = JsonValue::obj();
    j.push("x", jvec(&z.x)).push("p", jvec(&z.p));
    j
}

fn lift_json(lift: &PriorSaturationLift) -> JsonValue {
    let mut j = JsonValue::obj();
    j.push("t_b_star", jnum(lift.t_b_star))
        .push("z_e", cotangent_json(lift.z_e))
        .push("z_b_star", cotangent_json(lift.z_b_star))
        .push("lambda_star", jvec(&lift.lambda_star))
        .push("residual_norm", jnum(lift.solution.residual_norm))
        .push("iterations", jint(lift.solution.iterations as i64))
        .push("jacobian_condition", jnum(lift.solution.jac_condition));
    j
}

fn assumptions_json(r: &AssumptionReport) -> JsonValue {
    let mut j = JsonValue::obj();
    j.push("h_gfg_at_ze", jnum(r.h_gfg_at_ze))
        .push("us_at_ze", jnum(r.us_at_ze))
        .push("a", jnum(r.a))
        .push("g_block_condition", jnum(r.g_block_condition))
        .push("f_jacobian_condition", jnum(r.f_jacobian_condition))
        .push("verdict_a2", jbool(r.verdict_a2))
        .push("verdict_a3", jbool(r.verdict_a3));
    j
}

fn emit(common: &Common, file_name: &str, doc: &JsonValue) -> Result<()> {
    let text = doc.to_pretty();
    println!("{text}");
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(file_name), text + "\n")?;
    }
    Ok(())
}

fn write_file(dir: &Path, name: &str, write: impl FnOnce(&mut dyn std::io::Write) -> std::io::Result<()>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    write(&mut buf)?;
    std::fs::write(dir.join(name), buf)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

fn cmd_saturation(common: &Common, branch: Option<&str>) -> Result<()> {
    let cfg = load_config(common)?;
    let sys = cfg.system()?;
    let (locus, branch_name) = match (&cfg, branch) {
        (ModelConfig::FedBatch(p), None | Some("vertical")) => {
            (SingularLocus::fed_batch_vertical(p)?, "vertical")
        }
        (ModelConfig::Mri(p), None | Some("horizontal")) => {
            (SingularLocus::mri_horizontal(p)?, "horizontal")
        }
        (ModelConfig::Mri(p), Some("vertical")) => (SingularLocus::mri_vertical(p)?, "vertical"),
        (_, Some(other)) => {
            return Err(Error::Config(format!(
                "branch '{other}' not defined for model {}",
                cfg.name()
            )))
        }
    };
    let root = find_saturation_point(&sys, &locus, 1.0)?;
    let tol = resolved_tol(common, OdeTol::default());
    let mut doc = header_json("saturation", &cfg, tol);
    doc.push("branch", jstr(branch_name))
        .push("tau_star", jnum(root.tau_star))
        .push("x_star", jvec(&root.x_star))
        .push("residual", jnum(root.residual))
        .push("monotone_sampled", jbool(root.monotone_sampled));
    emit(common, "saturation.json", &doc)
}

fn solve_lift_for(
    common: &Common,
    cfg: &ModelConfig,
) -> Result<(PriorLiftProblem, PriorSaturationLift, OdeTol)> {
    let (mut problem, guess) = build_problem(cfg)?;
    let tol = resolved_tol(common, problem.tol);
    problem.tol = tol;
    let lift = solve_prior_lift(&problem, &guess, &NewtonCfg::default())?;
    Ok((problem, lift, tol))
}

fn cmd_prior_lift(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let (problem, lift, tol) = solve_lift_for(common, &cfg)?;
    let report = check_assumptions(&problem, &lift)?;
    let mut doc = header_json("prior-lift", &cfg, tol);
    doc.push("lift", lift_json(&lift))
        .push("assumptions", assumptions_json(&report));
    emit(common, "prior_lift.json", &doc)
}

fn cmd_certify(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let (problem, lift, tol) = solve_lift_for(common, &cfg)?;
    let assumptions = check_assumptions(&problem, &lift)?;
    let tangency = certify_tangency(&problem, &lift, None)?;
    let transversality = certify_transversality(&problem, &lift, None)?;
    let setting = certify_prior_saturation_setting(&cfg)?;
    let mut doc = header_json("certify", &cfg, tol);
    doc.push("lift", lift_json(&lift))
        .push("assumptions", assumptions_json(&assumptions))
        .push("tangency", tangency.to_json())
        .push("transversality", transversality.to_json())
        .push("setting", setting.to_json());
    emit(common, "certify.json", &doc)
}

fn parse_grid(spec: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = spec.split('x').collect();
    if parts.len() == 2 {
        if let (Ok(n1), Ok(n2)) = (parts[0].parse(), parts[1].parse()) {
            if n1 >= 2 && n2 >= 2 {
                return Ok((n1, n2));
            }
        }
    }
    Err(Error::Config(format!(
        "--grid expects n1xn2 with n1, n2 >= 2, got '{spec}'"
    )))
}

fn cmd_synthesis(common: &Common, grid_spec: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let (n1, n2) = parse_grid(grid_spec)?;
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("synthesis requires --out".into()))?;
    std::fs::create_dir_all(out)?;
    let tol = resolved_tol(common, OdeTol::default());
    let mut doc = header_json("synthesis", &cfg, tol);
    doc.push("seed", jint(common.seed as i64));
    let mut grid_info = JsonValue::obj();
    grid_info.push("n1", jint(n1 as i64)).push("n2", jint(n2 as i64));

    match &cfg {
        ModelConfig::FedBatch(p) => {
            let syn = FedBatchSynthesis::new(*p)?;
            let dataset = syn.synthesize_grid(n1, n2);
            write_file(out, "grid.csv", |w| dataset.write_csv(w))?;
            let locus: Vec<Vec<f64>> =
                syn.locus_layer(256)?.iter().map(|r| r.to_vec()).collect();
            write_file(out, "locus.csv", |w| write_layer_csv("x1,x2,psi", &locus, w))?;
            let bridge: Vec<Vec<f64>> =
                syn.bridge_layer(256)?.iter().map(|r| r.to_vec()).collect();
            write_file(out, "bridge.csv", |w| {
                write_layer_csv("t,x1,x2,phi", &bridge, w)
            })?;
            let sigma: Vec<Vec<f64>> = syn
                .sigma_pi_samples()?
                .iter()
                .map(|&(v, s)| vec![v, s])
                .collect();
            write_file(out, "sigma_pi.csv", |w| write_layer_csv("v,s", &sigma, w))?;

            grid_info
                .push("rows", jint(dataset.rows.len() as i64))
                .push("classified", jint(dataset.n_classified() as i64));
            doc.push("grid", grid_info);
            let mut lift = lift_json(&syn.lift);
            lift.push("v_e", jnum(syn.v_e())).push("s_b", jnum(syn.s_b()));
            doc.push("lift", lift);
            doc.push("invariants", fed_batch_invariants(&syn, common.seed)?);
        }
        ModelConfig::Mri(p) => {
            let syn = MriSynthesis::new(*p)?;
            let dataset = syn.synthesize_grid(n1, n2);
            write_file(out, "grid.csv", |w| dataset.write_csv(w))?;
            let locus: Vec<Vec<f64>> =
                syn.locus_layer(256)?.iter().map(|r| r.to_vec()).collect();
            write_file(out, "locus.csv", |w| write_layer_csv("x1,x2,psi", &locus, w))?;
            let bridge: Vec<Vec<f64>> =
                syn.bridge_layer(256)?.iter().map(|r| r.to_vec()).collect();
            write_file(out, "bridge.csv", |w| {
                write_layer_csv("t,x1,x2,phi", &bridge, w)
            })?;
            let sigma = syn.sigma_pi_layer()?;
            write_file(out, "sigma_pi.csv", |w| {
                writeln!(w, "t_b,x1,x2,stratum")?;
                for (t_b, x, stratum) in &sigma {
                    writeln!(
                        w,
                        "{},{},{},{stratum}",
                        priorsat::output::g17(*t_b),
                        priorsat::output::g17(x[0]),
                        priorsat::output::g17(x[1])
                    )?;
                }
                Ok(())
            })?;

            grid_info
                .push("rows", jint(dataset.rows.len() as i64))
                .push("classified", jint(dataset.n_classified() as i64));
            doc.push("grid", grid_info);
            let mut lift = lift_json(&syn.lift);
            lift.push("x_e", jvec(&syn.x_e()));
            doc.push("lift", lift);
        }
    }
    emit(common, "manifest.json", &doc)
}

/// Sampled turnpike comparison and the singular-extension experiment for
/// the fed-batch model; recorded in the synthesis manifest.
fn fed_batch_invariants(syn: &FedBatchSynthesis, seed: u64) -> Result<JsonValue> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let v_e = syn.v_e();
    let mut turnpike = Vec::new();
    for _ in 0..5 {
        let v0 = v_e * rng.gen_range(0.1..0.9);
        let (classified, bang) = syn.turnpike_comparison(v0)?;
        let mut j = JsonValue::obj();
        j.push("v0", jnum(v0))
            .push("classified_time", jnum(classified))
            .push("bang_bang_time", jnum(bang))
            .push("classified_faster", jbool(classified < bang));
        turnpike.push(j);
    }
    let records = syn.exclusion_experiment(0.5 * v_e, &[0.25, 0.5, 0.75, 0.95, 1.0])?;
    let classified = syn
        .simulate([syn.params.s_star(), 0.5 * v_e])?
        .total_time;
    let mut exclusion = Vec::new();
    for rec in &records {
        let mut j = JsonValue::obj();
        j.push("depth_fraction", jnum(rec.depth_fraction))
            .push("v_leave", jnum(rec.v_leave));
        match &rec.time {
            Ok(t) => {
                j.push("total_time", jnum(*t))
                    .push("beats_classified", jbool(*t < classified));
            }
            Err(why) => {
                j.push("error", jstr(why.clone()));
            }
        }
        j.push("inadmissible_beyond", jbool(rec.inadmissible_beyond));
        exclusion.push(j);
    }
    let mut j = JsonValue::obj();
    j.push("classified_time_at_half_ve", jnum(classified))
        .push("turnpike", JsonValue::Arr(turnpike))
        .push("exclusion", JsonValue::Arr(exclusion));
    Ok(j)
}

fn parse_x0(text: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() == 2 {
        if let (Ok(a), Ok(b)) = (parts[0].trim().parse(), parts[1].trim().parse()) {
            return Ok([a, b]);
        }
    }
    Err(Error::Config(format!("--x0 expects 'a,b', got '{text}'")))
}

fn trajectory_json(traj: &TrajectoryStructure) -> JsonValue {
    let mut arcs = Vec::new();
    for a in &traj.arcs {
        let mut j = JsonValue::obj();
        j.push("law", jstr(a.law.short_label()))
            .push("t0", jnum(a.t0))
            .push("duration", jnum(a.duration))
            .push("x_start", jvec(&a.x_start))
            .push("x_end", jvec(&a.x_end))
            .push("stop", jstr(format!("{:?}", a.stop)))
            .push("stop_residual", jnum(a.stop_residual))
            .push("entry_gap", jnum(a.entry_gap));
        arcs.push(j);
    }
    let switches: Vec<JsonValue> = traj.switch_points.iter().map(|p| jvec(p)).collect();
    let mut j = JsonValue::obj();
    j.push("structure", jstr(traj.structure.clone()))
        .push("total_time", jnum(traj.total_time))
        .push("terminal", jvec(&traj.terminal))
        .push("target_reached", jbool(traj.target_reached))
        .push("n_switches", jint(traj.n_switches() as i64))
        .push("switch_points", JsonValue::Arr(switches))
        .push("arcs", JsonValue::Arr(arcs));
    if let Some(b) = traj.bridge {
        let mut bj = JsonValue::obj();
        bj.push("duration", jnum(b.duration))
            .push("phi_entry", jnum(b.phi_entry))
            .push("phi_dot_entry", jnum(b.phi_dot_entry))
            .push("phi_exit", jnum(b.phi_exit))
            .push("phi_dot_exit", jnum(b.phi_dot_exit))
            .push("exit_constraint", jnum(b.exit_constraint))
            .push("min_interior_phi", jnum(b.min_interior_phi));
        j.push("bridge", bj);
    }
    j
}

fn cmd_simulate(common: &Common, x0_text: &str, structure: Option<&str>) -> Result<()> {
    let cfg = load_config(common)?;
    let x0 = parse_x0(x0_text)?;
    let tol = resolved_tol(common, OdeTol::default());
    let traj = match &cfg {
        ModelConfig::FedBatch(p) => {
            let syn = FedBatchSynthesis::new(*p)?;
            match structure {
                Some(s) => syn.simulate_structure(x0, s)?,
                None => syn.simulate(x0)?,
            }
        }
        ModelConfig::Mri(p) => {
            let syn = MriSynthesis::new(*p)?;
            match structure {
                Some(s) => syn.simulate_structure(x0, s)?,
                None => syn.simulate(x0)?,
            }
        }
    };
    let mut doc = header_json("simulate", &cfg, tol);
    doc.push("x0", jvec(&x0))
        .push("trajectory", trajectory_json(&traj));
    emit(common, "simulate.json", &doc)
}
