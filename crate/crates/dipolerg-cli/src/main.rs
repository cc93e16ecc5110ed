mod config;
mod output;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use dipolerg::bounds::{contraction_ledger, min_a_for_correlation, min_scale_for_contraction, tail_bound, tail_scale, LedgerInput};
use dipolerg::frd::{build_decomposition_with, verify_decay, FrdOptions};
use dipolerg::gas::{
    decay_exponent_fit, eta, kac_siegert_check, mc_truncated_correlation, quadratic_partition_exact, quadratic_partition_mc,
    ExternalFieldSpec, FieldVariant, McOptions, Torus,
};
use dipolerg::kernels::{coulomb_table, decay_fit};
use dipolerg::polymers::{min_covering_scale, n_constants, Adjacency};
use dipolerg::rgflow::{accumulate_ff, run_flow, sigma_sweep, stable_sigma, FlowConfig, FlowStatus};
use dipolerg::Error;
use output::{Failure, Format, Output};
use serde::Serialize;
use serde_json::json;
use std::process::ExitCode;

#[derive(Parser, Debug, Serialize)]
#[command(name = "dipolerg", version, about = "Renormalization group experiments for the lattice dipole gas")]
struct Cli {
    /// key=value file; flags on the command line take precedence
    #[arg(long, global = true)]
    config: Option<String>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: String,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Worker threads for Monte Carlo
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Do not echo results to stdout
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug, Serialize)]
enum Cmd {
    /// Lattice Coulomb kernel table and its decay
    Green(GreenArgs),
    /// Finite-range decomposition, one table per scale
    Frd(FrdArgs),
    /// Polymer constants
    Polymers(PolymerArgs),
    /// Dipole gas checks and Monte Carlo
    #[command(subcommand)]
    Gas(GasCmd),
    /// Truncated RG flow
    #[command(subcommand)]
    Flow(FlowCmd),
    /// Constant ledger and admissible parameters
    Bounds(BoundsArgs),
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',').filter(|x| !x.trim().is_empty()).map(|x| x.trim().parse().map_err(|_| format!("bad entry {x:?}"))).collect()
}

fn parse_points(s: &str) -> Result<Vec<Vec<i64>>, String> {
    s.split(';').filter(|x| !x.trim().is_empty()).map(parse_list).collect()
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct GreenArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Table radius
    #[arg(long, default_value_t = 6)]
    radius: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Derivative multi-index as signed directions, e.g. 1,-2
    #[arg(long, default_value = "", value_parser = parse_list::<i32>)]
    alpha: ::std::vec::Vec<i32>,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct FrdArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long = "L", alias = "l", default_value_t = 5)]
    l: u64,
    #[arg(long = "J", alias = "j", default_value_t = 3)]
    j: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 12)]
    radius: usize,
    /// Spread allowed for the per-scale constants
    #[arg(long, default_value_t = 3.0)]
    factor: f64,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct PolymerArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value = "king")]
    adjacency: String,
    /// Arguments of n3
    #[arg(long = "l-list", default_value = "1,2,3,5,8", value_parser = parse_list::<f64>)]
    l_list: ::std::vec::Vec<f64>,
}

#[derive(Args, Debug, Serialize, Clone)]
struct McArgs {
    #[arg(long, default_value_t = 4000)]
    samples: usize,
    #[arg(long, default_value_t = 20)]
    chains: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Smallest acceptable effective sample fraction
    #[arg(long = "min-ess", default_value_t = 0.1)]
    min_ess: f64,
}

impl McArgs {
    fn options(&self, threads: usize) -> McOptions {
        McOptions { samples: self.samples, chains: self.chains, seed: self.seed, min_ess_fraction: self.min_ess, threads }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
enum Variant {
    None,
    GradientLinear,
    GradientExponential,
    DipoleDensity,
}

#[derive(Args, Debug, Serialize, Clone)]
struct FieldArgs {
    #[arg(long, value_enum, default_value_t = Variant::GradientLinear)]
    variant: Variant,
    /// Points as x,y,z;x,y,z
    #[arg(long, default_value = "0,0,0;1,0,0", value_parser = parse_points)]
    points: ::std::vec::Vec<Vec<i64>>,
    /// One signed direction per point
    #[arg(long, default_value = "1,1", value_parser = parse_list::<i32>)]
    directions: ::std::vec::Vec<i32>,
    /// Analyticity radius a
    #[arg(long = "t-radius", default_value_t = 0.5)]
    t_radius: f64,
}

impl FieldArgs {
    fn spec(&self) -> ExternalFieldSpec {
        let mut s = match self.variant {
            Variant::None => ExternalFieldSpec::none(),
            Variant::GradientLinear => ExternalFieldSpec::gradient(self.points.clone(), self.directions.clone()),
            Variant::GradientExponential => ExternalFieldSpec::exponential(self.points.clone(), self.directions.clone()),
            Variant::DipoleDensity => ExternalFieldSpec::dipole_density(self.points.clone()),
        };
        s.radius = self.t_radius;
        s
    }
}

#[derive(Subcommand, Debug, Serialize)]
enum GasCmd {
    /// Compare the grand canonical and Gaussian forms order by order
    KacSiegert(KacArgs),
    /// Quadratic partition function, closed form and Monte Carlo
    Partition(PartitionArgs),
    /// Truncated correlation of the field observables
    Correlate(CorrelateArgs),
    /// Decay exponent of the gradient two-point function
    Decay(DecayArgs),
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct KacArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    side: usize,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct PartitionArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    side: usize,
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    /// Quadrature nodes in the coupling
    #[arg(long, default_value_t = 6)]
    nodes: usize,
    #[command(flatten)]
    mc: McArgs,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct CorrelateArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    side: usize,
    #[arg(long, default_value_t = 0.0)]
    z: f64,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[command(flatten)]
    field: FieldArgs,
    #[command(flatten)]
    mc: McArgs,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct DecayArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    side: usize,
    #[arg(long, default_value_t = 0.0)]
    z: f64,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    direction: i32,
    #[arg(long, default_value = "1,2,4", value_parser = parse_list::<i64>)]
    separations: ::std::vec::Vec<i64>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[command(flatten)]
    mc: McArgs,
}

#[derive(Args, Debug, Serialize, Clone)]
struct FlowArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long = "L", alias = "l", default_value_t = 5)]
    l: u64,
    #[arg(long = "J", alias = "j", default_value_t = 5)]
    j: usize,
    #[arg(long, default_value_t = 0.01)]
    z: f64,
    #[arg(long, default_value_t = 1.0)]
    h: f64,
    /// Large-set weight A of the norm
    #[arg(long = "A", alias = "a", default_value_t = 16.0)]
    a: f64,
    #[arg(long = "norm-bound", default_value_t = 1e6)]
    norm_bound: f64,
    #[arg(long, default_value_t = 4)]
    probes: usize,
    #[arg(long = "probe-seed", default_value_t = 1)]
    probe_seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

impl FlowArgs {
    fn config(&self) -> FlowConfig {
        FlowConfig {
            d: self.d,
            l: self.l,
            h: self.h,
            norm_a: self.a,
            norm_bound: self.norm_bound,
            probes: self.probes,
            probe_seed: self.probe_seed,
            frd: FrdOptions { tol: self.tol, ..FlowConfig::default().frd },
            ..FlowConfig::default()
        }
    }
}

#[derive(Subcommand, Debug, Serialize)]
enum FlowCmd {
    /// Trajectory as JSON lines
    Run(FlowRunArgs),
    /// Shoot for the σ0 that ends at σ_J = 0
    StableSigma(StableArgs),
    /// Scale-resolved external field energy
    #[command(name = "fF", alias = "ff")]
    Ff(FfArgs),
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct FlowRunArgs {
    #[command(flatten)]
    flow: FlowArgs,
    /// Starting σ0; ignored with --stable
    #[arg(long, default_value_t = 0.0)]
    sigma0: f64,
    /// Start on the stable manifold
    #[arg(long)]
    stable: bool,
    #[command(flatten)]
    field: FieldArgs,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct StableArgs {
    #[command(flatten)]
    flow: FlowArgs,
    #[arg(long = "sigma-tol", default_value_t = 1e-13)]
    sigma_tol: f64,
    #[arg(long, default_value_t = 0.5)]
    bracket: f64,
    /// Also shoot at −z
    #[arg(long)]
    symmetry: bool,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct FfArgs {
    #[command(flatten)]
    flow: FlowArgs,
    #[arg(long, default_value_t = 0.0)]
    sigma0: f64,
    #[arg(long)]
    stable: bool,
    #[command(flatten)]
    field: FieldArgs,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true, args_conflicts_with_subcommands = false, subcommand_negates_reqs = true)]
struct BoundsArgs {
    #[command(subcommand)]
    cmd: Option<BoundsCmd>,
    #[command(flatten)]
    ledger: LedgerArgs,
}

#[derive(Args, Debug, Serialize, Clone)]
struct LedgerArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long = "L", alias = "l", default_value_t = 65)]
    l: u64,
    #[arg(long = "A", alias = "a", default_value_t = 16.0)]
    a: f64,
    #[arg(long, default_value_t = 1.0)]
    h: f64,
    #[arg(long, default_value_t = 1.0)]
    q: f64,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 0.1)]
    r: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value = "king")]
    adjacency: String,
}

impl LedgerArgs {
    fn input(&self) -> Result<LedgerInput, Failure> {
        Ok(LedgerInput {
            d: self.d,
            l: self.l,
            a: self.a,
            h: self.h,
            q: self.q,
            m: self.m,
            r: self.r,
            epsilon: self.epsilon,
            adjacency: adjacency(&self.adjacency)?,
            ..LedgerInput::default()
        })
    }
}

#[derive(Subcommand, Debug, Serialize)]
enum BoundsCmd {
    /// Every bound at one parameter point
    Ledger(LedgerOnly),
    /// Smallest odd L whose total is at most the target
    #[command(name = "min-L", alias = "min-l")]
    MinL(MinLArgs),
    /// Smallest A for the correlation estimate
    #[command(name = "min-A", alias = "min-a")]
    MinA(MinAArgs),
    /// Tail estimate and the N where it drops below a tolerance
    Tail(TailArgs),
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct LedgerOnly {
    #[command(flatten)]
    ledger: LedgerArgs,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct MinLArgs {
    #[command(flatten)]
    ledger: LedgerArgs,
    #[arg(long, default_value_t = 0.25)]
    target: f64,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct MinAArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value = "king")]
    adjacency: String,
    /// Defaults to min(d/2, 2)
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    r: f64,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct TailArgs {
    #[arg(long, default_value_t = 1.0)]
    h: f64,
    #[arg(long = "A", alias = "a", default_value_t = 16.0)]
    a: f64,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 0.1)]
    r: f64,
    #[arg(long = "N", alias = "n", default_value_t = 10)]
    n: u32,
    #[arg(long = "tail-tol", default_value_t = 1e-6)]
    tail_tol: f64,
}

fn adjacency(s: &str) -> Result<Adjacency, Failure> {
    s.parse().map_err(|_| Failure::Usage(format!("unknown adjacency {s:?}")))
}

fn numeric(e: Error) -> Failure {
    Failure::Lib(e)
}

fn field_check(spec: &ExternalFieldSpec) -> Result<(), Failure> {
    if spec.variant == FieldVariant::None {
        return Err(Failure::Usage("this command needs an external field".into()));
    }
    Ok(())
}

fn flow_start(flow: &FlowArgs, cfg: &FlowConfig, stable: bool, sigma0: f64, field: &ExternalFieldSpec) -> Result<f64, Failure> {
    if stable {
        Ok(stable_sigma(cfg, flow.z, field, flow.j, 1e-13, 0.5).map_err(numeric)?.sigma)
    } else {
        Ok(sigma0)
    }
}

fn run(cli: &Cli, out: &mut Output) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Green(a) => {
            let k = coulomb_table(a.d, a.radius, a.tol).map_err(numeric)?;
            let dk = k.derivative(&a.alpha).map_err(numeric)?;
            let fit = decay_fit(&k, &a.alpha, dk.radius()).ok();
            let header: Vec<String> = (0..a.d).map(|i| format!("x{}", i + 1)).chain(["value".to_string()]).collect();
            let rows: Vec<Vec<String>> = dk
                .rows()
                .map(|(x, v)| x.iter().map(|c| c.to_string()).chain([format!("{v:e}")]).collect())
                .collect();
            out.table_csv("green", &header, &rows)?;
            out.json("green_summary", &json!({"d": a.d, "radius": a.radius, "alpha": a.alpha, "error": k.error, "decay": fit}))?;
        }
        Cmd::Frd(a) => {
            let rd = build_decomposition_with(a.d, a.l, a.j, FrdOptions { tol: a.tol, table_radius: a.radius, ..FrdOptions::default() })
                .map_err(numeric)?;
            let header: Vec<String> = (0..a.d).map(|i| format!("x{}", i + 1)).chain(["value".to_string()]).collect();
            for j in 1..=a.j {
                let rows: Vec<Vec<String>> =
                    rd.gamma(j).rows().map(|(x, v)| x.iter().map(|c| c.to_string()).chain([format!("{v:e}")]).collect()).collect();
                out.table_csv(&format!("gamma_{j}"), &header, &rows)?;
            }
            let mut constants = Vec::new();
            for alpha in [vec![], vec![1], vec![1, 1], vec![1, 2]] {
                constants.push(verify_decay(&rd, &alpha, a.factor).map_err(numeric)?);
            }
            out.json(
                "frd",
                &json!({
                    "d": a.d, "L": a.l, "J": a.j, "residual": rd.residual, "status": rd.status,
                    "factors": rd.factors, "symbol_minima": rd.symbol_minima(16), "constants": constants,
                }),
            )?;
        }
        Cmd::Polymers(a) => {
            let adj = adjacency(&a.adjacency)?;
            let n = n_constants(a.d, adj).map_err(numeric)?;
            let mut header = vec!["d".to_string(), "n1".into(), "n2".into()];
            let mut row = vec![a.d.to_string(), format!("{}", n.n1), format!("{}", n.n2)];
            for l in &a.l_list {
                header.push(format!("n3({l})"));
                row.push(format!("{:e}", n.n3(*l)));
            }
            out.table_csv("polymers", &header, &[row])?;
            out.json("polymers", &*n)?;
        }
        Cmd::Gas(g) => match g {
            GasCmd::KacSiegert(a) => {
                let r = kac_siegert_check(Torus::new(a.d, a.side).map_err(numeric)?, a.n, a.tol).map_err(numeric)?;
                out.json("kac_siegert", &r)?;
                if !r.ok {
                    return Err(Failure::Check(format!("relative difference {:e} above {:e}", r.relative, r.tol)));
                }
            }
            GasCmd::Partition(a) => {
                let torus = Torus::new(a.d, a.side).map_err(numeric)?;
                let exact = quadratic_partition_exact(torus.volume(), a.sigma).map_err(numeric)?;
                let mc = quadratic_partition_mc(torus, a.sigma, a.nodes, &a.mc.options(cli.threads)).map_err(numeric)?;
                out.json("partition", &json!({"sigma": a.sigma, "volume": torus.volume(), "exact": exact, "mc": mc}))?;
            }
            GasCmd::Correlate(a) => {
                let spec = a.field.spec();
                field_check(&spec)?;
                let torus = Torus::new(a.d, a.side).map_err(numeric)?;
                let e = mc_truncated_correlation(torus, a.z, a.sigma, &spec, &a.mc.options(cli.threads)).map_err(numeric)?;
                out.json(
                    "correlate",
                    &json!({
                        "observable": spec.variant, "points": spec.points, "directions": spec.directions,
                        "estimate": e.mean, "imag": e.imag, "stderr": e.stderr, "samples": e.samples, "seed": e.seed, "ess": e.ess,
                    }),
                )?;
            }
            GasCmd::Decay(a) => {
                let torus = Torus::new(a.d, a.side).map_err(numeric)?;
                let fit = decay_exponent_fit(torus, a.z, a.sigma, a.direction, &a.separations, a.epsilon, &a.mc.options(cli.threads))
                    .map_err(numeric)?;
                let header: Vec<String> = ["separation", "estimate", "stderr", "samples", "seed"].iter().map(|s| s.to_string()).collect();
                let rows: Vec<Vec<String>> = fit
                    .points
                    .iter()
                    .map(|p| {
                        vec![
                            p.separation.to_string(),
                            format!("{:e}", p.estimate.mean),
                            format!("{:e}", p.estimate.stderr),
                            p.estimate.samples.to_string(),
                            p.estimate.seed.to_string(),
                        ]
                    })
                    .collect();
                out.table_csv("decay", &header, &rows)?;
                out.json("decay_fit", &fit)?;
            }
        },
        Cmd::Flow(f) => match f {
            FlowCmd::Run(a) => {
                let cfg = a.flow.config();
                let spec = a.field.spec();
                let s0 = flow_start(&a.flow, &cfg, a.stable, a.sigma0, &spec)?;
                let t = run_flow(&cfg, a.flow.z, s0, &spec, a.flow.j).map_err(numeric)?;
                out.json_lines("trajectory", &t.rows())?;
                out.json("flow_summary", &json!({"z": t.z, "sigma0": t.sigma0, "status": t.status, "geometric_decay": t.geometric_decay}))?;
                if let FlowStatus::Diverged { scale, reason } = &t.status {
                    return Err(Failure::Lib(Error::Divergence { scale: *scale, reason: reason.clone() }));
                }
            }
            FlowCmd::StableSigma(a) => {
                let cfg = a.flow.config();
                let none = ExternalFieldSpec::none();
                let res = stable_sigma(&cfg, a.flow.z, &none, a.flow.j, a.sigma_tol, a.bracket);
                let s = match res {
                    Ok(s) => s,
                    Err(Error::BracketFailure { lo, hi }) => {
                        let grid: Vec<f64> = (0..=10).map(|i| lo + (hi - lo) * i as f64 / 10.0).collect();
                        let sweep = sigma_sweep(&cfg, a.flow.z, &none, a.flow.j, &grid).map_err(numeric)?;
                        out.json("stable_sigma_sweep", &sweep)?;
                        return Err(Failure::Lib(Error::BracketFailure { lo, hi }));
                    }
                    Err(e) => return Err(numeric(e)),
                };
                let mirror = if a.symmetry {
                    Some(stable_sigma(&cfg, -a.flow.z, &none, a.flow.j, a.sigma_tol, a.bracket).map_err(numeric)?)
                } else {
                    None
                };
                out.json("stable_sigma", &json!({"result": s, "mirror": mirror}))?;
            }
            FlowCmd::Ff(a) => {
                let cfg = a.flow.config();
                let spec = a.field.spec();
                field_check(&spec)?;
                let s0 = flow_start(&a.flow, &cfg, a.stable, a.sigma0, &spec)?;
                let t = run_flow(&cfg, a.flow.z, s0, &spec, a.flow.j).map_err(numeric)?;
                let report = accumulate_ff(&t).map_err(numeric)?;
                let cover = min_covering_scale(&spec.points, cfg.l, cfg.adjacency).ok();
                out.json("fF", &json!({"sigma0": s0, "status": t.status, "report": report, "covering": cover}))?;
                if let FlowStatus::Diverged { scale, reason } = &t.status {
                    return Err(Failure::Lib(Error::Divergence { scale: *scale, reason: reason.clone() }));
                }
            }
        },
        Cmd::Bounds(b) => match &b.cmd {
            None => ledger(&b.ledger, out)?,
            Some(BoundsCmd::Ledger(a)) => ledger(&a.ledger, out)?,
            Some(BoundsCmd::MinL(a)) => {
                let inp = a.ledger.input()?;
                let r = min_scale_for_contraction(&inp, a.target).map_err(numeric)?;
                out.json("min_L", &r)?;
            }
            Some(BoundsCmd::MinA(a)) => {
                let eta = a.eta.unwrap_or_else(|| eta(a.d));
                let r = min_a_for_correlation(a.d, adjacency(&a.adjacency)?, eta, a.epsilon, a.r).map_err(numeric)?;
                out.json("min_A", &json!({"d": a.d, "eta": eta, "epsilon": a.epsilon, "r": a.r, "result": r}))?;
            }
            Some(BoundsCmd::Tail(a)) => {
                let n_tol = tail_scale(a.h, a.a, a.c, a.r, a.tail_tol).map_err(numeric)?;
                out.json("tail", &json!({"tail": tail_bound(a.h, a.a, a.c, a.r, a.n), "N": a.n, "N_for_tol": n_tol, "tol": a.tail_tol}))?;
            }
        },
    }
    Ok(())
}

fn ledger(a: &LedgerArgs, out: &mut Output) -> Result<(), Failure> {
    let r = contraction_ledger(&a.input()?).map_err(numeric)?;
    let header: Vec<String> = ["bound", "value"].iter().map(|s| s.to_string()).collect();
    let mut rows: Vec<Vec<String>> = [
        ("L2 bulk", r.l2_bulk),
        ("L2 field", r.l2_field),
        ("L3'", r.l3_prime),
        ("Delta", r.delta),
        ("total", r.total),
        ("L1 (estimate)", r.l1.value),
    ]
    .iter()
    .map(|(k, v)| vec![k.to_string(), format!("{v:e}")])
    .collect();
    for (j, v) in &r.l4_per_scale {
        rows.push(vec![format!("L4 (j={j})"), format!("{v:e}")]);
    }
    out.text_table(&header, &rows);
    out.table("ledger", &header, &rows)?;
    out.json("ledger", &r)
}

fn leaf_name(m: &clap::ArgMatches) -> Vec<String> {
    let mut path = Vec::new();
    let mut cur = m;
    while let Some((name, sub)) = cur.subcommand() {
        path.push(name.to_string());
        cur = sub;
    }
    path
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let cmd = Cli::command();
    let args = match config::merge(&cmd, raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let matches = match cmd.try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let path = leaf_name(&matches);
    let mut out = match Output::new(&cli.out, cli.format, cli.quiet) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let result = run(&cli, &mut out);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(f) => f.to_string(),
    };
    if let Err(e) = out.manifest(&path, &cli, &status) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
