use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use parkdyn::calibration::{
    self, calibrate_from_logs, extract_occupancy_distance, macro_demand_for, macro_initial_state, macro_params_for,
    CalibrationOptions, CalibrationReport, OccupancyReference, Quantity, Trajectory, TrendFilter,
};
use parkdyn::estimators::{self, bin_means, ModelKind};
use parkdyn::macro_model::{MacroModel, PriceProfile};
use parkdyn::micro::{
    nfd_from_run, performance_metrics, run_on, GuidanceConfig, NetworkSpec, RunOutput, ScenarioConfig,
};
use parkdyn::mpc::{run_mode, ControlMode, ModeOutcome, MpcConfig};
use parkdyn::network::{load_network, save_network, Network};
use parkdyn::theory::{continuity_gaps, density_grid, sweep, BinParams};
use rayon::prelude::*;
use serde::Serialize;

use crate::output::{self, load_events, read_csv, run_dirs, seed_dir, write_csv, write_json, NfdRow};
use crate::{FitArgs, Global, ModeArg, ModelArg, MpcArgs, TheoryArgs};

fn network(cfg: &ScenarioConfig) -> Result<Arc<Network>> {
    Ok(Arc::new(cfg.network.build().context("building the scenario network")?))
}

/// Runs `cfg` once per seed, in parallel, keeping seed order.
fn replicate(net: &Arc<Network>, cfg: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<RunOutput>> {
    seeds
        .par_iter()
        .map(|&seed| {
            run_on(net.clone(), &ScenarioConfig { seed, ..cfg.clone() })
                .with_context(|| format!("replication with seed {seed}"))
        })
        .collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Serialize)]
struct NetworkSummary {
    nodes: usize,
    links: usize,
    length_km: f64,
    on_street_spots: u32,
    lots: Vec<u32>,
    regions: u32,
    strongly_connected: bool,
}

fn summarize(net: &Network) -> NetworkSummary {
    NetworkSummary {
        nodes: net.nodes().len(),
        links: net.links().len(),
        length_km: net.total_length(),
        on_street_spots: net.total_parking_capacity(),
        lots: net.lots().iter().map(|l| l.capacity).collect(),
        regions: net.region_count(),
        strongly_connected: net.is_strongly_connected(),
    }
}

pub fn net_build(g: &Global) -> Result<()> {
    let cfg = output::scenario(g)?;
    let net = network(&cfg)?;
    let path = g.out.join("network.json");
    save_network(&net, &path)?;
    println!("{}", serde_json::to_string(&summarize(&net))?);
    println!("wrote {}", path.display());
    Ok(())
}

pub fn net_check(g: &Global, file: Option<&Path>) -> Result<()> {
    let net = match file {
        Some(p) => load_network(p).with_context(|| format!("loading network {}", p.display()))?,
        None => {
            let cfg = output::scenario(g)?;
            match &cfg.network {
                NetworkSpec::File { path } => load_network(path)?,
                spec => spec.build()?,
            }
        }
    };
    let s = summarize(&net);
    println!("{}", serde_json::to_string(&s)?);
    if !s.strongly_connected {
        bail!("network is not strongly connected");
    }
    if net.gateways().len() < 2 {
        bail!("network needs at least two gateway nodes");
    }
    Ok(())
}

pub fn micro_run(g: &Global, window: f64) -> Result<()> {
    let cfg = output::scenario(g)?;
    let net = network(&cfg)?;
    g.seeds.0.par_iter().try_for_each(|&seed| -> Result<()> {
        let run = run_on(net.clone(), &ScenarioConfig { seed, ..cfg.clone() })
            .with_context(|| format!("replication with seed {seed}"))?;
        let dir = seed_dir(&g.out, seed)?;
        run.log.save_csv(dir.join("events.csv"))?;
        let nfd = nfd_from_run(&run, window)?;
        write_csv(
            &dir.join("nfd.csv"),
            nfd.iter().map(|p| NfdRow::new(p, run.network_length)),
        )?;
        write_json(&dir.join("metrics.json"), &performance_metrics(&run))?;
        Ok(())
    })?;
    println!("{} replications written under {}", g.seeds.0.len(), g.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepNfdRow {
    level: &'static str,
    v_c: f64,
    seed: u64,
    t_s: f64,
    #[serde(rename = "K")]
    k: f64,
    #[serde(rename = "Q")]
    q: f64,
    #[serde(rename = "V")]
    v: f64,
}

#[derive(Serialize)]
struct DemandCell {
    level: &'static str,
    passers: usize,
    v_c: f64,
    mean_speed_kmh: f64,
    cruising_veh_h: f64,
    completion_rate: f64,
    gridlocked_runs: usize,
}

pub fn demand_sweep(g: &Global, window: f64) -> Result<()> {
    let cfg = output::scenario(g)?;
    let net = network(&cfg)?;
    let mut nfd_rows = Vec::new();
    let mut cells = Vec::new();
    for (level, passers) in [("low", 1440), ("medium", 1920), ("high", 2640)] {
        for v_c in [10.0, 30.0, 50.0] {
            let cell = ScenarioConfig {
                passers,
                cruise_speed: v_c,
                ..cfg.clone()
            };
            let runs = replicate(&net, &cell, &g.seeds.0)?;
            let metrics: Vec<_> = runs.iter().map(performance_metrics).collect();
            for r in &runs {
                for p in nfd_from_run(r, window)? {
                    nfd_rows.push(SweepNfdRow {
                        level,
                        v_c,
                        seed: r.config.seed,
                        t_s: p.t_s,
                        k: p.k,
                        q: p.q,
                        v: p.v,
                    });
                }
            }
            cells.push(DemandCell {
                level,
                passers,
                v_c,
                mean_speed_kmh: mean(metrics.iter().map(|m| m.avg_speed_kmh)),
                cruising_veh_h: mean(metrics.iter().map(|m| m.cruising_veh_h)),
                completion_rate: mean(metrics.iter().filter_map(|m| m.completion_rate)),
                gridlocked_runs: runs.iter().filter(|r| r.gridlocked).count(),
            });
        }
    }
    write_csv(&g.out.join("demand_sweep_nfd.csv"), nfd_rows)?;
    write_csv(&g.out.join("demand_sweep.csv"), &cells)?;
    for c in &cells {
        println!(
            "{:<6} v_c {:>4}: speed {:6.2} km/h, cruising {:6.2} veh-h, completion {:.3}",
            c.level, c.v_c, c.mean_speed_kmh, c.cruising_veh_h, c.completion_rate
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct GuidanceRow {
    guidance: &'static str,
    compliance: f64,
    mean_distance_to_park_km: f64,
    completion_rate: f64,
    avg_travel_time_s: f64,
    avg_speed_kmh: f64,
    cruising_veh_h: f64,
}

pub fn guidance_sweep(g: &Global, compliance: f64) -> Result<()> {
    let cfg = output::scenario(g)?;
    let net = network(&cfg)?;
    let variants = [
        ("none", false, false),
        ("local", true, false),
        ("regional", false, true),
        ("joint", true, true),
    ];
    let mut rows = Vec::new();
    for (name, local, regional) in variants {
        let guidance = GuidanceConfig {
            local_guidance: local,
            regional_guidance: regional,
            compliance,
            ..cfg.guidance.clone()
        };
        let runs = replicate(
            &net,
            &ScenarioConfig {
                guidance,
                ..cfg.clone()
            },
            &g.seeds.0,
        )?;
        let m: Vec<_> = runs.iter().map(performance_metrics).collect();
        rows.push(GuidanceRow {
            guidance: name,
            compliance,
            mean_distance_to_park_km: mean(m.iter().filter_map(|m| m.mean_distance_to_park)),
            completion_rate: mean(m.iter().filter_map(|m| m.completion_rate)),
            avg_travel_time_s: mean(m.iter().map(|m| m.avg_travel_time_s)),
            avg_speed_kmh: mean(m.iter().map(|m| m.avg_speed_kmh)),
            cruising_veh_h: mean(m.iter().map(|m| m.cruising_veh_h)),
        });
    }
    write_csv(&g.out.join("guidance_sweep.csv"), &rows)?;
    for r in &rows {
        println!(
            "{:<8} distance-to-park {:.3} km, completion {:.3}, travel time {:.0} s",
            r.guidance, r.mean_distance_to_park_km, r.completion_rate, r.avg_travel_time_s
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EnvelopeCsvRow {
    v_c: f64,
    cruising: bool,
    #[serde(rename = "K")]
    k: f64,
    vmax_formula: f64,
    vmin_formula: f64,
    vmax_brute: f64,
    vmin_brute: f64,
}

#[derive(Serialize)]
struct TheoryCheck {
    v_c: f64,
    cruising: bool,
    max_abs_diff: f64,
    max_continuity_gap: f64,
    pass: bool,
}

pub fn theory_sweep(g: &Global, a: &TheoryArgs) -> Result<()> {
    let grid = density_grid(a.jam_density, a.step);
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for &v_c in &a.cruise_speeds {
        let p = BinParams::new(a.free_flow_speed, v_c, a.jam_density)?;
        for cruising in [false, true] {
            let sw = sweep(&p, cruising, &grid, a.grid_step)?;
            let max_abs_diff = sw.iter().map(|r| r.max_abs_diff()).fold(0.0, f64::max);
            let max_continuity_gap = continuity_gaps(&p, cruising)
                .into_iter()
                .map(|(_, gap)| gap)
                .fold(0.0, f64::max);
            checks.push(TheoryCheck {
                v_c,
                cruising,
                max_abs_diff,
                max_continuity_gap,
                pass: max_abs_diff <= a.tolerance && max_continuity_gap <= 1e-9,
            });
            rows.extend(sw.into_iter().map(|r| EnvelopeCsvRow {
                v_c,
                cruising,
                k: r.k,
                vmax_formula: r.vmax_formula,
                vmin_formula: r.vmin_formula,
                vmax_brute: r.vmax_brute,
                vmin_brute: r.vmin_brute,
            }));
        }
    }
    write_csv(&g.out.join("envelopes.csv"), rows)?;
    write_json(&g.out.join("theory_check.json"), &checks)?;
    for c in &checks {
        println!(
            "v_c {:>5} cruising {:<5}: max |formula - brute| {:.2e}, continuity gap {:.1e} {}",
            c.v_c,
            c.cruising,
            c.max_abs_diff,
            c.max_continuity_gap,
            if c.pass { "ok" } else { "FAILED" }
        );
    }
    if checks.iter().any(|c| !c.pass) {
        bail!("envelope check failed");
    }
    Ok(())
}

#[derive(Serialize)]
struct FitOutcome {
    kind: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<estimators::FitReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(serde::Deserialize)]
struct Observation {
    occupancy: f64,
    value: f64,
}

pub fn estimators_fit(g: &Global, a: &FitArgs) -> Result<()> {
    let mut obs: Vec<(f64, f64)> = match (&a.observations, &a.runs) {
        (Some(p), _) => read_csv::<Observation>(p)?
            .into_iter()
            .map(|o| (o.occupancy, o.value))
            .collect(),
        (None, Some(root)) => {
            let logs = run_dirs(root)?
                .into_iter()
                .map(|(_, d)| load_events(&d))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = logs.iter().collect();
            extract_occupancy_distance(&refs, TrendFilter::Increasing, OccupancyReference::Init)
        }
        (None, None) => bail!("give --observations or --runs"),
    };
    if obs.is_empty() {
        bail!("no observations to fit");
    }
    if a.bin > 0.0 {
        obs = bin_means(&obs, a.bin);
    }
    let kinds = match a.model {
        ModelArg::All => vec![
            ModelKind::ExpTime,
            ModelKind::HyperbolicTime,
            ModelKind::Geometric,
            ModelKind::ModifiedGeometric,
            ModelKind::ExpDistance,
        ],
        ModelArg::ExpTime => vec![ModelKind::ExpTime],
        ModelArg::HyperbolicTime => vec![ModelKind::HyperbolicTime],
        ModelArg::Geometric => vec![ModelKind::Geometric],
        ModelArg::ModifiedGeometric => vec![ModelKind::ModifiedGeometric],
        ModelArg::ExpDistance => vec![ModelKind::ExpDistance],
    };
    let outcomes: Vec<FitOutcome> = kinds
        .into_iter()
        .map(|kind| match estimators::fit(&obs, kind) {
            Ok(r) => FitOutcome {
                kind,
                report: Some(r),
                error: None,
            },
            Err(e) => FitOutcome {
                kind,
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    write_json(&g.out.join("fit.json"), &outcomes)?;
    for o in &outcomes {
        match (&o.report, &o.error) {
            (Some(r), _) => println!("{:?}: rmse {:.4}, R2 {:.3}, {:?}", o.kind, r.rmse, r.r_squared, r.model),
            (_, Some(e)) => println!("{:?}: {e}", o.kind),
            _ => {}
        }
    }
    if outcomes.iter().all(|o| o.report.is_none()) {
        bail!("no estimator could be fitted");
    }
    Ok(())
}

fn load_calibration(path: &Path) -> Result<CalibrationReport> {
    CalibrationReport::load(path).with_context(|| format!("loading calibration {}", path.display()))
}

pub fn macro_run(g: &Global, calibration: &Path, price_on: Option<f64>, price_off: Option<f64>, dt: f64) -> Result<()> {
    let cfg = output::scenario(g)?;
    let net = network(&cfg)?;
    let report = load_calibration(calibration)?;
    let params = macro_params_for(&cfg, &net, &report, dt)?;
    let demand = macro_demand_for(&cfg, &params)?;
    let prices = PriceProfile::constant(price_on.unwrap_or(cfg.fee_on), price_off.unwrap_or(cfg.fee_off));
    let traj = MacroModel::new(params)?.simulate_from(&macro_initial_state(&cfg), &demand, &prices)?;
    let path = g.out.join("macro_run.csv");
    write_csv(&path, &traj.records)?;
    let last = traj.records.last().expect("initial record");
    println!(
        "{} steps; final n_on {:.1}, n_off {:.1}, active {:.1}",
        traj.flows.len(),
        last.n_on,
        last.n_off,
        last.active()
    );
    println!("wrote {}", path.display());
    Ok(())
}

pub fn calibrate(g: &Global, a: &crate::CalibrateArgs) -> Result<()> {
    let opts = CalibrationOptions {
        nfd_window: a.window,
        ..Default::default()
    };
    let report = match &a.runs {
        Some(root) => {
            let mut samples = Vec::new();
            let mut logs = Vec::new();
            for (_, dir) in run_dirs(root)? {
                let rows: Vec<NfdRow> = read_csv(&dir.join("nfd.csv"))?;
                samples.extend(rows.iter().map(|r| (r.n, r.v)));
                logs.push(load_events(&dir)?);
            }
            let refs: Vec<_> = logs.iter().collect();
            calibrate_from_logs(&samples, &refs, &opts)?
        }
        None => {
            let cfg = output::scenario(g)?;
            let net = network(&cfg)?;
            calibration::calibrate(&replicate(&net, &cfg, &g.seeds.0)?, &opts)?
        }
    };
    let path = g.out.join("calibration.json");
    report.save(&path)?;
    let m = report.nfd.model;
    println!(
        "NFD v0 {:.2} n0 {:.1} w {:.1} (R2 {:.3}); distance-to-park {:?}",
        m.v0, m.n0, m.w, report.nfd.r_squared, report.distance_to_park.model
    );
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct ValidationRow {
    t_s: f64,
    macro_n_on: f64,
    micro_n_on: f64,
    macro_n_off: f64,
    micro_n_off: f64,
    macro_active: f64,
    micro_active: f64,
    macro_v: f64,
    micro_v: f64,
}

pub fn validate(g: &Global, calibration: &Path) -> Result<()> {
    let cfg = output::scenario(g)?;
    let net = network(&cfg)?;
    let mut report = load_calibration(calibration)?;
    let dt = 10.0;
    let params = macro_params_for(&cfg, &net, &report, dt)?;
    let demand = macro_demand_for(&cfg, &params)?;
    let traj = MacroModel::new(params)?.simulate_from(
        &macro_initial_state(&cfg),
        &demand,
        &PriceProfile::constant(cfg.fee_on, cfg.fee_off),
    )?;
    let runs = replicate(&net, &cfg, &g.seeds.0)?;
    let micro: Vec<Trajectory> = runs
        .iter()
        .map(|r| Trajectory::from_micro(r, dt))
        .collect::<parkdyn::Result<_>>()?;
    let mac = Trajectory::from_macro(&traj.records);
    let v = calibration::validate(&mac, &micro)?;
    let avg = |f: &dyn Fn(&Trajectory) -> f64| mean(micro.iter().map(f).filter(|x| x.is_finite()));
    let rows = (0..mac.t.len()).map(|i| ValidationRow {
        t_s: mac.t[i],
        macro_n_on: mac.n_on[i],
        micro_n_on: avg(&|m| m.n_on[i]),
        macro_n_off: mac.n_off[i],
        micro_n_off: avg(&|m| m.n_off[i]),
        macro_active: mac.active[i],
        micro_active: avg(&|m| m.active[i]),
        macro_v: mac.v[i],
        micro_v: avg(&|m| m.v[i]),
    });
    write_csv(&g.out.join("validation.csv"), rows)?;
    for q in Quantity::ALL {
        let m = &v.metrics[&q];
        println!(
            "{q:?}: peak error {:.1}%, rmse {:.2}, within envelope {:.0}%",
            100.0 * m.peak_relative_error,
            m.rmse,
            100.0 * m.envelope_fraction
        );
    }
    report.validation = Some(v);
    write_json(&g.out.join("validation.json"), &report)?;
    Ok(())
}

fn mpc_config(path: Option<&Path>) -> Result<MpcConfig> {
    let cfg: MpcConfig = match path {
        Some(p) => output::read_json(p)?,
        None => MpcConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn mpc_run(g: &Global, a: &MpcArgs) -> Result<()> {
    let cfg = output::scenario(g)?;
    let net = network(&cfg)?;
    let report = load_calibration(&a.calibration.calibration)?;
    let mpc = mpc_config(a.mpc_config.as_deref())?;
    let params = macro_params_for(&cfg, &net, &report, mpc.macro_dt)?;
    let outcomes: Vec<ModeOutcome> = g
        .seeds
        .0
        .par_iter()
        .map(|&seed| -> Result<ModeOutcome> {
            let sc = ScenarioConfig { seed, ..cfg.clone() };
            let o = run_mode(net.clone(), &sc, &params, &mpc, ControlMode::Mpc)
                .with_context(|| format!("MPC run with seed {seed}"))?;
            let dir = seed_dir(&g.out, seed)?;
            let run = o.mpc.as_ref().expect("MPC mode keeps its log");
            let file = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
                let p = dir.join(name);
                Ok(std::io::BufWriter::new(
                    std::fs::File::create(&p).with_context(|| format!("writing {}", p.display()))?,
                ))
            };
            run.write_log_csv(file("mpc_log.csv")?)?;
            run.write_predictions_csv(file("prediction_vs_plant.csv")?)?;
            write_json(&dir.join("metrics.json"), &o)?;
            Ok(o)
        })
        .collect::<Result<_>>()?;
    for o in &outcomes {
        let prices: Vec<String> = o.prices.iter().map(|p| format!("{:.2}", p.0)).collect();
        println!(
            "seed {}: ineffective cruising {:.2} veh-h, on-street prices [{}]",
            o.seed,
            o.ineffective_veh_h,
            prices.join(", ")
        );
    }
    Ok(())
}

fn mode(m: ModeArg) -> ControlMode {
    match m {
        ModeArg::NoPrice => ControlMode::NoPrice,
        ModeArg::Mpc => ControlMode::Mpc,
        ModeArg::FullHorizonDynamic => ControlMode::FullHorizonDynamic,
        ModeArg::FullHorizonStatic => ControlMode::FullHorizonStatic,
    }
}

#[derive(Serialize)]
struct CompareRow {
    mode: ControlMode,
    seed: u64,
    ineffective_veh_h: f64,
    cruising_veh_h: f64,
    deadweight_veh_h: f64,
    avg_travel_time_s: f64,
    completion_rate: Option<f64>,
    prices_on: String,
    prices_off: String,
}

#[derive(Serialize)]
struct CompareSummary {
    mode: ControlMode,
    seeds: usize,
    ineffective_veh_h: f64,
    cruising_veh_h: f64,
    deadweight_veh_h: f64,
    avg_travel_time_s: f64,
    completion_rate: f64,
}

pub fn compare(g: &Global, calibration: &Path, mpc_path: Option<&Path>, modes: &[ModeArg]) -> Result<()> {
    let cfg = output::scenario(g)?;
    let net = network(&cfg)?;
    let report = load_calibration(calibration)?;
    let mpc = mpc_config(mpc_path)?;
    let params = macro_params_for(&cfg, &net, &report, mpc.macro_dt)?;
    let mut modes: Vec<ControlMode> = modes.iter().map(|&m| mode(m)).collect();
    modes.dedup();
    let jobs: Vec<(ControlMode, u64)> = modes
        .iter()
        .flat_map(|&m| g.seeds.0.iter().map(move |&s| (m, s)))
        .collect();
    let outcomes: Vec<ModeOutcome> = jobs
        .par_iter()
        .map(|&(m, seed)| {
            run_mode(net.clone(), &ScenarioConfig { seed, ..cfg.clone() }, &params, &mpc, m)
                .with_context(|| format!("{m:?} with seed {seed}"))
        })
        .collect::<Result<_>>()?;
    let join = |v: Vec<f64>| v.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(" ");
    write_csv(
        &g.out.join("compare.csv"),
        outcomes.iter().map(|o| CompareRow {
            mode: o.mode,
            seed: o.seed,
            ineffective_veh_h: o.ineffective_veh_h,
            cruising_veh_h: o.cruising_veh_h,
            deadweight_veh_h: o.deadweight_veh_h,
            avg_travel_time_s: o.avg_travel_time_s,
            completion_rate: o.completion_rate,
            prices_on: join(o.prices.iter().map(|p| p.0).collect()),
            prices_off: join(o.prices.iter().map(|p| p.1).collect()),
        }),
    )?;
    let summary: Vec<CompareSummary> = modes
        .iter()
        .map(|&m| {
            let of: Vec<&ModeOutcome> = outcomes.iter().filter(|o| o.mode == m).collect();
            CompareSummary {
                mode: m,
                seeds: of.len(),
                ineffective_veh_h: mean(of.iter().map(|o| o.ineffective_veh_h)),
                cruising_veh_h: mean(of.iter().map(|o| o.cruising_veh_h)),
                deadweight_veh_h: mean(of.iter().map(|o| o.deadweight_veh_h)),
                avg_travel_time_s: mean(of.iter().map(|o| o.avg_travel_time_s)),
                completion_rate: mean(of.iter().filter_map(|o| o.completion_rate)),
            }
        })
        .collect();
    write_csv(&g.out.join("compare_summary.csv"), &summary)?;
    for s in &summary {
        println!(
            "{:<22} ineffective {:7.2} veh-h (cruising {:.2}, lot circuit {:.2}), travel time {:.0} s",
            format!("{:?}", s.mode),
            s.ineffective_veh_h,
            s.cruising_veh_h,
            s.deadweight_veh_h,
            s.avg_travel_time_s
        );
    }
    Ok(())
}
