use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use spectral_adapter::adapters::{
    budget_table, merge, scaling_formula, AdapterBase, AdapterExtras, AdapterKind, AdapterState,
};
use spectral_adapter::bench::{bench_csv, bench_svd};
use spectral_adapter::fusion::{
    fedavg_merge, gradient_fusion, gradient_fusion_objective, identity_preservation_report, spectral_fuse,
};
use spectral_adapter::io::{
    load_plan, read_adapter, read_base, read_matrix, write_adapter, write_csv, write_decomposition, write_matrix, Manifest,
};
use spectral_adapter::linalg::{svd_thin_with_stats, Matrix, SpectralDecomposition};
use spectral_adapter::rank::rank_capacity_empirical;
use spectral_adapter::rng::{gaussian_matrix, seeded, trial_rng};
use spectral_adapter::train::{
    experiment_loss_compare, experiment_rank_recovery, experiment_subspace_alignment, grad_check, train, LinearTask,
    Model, Task, ToyNetConfig, TrainConfig,
};

use crate::args::{Command, ExperimentName, FuseMethod};
use crate::config::{self, ProblemConfig};
use crate::error::{CliError, CliResult};

pub const GRADCHECK_TOL: f64 = 1e-5;
pub const RECONSTRUCTION_TOL: f64 = 1e-9;

/// A command with every default, config file and seed resolved. This is what
/// manifests record and what replay executes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Resolved {
    Decompose {
        input: PathBuf,
        name: String,
    },
    Train {
        base: PathBuf,
        inputs: PathBuf,
        targets: PathBuf,
        config: TrainConfig,
    },
    Merge {
        base: PathBuf,
        adapter: PathBuf,
    },
    Fuse {
        plan: PathBuf,
        method: FuseMethod,
        activations: Vec<PathBuf>,
        probes: Vec<PathBuf>,
        ridge: Option<f64>,
    },
    Budget {
        kinds: Vec<AdapterKind>,
        n: usize,
        m: usize,
        max_rank: usize,
        extras: AdapterExtras,
    },
    Rankcap {
        kind: AdapterKind,
        rank: usize,
        base: Option<PathBuf>,
        n: usize,
        m: usize,
        trials: usize,
        seed: u64,
    },
    Gradcheck {
        kinds: Vec<AdapterKind>,
        n: usize,
        m: usize,
        rank: usize,
        instances: usize,
        seed: u64,
    },
    Subspace {
        toynet: ToyNetConfig,
        train: TrainConfig,
    },
    RankRecovery {
        problem: ProblemConfig,
        train: TrainConfig,
    },
    LossCompare {
        problem: ProblemConfig,
        train: TrainConfig,
    },
    BenchSvd {
        sizes: Vec<usize>,
        repeats: usize,
        randomized_rank: Option<usize>,
        seed: u64,
    },
}

impl Resolved {
    pub fn name(&self) -> &'static str {
        match self {
            Resolved::Decompose { .. } => "decompose",
            Resolved::Train { .. } => "train",
            Resolved::Merge { .. } => "merge",
            Resolved::Fuse { .. } => "fuse",
            Resolved::Budget { .. } => "budget",
            Resolved::Rankcap { .. } => "rankcap",
            Resolved::Gradcheck { .. } => "gradcheck",
            Resolved::Subspace { .. } => "experiment subspace",
            Resolved::RankRecovery { .. } => "experiment rank-recovery",
            Resolved::LossCompare { .. } => "experiment loss-compare",
            Resolved::BenchSvd { .. } => "bench-svd",
        }
    }
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

/// Canonicalizes a container path given as stem, `.json` or `.bin`.
fn absolute_container(p: &Path) -> CliResult<PathBuf> {
    let json = p.with_extension("json");
    let abs = absolute(if json.exists() { &json } else { p })?;
    Ok(abs.with_extension(""))
}

fn kinds(names: &[String]) -> CliResult<Vec<AdapterKind>> {
    if names.is_empty() {
        return Ok(AdapterKind::ALL.to_vec());
    }
    names
        .iter()
        .map(|s| s.parse().map_err(|e: spectral_adapter::Error| CliError::Data(e.to_string())))
        .collect()
}

pub fn resolve(cmd: &Command, seed: Option<u64>) -> CliResult<Resolved> {
    let global = seed.unwrap_or(0);
    Ok(match cmd {
        Command::Decompose { input, name } => Resolved::Decompose {
            input: absolute_container(input)?,
            name: name.clone(),
        },
        Command::Train {
            base,
            inputs,
            targets,
            config,
        } => {
            let mut cfg = config::train(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
                if let Some(spec) = cfg.adapter.as_mut() {
                    spec.seed = s;
                }
            }
            Resolved::Train {
                base: absolute_container(base)?,
                inputs: absolute_container(inputs)?,
                targets: absolute_container(targets)?,
                config: cfg,
            }
        }
        Command::Merge { base, adapter } => Resolved::Merge {
            base: absolute_container(base)?,
            adapter: absolute_container(adapter)?,
        },
        Command::Fuse {
            plan,
            method,
            activations,
            probes,
            ridge,
        } => Resolved::Fuse {
            plan: absolute(plan)?,
            method: *method,
            activations: activations.iter().map(|p| absolute_container(p)).collect::<CliResult<_>>()?,
            probes: probes.iter().map(|p| absolute_container(p)).collect::<CliResult<_>>()?,
            ridge: *ridge,
        },
        Command::Budget {
            kinds: names,
            n,
            m,
            max_rank,
            oft_unshared,
            lidb_a,
            lidb_b,
        } => Resolved::Budget {
            kinds: kinds(names)?,
            n: *n,
            m: m.unwrap_or(*n),
            max_rank: *max_rank,
            extras: AdapterExtras {
                oft_shared: !oft_unshared,
                lidb_a: *lidb_a,
                lidb_b: *lidb_b,
                ..AdapterExtras::default()
            },
        },
        Command::Rankcap {
            kind,
            rank,
            base,
            n,
            m,
            trials,
        } => Resolved::Rankcap {
            kind: kind.parse()?,
            rank: *rank,
            base: base.as_deref().map(absolute_container).transpose()?,
            n: *n,
            m: *m,
            trials: *trials,
            seed: global,
        },
        Command::Gradcheck {
            kinds: names,
            n,
            m,
            rank,
            instances,
        } => Resolved::Gradcheck {
            kinds: kinds(names)?,
            n: *n,
            m: *m,
            rank: *rank,
            instances: *instances,
            seed: global,
        },
        Command::Experiment { name, config: path } => match name {
            ExperimentName::Subspace => {
                let (mut toynet, mut train) = config::subspace(path.as_deref())?;
                if let Some(s) = seed {
                    toynet.seed = s;
                    train.seed = s;
                }
                Resolved::Subspace { toynet, train }
            }
            ExperimentName::RankRecovery | ExperimentName::LossCompare => {
                let (mut problem, mut train) = config::problem(path.as_deref())?;
                if let Some(s) = seed {
                    problem.seed = s;
                    train.seed = s;
                }
                if *name == ExperimentName::RankRecovery {
                    Resolved::RankRecovery { problem, train }
                } else {
                    Resolved::LossCompare { problem, train }
                }
            }
        },
        Command::BenchSvd {
            sizes,
            repeats,
            randomized_rank,
        } => Resolved::BenchSvd {
            sizes: sizes.clone(),
            repeats: *repeats,
            randomized_rank: *randomized_rank,
            seed: global,
        },
        Command::Replay { .. } => unreachable!("replay is handled before resolution"),
    })
}

/// Files written by one run, relative to the output directory.
pub struct Run {
    pub out_dir: PathBuf,
    pub tol: Option<f64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub timings_ms: BTreeMap<String, f64>,
    pub summary: String,
}

impl Run {
    pub fn new(out_dir: PathBuf, tol: Option<f64>) -> Self {
        Self {
            out_dir,
            tol,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
            summary: String::new(),
        }
    }

    fn input_matrix(&mut self, p: &Path) -> CliResult<Matrix> {
        self.inputs.push(p.with_extension("json"));
        self.inputs.push(p.with_extension("bin"));
        Ok(read_matrix(p)?)
    }

    /// A matrix container or a decomposition directory.
    fn input_base(&mut self, p: &Path) -> CliResult<AdapterBase> {
        if p.is_dir() {
            for part in ["u", "s", "v"] {
                self.inputs.push(p.join(part).with_extension("json"));
                self.inputs.push(p.join(part).with_extension("bin"));
            }
            Ok(read_base(p)?)
        } else {
            Ok(AdapterBase::new(self.input_matrix(p)?)?)
        }
    }

    fn matrix(&mut self, rel: &str, m: &Matrix) -> CliResult<()> {
        write_matrix(&self.out_dir.join(rel), m)?;
        self.outputs.push(PathBuf::from(format!("{rel}.json")));
        self.outputs.push(PathBuf::from(format!("{rel}.bin")));
        Ok(())
    }

    fn adapter(&mut self, rel: &str, state: &AdapterState, base: &AdapterBase, seed: u64) -> CliResult<()> {
        write_adapter(&self.out_dir.join(rel), state, base, seed)?;
        self.outputs.push(PathBuf::from(format!("{rel}.json")));
        self.outputs.push(PathBuf::from(format!("{rel}.bin")));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
        text.push('\n');
        write_csv(&self.out_dir.join(rel), &text)?;
        self.outputs.push(PathBuf::from(rel));
        Ok(())
    }

    fn csv(&mut self, rel: &str, text: &str) -> CliResult<()> {
        write_csv(&self.out_dir.join(rel), text)?;
        self.outputs.push(PathBuf::from(rel));
        Ok(())
    }

    fn decomposition(&mut self, rel: &str, d: &SpectralDecomposition) -> CliResult<()> {
        for p in write_decomposition(&self.out_dir.join(rel), d)? {
            let rel_path = p.strip_prefix(&self.out_dir).expect("written under out_dir").to_path_buf();
            self.outputs.push(rel_path);
        }
        Ok(())
    }

    fn say(&mut self, line: impl AsRef<str>) {
        self.summary.push_str(line.as_ref());
        self.summary.push('\n');
    }

    /// Manifest for this run, with output digests.
    pub fn manifest(&self, resolved: &Resolved, seed: u64) -> CliResult<Manifest> {
        let config = serde_json::to_value(resolved).map_err(|e| CliError::Data(e.to_string()))?;
        let mut m = Manifest::new("spadapt", env!("CARGO_PKG_VERSION"), resolved.name(), config, seed, self.tol);
        for p in &self.inputs {
            m.add_input(p)?;
        }
        for p in &self.outputs {
            m.add_output(&self.out_dir, p)?;
        }
        m.timings_ms = self.timings_ms.clone();
        Ok(m)
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn execute(resolved: &Resolved, run: &mut Run) -> CliResult<()> {
    match resolved {
        Resolved::Decompose { input, name } => decompose(run, input, name),
        Resolved::Train {
            base,
            inputs,
            targets,
            config,
        } => train_cmd(run, base, inputs, targets, config),
        Resolved::Merge { base, adapter } => {
            let base = run.input_base(base)?;
            run.inputs.push(adapter.with_extension("json"));
            run.inputs.push(adapter.with_extension("bin"));
            let (header, state) = read_adapter(adapter)?;
            header.check_base(&base)?;
            let merged = merge(&base, &state)?;
            let delta = merged.sub(base.weight())?.frobenius_norm();
            run.matrix("merged", &merged)?;
            run.json(
                "report.json",
                &json!({
                    "kind": header.kind,
                    "rank": header.rank,
                    "base_fingerprint": header.base_fingerprint,
                    "delta_norm": delta,
                }),
            )?;
            run.say(format!("merged {} adapter, ||delta||_F = {delta:e}", header.kind));
            Ok(())
        }
        Resolved::Fuse {
            plan,
            method,
            activations,
            probes,
            ridge,
        } => fuse(run, plan, *method, activations, probes, *ridge),
        Resolved::Budget {
            kinds,
            n,
            m,
            max_rank,
            extras,
        } => budget(run, kinds, *n, *m, *max_rank, extras),
        Resolved::Rankcap {
            kind,
            rank,
            base,
            n,
            m,
            trials,
            seed,
        } => {
            let w = match base {
                Some(p) => run.input_matrix(p)?,
                None => {
                    let w = gaussian_matrix(&mut seeded(*seed), *n, *m, 1.0);
                    run.matrix("base", &w)?;
                    w
                }
            };
            let report = rank_capacity_empirical(*kind, &w, *rank, *trials, *seed, run.tol)?;
            let adapter_base = AdapterBase::new(w)?;
            run.adapter("certificate", &report.certificate, &adapter_base, *seed)?;
            run.json("rankcap.json", &report)?;
            run.say(format!(
                "{} r={}: min rank {}, max rank {}, capacity {}",
                report.kind, report.rank, report.min_rank_achieved, report.max_rank_achieved, report.capacity
            ));
            Ok(())
        }
        Resolved::Gradcheck {
            kinds,
            n,
            m,
            rank,
            instances,
            seed,
        } => gradcheck(run, kinds, *n, *m, *rank, *instances, *seed),
        Resolved::Subspace { toynet, train } => {
            let t = Instant::now();
            let report = experiment_subspace_alignment(toynet, train)?;
            run.timings_ms.insert("experiment".into(), ms_since(t));
            let mut csv = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                let _ = writeln!(csv, "{i},{l}");
            }
            run.csv("losses.csv", &csv)?;
            run.json("report.json", &report)?;
            run.say(format!(
                "beta={}: out_of_plane_max={:e}, plane_angle={:e}, final_loss={:e}",
                report.weight_decay, report.out_of_plane_max, report.plane_angle, report.final_loss
            ));
            Ok(())
        }
        Resolved::RankRecovery { problem, train } => {
            let t = Instant::now();
            let report = experiment_rank_recovery(problem.n, problem.m, problem.r, problem.seed, train)?;
            run.timings_ms.insert("experiment".into(), ms_since(t));
            let mut csv = format!("step,{},{}\n", report.lora.label, report.spectral.label);
            let steps = report.lora.losses.len().max(report.spectral.losses.len());
            let cell = |v: &[f64], i: usize| v.get(i).map(|x| x.to_string()).unwrap_or_default();
            for i in 0..steps {
                let _ = writeln!(csv, "{i},{},{}", cell(&report.lora.losses, i), cell(&report.spectral.losses, i));
            }
            run.csv("losses.csv", &csv)?;
            run.json("report.json", &report)?;
            run.say(format!(
                "LoRA distance {:e} (floor {:e}), SpectralA distance {:e}",
                report.lora.terminal_distance, report.lora_floor, report.spectral.terminal_distance
            ));
            Ok(())
        }
        Resolved::LossCompare { problem, train } => {
            let t = Instant::now();
            let report = experiment_loss_compare(problem.n, problem.m, problem.r, problem.seed, train)?;
            run.timings_ms.insert("experiment".into(), ms_since(t));
            run.csv("losses.csv", &report.to_csv())?;
            run.json("report.json", &report)?;
            run.say(format!("budget {} (LoRA r={}), floor {:e}", report.budget, report.lora_rank, report.lora_floor));
            for r in &report.runs {
                run.say(format!(
                    "  {:<14} params {:>4}  distance {:e}",
                    r.label, r.trainable, r.terminal_distance
                ));
            }
            Ok(())
        }
        Resolved::BenchSvd {
            sizes,
            repeats,
            randomized_rank,
            seed,
        } => {
            let rows = bench_svd(sizes, *repeats, *seed, *randomized_rank)?;
            let csv = bench_csv(&rows);
            run.csv("bench.csv", &csv)?;
            run.json("bench.json", &rows)?;
            run.summary.push_str(&csv);
            Ok(())
        }
    }
}

fn decompose(run: &mut Run, input: &Path, name: &str) -> CliResult<()> {
    let w = run.input_matrix(input)?;
    let t = Instant::now();
    let (d, stats) = svd_thin_with_stats(&w)?;
    run.timings_ms.insert("decomposition".into(), ms_since(t));
    let err = w.sub(&d.reconstruct())?.frobenius_norm();
    let norm = w.frobenius_norm();
    let limit = run.tol.unwrap_or(RECONSTRUCTION_TOL) * (1.0 + norm);
    if !(err <= limit) {
        return Err(CliError::Numerical(format!(
            "reconstruction error {err:e} exceeds {limit:e} for a {}x{} input (||W||_F = {norm:e}, {} sweeps)",
            w.rows(),
            w.cols(),
            stats.sweeps
        )));
    }
    run.decomposition(name, &d)?;
    let base = AdapterBase::from_decomposition(d.clone());
    run.json(
        "report.json",
        &json!({
            "rows": w.rows(),
            "cols": w.cols(),
            "k": d.k(),
            "reconstruction_error": err,
            "tolerance": limit,
            "fingerprint": base.fingerprint(),
            "peak_bytes": stats.peak_bytes,
            "singular_values": d.s(),
        }),
    )?;
    run.say(format!("{}x{} -> k={}, reconstruction error {err:e}", w.rows(), w.cols(), d.k()));
    Ok(())
}

fn train_cmd(run: &mut Run, base: &Path, inputs: &Path, targets: &Path, cfg: &TrainConfig) -> CliResult<()> {
    let adapter_base = run.input_base(base)?;
    let w = adapter_base.weight().clone();
    let x = run.input_matrix(inputs)?;
    let y = run.input_matrix(targets)?;
    let (n, m) = w.shape();
    if x.cols() != m || y.cols() != n || x.rows() != y.rows() {
        return Err(CliError::Data(format!(
            "inputs {}x{} and targets {}x{} do not fit a {n}x{m} base (expected N x {m} and N x {n})",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols()
        )));
    }
    let mut model = Model::with_spec(Task::Linear(LinearTask { x, y }), w.clone(), cfg.adapter.as_ref())?;
    let t = Instant::now();
    let trace = train(&mut model, cfg)?;
    run.timings_ms.insert("train".into(), ms_since(t));
    run.csv("trace.csv", &trace.to_csv())?;
    trace.check().map_err(|e| CliError::Numerical(e.to_string()))?;
    run.matrix("weight", &model.weight()?)?;
    if let (Some(state), Some(spec)) = (model.adapter(), cfg.adapter.as_ref()) {
        run.adapter("adapter", state, &adapter_base, spec.seed)?;
    }
    run.json(
        "report.json",
        &json!({
            "initial_loss": trace.rows.first().map(|r| r.loss),
            "final_loss": trace.final_loss(),
            "steps": cfg.steps,
            "trainable": model.num_trainable(),
        }),
    )?;
    run.say(format!(
        "{} steps, loss {:e} -> {:e}",
        cfg.steps,
        trace.rows.first().map_or(f64::NAN, |r| r.loss),
        trace.final_loss()
    ));
    Ok(())
}

fn fuse(
    run: &mut Run,
    plan_path: &Path,
    method: FuseMethod,
    activations: &[PathBuf],
    probes: &[PathBuf],
    ridge: Option<f64>,
) -> CliResult<()> {
    run.inputs.push(plan_path.to_path_buf());
    let plan = load_plan(plan_path)?;
    let count = plan.entries.len();
    for (what, list) in [("activation", activations), ("probe", probes)] {
        if !list.is_empty() && list.len() != count {
            return Err(CliError::Data(format!("{} {what} batches for {count} plan entries", list.len())));
        }
    }
    let acts = activations.iter().map(|p| run.input_matrix(p)).collect::<CliResult<Vec<_>>>()?;
    let probe_mats = probes.iter().map(|p| run.input_matrix(p)).collect::<CliResult<Vec<_>>>()?;
    let (deltas, lambdas) = plan.deltas()?;
    let base_w = plan.base.weight();
    let fedavg = fedavg_merge(base_w, &deltas, &lambdas)?;
    let mut report = json!({
        "method": method,
        "entries": count,
        "lambdas": lambdas,
        "overlaps": plan.overlaps(),
        "warnings": plan.warnings(),
    });
    let fused = match method {
        FuseMethod::Spectral => spectral_fuse(&plan)?,
        FuseMethod::Fedavg => fedavg.clone(),
        FuseMethod::Gradient => {
            if acts.is_empty() {
                return Err(CliError::Data("gradient fusion needs --activations, one batch per entry".into()));
            }
            let g = gradient_fusion(base_w, &deltas, &acts, ridge)?;
            report["ridge"] = json!(g.ridge);
            report["optimality_residual"] = json!(g.optimality_residual);
            g.theta
        }
    };
    if !acts.is_empty() {
        report["objective"] = json!(gradient_fusion_objective(&fused, base_w, &deltas, &acts)?);
        report["fedavg_objective"] = json!(gradient_fusion_objective(&fedavg, base_w, &deltas, &acts)?);
    }
    let probe_set = if probe_mats.is_empty() { &acts } else { &probe_mats };
    if !probe_set.is_empty() {
        let states: Vec<AdapterState> = plan.entries.iter().map(|e| e.state.clone()).collect();
        report["deviations"] = json!(identity_preservation_report(&plan.base, &states, &fused, probe_set)?);
    }
    for w in plan.warnings() {
        eprintln!("warning: {w}");
    }
    run.matrix("fused", &fused)?;
    run.json("report.json", &report)?;
    run.say(format!("fused {count} entries with {method:?}"));
    Ok(())
}

fn budget(run: &mut Run, kinds: &[AdapterKind], n: usize, m: usize, max_rank: usize, extras: &AdapterExtras) -> CliResult<()> {
    let mut csv = String::from("kind,rank,params,scaling\n");
    let mut summary = Vec::new();
    for &kind in kinds {
        let table = budget_table(kind, n, m, max_rank, extras);
        for &(r, c) in &table {
            let _ = writeln!(csv, "{kind},{r},{c},{}", scaling_formula(kind));
        }
        let budgets = spectral_adapter::adapters::available_budgets(kind, n, m, max_rank, extras);
        run.say(format!(
            "{:<11} {:<12} budgets {:?}",
            kind.as_str(),
            scaling_formula(kind),
            budgets
        ));
        summary.push(json!({
            "kind": kind,
            "scaling": scaling_formula(kind),
            "budgets": budgets,
            "table": table,
        }));
    }
    run.csv("budget.csv", &csv)?;
    run.json("budget.json", &json!({"n": n, "m": m, "max_rank": max_rank, "extras": extras, "kinds": summary}))?;
    Ok(())
}

fn gradcheck(run: &mut Run, kinds: &[AdapterKind], n: usize, m: usize, rank: usize, instances: usize, seed: u64) -> CliResult<()> {
    let tol = run.tol.unwrap_or(GRADCHECK_TOL);
    let mut results = Vec::new();
    let mut failed = Vec::new();
    for &kind in kinds {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let base = gaussian_matrix(&mut trial_rng(seed, i as u64), n, m, 1.0);
            worst = worst.max(grad_check(kind, &base, rank, seed.wrapping_add(i as u64))?);
        }
        let pass = worst <= tol;
        if !pass {
            failed.push(kind.to_string());
        }
        run.say(format!("{:<11} max relative error {worst:e} {}", kind.as_str(), if pass { "ok" } else { "FAIL" }));
        results.push(json!({"kind": kind, "max_relative_error": worst, "pass": pass}));
    }
    run.json(
        "gradcheck.json",
        &json!({"n": n, "m": m, "rank": rank, "instances": instances, "tolerance": tol, "results": results}),
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check above {tol:e} for {}", failed.join(", "))))
    }
}
