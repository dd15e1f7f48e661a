//! The four verbs. Each returns a finished table; invariants are checked
//! here, before anything touches the disk.

use std::collections::HashMap;

use distest::estimator::mse_at_powers;
use distest::fim::{assemble_fim, bayesian_fim, mi_lower_bound, FisherReport};
use distest::mcsim::simulate;
use distest::model::NetworkModel;
use distest::powalloc::{allocate, allocate_mse_min_from, GainCurve, MseObjective, PowerAllocation, Scheme};
use distest::quantizer::{design_all, QuantizerKind, QuantizerSpec};
use distest::wwb::{default_mu_rule, default_test_points, wwb_bound, MuEvaluator};

use crate::config::{from_db, ExperimentConfig};
use crate::output::{num, opt, Table};
use crate::AppError;

/// Absolute slack on the bound and information orderings.
const ORDER_TOL: f64 = 1e-6;

/// A finished table, and whether any row records a solver failure.
pub struct Outcome {
    pub table: Table,
    pub failed: bool,
}

struct Point {
    db: f64,
    net: NetworkModel,
    kind: QuantizerKind,
    qs: Vec<QuantizerSpec>,
}

fn points(cfg: &ExperimentConfig) -> Result<Vec<Point>, AppError> {
    let designs: Vec<(QuantizerKind, Vec<QuantizerSpec>)> = cfg
        .quantizers
        .iter()
        .map(|&k| Ok((k, design_all(k, &cfg.network)?)))
        .collect::<Result<_, AppError>>()?;
    let mut out = Vec::new();
    for &db in &cfg.p_tot_db {
        let net = cfg
            .network
            .with_p_tot(from_db(db))
            .map_err(|e| AppError::Config(format!("p_tot_db {db}: {e}")))?;
        for (kind, qs) in &designs {
            out.push(Point {
                db,
                net: net.clone(),
                kind: *kind,
                qs: qs.clone(),
            });
        }
    }
    Ok(out)
}

fn fisher(cfg: &ExperimentConfig, pt: &Point) -> Result<FisherReport, AppError> {
    let powers = pt.net.uniform_powers();
    let mut report = bayesian_fim(&pt.net, &pt.qs, &powers, cfg.solver.line_rule)?;
    if cfg.solver.fading_nodes.is_some() {
        let g: Vec<f64> = (0..pt.net.k())
            .map(|k| GainCurve::new(&pt.net, k, &pt.qs[k], &cfg.solver)?.value(powers[k]))
            .collect::<distest::Result<_>>()?;
        report.j = assemble_fim(&pt.net, &g)?;
        report.expected_g = g;
    }
    Ok(report)
}

fn ordered(lo: f64, hi: f64) -> bool {
    lo <= hi + ORDER_TOL
}

pub fn fim(cfg: &ExperimentConfig) -> Result<Outcome, AppError> {
    let mut t = Table::new(&[
        "p_tot_db",
        "quantizer",
        "tr_J",
        "logdet_J",
        "tr_J0",
        "tr_J_ideal",
        "mi_lower_bound",
    ]);
    for pt in points(cfg)? {
        let r = fisher(cfg, &pt)?;
        let (tj, ti, t0) = (r.trace(), r.j_ideal.trace(), r.j0.trace());
        if !(ordered(tj, ti) && ordered(ti, t0)) {
            return Err(AppError::Invariant(format!(
                "p_tot_db {}: tr J {tj} <= tr J_ideal {ti} <= tr J0 {t0} violated",
                pt.db
            )));
        }
        t.push(vec![
            num(pt.db),
            pt.kind.name().into(),
            num(tj),
            num(r.log2_det()),
            num(t0),
            num(ti),
            num(mi_lower_bound(&r, &pt.net.prior)),
        ]);
    }
    Ok(Outcome { table: t, failed: false })
}

pub fn bounds(cfg: &ExperimentConfig) -> Result<Outcome, AppError> {
    let mut t = Table::new(&["p_tot_db", "quantizer", "tr_crb", "tr_wwb", "tr_mse"]);
    for pt in points(cfg)? {
        let powers = pt.net.uniform_powers();
        let crb = bayesian_fim(&pt.net, &pt.qs, &powers, cfg.solver.line_rule)?.crb().trace();
        let mu = MuEvaluator::new(&pt.net, &pt.qs, &powers, default_mu_rule(pt.net.q())?)?;
        let sets = default_test_points(&pt.net.prior.cov, &cfg.bounds.scales)?;
        let wwb = wwb_bound(&mu, &sets)?.trace();
        let mse = mse_at_powers(&pt.net, &pt.qs, &powers)?.trace();
        if !(ordered(crb, wwb) && ordered(wwb, mse)) {
            return Err(AppError::Invariant(format!(
                "p_tot_db {}: tr CRB {crb} <= tr WWB {wwb} <= tr MSE {mse} violated",
                pt.db
            )));
        }
        t.push(vec![num(pt.db), pt.kind.name().into(), num(crb), num(wwb), num(mse)]);
    }
    Ok(Outcome { table: t, failed: false })
}

pub fn allocate_cmd(cfg: &ExperimentConfig) -> Result<Outcome, AppError> {
    let mut t = Table::new(&[
        "p_tot_db",
        "quantizer",
        "scheme",
        "sensor",
        "p_k_db",
        "objective",
        "tr_D",
        "lambda",
        "converged",
        "heuristic",
        "error",
    ]);
    let mut failed = false;
    for pt in points(cfg)? {
        let p_tot = pt.net.p_tot;
        let mut done: HashMap<Scheme, Result<PowerAllocation, String>> = HashMap::new();
        let solve = |s: Scheme, done: &mut HashMap<Scheme, Result<PowerAllocation, String>>| {
            if done.contains_key(&s) {
                return;
            }
            let r = if s == Scheme::MseMin {
                // warm starts from both FIM-max solutions, whether or not
                // they are reported, so the result does not depend on the
                // order of the scheme list
                let warm: Vec<Vec<f64>> = [Scheme::TrFim, Scheme::LogdetFim]
                    .iter()
                    .filter_map(|&w| {
                        let r = done
                            .entry(w)
                            .or_insert_with(|| allocate(w, &pt.net, &pt.qs, p_tot, &cfg.solver).map_err(|e| e.to_string()));
                        r.as_ref().ok().map(|a| a.p.clone())
                    })
                    .collect();
                allocate_mse_min_from(&pt.net, &pt.qs, p_tot, &cfg.solver, &warm)
            } else {
                allocate(s, &pt.net, &pt.qs, p_tot, &cfg.solver)
            };
            done.insert(s, r.map_err(|e| e.to_string()));
        };
        for &s in &cfg.allocate.schemes {
            solve(s, &mut done);
        }
        let objective = MseObjective::new(&pt.net, &pt.qs, cfg.solver.fading_nodes)?;
        for &s in &cfg.allocate.schemes {
            let head = [num(pt.db), pt.kind.name().to_string(), s.name().to_string()];
            let result = done[&s].clone().and_then(|a| {
                check_allocation(&a, p_tot)?;
                let tr_d = objective.trace(&a.p).map_err(|e| e.to_string())?;
                Ok((a, tr_d))
            });
            match result {
                Ok((a, tr_d)) => {
                    for (k, &p) in a.p.iter().enumerate() {
                        let mut row = head.to_vec();
                        row.extend([
                            (k + 1).to_string(),
                            if p > 0.0 { num(10.0 * p.log10()) } else { String::new() },
                            num(a.objective),
                            num(tr_d),
                            num(a.lambda),
                            a.diagnostics.converged.to_string(),
                            a.diagnostics.heuristic.to_string(),
                            String::new(),
                        ]);
                        t.push(row);
                    }
                }
                Err(msg) if msg.starts_with(INVARIANT) => {
                    return Err(AppError::Invariant(format!("p_tot_db {} {}: {msg}", pt.db, s.name())))
                }
                Err(msg) => {
                    failed = true;
                    let mut row = head.to_vec();
                    row.extend(std::iter::repeat_n(String::new(), 7));
                    row.push(msg);
                    t.push(row);
                }
            }
        }
    }
    Ok(Outcome { table: t, failed })
}

const INVARIANT: &str = "invariant:";

fn check_allocation(a: &PowerAllocation, p_tot: f64) -> Result<(), String> {
    let sum: f64 = a.p.iter().sum();
    if a.p.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - p_tot).abs() > 1e-8 * p_tot {
        return Err(format!("{INVARIANT} powers {:?} do not split the budget {p_tot}", a.p));
    }
    Ok(())
}

pub fn simulate_cmd(cfg: &ExperimentConfig) -> Result<Outcome, AppError> {
    let mut t = Table::new(&[
        "p_tot_db",
        "quantizer",
        "seed",
        "N",
        "tr_MSE",
        "std_error",
        "tr_D",
        "z_score",
    ]);
    let n = cfg.simulate.trials;
    for pt in points(cfg)? {
        let powers = pt.net.uniform_powers();
        let tr_d = mse_at_powers(&pt.net, &pt.qs, &powers)?.trace();
        for &seed in cfg.simulation_seeds() {
            let rep = simulate(&pt.net, &pt.qs, &powers, cfg.simulate.fidelity, n, seed)?;
            t.push(vec![
                num(pt.db),
                pt.kind.name().into(),
                seed.to_string(),
                n.to_string(),
                num(rep.tr_mse),
                opt((n > 1).then_some(rep.tr_mse_se)),
                num(tr_d),
                opt((n > 1).then(|| rep.z_score(tr_d))),
            ]);
        }
    }
    Ok(Outcome { table: t, failed: false })
}
