//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every report is written twice, by a parallel and by a sequential run with
//! the same seeds, and the two trees must agree byte for byte.

use jumplab_core::chain::{levy_system_check, JumpFunctional};
use jumplab_core::conductivity::{
    axes_counterexample, build_from_kernel, double_cone, isotropic_stable, stable_constant,
    table_field, ConductivityField, ConductivityMeta, QuadratureConfig,
};
use jumplab_core::convergence::{clt_diagnostic, tightness_diagnostic, CltConfig, TightnessConfig};
use jumplab_core::exec::Execution;
use jumplab_core::forms::{
    cube_chain_check, form_comparison, norm_equivalence, random_grid_function, test_corpus, ChainConstants,
    ContinuumConfig, CubeChainConfig,
};
use jumplab_core::heatkernel::{
    generator_matrix, heat_kernel, kernel_diagnostics, resolvent_check, Boundary, DiagnosticsConfig,
};
use jumplab_core::kernel::{ConeKernel, ConstantKernel, IsotropicKernel, Kernel};
use jumplab_core::lattice::{GridPoint, ScaledLattice, Window};
use jumplab_core::report::write_json;
use jumplab_core::validators::{
    check_bounds_a1_a2, check_chains_a3, density_check_a4, find_chain_a3, ChainRouter, N0Policy, DEFAULT_NODE_CAP,
};
use serde_json::json;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

type Outcome = (bool, String, serde_json::Value);
type Criterion = fn(Execution) -> jumplab_core::Result<Outcome>;

/// Criteria whose claim is false as stated; they must still be reported.
const KNOWN_UNATTAINABLE: &[usize] = &[3];

fn p(c: &[i64]) -> GridPoint {
    GridPoint::new(c)
}

fn stable_field(n: f64) -> jumplab_core::Result<ConductivityField> {
    isotropic_stable(ScaledLattice::new(1, n)?, 1.0, stable_constant(1, 1.0))
}

fn c1_builder(_: Execution) -> jumplab_core::Result<Outcome> {
    let iso = build_from_kernel(
        Arc::new(IsotropicKernel { d: 1, alpha: 1.0, coefficient: 1.0 }),
        1.0,
        QuadratureConfig::default(),
    )?;
    let v = iso.evaluate(&p(&[0]), &p(&[3]))?;
    let err = (v - (9.0f64 / 8.0).ln()).abs();
    let kappa = 0.37;
    let cst = build_from_kernel(Arc::new(ConstantKernel { d: 2, alpha: 1.0, value: kappa }), 2.0, QuadratureConfig::default())?;
    let mut const_exact = true;
    let mut near_zero = true;
    for (a, b) in [([0, 0], [2, 0]), ([1, -1], [5, 3]), ([-3, 2], [0, 0]), ([0, 0], [1, 1]), ([2, 2], [3, 2])] {
        let v = cst.evaluate(&p(&a), &p(&b))?;
        let linf = p(&a).sub(&p(&b)).linf();
        if linf == 1 {
            near_zero &= v == 0.0;
        } else {
            const_exact &= v == kappa;
        }
    }
    near_zero &= iso.evaluate(&p(&[0]), &p(&[1]))? == 0.0;
    let pass = err <= 1e-10 && const_exact && near_zero;
    Ok((
        pass,
        format!("|C(0,3) - ln(9/8)| = {err:.2e}, constant exact = {const_exact}, adjacent zero = {near_zero}"),
        json!({"c03": v, "abs_error": err, "constant_exact": const_exact, "adjacent_zero": near_zero}),
    ))
}

fn c2_constant(_: Execution) -> jumplab_core::Result<Outcome> {
    let c = stable_constant(1, 1.0);
    let err = (c - 1.0 / PI).abs();
    Ok((err <= 1e-12, format!("coefficient {c}, |c - 1/pi| = {err:.2e}"), json!({"coefficient": c, "abs_error": err})))
}

fn c3_validators(exec: Execution) -> jumplab_core::Result<Outcome> {
    let cone = double_cone(1.0, 1.0, 1.0, 1.0, None)?;
    let window = Window::from_bounds(*cone.lattice(), &[-12, -12], &[12, 12])?;
    let bounds = check_bounds_a1_a2(&cone, &window, None, exec)?;
    let kappa2 = cone.meta().kappa2.expect("cone meta carries kappa2");
    let (a3, _) = check_chains_a3(
        &cone,
        &window,
        kappa2,
        N0Policy::Certify { max_length: 2 },
        ChainRouter::Cone { gamma: 1.0 },
        DEFAULT_NODE_CAP,
        exec,
    )?;
    let longest = a3.constants["max_chain_length"];
    let cone_ok = bounds.all_passed() && a3.constants.contains_key("N0") && longest <= 2.0 && a3.detail.contains("chains");
    let axes = axes_counterexample(2, 1.0)?;
    let frac = density_check_a4(&axes, &p(&[0, 0]), 10.0, 1.0)?;
    let density_ok = frac == 40.0 / 317.0 && frac < 5.0 / 6.0;
    let chain = find_chain_a3(&axes, &p(&[0, 0]), &p(&[1, 1]), 4, 1.0, Some(20.0 / 2f64.sqrt()), DEFAULT_NODE_CAP)?;
    let chain_absent = chain.is_none();
    // Diagnostic: on the axes field (A3) breaks through edge multiplicity.
    let mut mult = Vec::new();
    for r in [2, 3, 4] {
        let w = Window::from_bounds(*axes.lattice(), &[-r, -r], &[r, r])?;
        let (res, _) = check_chains_a3(
            &axes,
            &w,
            1.0,
            N0Policy::Certify { max_length: 4 },
            ChainRouter::Search { radius_factor: Some(3.0) },
            DEFAULT_NODE_CAP,
            exec,
        )?;
        mult.push((r, res.constants["max_multiplicity"]));
    }
    let pass = cone_ok && density_ok && chain_absent;
    let found = chain.as_ref().map(|c| format!("{:?}", c.points)).unwrap_or_else(|| "none".into());
    Ok((
        pass,
        format!(
            "cone A1-A3 {} (longest chain {longest}, N0 {}); axes A4 fraction {frac:.6} = 40/317; \
             axes chain (0,0)->(1,1) found {found}; axes multiplicity by window radius {mult:?}",
            if cone_ok { "pass" } else { "fail" },
            a3.constants["N0"]
        ),
        json!({
            "cone_bounds_pass": bounds.all_passed(),
            "cone_a3": a3,
            "axes_density": frac,
            "axes_chain": chain,
            "axes_multiplicity": mult,
        }),
    ))
}

fn certified_cone_constants(cone: &ConductivityField, exec: Execution) -> jumplab_core::Result<ChainConstants> {
    let window = Window::from_bounds(*cone.lattice(), &[-12, -12], &[12, 12])?;
    let kappa2 = cone.meta().kappa2.expect("cone meta carries kappa2");
    let (a3, _) = check_chains_a3(
        cone,
        &window,
        kappa2,
        N0Policy::Certify { max_length: 2 },
        ChainRouter::Cone { gamma: 1.0 },
        DEFAULT_NODE_CAP,
        exec,
    )?;
    Ok(ChainConstants { n0: a3.constants["N0"], kappa2, theta2: a3.constants["theta2_empirical"] })
}

fn c4_comparison(exec: Execution) -> jumplab_core::Result<Outcome> {
    let cone = double_cone(1.0, 1.0, 1.0, 1.0, None)?;
    let consts = certified_cone_constants(&cone, exec)?;
    let corpus: Vec<_> = (0..100).map(|i| random_grid_function(*cone.lattice(), 8, 4004, i)).collect();
    let window = Window::from_bounds(*cone.lattice(), &[-12, -12], &[12, 12])?;
    let r = form_comparison(&cone, consts, &corpus, 4.0, Some(&window), exec)?;
    let pass = r.violations == 0 && r.coverage_gaps == 0;
    Ok((
        pass,
        format!(
            "N0 {} kappa2 {:.3e} theta2 {:.3}: max ratio {:.4} vs bound {:.4e}, {} violations, {} gaps",
            consts.n0, consts.kappa2, consts.theta2, r.max_ratio, r.bound, r.violations, r.coverage_gaps
        ),
        serde_json::to_value(&r)?,
    ))
}

fn c5_norms(exec: Execution) -> jumplab_core::Result<Outcome> {
    let cone = ConeKernel { gamma: 1.0, alpha: 1.0, coefficient: 1.0 };
    let mut chosen = None;
    for lambda2 in [0.5, 0.25, 0.1, 0.05] {
        let cfg = CubeChainConfig { lambda2, m0: 4, ..Default::default() };
        let rep = cube_chain_check(&cone, &cfg, exec)?;
        if rep.missing.is_empty() {
            chosen = Some(rep);
            break;
        }
    }
    let Some(rep) = chosen else {
        return Ok((false, "no cube-chain certificate set found".into(), json!(null)));
    };
    let m0 = rep.certified_m0.expect("all pairs covered");
    let corpus = test_corpus(2, 20, 5005, true);
    let ccfg = ContinuumConfig::default();
    let lambda1 = cone.upper_constant().expect("cone has an upper constant");
    let norms = norm_equivalence(&cone, &corpus, m0, rep.lambda2, lambda1, 0.05, &ccfg, exec)?;
    let (lo, hi) = norms
        .rows
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(r.ratio), b.max(r.ratio)));
    Ok((
        norms.all_pass,
        format!(
            "Lambda2 {} M0 {m0} (length {}, multiplicity {}): ratios in [{lo:.4}, {hi:.4}] vs [{:.4e}, {}] +- 0.05",
            rep.lambda2, rep.max_length, rep.max_multiplicity, norms.lower, norms.upper
        ),
        json!({
            "lambda2": rep.lambda2,
            "certified_m0": m0,
            "max_length": rep.max_length,
            "max_multiplicity": rep.max_multiplicity,
            "quadrature_error": rep.quadrature_error,
            "norms": norms,
        }),
    ))
}

fn c6_heat(exec: Execution) -> jumplab_core::Result<Outcome> {
    // Two-state closed form.
    let l1 = ScaledLattice::integer(1);
    let mut e = HashMap::new();
    e.insert((p(&[0]), p(&[1])), 0.7);
    e.insert((p(&[1]), p(&[0])), 0.7);
    let two = table_field(l1, 1.0, e, None, ConductivityMeta::default())?;
    let w2 = Window::from_bounds(l1, &[0], &[1])?;
    let g2 = generator_matrix(&two, &w2, Boundary::Killed, Default::default(), exec)?;
    let times = [0.1, 0.5, 1.0, 3.0];
    let col = heat_kernel(&g2, &times, &p(&[0]), exec)?;
    let closed = times
        .iter()
        .enumerate()
        .map(|(k, t)| (col.values[k][1] - (1.0 - (-1.4 * t).exp()) / 2.0).abs())
        .fold(0.0, f64::max);

    // μ^ρ-symmetry on full-rate killed windows in d = 1 and d = 2.
    let mut sym: f64 = 0.0;
    let mut mass_monotone = true;
    for (c, w) in [
        (stable_field(2.0)?, Window::centered(ScaledLattice::new(1, 2.0)?, 4.0)?),
        (
            isotropic_stable(ScaledLattice::integer(2), 1.0, stable_constant(2, 1.0))?,
            Window::centered(ScaledLattice::integer(2), 3.0)?,
        ),
    ] {
        let g = generator_matrix(&c, &w, Boundary::FullRateKilled, Default::default(), exec)?;
        let cols: Vec<_> = g.points.iter().map(|x| heat_kernel(&g, &times, x, exec)).collect::<Result<_, _>>()?;
        for (i, ci) in cols.iter().enumerate() {
            for (j, cj) in cols.iter().enumerate() {
                for k in 0..times.len() {
                    sym = sym.max((ci.values[k][j] - cj.values[k][i]).abs());
                }
            }
            mass_monotone &= (1..times.len()).all(|k| ci.mass(k) <= ci.mass(k - 1));
        }
    }

    // Scaling identity for a finite-range table field and the isotropic field.
    let mut table = HashMap::new();
    for x in -12i64..12 {
        let a = 0.5 + 0.25 * ((x * 7).rem_euclid(5)) as f64;
        let b = 0.1 + 0.05 * ((x * 3).rem_euclid(4)) as f64;
        for (y, v) in [(x + 1, a), (x + 2, b)] {
            table.insert((p(&[x]), p(&[y])), v);
            table.insert((p(&[y]), p(&[x])), v);
        }
    }
    let tab = table_field(l1, 1.0, table, None, ConductivityMeta::default())?;
    let dcfg = DiagnosticsConfig {
        rho_list: vec![1.0, 2.0],
        times: vec![0.1, 0.5, 1.0],
        window_radius: 8.0,
        holder_time: None,
        ..Default::default()
    };
    let scal_table = kernel_diagnostics(&tab, &dcfg, exec)?.scaling_violation.expect("requested");
    let scal_iso = kernel_diagnostics(&stable_field(1.0)?, &dcfg, exec)?.scaling_violation.expect("requested");
    let pass = closed <= 1e-10 && sym <= 1e-8 && mass_monotone && scal_table <= 1e-8 && scal_iso <= 1e-8;
    Ok((
        pass,
        format!(
            "two-state error {closed:.1e}, symmetry {sym:.1e}, mass nonincreasing {mass_monotone}, \
             scaling violation table {scal_table:.1e} isotropic {scal_iso:.1e}"
        ),
        json!({
            "two_state_error": closed,
            "symmetry_violation": sym,
            "mass_nonincreasing": mass_monotone,
            "scaling_violation_table": scal_table,
            "scaling_violation_isotropic": scal_iso,
        }),
    ))
}

fn c7_ondiag(exec: Execution) -> jumplab_core::Result<Outcome> {
    let c = isotropic_stable(ScaledLattice::integer(1), 1.0, 1.0)?;
    let cfg = DiagnosticsConfig {
        rho_list: vec![1.0, 2.0, 4.0],
        times: vec![0.1, 0.3, 1.0],
        window_radius: 32.0,
        probe_radius: 1.0,
        scaling: false,
        holder_time: Some(0.5),
        ..Default::default()
    };
    let r = kernel_diagnostics(&c, &cfg, exec)?;
    let betas: Vec<f64> = r.holder.iter().map(|h| h.beta).collect();
    Ok((
        r.on_diagonal_spread < 2.0,
        format!("max/min of sup_x p(t,x,x) t = {:.4}; Hoelder estimates {betas:.3?}", r.on_diagonal_spread),
        serde_json::to_value(&r)?,
    ))
}

fn c8_resolvent(exec: Execution) -> jumplab_core::Result<Outcome> {
    let c = stable_field(1.0)?;
    let w = Window::centered(*c.lattice(), 32.0)?;
    let g = generator_matrix(&c, &w, Boundary::FullRateKilled, Default::default(), exec)?;
    let f = random_grid_function(*c.lattice(), 8, 8008, 0);
    let h = random_grid_function(*c.lattice(), 8, 8008, 1);
    let r = resolvent_check(&g, &c, &f, &h, 1.0, 24.0, exec)?;
    Ok((
        r.relative_residual <= 1e-8,
        format!("lhs {:.12} rhs {:.12} relative residual {:.2e}", r.lhs, r.rhs, r.relative_residual),
        serde_json::to_value(&r)?,
    ))
}

fn levy_functionals(lat: ScaledLattice) -> Vec<JumpFunctional> {
    let x = move |p: &GridPoint| lat.real(p)[0];
    vec![
        JumpFunctional {
            name: "big jumps".into(),
            near_radius: 1.0,
            near: Arc::new(|_, _, _| 0.0),
            far: Some(Arc::new(|_, _| 1.0)),
            bound: 1.0,
            time_dependent: false,
        },
        JumpFunctional {
            name: "small right jumps".into(),
            near_radius: 1.0,
            near: Arc::new(move |_, a, b| if x(b) > x(a) { 1.0 } else { 0.0 }),
            far: None,
            bound: 1.0,
            time_dependent: false,
        },
        JumpFunctional {
            name: "time-weighted capped length".into(),
            near_radius: 1.0,
            near: Arc::new(move |s, a, b| s * (x(b) - x(a)).abs()),
            far: Some(Arc::new(|s, _| s)),
            bound: 1.0,
            time_dependent: true,
        },
        JumpFunctional {
            name: "position-modulated square".into(),
            near_radius: 2.0,
            near: Arc::new(move |_, a, b| x(a).cos() * (x(b) - x(a)).powi(2) / 4.0),
            far: None,
            bound: 1.0,
            time_dependent: false,
        },
        JumpFunctional {
            name: "damped long jumps".into(),
            near_radius: 0.5,
            near: Arc::new(|_, _, _| 0.0),
            far: Some(Arc::new(move |s, a| s.sin() / (1.0 + x(a) * x(a)))),
            bound: 1.0,
            time_dependent: true,
        },
    ]
}

fn c9_levy(exec: Execution) -> jumplab_core::Result<Outcome> {
    let c = stable_field(2.0)?;
    let fs = levy_functionals(*c.lattice());
    let r = levy_system_check(&c, &fs, &p(&[0]), 1.0, 100_000, 9009, exec)?;
    let worst = r
        .iter()
        .map(|k| ((k.lhs - k.rhs).abs() - k.rhs_bias_bound).max(0.0) / k.combined_se)
        .fold(0.0, f64::max);
    Ok((
        r.iter().all(|k| k.agrees(3.0)),
        format!("5 functionals, worst |lhs-rhs| = {worst:.2} combined standard errors"),
        serde_json::to_value(&r)?,
    ))
}

fn c10_clt(exec: Execution) -> jumplab_core::Result<Outcome> {
    let cfg = CltConfig { seed: 1010, ..Default::default() };
    let r = clt_diagnostic(&stable_field, &|xi: &[f64]| xi[0].abs(), &cfg, exec)?;
    let ks: Vec<f64> = r.rows.iter().map(|row| row.ks.expect("cauchy reference")).collect();
    let last = r.rows.last().expect("rows");
    let pass = r.ks_strictly_decreasing == Some(true) && ks[ks.len() - 1] < 0.05 && last.cf_distance < 0.05;
    let cf: Vec<f64> = r.rows.iter().map(|row| row.cf_distance).collect();
    Ok((pass, format!("KS {ks:.4?}; CF distance {cf:.4?}"), serde_json::to_value(&r)?))
}

fn c11_tightness(exec: Execution) -> jumplab_core::Result<Outcome> {
    let cfg = TightnessConfig { seed: 1111, ..Default::default() };
    let r = tightness_diagnostic(&stable_field, &cfg, exec)?;
    let big: Vec<_> = r.rows.iter().filter(|row| row.n >= 8.0).collect();
    let pass = big.iter().all(|row| row.probability < 0.1);
    let desc: Vec<String> = r
        .rows
        .iter()
        .map(|row| format!("n={} p={:.4} CI [{:.4}, {:.4}]", row.n, row.probability, row.ci.0, row.ci.1))
        .collect();
    Ok((pass, desc.join("; "), serde_json::to_value(&r)?))
}

const CRITERIA: &[(usize, &str, Criterion)] = &[
    (1, "builder exactness", c1_builder),
    (2, "isotropic constant", c2_constant),
    (3, "validators", c3_validators),
    (4, "form comparison", c4_comparison),
    (5, "norm equivalence", c5_norms),
    (6, "heat-kernel identities", c6_heat),
    (7, "on-diagonal stability", c7_ondiag),
    (8, "resolvent identity", c8_resolvent),
    (9, "Levy system", c9_levy),
    (10, "CLT benchmark", c10_clt),
    (11, "tightness probe", c11_tightness),
];

fn run(dir: &Path, exec: Execution, print: bool) -> Vec<(usize, bool)> {
    std::fs::create_dir_all(dir).expect("report dir");
    let mut out = Vec::new();
    for (id, name, f) in CRITERIA {
        let started = Instant::now();
        let (pass, detail, report) = match f(exec) {
            Ok(o) => o,
            Err(e) => (false, format!("error: {e}"), json!({"error": e.to_string()})),
        };
        write_json(&dir.join(format!("criterion_{id:02}.json")), &json!({"pass": pass, "detail": detail, "report": report}))
            .expect("write report");
        if print {
            let note = if !pass && KNOWN_UNATTAINABLE.contains(id) { " [claim is false as stated; see README]" } else { "" };
            println!(
                "{} criterion {id:>2} ({name}): {detail} [{:.1}s]{note}",
                if pass { "PASS" } else { "FAIL" },
                started.elapsed().as_secs_f64()
            );
        }
        out.push((*id, pass));
    }
    out
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .expect("read dir")
        .map(|e| {
            let e = e.expect("entry");
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("read"))
        })
        .collect();
    v.sort();
    v
}

fn main() {
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&base);
    let results = run(&base.join("parallel"), Execution::Parallel, true);
    let started = Instant::now();
    run(&base.join("sequential"), Execution::Sequential, false);
    let a = tree_bytes(&base.join("parallel"));
    let b = tree_bytes(&base.join("sequential"));
    let identical = a == b;
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    println!(
        "{} criterion 12 (determinism): {} report files, byte-identical on rerun: {identical}{} [{:.1}s]",
        if identical { "PASS" } else { "FAIL" },
        a.len(),
        if differing.is_empty() { String::new() } else { format!(" (differ: {differing:?})") },
        started.elapsed().as_secs_f64()
    );
    let unexpected: Vec<usize> = results
        .iter()
        .filter(|(id, pass)| !pass && !KNOWN_UNATTAINABLE.contains(id))
        .map(|(id, _)| *id)
        .chain((!identical).then_some(12))
        .collect();
    if !unexpected.is_empty() {
        eprintln!("unexpected acceptance failures: {unexpected:?}");
        std::process::exit(1);
    }
}
