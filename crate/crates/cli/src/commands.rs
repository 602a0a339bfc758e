//! Subcommand bodies. Each returns `Err(CliError::Check)` after writing its
//! artifacts when a check fails.

use crate::config::{ExperimentConfig, FormsMode};
use crate::CliError;
use jumplab_core::chain::{estimate_exit_prob, sample_path_with, JumpSampler, SamplerConfig};
use jumplab_core::conductivity::{scale_conductivity, ConductivityField, TailPolicy};
use jumplab_core::convergence::{clt_diagnostic, kernel_symbol, tightness_diagnostic, CltConfig, Reference};
use jumplab_core::exec::{map_range, Execution};
use jumplab_core::forms::{
    continuum_forms, cube_chain_check, discrete_form, form_comparison, norm_equivalence, random_grid_function,
    test_corpus, ChainConstants, FormKind,
};
use jumplab_core::heatkernel::{generator_matrix, heat_kernel, kernel_diagnostics, GeneratorOptions};
use jumplab_core::kernel::{IsotropicKernel, Kernel};
use jumplab_core::lattice::{cube_offsets, GridPoint, ScaledLattice, Window};
use jumplab_core::numerics::{mean_se, wilson_interval};
use jumplab_core::report::{fmt_f64, fmt_opt, to_json, CsvTable};
use jumplab_core::validators::{check_bounds_a1_a2, check_chains_a3, check_density_a4, ValidationReport};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

struct Artifacts {
    dir: PathBuf,
    hash: String,
    outputs: Vec<String>,
}

impl Artifacts {
    fn io(&self, e: impl std::fmt::Display) -> CliError {
        CliError::Io(format!("{}: {e}", self.dir.display()))
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), data).map_err(|e| self.io(e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, table: &CsvTable) -> Result<(), CliError> {
        let data = table.to_bytes(Some(&self.hash))?;
        self.bytes(name, &data)
    }

    fn json(&mut self, name: &str, report: &impl Serialize) -> Result<(), CliError> {
        let text = to_json(&json!({ "config_sha256": self.hash, "report": report }))?;
        self.bytes(name, text.as_bytes())
    }
}

pub fn execute(
    name: &str,
    cfg: &ExperimentConfig,
    base: &Path,
    out: &Path,
    manifest_only: bool,
    exec: Execution,
) -> Result<(), CliError> {
    let started = Instant::now();
    let canonical = cfg.canonical_json();
    let hash: String = Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect();
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let mut art = Artifacts { dir: out.to_path_buf(), hash, outputs: Vec::new() };
    art.bytes("config.json", &canonical)?;

    let result = if manifest_only {
        // Building the field still validates the spec.
        cfg.field.build(base).map(|_| ()).map_err(CliError::from)
    } else {
        let field = cfg.field.build(base)?;
        match name {
            "build" => build(cfg, &field, &mut art, exec),
            "validate" => validate(cfg, &field, &mut art, exec),
            "simulate" => simulate(cfg, &field, &mut art, exec),
            "heatkernel" => heatkernel(cfg, &field, &mut art, exec),
            "forms" => forms(cfg, &field, &mut art, exec),
            "clt" => clt(cfg, &field, &mut art, exec),
            other => Err(CliError::Config(format!("unknown subcommand {other}"))),
        }
    };
    let status = match &result {
        Ok(()) => "ok",
        Err(CliError::Check(_)) => "check_failed",
        Err(_) => "error",
    };
    if matches!(result, Ok(()) | Err(CliError::Check(_))) {
        let manifest = json!({
            "subcommand": name,
            "config_sha256": art.hash,
            "version": env!("CARGO_PKG_VERSION"),
            "core_version": jumplab_core::VERSION,
            "seed": cfg.seed,
            "wall_time_seconds": if cfg.record_timing { started.elapsed().as_secs_f64() } else { 0.0 },
            "dry_run": manifest_only,
            "status": status,
            "outputs": art.outputs,
        });
        let text = to_json(&manifest)?;
        std::fs::write(out.join("manifest.json"), text).map_err(|e| art.io(e))?;
    }
    result
}

fn origin_or(coords: &Option<Vec<i64>>, d: usize) -> Result<GridPoint, CliError> {
    match coords {
        Some(c) if c.len() == d => Ok(GridPoint::new(c)),
        Some(c) => Err(CliError::Config(format!("expected {d} coordinates, got {}", c.len()))),
        None => Ok(GridPoint::origin(d)),
    }
}

fn real_point(lat: &ScaledLattice, x: &[f64]) -> Result<GridPoint, CliError> {
    if x.is_empty() {
        return Ok(GridPoint::origin(lat.dim()));
    }
    if x.len() != lat.dim() {
        return Err(CliError::Config(format!("expected {} coordinates, got {}", lat.dim(), x.len())));
    }
    Ok(lat.round(x)?)
}

fn window(c: &ConductivityField, lo: &Option<Vec<i64>>, hi: &Option<Vec<i64>>, r: i64) -> Result<Window, CliError> {
    let d = c.dim();
    let lo = lo.clone().unwrap_or_else(|| vec![-r; d]);
    let hi = hi.clone().unwrap_or_else(|| vec![r; d]);
    if lo.len() != d || hi.len() != d {
        return Err(CliError::Config(format!("window corners need {d} coordinates")));
    }
    Ok(Window::from_bounds(*c.lattice(), &lo, &hi)?)
}

fn coord_header(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

fn build(cfg: &ExperimentConfig, c: &ConductivityField, art: &mut Artifacts, _: Execution) -> Result<(), CliError> {
    let d = c.dim();
    let lat = c.lattice();
    let x = origin_or(&cfg.build.origin, d)?;
    let mut header = coord_header("x", d);
    header.extend(coord_header("y", d));
    header.push("value".into());
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = CsvTable::new(&refs);
    for h in cube_offsets(d, cfg.build.radius) {
        let y = x.add(&h);
        let mut row: Vec<String> = lat.real_vec(&x).into_iter().map(fmt_f64).collect();
        row.extend(lat.real_vec(&y).into_iter().map(fmt_f64));
        row.push(fmt_f64(c.evaluate(&x, &y)?));
        table.push(row);
    }
    art.csv("conductivity.csv", &table)?;
    let total = c.total_rate(&x, TailPolicy::Auto)?;
    art.json(
        "field.json",
        &json!({
            "label": c.label(),
            "d": d,
            "alpha": c.alpha(),
            "rho": lat.rho(),
            "meta": c.meta(),
            "stationary": c.is_stationary(),
            "finite_range": c.finite_range(),
            "total_rate_at_origin": total,
        }),
    )
}

fn validate(cfg: &ExperimentConfig, c: &ConductivityField, art: &mut Artifacts, exec: Execution) -> Result<(), CliError> {
    let p = &cfg.validate;
    let w = window(c, &p.lo, &p.hi, 3)?;
    let mut report = check_bounds_a1_a2(c, &w, p.kappa1, exec)?;
    let kappa2 = p.kappa2.or(c.meta().kappa2).unwrap_or(1.0);
    let (a3, _) = check_chains_a3(c, &w, kappa2, p.n0, p.router, cfg.limits.node_cap, exec)?;
    report.checks.push(a3);
    if let Some(dp) = &p.density {
        let centers = if dp.centers.is_empty() {
            vec![GridPoint::origin(c.dim())]
        } else {
            dp.centers.iter().map(|v| origin_or(&Some(v.clone()), c.dim())).collect::<Result<_, _>>()?
        };
        let kappa3 = dp.kappa3.or(c.meta().kappa3).unwrap_or(1.0);
        report.checks.push(check_density_a4(c, &w, &centers, &dp.radii, kappa3, dp.threshold)?);
    }
    art.json("validation.json", &report)?;
    finish_validation(&report)
}

fn finish_validation(report: &ValidationReport) -> Result<(), CliError> {
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.assumption.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("failed: {}", failed.join(", "))))
    }
}

fn at_scale(c: &ConductivityField, rho: f64) -> Result<ConductivityField, CliError> {
    if rho == c.lattice().rho() {
        Ok(c.clone())
    } else {
        Ok(scale_conductivity(c, rho)?)
    }
}

fn simulate(cfg: &ExperimentConfig, base: &ConductivityField, art: &mut Artifacts, exec: Execution) -> Result<(), CliError> {
    let p = &cfg.simulate;
    if p.paths > cfg.limits.max_paths {
        return Err(CliError::Resource(format!("{} paths exceed max_paths {}", p.paths, cfg.limits.max_paths)));
    }
    if p.paths == 0 || !(p.t_max >= 0.0) {
        return Err(CliError::Config("simulate needs paths > 0 and t_max >= 0".into()));
    }
    let c = at_scale(base, p.rho)?;
    let lat = *c.lattice();
    let x0 = real_point(&lat, &p.x0)?;
    let start = lat.real_vec(&x0);
    let sampler = JumpSampler::new(&c, p.lambda, SamplerConfig::default())?;
    let paths: Vec<_> = map_range(exec, p.paths, |i| sample_path_with(&sampler, &x0, p.t_max, cfg.seed, i as u64))
        .into_iter()
        .collect::<Result<_, _>>()?;

    let d = lat.dim();
    let ends: Vec<Vec<f64>> = paths
        .iter()
        .map(|path| lat.real_vec(&path.state_at(p.t_max)).iter().zip(&start).map(|(a, b)| a - b).collect())
        .collect();
    let mut table = CsvTable::new(&["statistic", "value", "ci_low", "ci_high"]);
    let mut mean_row = |name: String, xs: &[f64]| {
        let (m, se) = mean_se(xs);
        table.push(vec![name, fmt_f64(m), fmt_f64(m - 1.96 * se), fmt_f64(m + 1.96 * se)]);
    };
    for i in 0..d {
        let xs: Vec<f64> = ends.iter().map(|e| e[i]).collect();
        mean_row(format!("mean_displacement_{i}"), &xs);
    }
    let norms: Vec<f64> = ends.iter().map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    mean_row("mean_abs_displacement".into(), &norms);
    let jumps: Vec<f64> = paths.iter().map(|path| path.events.len() as f64).collect();
    mean_row("mean_jumps".into(), &jumps);
    let far = norms.iter().filter(|&&r| r > p.displacement_radius).count() as u64;
    let (lo, hi) = wilson_interval(far, p.paths as u64);
    table.push(vec![
        "prob_displacement_exceeds_radius".into(),
        fmt_f64(far as f64 / p.paths as f64),
        fmt_f64(lo),
        fmt_f64(hi),
    ]);
    let exit = match &p.exit {
        Some(e) => {
            let est = estimate_exit_prob(&c, &x0, e.radius, e.gamma, e.a, p.paths, cfg.seed, None, exec)?;
            table.push(vec!["exit_probability".into(), fmt_f64(est.p_hat), fmt_f64(est.ci.0), fmt_f64(est.ci.1)]);
            Some(est)
        }
        None => None,
    };
    art.csv("summary.csv", &table)?;
    if p.write_paths {
        let mut buf = Vec::new();
        for path in &paths {
            path.encode(&mut buf);
        }
        art.bytes("paths.bin", &buf)?;
    }
    art.json("simulate.json", &json!({ "paths": p.paths, "t_max": p.t_max, "lambda": p.lambda, "exit": exit }))
}

fn heatkernel(cfg: &ExperimentConfig, base: &ConductivityField, art: &mut Artifacts, exec: Execution) -> Result<(), CliError> {
    let p = &cfg.heatkernel;
    let c = at_scale(base, p.rho)?;
    let lat = *c.lattice();
    let w = Window::centered(lat, p.window)?;
    if w.len() > cfg.limits.max_window_points {
        return Err(CliError::Resource(format!(
            "window has {} points, limit {}",
            w.len(),
            cfg.limits.max_window_points
        )));
    }
    let source = real_point(&lat, &p.source)?;
    let opts = GeneratorOptions { lambda: p.lambda, entry_cap: Some(cfg.limits.entry_cap), ..Default::default() };
    let g = generator_matrix(&c, &w, p.boundary, opts, exec)?;
    let col = heat_kernel(&g, &p.times, &source, exec)?;
    let d = lat.dim();
    let mut header = vec!["t".to_string()];
    header.extend(coord_header("x", d));
    header.extend(coord_header("y", d));
    header.extend(["p".to_string(), "error_bound".to_string()]);
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = CsvTable::new(&refs);
    let xs = lat.real_vec(&source);
    for (k, &t) in col.times.iter().enumerate() {
        for (j, y) in col.points.iter().enumerate() {
            let mut row = vec![fmt_f64(t)];
            row.extend(xs.iter().copied().map(fmt_f64));
            row.extend(lat.real_vec(y).into_iter().map(fmt_f64));
            row.push(fmt_f64(col.values[k][j]));
            row.push(fmt_f64(col.error_bounds[k]));
            table.push(row);
        }
    }
    art.csv("heatkernel.csv", &table)?;
    let masses: Vec<f64> = (0..col.times.len()).map(|k| col.mass(k)).collect();
    let diagnostics = match &p.diagnostics {
        Some(dc) => Some(kernel_diagnostics(base, dc, exec)?),
        None => None,
    };
    art.json(
        "diagnostics.json",
        &json!({
            "window": w.describe(),
            "points": g.len(),
            "nonzeros": g.nnz(),
            "boundary": p.boundary,
            "max_rate": g.max_rate(),
            "mass": masses,
            "error_bounds": col.error_bounds,
            "scale_diagnostics": diagnostics,
        }),
    )
}

fn continuum_kernel(cfg: &ExperimentConfig, explicit: &Option<jumplab_core::kernel::KernelSpec>) -> Result<std::sync::Arc<dyn Kernel>, CliError> {
    let spec = explicit
        .clone()
        .or_else(|| cfg.limit_kernel())
        .ok_or_else(|| CliError::Config("no continuum kernel for this field; set `kernel`".into()))?;
    Ok(spec.build()?)
}

fn forms(cfg: &ExperimentConfig, c: &ConductivityField, art: &mut Artifacts, exec: Execution) -> Result<(), CliError> {
    let p = &cfg.forms;
    let lat = *c.lattice();
    let kind_name = |k: FormKind| serde_json::to_value(k).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let mut table = CsvTable::new(&["function_id", "form_kind", "value", "error_bound", "ratio", "pass"]);
    let mut failure = None;
    match p.mode {
        FormsMode::Discrete => {
            for i in 0..p.functions {
                let f = random_grid_function(lat, p.support, cfg.seed, i as u64);
                let e = discrete_form(c, &f, p.lambda, exec)?;
                table.push(vec![i.to_string(), kind_name(e.kind), fmt_f64(e.value), fmt_f64(e.error_bound), String::new(), String::new()]);
            }
        }
        FormsMode::Compare => {
            let w = window(c, &p.chain_lo, &p.chain_hi, 12)?;
            let kappa2 = p.kappa2.or(c.meta().kappa2).unwrap_or(1.0);
            let (a3, _) = check_chains_a3(c, &w, kappa2, p.n0, p.router, cfg.limits.node_cap, exec)?;
            if !a3.passed {
                art.json("forms.json", &a3)?;
                art.csv("forms.csv", &table)?;
                return Err(CliError::Check(format!("no chain certificate on the window: {}", a3.detail)));
            }
            let constants = ChainConstants {
                n0: a3.constants["N0"],
                kappa2,
                theta2: a3.constants["theta2_empirical"],
            };
            let corpus: Vec<_> = (0..p.functions).map(|i| random_grid_function(lat, p.support, cfg.seed, i as u64)).collect();
            let r = form_comparison(c, constants, &corpus, p.lambda.unwrap_or(4.0), Some(&w), exec)?;
            for row in &r.rows {
                table.push(vec![
                    row.function_id.to_string(),
                    kind_name(FormKind::DiscreteTruncated),
                    fmt_f64(row.e_alpha),
                    String::new(),
                    fmt_f64(row.ratio),
                    row.pass.to_string(),
                ]);
            }
            if r.violations > 0 {
                failure = Some(format!("{} comparison violations", r.violations));
            }
            art.json("forms.json", &r)?;
        }
        FormsMode::Continuum => {
            let k = continuum_kernel(cfg, &p.kernel)?;
            let stable = IsotropicKernel { d: k.dim(), alpha: k.alpha(), coefficient: 1.0 };
            let corpus = test_corpus(k.dim(), p.functions, cfg.seed, false);
            let mut all = Vec::new();
            for (i, f) in corpus.iter().enumerate() {
                let forms = continuum_forms(&[k.as_ref(), &stable], f, &p.continuum, exec)?;
                let e = forms[0].evaluation(FormKind::Continuum);
                table.push(vec![
                    i.to_string(),
                    kind_name(e.kind),
                    fmt_f64(e.value),
                    fmt_f64(e.error_bound),
                    fmt_f64(e.value / forms[1].richardson),
                    String::new(),
                ]);
                all.push(json!({ "function": f, "forms": forms }));
            }
            art.json("forms.json", &all)?;
        }
        FormsMode::CubeChain => {
            let k = continuum_kernel(cfg, &p.kernel)?;
            let rep = cube_chain_check(k.as_ref(), &p.cube_chain, exec)?;
            let norms = match rep.certified_m0 {
                Some(m0) => {
                    let corpus = test_corpus(k.dim(), p.functions, cfg.seed, true);
                    let lambda1 = p.lambda1.or(k.upper_constant()).unwrap_or(1.0);
                    let n = norm_equivalence(k.as_ref(), &corpus, m0, rep.lambda2, lambda1, p.tolerance, &p.continuum, exec)?;
                    for row in &n.rows {
                        table.push(vec![
                            row.function_id.to_string(),
                            kind_name(FormKind::Continuum),
                            fmt_f64(row.e_kernel),
                            fmt_f64(row.error_bound),
                            fmt_f64(row.ratio),
                            row.pass.to_string(),
                        ]);
                    }
                    if !n.all_pass {
                        failure = Some("norm equivalence fails".into());
                    }
                    Some(n)
                }
                None => {
                    failure = Some(format!("{} cube pairs lack a chain", rep.missing.len()));
                    None
                }
            };
            art.json("forms.json", &json!({ "cube_chains": rep, "norm_equivalence": norms }))?;
        }
    }
    art.csv("forms.csv", &table)?;
    failure.map_or(Ok(()), |m| Err(CliError::Check(m)))
}

fn clt(cfg: &ExperimentConfig, base: &ConductivityField, art: &mut Artifacts, exec: Execution) -> Result<(), CliError> {
    let p = &cfg.clt;
    if p.paths > cfg.limits.max_paths {
        return Err(CliError::Resource(format!("{} paths exceed max_paths {}", p.paths, cfg.limits.max_paths)));
    }
    let k = continuum_kernel(cfg, &p.kernel)?;
    let d = base.dim();
    let probe = vec![1.0; d];
    kernel_symbol(k.as_ref(), &probe)?;
    let symbol = |xi: &[f64]| kernel_symbol(k.as_ref(), xi).unwrap_or(f64::NAN);
    let family = |n: f64| scale_conductivity(base, n);
    let ccfg = CltConfig {
        n_list: p.n_list.clone(),
        t: p.t,
        x0: if p.x0.is_empty() { vec![0.0; d] } else { p.x0.clone() },
        reference: p.reference,
        paths: p.paths,
        seed: cfg.seed,
        cf_radius: p.cf_radius,
        cf_points: p.cf_points,
        record_timing: cfg.record_timing,
    };
    let report = clt_diagnostic(&family, &symbol, &ccfg, exec)?;
    let mut table = CsvTable::new(&["n", "ks", "cf_dist", "ci", "seconds"]);
    for row in &report.rows {
        let ci = if p.reference == Reference::CauchyStandard { row.ks_ci } else { row.cf_ci };
        table.push(vec![fmt_f64(row.n), fmt_opt(row.ks), fmt_f64(row.cf_distance), fmt_f64(ci), fmt_f64(row.seconds)]);
    }
    art.csv("clt.csv", &table)?;
    art.json("clt.json", &report)?;
    if let Some(tc) = &p.tightness {
        let t = tightness_diagnostic(&family, tc, exec)?;
        art.json("tightness.json", &t)?;
    }
    Ok(())
}
