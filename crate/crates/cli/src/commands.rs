//! Command implementations: read inputs, call the library, write outputs and a manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dorqf::design::{Dataset, RawData};
use dorqf::inference::{band_global_pvalue, bootstrap_effect_test, projected_samples, Term, DEFAULT_BAND_SAMPLES};
use dorqf::model::{
    cross_validate, fit_with, loocv_r_squared_with, pava_loocv_r_squared, CvOptions, CvWeighting, DorqfFit,
    FitArchive, FitOptions, Provenance, Target,
};
use dorqf::quantile::{empirical_quantile, ProbabilityGrid, RawSample};
use dorqf::sim::{
    generate_scenario, records_csv, run_table, table_csv, NoiseMode, NoiseScale, OrderChoice, PowerMethod,
    Scenario, StudyGrid, Table, TableResults,
};
use log::{info, warn};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::io::{
    ensure_dir, fmt_f64, id_mismatch, read_covariates, read_long, read_wide, wide_csv, write_text,
};
use crate::manifest::ManifestBuilder;
use crate::{
    BandArgs, CvArgs, DataArgs, FitArgs, GridArgs, NoiseModeArg, NoiseScaleArg, PowerMethodArg, PredictArgs,
    QuantilesArgs, SimulateArgs, Submodel, TestArgs, TestMethodArg, Weighting,
};

const TRANSPORT_POINTS: usize = 200;

fn emit(mb: &mut ManifestBuilder, dir: &Path, name: &str, text: &str) -> CliResult<PathBuf> {
    let path = dir.join(name);
    write_text(&path, text)?;
    mb.output(&path);
    Ok(path)
}

fn slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn build_grid(g: &GridArgs) -> CliResult<ProbabilityGrid> {
    let grid = match &g.grid_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let mut points = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let t = line.trim();
                if t.is_empty() || (i == 0 && t == "p") {
                    continue;
                }
                points.push(t.parse::<f64>().map_err(|_| {
                    CliError::Data(format!("{}: line {}: '{t}' is not a number", path.display(), i + 1))
                })?);
            }
            ProbabilityGrid::new(points)
        }
        None => ProbabilityGrid::equispaced(g.grid_m, g.grid_lo, g.grid_hi),
    };
    grid.map_err(|e| CliError::Usage(e.to_string()))
}

pub fn quantiles(a: &QuantilesArgs, threads: usize) -> CliResult<()> {
    let mut mb = ManifestBuilder::new("quantiles", a, threads)?;
    let grid = Arc::new(build_grid(&a.grid)?);
    mb.input(&a.input)?;
    let samples = read_long(&a.input)?;
    let with_predictor = samples.has_predictor();
    let mut rejects = String::from("subject_id,variable,count,reason\n");
    let mut keep = Vec::new();
    for (k, id) in samples.ids.iter().enumerate() {
        let mut ok = true;
        let mut check = |var: &str, v: &[f64]| {
            if v.len() < 2 {
                rejects.push_str(&format!("{id},{var},{},fewer than 2 observations\n", v.len()));
                ok = false;
            }
        };
        check("outcome", &samples.outcome[k]);
        if with_predictor {
            check("predictor", &samples.predictor[k]);
        }
        if ok {
            keep.push(k);
        }
    }
    if keep.is_empty() {
        return Err(CliError::Data("no subject has at least 2 observations".into()));
    }
    let estimate = |v: &[f64]| -> CliResult<Vec<f64>> {
        Ok(empirical_quantile(&RawSample::new(v.to_vec())?, &grid).into_values())
    };
    let ids: Vec<String> = keep.iter().map(|&k| samples.ids[k].clone()).collect();
    let outcome: Vec<Vec<f64>> = keep.iter().map(|&k| estimate(&samples.outcome[k])).collect::<CliResult<_>>()?;
    let predictor: Option<Vec<Vec<f64>>> = if with_predictor {
        Some(keep.iter().map(|&k| estimate(&samples.predictor[k])).collect::<CliResult<_>>()?)
    } else {
        None
    };
    ensure_dir(&a.out_dir)?;
    emit(&mut mb, &a.out_dir, "outcome_quantiles.csv", &wide_csv(grid.points(), &ids, &slices(&outcome)))?;
    if let Some(p) = &predictor {
        emit(&mut mb, &a.out_dir, "predictor_quantiles.csv", &wide_csv(grid.points(), &ids, &slices(p)))?;
    }
    emit(&mut mb, &a.out_dir, "rejects.csv", &rejects)?;
    let rejected = samples.ids.len() - ids.len();
    if rejected > 0 {
        warn!("{rejected} subjects rejected; see rejects.csv");
    }
    mb.summary(json!({ "subjects": ids.len(), "rejected": rejected, "grid_points": grid.len() }));
    mb.write(&a.out_dir.join("manifest.json"))
}

fn load_data(a: &DataArgs, mb: &mut ManifestBuilder) -> CliResult<Dataset> {
    mb.input(&a.outcomes)?;
    let y = read_wide(&a.outcomes)?;
    let predictors = match (&a.predictors, a.submodel) {
        (Some(p), Submodel::Qfosr) => {
            warn!("ignoring {} under the qfosr submodel", p.display());
            None
        }
        (Some(p), _) => {
            mb.input(p)?;
            let x = read_wide(p)?;
            if x.grid.points() != y.grid.points() {
                return Err(CliError::Data("predictor and outcome grids differ".into()));
            }
            if let Some(e) = id_mismatch(&y.ids, &x.ids, &p.display().to_string()) {
                return Err(e);
            }
            let by_id = x.by_id();
            Some(y.ids.iter().map(|id| {
                let q = by_id[id.as_str()];
                dorqf::quantile::QuantileFunction::new(Arc::clone(&y.grid), q.values().to_vec())
            }).collect::<Result<Vec<_>, _>>()?)
        }
        (None, Submodel::Dord) => {
            return Err(CliError::Usage("the dord submodel needs --predictors".into()));
        }
        (None, _) => None,
    };
    let (names, rows) = match (&a.covariates, a.submodel) {
        (Some(c), Submodel::Dord) => {
            warn!("ignoring {} under the dord submodel", c.display());
            (Vec::new(), vec![Vec::new(); y.ids.len()])
        }
        (Some(c), _) => {
            mb.input(c)?;
            let t = read_covariates(c, a.columns.as_deref())?;
            if let Some(e) = id_mismatch(&y.ids, &t.ids, &c.display().to_string()) {
                return Err(e);
            }
            let by_id = t.by_id();
            let rows = y.ids.iter().map(|id| by_id[id.as_str()].clone()).collect();
            (t.names.clone(), rows)
        }
        (None, Submodel::Qfosr) => {
            return Err(CliError::Usage("the qfosr submodel needs --covariates".into()));
        }
        (None, _) => {
            if a.columns.is_some() {
                return Err(CliError::Usage("--columns needs --covariates".into()));
            }
            (Vec::new(), vec![Vec::new(); y.ids.len()])
        }
    };
    Ok(Dataset::from_raw(RawData {
        subject_ids: y.ids.clone(),
        outcomes: y.functions,
        covariates: rows,
        covariate_names: names,
        predictors,
    })?)
}

fn fit_summary(fit: &DorqfFit) -> serde_json::Value {
    json!({
        "order": fit.order(),
        "coefficients": fit.layout.dim(),
        "n": fit.n,
        "rss_constrained": fit.rss_constrained,
        "rss_unconstrained": fit.rss_unconstrained,
        "active_constraints": fit.active_labels().iter().map(ToString::to_string).collect::<Vec<_>>(),
        "constraints": fit.constraints.rows(),
    })
}

pub fn fit(a: &FitArgs, threads: usize) -> CliResult<()> {
    let mut mb = ManifestBuilder::new("fit", a, threads)?;
    let data = load_data(&a.data, &mut mb)?;
    let mut cv_csv = None;
    let order = match (&a.order, &a.cv_orders) {
        (Some(n), _) => *n,
        (None, Some(orders)) => {
            let report = cross_validate(
                &data,
                &CvOptions {
                    orders: orders.clone(),
                    folds: a.folds,
                    seed: a.seed,
                    ridge: a.ridge,
                    ..CvOptions::default()
                },
            )?;
            cv_csv = Some(cv_table(&report));
            report.selected
        }
        (None, None) => FitOptions::default().order,
    };
    let options = FitOptions {
        order,
        ridge: a.ridge,
        pve: a.pve,
        point_estimate_only: a.point_only,
        ..FitOptions::default()
    };
    let mut fit = fit_with(&data, &options)?;
    fit.provenance = Provenance {
        seed: a.cv_orders.as_ref().map(|_| a.seed),
        created: None,
        input_digest: mb.input_digest(),
    };
    ensure_dir(&a.out_dir)?;
    emit(&mut mb, &a.out_dir, "fit.json", &(fit.to_archive().to_json()? + "\n"))?;

    let grid = fit.grid.points();
    let mut header = String::from("p");
    let mut curves = Vec::new();
    for j in 0..=fit.q() {
        header.push_str(&format!(",beta{j}"));
        curves.push(fit.target_curve(Target::Beta(j))?);
    }
    let mut coef = header + "\n";
    for (l, p) in grid.iter().enumerate() {
        coef.push_str(&fmt_f64(*p));
        for c in &curves {
            coef.push(',');
            coef.push_str(&fmt_f64(c[l]));
        }
        coef.push('\n');
    }
    emit(&mut mb, &a.out_dir, "coefficients.csv", &coef)?;
    if let Some(scale) = fit.predictor_scale {
        let xs: Vec<f64> = (0..TRANSPORT_POINTS).map(|i| i as f64 / (TRANSPORT_POINTS - 1) as f64).collect();
        let h = fit.transport_at(&xs)?;
        let mut t = String::from("x_scaled,x,h\n");
        for (x, v) in xs.iter().zip(&h) {
            t.push_str(&format!("{},{},{}\n", fmt_f64(*x), fmt_f64(scale.inverse(*x)), fmt_f64(*v)));
        }
        emit(&mut mb, &a.out_dir, "transport.csv", &t)?;
    }
    if let Some(c) = cv_csv {
        emit(&mut mb, &a.out_dir, "cv.csv", &c)?;
    }
    if a.export_constraints {
        emit(&mut mb, &a.out_dir, "constraints.csv", &fit.constraints.to_csv())?;
    }
    let summary = fit_summary(&fit);
    println!(
        "N = {}, K = {}, RSS constrained = {}, unconstrained = {}",
        fit.order(),
        fit.layout.dim(),
        fmt_f64(fit.rss_constrained),
        fmt_f64(fit.rss_unconstrained)
    );
    let labels = fit.active_labels();
    println!(
        "active constraints: {} of {}{}",
        labels.len(),
        fit.constraints.rows(),
        if labels.is_empty() {
            String::new()
        } else {
            format!(" ({})", labels.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))
        }
    );
    mb.summary(summary);
    mb.write(&a.out_dir.join("manifest.json"))
}

fn load_fit(path: &Path, mb: &mut ManifestBuilder) -> CliResult<DorqfFit> {
    mb.input(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(FitArchive::from_json(&text)?.into_fit()?)
}

pub fn predict(a: &PredictArgs, threads: usize) -> CliResult<()> {
    let mut mb = ManifestBuilder::new("predict", a, threads)?;
    let fit = load_fit(&a.fit, &mut mb)?;
    let predictors = match (&a.predictors, fit.predictor_scale.is_some()) {
        (Some(p), true) => {
            mb.input(p)?;
            let t = read_wide(p)?;
            if t.grid.points() != fit.grid.points() {
                return Err(CliError::Data("predictor grid differs from the fitted grid".into()));
            }
            Some(t)
        }
        (None, false) => None,
        (Some(_), false) => return Err(CliError::Usage("the model has no distributional predictor".into())),
        (None, true) => return Err(CliError::Usage("the model needs --predictors".into())),
    };
    let covariates = match (&a.covariates, fit.q()) {
        (Some(c), q) if q > 0 => {
            mb.input(c)?;
            Some(read_covariates(c, Some(&fit.covariate_names))?)
        }
        (None, 0) => None,
        (Some(_), _) => return Err(CliError::Usage("the model has no scalar covariates".into())),
        (None, _) => return Err(CliError::Usage("the model needs --covariates".into())),
    };
    let ids: Vec<String> = match (&covariates, &predictors) {
        (Some(c), Some(p)) => {
            if let Some(e) = id_mismatch(&c.ids, &p.ids, "the predictor file") {
                return Err(e);
            }
            c.ids.clone()
        }
        (Some(c), None) => c.ids.clone(),
        (None, Some(p)) => p.ids.clone(),
        (None, None) => vec!["intercept".into()],
    };
    let cov_by_id = covariates.as_ref().map(|c| c.by_id());
    let pred_by_id = predictors.as_ref().map(|p| p.by_id());
    let mut columns = Vec::with_capacity(ids.len());
    for id in &ids {
        let z: Vec<f64> = cov_by_id.as_ref().map_or_else(Vec::new, |m| m[id.as_str()].clone());
        let qx = pred_by_id.as_ref().map(|m| m[id.as_str()]);
        let q = fit
            .predict(&z, qx)
            .map_err(|e| CliError::Data(format!("subject '{id}': {e}")))?;
        columns.push(q.into_values());
    }
    ensure_dir(&a.out_dir)?;
    let cols: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
    emit(&mut mb, &a.out_dir, "predictions.csv", &wide_csv(fit.grid.points(), &ids, &cols))?;
    mb.summary(json!({ "subjects": ids.len() }));
    mb.write(&a.out_dir.join("manifest.json"))
}

fn sanitize(s: &str) -> String {
    s.replace([',', '\n', '"'], ";")
}

fn cv_table(report: &dorqf::model::CvReport) -> String {
    let mut out = String::from("order,cvsse,status");
    for v in 1..=report.folds {
        out.push_str(&format!(",fold_{v}"));
    }
    out.push('\n');
    for c in &report.candidates {
        out.push_str(&format!(
            "{},{},{}",
            c.order,
            c.cvsse.map_or_else(|| "NA".into(), fmt_f64),
            c.failure.as_deref().map_or_else(|| "ok".into(), sanitize)
        ));
        for v in 0..report.folds {
            out.push(',');
            out.push_str(&c.fold_errors.get(v).map_or_else(|| "NA".into(), |e| fmt_f64(*e)));
        }
        out.push('\n');
    }
    out
}

pub fn cv(a: &CvArgs, threads: usize) -> CliResult<()> {
    let mut mb = ManifestBuilder::new("cv", a, threads)?;
    let data = load_data(&a.data, &mut mb)?;
    let report = cross_validate(
        &data,
        &CvOptions {
            orders: a.orders.clone(),
            folds: a.folds,
            seed: a.seed,
            weighting: match a.weighting {
                Weighting::Quadrature => CvWeighting::Quadrature,
                Weighting::Unweighted => CvWeighting::Unweighted,
            },
            ridge: a.ridge,
            ..CvOptions::default()
        },
    )?;
    ensure_dir(&a.out_dir)?;
    emit(&mut mb, &a.out_dir, "cv.csv", &cv_table(&report))?;
    let mut summary = json!({ "selected": report.selected, "folds": report.folds, "seed": report.seed });
    if a.r2 {
        let options = FitOptions {
            order: report.selected,
            ridge: a.ridge,
            point_estimate_only: true,
            ..FitOptions::default()
        };
        summary["loocv_r2"] = json!(loocv_r_squared_with(&data, &options)?);
        if data.has_predictor() {
            summary["pava_loocv_r2"] = json!(pava_loocv_r_squared(&data)?);
        }
    }
    emit(&mut mb, &a.out_dir, "cv.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    println!("selected N = {}", report.selected);
    mb.summary(summary);
    mb.write(&a.out_dir.join("manifest.json"))
}

pub fn band(a: &BandArgs, threads: usize) -> CliResult<()> {
    let mut mb = ManifestBuilder::new("band", a, threads)?;
    let target: Target = a.target.parse().map_err(|e: dorqf::DorqfError| CliError::Usage(e.to_string()))?;
    if !(0.0..1.0).contains(&a.alpha) || a.alpha == 0.0 {
        return Err(CliError::Usage(format!("alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let fit = load_fit(&a.fit, &mut mb)?;
    let samples = projected_samples(&fit, target, a.samples, a.seed)?;
    let band = samples.band(a.alpha)?;
    let test = samples.p_value();
    let mut csv = String::from("p,center,sd,lower,upper\n");
    for l in 0..band.grid.len() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_f64(band.grid[l]),
            fmt_f64(band.center[l]),
            fmt_f64(band.pointwise_sd[l]),
            fmt_f64(band.lower[l]),
            fmt_f64(band.upper[l])
        ));
    }
    ensure_dir(&a.out_dir)?;
    emit(&mut mb, &a.out_dir, "band.csv", &csv)?;
    let summary = json!({
        "target": target.to_string(),
        "alpha": a.alpha,
        "samples": a.samples,
        "seed": a.seed,
        "critical": band.critical,
        "mean_width": band.mean_width(),
        "statistic": test.statistic,
        "p_value": test.p_value,
        "min_slack": samples.min_slack,
    });
    emit(&mut mb, &a.out_dir, "band.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    println!("critical value {}, global p = {}", fmt_f64(band.critical), fmt_f64(test.p_value));
    mb.summary(summary);
    mb.write(&a.out_dir.join("manifest.json"))
}

fn resolve_term(data: &Dataset, name: &str) -> CliResult<Term> {
    if name == "predictor" {
        return if data.has_predictor() {
            Ok(Term::Predictor)
        } else {
            Err(CliError::Usage("the data have no distributional predictor".into()))
        };
    }
    data.covariate_names()
        .iter()
        .position(|n| n == name)
        .map(Term::Covariate)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "unknown term '{name}'; available: {}",
                data.covariate_names()
                    .iter()
                    .map(String::as_str)
                    .chain(data.has_predictor().then_some("predictor"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })
}

pub fn test(a: &TestArgs, threads: usize) -> CliResult<()> {
    let mut mb = ManifestBuilder::new("test", a, threads)?;
    let data = load_data(&a.data, &mut mb)?;
    let term = resolve_term(&data, &a.drop)?;
    let options = FitOptions {
        order: a.order,
        ridge: a.ridge,
        ..FitOptions::default()
    };
    let result = match a.method {
        TestMethodArg::Bootstrap => {
            let b = a.samples.unwrap_or(dorqf::inference::DEFAULT_BOOTSTRAP_SAMPLES);
            bootstrap_effect_test(&data, &FitOptions { point_estimate_only: true, ..options }, term, b, a.seed)?
        }
        TestMethodArg::Band => {
            let Term::Covariate(j) = term else {
                return Err(CliError::Usage("the band test applies to scalar covariates".into()));
            };
            let fit = fit_with(&data, &options)?;
            let mut r = band_global_pvalue(&fit, Target::Beta(j + 1), a.samples.unwrap_or(DEFAULT_BAND_SAMPLES), a.seed)?;
            r.null_model = term.label(&data);
            r
        }
    };
    ensure_dir(&a.out_dir)?;
    let json = serde_json::to_string_pretty(&result)? + "\n";
    emit(&mut mb, &a.out_dir, "test.json", &json)?;
    println!("statistic {}, p = {}", fmt_f64(result.statistic), fmt_f64(result.p_value));
    mb.summary(serde_json::to_value(&result)?);
    mb.write(&a.out_dir.join("manifest.json"))
}

fn parse_l(values: &[String]) -> CliResult<Vec<Option<usize>>> {
    values
        .iter()
        .map(|v| match v.as_str() {
            "inf" => Ok(None),
            s => s
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("--L expects integers or 'inf', got '{s}'"))),
        })
        .collect()
}

fn study_grid(a: &SimulateArgs, table: Table) -> CliResult<StudyGrid> {
    let mut g = StudyGrid::standard(table);
    g.seed = a.seed;
    if let Some(n) = &a.n {
        g.ns = n.clone();
    }
    if let Some(l) = &a.l {
        g.ls = parse_l(l)?;
    }
    if let Some(r) = a.reps {
        g.reps = r;
    }
    if let Some(m) = a.m {
        g.m = m;
    }
    if let Some(v) = a.noise {
        g.noise_level = v;
    }
    if let Some(s) = a.noise_scale {
        g.noise_scale = match s {
            NoiseScaleArg::Sd => NoiseScale::StandardDeviation,
            NoiseScaleArg::Variance => NoiseScale::Variance,
        };
    }
    if let Some(s) = a.noise_mode {
        g.noise_mode = match s {
            NoiseModeArg::Before => NoiseMode::BeforeSampling,
            NoiseModeArg::After => NoiseMode::AfterQuantiles,
        };
    }
    if let Some(t) = a.test_size {
        g.test_size = t;
    }
    g.order = match (a.order, &a.cv_orders, a.folds) {
        (Some(n), _, _) => OrderChoice::Fixed(n),
        (None, orders, folds) => OrderChoice::CrossValidated {
            orders: orders.clone().unwrap_or_else(|| (1..=8).collect()),
            folds: folds.unwrap_or(5),
        },
    };
    if let Some(o) = &a.coverage_orders {
        g.coverage_orders = o.clone();
    }
    if let Some(v) = a.alpha {
        g.alpha = v;
    }
    if let Some(b) = a.band_samples {
        g.band_samples = b;
    }
    if let Some(d) = &a.d {
        g.ds = d.clone();
    }
    if let Some(o) = a.power_order {
        g.power_order = o;
    }
    if let Some(m) = a.power_method {
        g.power_method = match m {
            PowerMethodArg::Band => PowerMethod::JointBand,
            PowerMethodArg::Bootstrap => PowerMethod::Bootstrap {
                samples: a.bootstrap_samples,
            },
        };
    }
    if g.ns.is_empty() || g.ls.is_empty() || (table == Table::Power && g.ds.is_empty()) {
        return Err(CliError::Usage("empty study grid".into()));
    }
    Ok(g)
}

pub fn simulate(a: &SimulateArgs, threads: usize) -> CliResult<()> {
    let mut mb = ManifestBuilder::new("simulate", a, threads)?;
    ensure_dir(&a.out_dir)?;
    if a.export {
        return export(a, mb);
    }
    let table: Table = a
        .table
        .as_deref()
        .unwrap_or_default()
        .parse()
        .map_err(|e: dorqf::DorqfError| CliError::Usage(e.to_string()))?;
    let grid = study_grid(a, table)?;
    info!("running table {table} with {} replications per cell", grid.reps);
    let results = run_table(table, &grid)?;
    emit(&mut mb, &a.out_dir, &format!("table_{table}.csv"), &table_csv(table, &results)?)?;
    if let Some(r) = records_csv(&results) {
        emit(&mut mb, &a.out_dir, &format!("records_{table}.csv"), &r)?;
    }
    if let TableResults::Power(cells) = &results {
        emit(&mut mb, &a.out_dir, "power_curve.dat", &dorqf::sim::report::power_curve_data(cells))?;
    }
    mb.summary(json!({ "table": table.to_string(), "grid": grid, "failures": results.failures() }));
    mb.write(&a.out_dir.join("manifest.json"))
}

fn export(a: &SimulateArgs, mut mb: ManifestBuilder) -> CliResult<()> {
    let scenario: Scenario = a.scenario.parse().map_err(|e: dorqf::DorqfError| CliError::Usage(e.to_string()))?;
    let g = study_grid(a, Table::Beta1)?;
    let d = a.d.as_ref().and_then(|d| d.first().copied()).unwrap_or(1.0);
    let mut spec = g.spec(scenario, g.ns[0], g.ls[0], d);
    spec.reps = spec.reps.max(a.rep + 1);
    let rep = generate_scenario(&spec, a.rep)?;
    let data = &rep.train;
    let grid = data.grid().points();
    let ids = data.subject_ids().to_vec();
    let cols = |v: &[dorqf::quantile::QuantileFunction]| v.iter().map(|q| q.values().to_vec()).collect::<Vec<_>>();
    let y = cols(data.outcomes());
    emit(&mut mb, &a.out_dir, "outcomes.csv", &wide_csv(grid, &ids, &slices(&y)))?;
    if let (Some(ps), Some(scale)) = (data.predictors(), data.predictor_scale()) {
        let x: Vec<Vec<f64>> = ps.iter().map(|q| q.values().iter().map(|&u| scale.inverse(u)).collect()).collect();
        emit(&mut mb, &a.out_dir, "predictors.csv", &wide_csv(grid, &ids, &slices(&x)))?;
    }
    let covariate_csv = |ids: &[String], rows: &[Vec<f64>], names: &[String]| {
        let mut s = String::from("subject_id");
        for n in names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (id, row) in ids.iter().zip(rows) {
            s.push_str(id);
            for v in row {
                s.push(',');
                s.push_str(&fmt_f64(*v));
            }
            s.push('\n');
        }
        s
    };
    if data.q() > 0 {
        emit(&mut mb, &a.out_dir, "covariates.csv", &covariate_csv(&ids, data.covariates(), data.covariate_names()))?;
    }
    let test_ids: Vec<String> = (0..rep.test.outcomes.len()).map(|i| format!("t{:04}", i + 1)).collect();
    if !test_ids.is_empty() {
        let ty = cols(&rep.test.outcomes);
        let tx = cols(&rep.test.predictors);
        emit(&mut mb, &a.out_dir, "test_outcomes.csv", &wide_csv(grid, &test_ids, &slices(&ty)))?;
        emit(&mut mb, &a.out_dir, "test_predictors.csv", &wide_csv(grid, &test_ids, &slices(&tx)))?;
        if data.q() > 0 {
            emit(
                &mut mb,
                &a.out_dir,
                "test_covariates.csv",
                &covariate_csv(&test_ids, &rep.test.covariates, data.covariate_names()),
            )?;
        }
    }
    let mut truth = String::from("p,beta0,beta1,gamma\n");
    for &p in grid {
        truth.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(p),
            fmt_f64(rep.truth.beta0(p)),
            fmt_f64(rep.truth.beta1(p)),
            fmt_f64(rep.truth.gamma(p))
        ));
    }
    emit(&mut mb, &a.out_dir, "truth.csv", &truth)?;
    mb.summary(json!({ "spec": spec, "rep": a.rep }));
    mb.write(&a.out_dir.join("manifest.json"))
}
