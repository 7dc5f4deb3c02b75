use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use log::{info, warn};
use msgam::bootstrap::{bootstrap_bands, evaluation_grid, BootstrapOptions};
use msgam::experiments::{
    forecast_scores, mise_grid, write_forecast_csv, ForecastModel, ForecastOptions, ScenarioConfig, ScenarioId,
};
use msgam::model::{state_log_densities, TermChoice};
use msgam::smoothing::{aicp_select, cv_select, CvOptions, LambdaGrid, SelectionMethod, SelectionResult};
use msgam::{fit, viterbi_decode, FitOptions, FitResult, ModelFile, MsGamSpec, SmoothingVector, SpecOptions};
use msgam::{Family, TimeSeriesData};

use crate::config::RunConfig;
use crate::dataset::{write_series, write_states, Table};
use crate::error::CliError;

/// Paths and overrides shared by every command.
pub struct Context {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl Context {
    fn config(&self) -> Result<RunConfig, CliError> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| CliError::Input("--config is required for this command".into()))?;
        let mut c = RunConfig::load(path)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }

    fn table(&self) -> Result<Table, CliError> {
        let path = self
            .data
            .as_deref()
            .ok_or_else(|| CliError::Input("--data is required for this command".into()))?;
        Table::load(path)
    }

    fn model(&self) -> Result<ModelFile, CliError> {
        let path = self
            .model
            .as_deref()
            .ok_or_else(|| CliError::Input("--model is required for this command".into()))?;
        ModelFile::load(path).map_err(|e| CliError::Input(format!("cannot load model {}: {e}", path.display())))
    }

    fn output(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.path(name)?;
        let f = File::create(&path).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
        Ok(BufWriter::new(f))
    }

    /// Path inside the output directory, creating the directory if needed.
    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Input(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(self.out.join(name))
    }
}

fn build_spec(config: &RunConfig, data: &TimeSeriesData) -> Result<MsGamSpec, CliError> {
    let family = config.family()?;
    data.validate_for(family)?;
    let terms = match &config.terms {
        Some(t) => {
            if t.len() != data.n_covariates() {
                return Err(CliError::Input(format!(
                    "config lists {} terms, data has {} covariates",
                    t.len(),
                    data.n_covariates()
                )));
            }
            t.clone()
        }
        None => vec![TermChoice::Smooth; data.n_covariates()],
    };
    let opts = SpecOptions {
        k: config.k,
        penalty_order: config.penalty_order,
        init_mode: config.init_mode,
    };
    Ok(MsGamSpec::new(family, config.states, data, &terms, opts)?)
}

fn fit_options(config: &RunConfig) -> FitOptions {
    FitOptions {
        n_restarts: config.restarts,
        seed: config.seed,
        ..FitOptions::default()
    }
}

fn select(config: &RunConfig, spec: &MsGamSpec, data: &TimeSeriesData) -> Result<SelectionResult, CliError> {
    let grid = LambdaGrid::shared(spec.n_states, spec.terms.len(), &config.grid_values(), config.tying)?;
    let opts = fit_options(config);
    let result = match config.selection {
        SelectionMethod::Aicp => aicp_select(spec, data, &grid, &opts)?,
        SelectionMethod::Cv => cv_select(
            spec,
            data,
            &grid,
            &CvOptions {
                folds: config.folds,
                calib_fraction: config.calib_fraction,
                mode: config.fold_mode,
                seed: config.seed,
                fit: FitOptions {
                    compute_edf: false,
                    ..opts
                },
            },
        )?,
    };
    info!("selected lambda {:?} by {}", result.lambda.values, result.method.name());
    Ok(result)
}

pub fn cmd_fit(ctx: &Context) -> Result<(), CliError> {
    let config = ctx.config()?;
    let table = ctx.table()?;
    let data = table.series(config.response.as_deref())?;
    let spec = build_spec(&config, &data)?;
    let opts = fit_options(&config);
    let result = match &config.lambda {
        Some(l) => {
            let lambda = SmoothingVector::new(l.clone())?;
            fit::fit(&spec, &data, &lambda, &opts)?
        }
        None => {
            let sel = select(&config, &spec, &data)?;
            sel.write_csv(&spec, ctx.output("scores.csv")?)?;
            match sel.chosen_fit {
                Some(f) => f,
                None => fit::fit(&spec, &data, &sel.lambda, &opts)?,
            }
        }
    };
    let model = ModelFile::new(&spec, &result);
    model.save(&ctx.path("model.json")?)?;
    std::fs::write(ctx.path("summary.txt")?, summary_text(&spec, &result))?;
    write_curves(&spec, &result, &data, ctx.output("curves.csv")?)?;
    println!(
        "log L = {:.4}, AIC_p = {}, converged = {}",
        result.loglik_unpenalized,
        fmt_opt(result.edf.map(|_| result.aic_p())),
        result.converged
    );
    if !result.converged {
        return Err(CliError::NonConvergence(
            "optimizer did not converge; outputs written with converged = false".into(),
        ));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "unavailable".to_string(), |x| format!("{x:.4}"))
}

pub fn summary_text(spec: &MsGamSpec, result: &FitResult) -> String {
    let p = &result.params;
    let mut s = String::new();
    let _ = writeln!(s, "family: {}", spec.family.name());
    let _ = writeln!(s, "states: {}", spec.n_states);
    let _ = writeln!(s, "converged: {}", result.converged);
    let _ = writeln!(s, "log-likelihood: {:.6}", result.loglik_unpenalized);
    let _ = writeln!(s, "penalized log-likelihood: {:.6}", result.loglik_penalized);
    let _ = writeln!(s, "effective degrees of freedom: {}", fmt_opt(result.edf));
    let _ = writeln!(s, "AIC_p: {}", fmt_opt(result.edf.map(|_| result.aic_p())));
    let _ = writeln!(s, "restarts used: {}", result.n_restarts_used);
    if spec.n_states > 1 {
        let _ = writeln!(s, "transition matrix:");
        for row in p.chain.tpm_flat().chunks(spec.n_states) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "  {}", cells.join("  "));
        }
        let init: Vec<String> = p.chain.initial().iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "initial distribution: {}", init.join("  "));
    }
    for i in 0..spec.n_states {
        let _ = writeln!(s, "state {}:", i + 1);
        let _ = writeln!(s, "  intercept: {:.6}", p.intercepts[i]);
        if let Some(d) = p.dispersion(i) {
            let _ = writeln!(s, "  dispersion: {:.6}", d.value());
        }
        for (q, term) in spec.terms.iter().enumerate() {
            let kind = if term.is_smooth() { "smooth" } else { "linear" };
            let _ = writeln!(s, "  {} ({kind}): lambda = {}", term.name, result.lambda.get(i, q));
        }
    }
    s
}

/// `state, covariate, x, value` on a grid over each covariate's range.
fn write_curves<W: std::io::Write>(
    spec: &MsGamSpec,
    result: &FitResult,
    data: &TimeSeriesData,
    out: W,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state", "covariate", "x", "value"])?;
    for i in 0..spec.n_states {
        for (q, term) in spec.terms.iter().enumerate() {
            for x in evaluation_grid(data, q, 100) {
                let v = result.params.term_value(spec, i, q, x);
                w.write_record([(i + 1).to_string(), term.name.clone(), x.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_select(ctx: &Context) -> Result<(), CliError> {
    let config = ctx.config()?;
    let data = ctx.table()?.series(config.response.as_deref())?;
    let spec = build_spec(&config, &data)?;
    let sel = select(&config, &spec, &data)?;
    sel.write_csv(&spec, ctx.output("scores.csv")?)?;
    println!("method: {}", sel.method.name());
    for (i, row) in sel.lambda.values.iter().enumerate() {
        for (q, term) in spec.terms.iter().enumerate() {
            println!("state {} {}: lambda = {}", i + 1, term.name, row[q]);
        }
    }
    if sel.scores.iter().all(|s| !s.is_finite()) {
        return Err(CliError::NonConvergence("no grid point produced a usable fit".into()));
    }
    Ok(())
}

pub fn cmd_simulate(ctx: &Context, scenario: Option<&str>) -> Result<(), CliError> {
    let mut config = match scenario {
        Some(id) => {
            let id: ScenarioId = id.parse()?;
            ScenarioConfig::builtin(id)?
        }
        None => ctx
            .config()?
            .scenario
            .ok_or_else(|| CliError::Input("give --scenario or a config with a `scenario` section".into()))?,
    };
    if let Some(s) = ctx.seed {
        config.seed = s;
    }
    let sim = config.simulate(config.seed)?;
    let stem = match config.id {
        ScenarioId::I => "scenario_I".to_string(),
        ScenarioId::II => "scenario_II".to_string(),
        ScenarioId::III => "scenario_III".to_string(),
        ScenarioId::Custom => "custom".to_string(),
    };
    let stem = format!("{stem}_seed{}", config.seed);
    write_series(&sim.data, "y", ctx.output(&format!("{stem}.csv"))?)?;
    let time: Vec<i64> = (1..=sim.data.len() as i64).collect();
    write_states(&time, &sim.states, ctx.output(&format!("{stem}_states.csv"))?)?;

    let mut w = csv::Writer::from_writer(ctx.output(&format!("{stem}_truth.csv"))?);
    w.write_record(["state", "covariate", "x", "value"])?;
    let grid = mise_grid(config.covariate_range);
    for (i, curves) in config.truths.iter().enumerate() {
        for (q, f) in curves.iter().enumerate() {
            for &x in &grid {
                w.write_record([
                    (i + 1).to_string(),
                    sim.data.covariate_names[q].clone(),
                    x.to_string(),
                    f.eval(x).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    println!("wrote {} observations to {}", sim.data.len(), ctx.path(&format!("{stem}.csv"))?.display());
    Ok(())
}

pub fn cmd_decode(ctx: &Context, response: Option<&str>) -> Result<(), CliError> {
    let model = ctx.model()?;
    let table = ctx.table()?;
    let names: Vec<String> = model.spec.terms.iter().map(|t| t.name.clone()).collect();
    let data = table.series_for(response, &names)?;
    data.validate_for(model.spec.family)?;
    let ld = state_log_densities(&model.spec, &model.params, &data)?;
    let states = viterbi_decode(&model.params.chain, &ld, &data.missing)?;
    write_states(&table.time_labels(), &states, ctx.output("states.csv")?)?;
    println!("decoded {} time points", states.len());
    Ok(())
}

pub fn cmd_bands(ctx: &Context) -> Result<(), CliError> {
    let model = ctx.model()?;
    let config = match &ctx.config {
        Some(_) => Some(ctx.config()?),
        None => None,
    };
    let table = ctx.table()?;
    let names: Vec<String> = model.spec.terms.iter().map(|t| t.name.clone()).collect();
    let response = config.as_ref().and_then(|c| c.response.clone());
    let data = table.series_for(response.as_deref(), &names)?;
    data.validate_for(model.spec.family)?;
    let fitted = FitResult::from_model_file(&model)?;
    let defaults = BootstrapOptions::default();
    let opts = match &config {
        Some(c) => BootstrapOptions {
            replicates: c.bootstrap.replicates,
            level: c.bootstrap.level,
            grid_size: c.bootstrap.grid_size,
            seed: c.seed,
            ..defaults
        },
        None => BootstrapOptions {
            seed: ctx.seed.unwrap_or(0),
            ..defaults
        },
    };
    let bands = bootstrap_bands(&model.spec, &fitted, &data, &opts)?;
    bands.write_csv(&model.spec, ctx.output("bands.csv")?)?;
    if bands.failed > 0 {
        warn!("{} of {} replicate fits failed", bands.failed, bands.replicates);
    }
    for b in &bands.bands {
        println!(
            "state {} {}: simultaneous scale {:.4}, {} of {} replicates inside",
            b.state + 1,
            model.spec.terms[b.covariate].name,
            b.scale,
            b.inside,
            b.replicates.len()
        );
    }
    Ok(())
}

pub fn cmd_forecast(ctx: &Context) -> Result<(), CliError> {
    let config = ctx.config()?;
    let family: Family = config.family()?;
    let data = ctx.table()?.series(config.response.as_deref())?;
    data.validate_for(family)?;
    let fc = config
        .forecast
        .as_ref()
        .ok_or_else(|| CliError::Input("config needs a `forecast` section".into()))?;
    if fc.u_start > data.len() {
        return Err(CliError::Input(format!(
            "forecast.u_start = {} exceeds the series length {}",
            fc.u_start,
            data.len()
        )));
    }
    let models: Vec<ForecastModel> = fc.models.clone();
    let defaults = ForecastOptions::default();
    let opts = ForecastOptions {
        u_start: fc.u_start,
        stride: fc.stride,
        k: config.k,
        grid: config.grid.clone().unwrap_or(defaults.grid),
        tying: config.tying,
        n_restarts: config.restarts,
        seed: config.seed,
    };
    let results = forecast_scores(family, &data, &models, &opts)?;
    write_forecast_csv(&results, ctx.output("forecast_scores.csv")?)?;
    let mut w = csv::Writer::from_writer(ctx.output("forecast_totals.csv")?);
    w.write_record(["model", "total", "refits", "failed_refits"])?;
    println!("{:<12} {:>14}", "model", "total score");
    for m in &results {
        w.write_record([m.name.clone(), m.total.to_string(), m.refits.to_string(), m.failed_refits.to_string()])?;
        println!("{:<12} {:>14.3}", m.name, m.total);
    }
    w.flush()?;
    Ok(())
}
