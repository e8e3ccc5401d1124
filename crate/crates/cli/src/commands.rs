//! One function per subcommand. Each writes its artifacts under the out-dir
//! and returns their paths; the caller records them in the manifest.

use std::path::{Path, PathBuf};

use llab_autodiff::ParamVector;
use llab_core::cka::{cka_grid, CkaMatrix};
use llab_core::corruption::{mean_std, robustness_sweep, NoiseSpec, Stressor, SweepEntry};
use llab_core::data::{Dataset, DatasetSpec};
use llab_core::hessian::{analyze, HessianConfig, HessianReport};
use llab_core::landscape::{eigen_direction, random_direction, random_pair, scan, ScanRange};
use llab_core::model::{build_model, evaluate, Model};
use llab_core::modeconn::{max_mc, BendConfig, MaxMcReport, ModelLoss};
use llab_core::train::{train, Regularizer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Run};
use crate::error::{CliError, Result};
use crate::manifest::{write_atomic, Manifest};
use crate::plot::{self, Chart, PlotKind, Series};

pub const EVAL_BATCH: usize = 256;

/// Effective configuration plus where and under which command line to write.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub command: String,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, command: String) -> Self {
        let out = cfg.out_dir();
        Context { cfg, out, command }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, bytes)?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn record(&self, files: &[PathBuf]) -> Result<()> {
        Manifest::record(&self.out, &self.command, &self.cfg.hash(), files)?;
        Ok(())
    }

    pub fn checkpoint_path(&self, run: &Run) -> PathBuf {
        self.path(&format!("{}.ckpt", stem(&self.cfg.model, run.variant, run.bits, run.seed)))
    }

    /// Explicit paths win; otherwise every grid cell's checkpoint.
    fn checkpoints(&self, explicit: &[PathBuf]) -> Vec<PathBuf> {
        if explicit.is_empty() {
            self.cfg.runs().iter().map(|r| self.checkpoint_path(r)).collect()
        } else {
            explicit.to_vec()
        }
    }

    fn hessian_config(&self, k: usize, probes: usize) -> HessianConfig {
        let h = &self.cfg.hessian;
        HessianConfig { k, tol: h.tol, max_iters: h.max_iters, probes, seed: h.seed, batch_size: h.batch_size }
    }
}

/// `{model}_{variant}_b{bits}_s{seed}`, the file stem of one trained instance.
pub fn stem(model: &str, variant: Regularizer, bits: u32, seed: u64) -> String {
    format!("{}_{}_b{}_s{}", model, variant.label(), bits, seed)
}

/// A checkpoint opened for analysis.
pub struct Loaded {
    pub stem: String,
    pub ck: Checkpoint,
    pub model: Model,
    pub params: ParamVector,
}

impl Loaded {
    pub fn open(path: &Path) -> Result<Self> {
        let (ck, model, params) = Checkpoint::open(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Loaded { stem, ck, model, params })
    }

    pub fn variant(&self) -> Regularizer {
        self.ck.echo.train.regularizer
    }

    pub fn bits(&self) -> Option<u32> {
        self.ck.echo.train.bits
    }
}

fn open_all(paths: &[PathBuf]) -> Result<Vec<Loaded>> {
    paths.iter().map(|p| Loaded::open(p)).collect()
}

/// Regenerates each distinct dataset once; returns it per checkpoint.
fn datasets(loaded: &[Loaded]) -> Result<Vec<std::sync::Arc<Dataset>>> {
    let mut cache: Vec<(DatasetSpec, std::sync::Arc<Dataset>)> = Vec::new();
    let mut out = Vec::new();
    for l in loaded {
        let spec = l.ck.echo.dataset;
        let ds = match cache.iter().find(|(s, _)| *s == spec) {
            Some((_, d)) => d.clone(),
            None => {
                let d = std::sync::Arc::new(spec.generate()?);
                cache.push((spec, d.clone()));
                d
            }
        };
        out.push(ds);
    }
    Ok(out)
}

fn shared_dataset(loaded: &[Loaded]) -> Result<Dataset> {
    let first = loaded.first().ok_or_else(|| CliError::config("no checkpoints given"))?.ck.echo.dataset;
    if let Some(l) = loaded.iter().find(|l| l.ck.echo.dataset != first) {
        return Err(CliError::config(format!("{} was trained on a different dataset", l.stem)));
    }
    Ok(first.generate()?)
}

// ---------------------------------------------------------------- train

pub fn cmd_train(ctx: &Context) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let data = DatasetSpec { task: cfg.task(), size: cfg.data.size, seed: cfg.data.seed }.generate()?;
    let files = cfg
        .runs()
        .par_iter()
        .map(|run| train_one(ctx, &data, run))
        .collect::<Result<Vec<_>>>()?;
    Ok(files.into_iter().flatten().collect())
}

fn train_one(ctx: &Context, data: &Dataset, run: &Run) -> Result<Vec<PathBuf>> {
    let name = stem(&ctx.cfg.model, run.variant, run.bits, run.seed);
    let (model, init) = build_model(ctx.cfg.spec(), run.seed)?;
    let trained = train(&model, init, data, &ctx.cfg.train_config(run))?;
    let ck = ctx.checkpoint_path(run);
    Checkpoint::from_trained(&trained).save(&ck)?;
    let hist = ctx.write(&format!("{}_history.csv", name), trained.history_csv().as_bytes())?;
    log::info!("trained {}", name);
    Ok(vec![ck, hist])
}

// ---------------------------------------------------------------- hessian

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianArtifact {
    pub checkpoint: String,
    pub model: String,
    pub variant: String,
    pub bits: Option<u32>,
    pub seed: u64,
    pub clean_loss: f64,
    pub config: HessianConfig,
    #[serde(flatten)]
    pub report: HessianReport,
}

pub fn cmd_hessian(ctx: &Context, explicit: &[PathBuf], k: Option<usize>) -> Result<Vec<PathBuf>> {
    let loaded = open_all(&ctx.checkpoints(explicit))?;
    let data = datasets(&loaded)?;
    let hc = ctx.hessian_config(k.unwrap_or(ctx.cfg.hessian.k), ctx.cfg.hessian.probes);
    loaded
        .par_iter()
        .zip(data.par_iter())
        .map(|(l, d)| {
            let report = analyze(&l.model, &l.params, &d.test, &hc)?;
            let art = HessianArtifact {
                checkpoint: format!("{}.ckpt", l.stem),
                model: l.ck.model.clone(),
                variant: l.variant().label().into(),
                bits: l.bits(),
                seed: l.ck.seed,
                clean_loss: evaluate(&l.model, &l.params, &d.test, EVAL_BATCH)?,
                config: hc.clone(),
                report,
            };
            log::info!("hessian {}", l.stem);
            ctx.write_json(&format!("{}_hessian.json", l.stem), &art)
        })
        .collect()
}

// ---------------------------------------------------------------- landscape

pub fn cmd_landscape(ctx: &Context, explicit: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let loaded = open_all(&ctx.checkpoints(explicit))?;
    let data = datasets(&loaded)?;
    let files = loaded
        .par_iter()
        .zip(data.par_iter())
        .map(|(l, d)| landscape_one(ctx, l, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(files.into_iter().flatten().collect())
}

fn landscape_one(ctx: &Context, l: &Loaded, d: &Dataset) -> Result<Vec<PathBuf>> {
    let ls = &ctx.cfg.landscape;
    let range = ScanRange { nu_min: ls.nu_min, nu_max: ls.nu_max, steps: ls.steps };
    let sigma = random_direction(&l.model, &l.params, ls.seed)?;
    let random = scan(&l.model, &l.params, &d.test, &sigma, None, range, ls.batch_size)?;
    // Only the top eigenvector is needed here, so a single trace probe suffices.
    let rep = analyze(&l.model, &l.params, &d.test, &ctx.hessian_config(1, 1))?;
    let eigen = scan(&l.model, &l.params, &d.test, &eigen_direction(&rep, 1)?, None, range, ls.batch_size)?;
    let mut files = vec![
        ctx.write(&format!("{}_landscape_random.csv", l.stem), random.csv().as_bytes())?,
        ctx.write(&format!("{}_landscape_eigen.csv", l.stem), eigen.csv().as_bytes())?,
    ];
    let series = |label: &str, g: &llab_core::landscape::LandscapeGrid| Series {
        label: label.into(),
        points: g.alphas.iter().zip(g.profile()).map(|(&a, v)| (a, v.unwrap_or(f64::NAN))).collect(),
    };
    let chart = Chart {
        title: l.stem.clone(),
        x_label: "alpha".into(),
        y_label: "loss".into(),
        series: vec![series("random", &random), series("eigen-1", &eigen)],
    };
    files.push(ctx.write(&format!("{}_landscape.svg", l.stem), plot::render_svg(&chart, PlotKind::MultiLine)?.as_bytes())?);
    if ls.two_d {
        let (s, e) = random_pair(&l.model, &l.params, ls.seed)?;
        let r2 = ScanRange { nu_min: ls.nu_min, nu_max: ls.nu_max, steps: ls.steps_2d };
        let grid = scan(&l.model, &l.params, &d.test, &s, Some(&e), r2, ls.batch_size)?;
        files.push(ctx.write(&format!("{}_landscape_2d.csv", l.stem), grid.csv().as_bytes())?);
    }
    log::info!("landscape {}", l.stem);
    Ok(files)
}

// ---------------------------------------------------------------- grouping

/// Checkpoints sharing a variant and bit width, one per seed.
struct Group {
    name: String,
    paths: Vec<PathBuf>,
}

fn groups(ctx: &Context, explicit: &[PathBuf], prefix: &str) -> Vec<Group> {
    if !explicit.is_empty() {
        return vec![Group { name: format!("{}_custom", prefix), paths: explicit.to_vec() }];
    }
    let mut out = Vec::new();
    for v in ctx.cfg.variant_list() {
        for &b in &ctx.cfg.bits {
            let paths = ctx.cfg.seeds.iter().map(|&s| ctx.checkpoint_path(&Run { bits: b, variant: v, seed: s })).collect();
            out.push(Group { name: format!("{}_{}_b{}", prefix, v.label(), b), paths });
        }
    }
    out
}

// ---------------------------------------------------------------- cka

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaArtifact {
    pub checkpoints: Vec<String>,
    pub seed: u64,
    pub clean: CkaMatrix,
    /// Same models, other sample counts.
    pub sample_sweep: Vec<CkaMatrix>,
    /// Same samples under Gaussian input noise.
    pub noisy: Vec<CkaMatrix>,
}

pub fn cmd_cka(ctx: &Context, explicit: &[PathBuf]) -> Result<Vec<PathBuf>> {
    groups(ctx, explicit, "cka").par_iter().map(|g| cka_group(ctx, g)).collect()
}

fn cka_group(ctx: &Context, g: &Group) -> Result<PathBuf> {
    let c = &ctx.cfg.cka;
    let loaded = open_all(&g.paths)?;
    let data = shared_dataset(&loaded)?;
    let models: Vec<(&Model, &ParamVector)> = loaded.iter().map(|l| (&l.model, &l.params)).collect();
    let clean = cka_grid(&models, &data.test, c.samples, None, c.seed)?;
    let sample_sweep =
        c.sample_sweep.iter().map(|&m| cka_grid(&models, &data.test, m, None, c.seed)).collect::<llab_core::Result<_>>()?;
    let noisy = c
        .noise_sigmas
        .iter()
        .map(|&s| cka_grid(&models, &data.test, c.samples, Some(&NoiseSpec::gaussian(s, c.seed)), c.seed))
        .collect::<llab_core::Result<_>>()?;
    let art = CkaArtifact {
        checkpoints: loaded.iter().map(|l| format!("{}.ckpt", l.stem)).collect(),
        seed: c.seed,
        clean,
        sample_sweep,
        noisy,
    };
    log::info!("{}", g.name);
    ctx.write_json(&format!("{}.json", g.name), &art)
}

// ---------------------------------------------------------------- modeconn

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeconnArtifact {
    pub checkpoints: Vec<String>,
    pub points: usize,
    pub bends: BendConfig,
    #[serde(flatten)]
    pub report: MaxMcReport,
}

pub fn cmd_modeconn(ctx: &Context, explicit: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let files = groups(ctx, explicit, "modeconn").par_iter().map(|g| modeconn_group(ctx, g)).collect::<Result<Vec<_>>>()?;
    Ok(files.into_iter().flatten().collect())
}

fn modeconn_group(ctx: &Context, g: &Group) -> Result<Vec<PathBuf>> {
    let mc = &ctx.cfg.modeconn;
    let loaded = open_all(&g.paths)?;
    let data = shared_dataset(&loaded)?;
    // Curves run through the float graph between the deployed (dequantized) weights.
    let model = loaded[0].model.with_quantization(None);
    if let Some(l) = loaded.iter().find(|l| l.model.spec() != model.spec()) {
        return Err(CliError::config(format!("{} has a different architecture", l.stem)));
    }
    let loss = ModelLoss { model: &model, train: &data.train, eval: &data.test, batch_size: mc.batch_size, seed: mc.seed };
    let bends = BendConfig {
        k: mc.bends,
        epochs: mc.epochs,
        learning_rate: mc.learning_rate,
        optimizer: ctx.cfg.train.optimizer,
        seed: mc.seed,
    };
    let endpoints: Vec<ParamVector> = loaded.iter().map(|l| l.params.clone()).collect();
    let report = max_mc(&endpoints, &loss, &bends, mc.points)?;
    let mut files = Vec::new();
    for p in &report.pairs {
        files.push(ctx.write(&format!("{}_{}-{}.csv", g.name, p.models.0, p.models.1), p.report.csv().as_bytes())?);
    }
    let art = ModeconnArtifact {
        checkpoints: loaded.iter().map(|l| format!("{}.ckpt", l.stem)).collect(),
        points: mc.points,
        bends,
        report,
    };
    files.push(ctx.write_json(&format!("{}.json", g.name), &art)?);
    log::info!("{}", g.name);
    Ok(files)
}

// ---------------------------------------------------------------- corrupt

pub const STRESSORS: [&str; 4] = ["gaussian", "salt_pepper", "fkeras", "random_flips"];

fn stressor(ctx: &Context, name: &str) -> Result<Stressor> {
    let c = &ctx.cfg.corruption;
    Ok(match name {
        "gaussian" => Stressor::Gaussian { percents: c.gaussian_percents.clone() },
        "salt_pepper" => Stressor::SaltPepper { probabilities: c.salt_pepper.clone() },
        "fkeras" => Stressor::FkerasFlips { counts: c.fkeras_counts.clone(), k_eigs: c.k_eigs },
        "random_flips" => Stressor::RandomFlips { counts: c.random_counts.clone() },
        other => {
            return Err(CliError::config(format!("unknown stressor '{}', expected one of {}", other, STRESSORS.join(", "))))
        }
    })
}

pub fn cmd_corrupt(ctx: &Context, names: &[String]) -> Result<Vec<PathBuf>> {
    let names: Vec<String> = if names.is_empty() || names.iter().any(|n| n == "all") {
        STRESSORS.iter().map(|s| s.to_string()).collect()
    } else {
        names.to_vec()
    };
    let stressors = names.iter().map(|n| stressor(ctx, n)).collect::<Result<Vec<_>>>()?;
    let runs = ctx.cfg.runs();
    let loaded = open_all(&runs.iter().map(|r| ctx.checkpoint_path(r)).collect::<Vec<_>>())?;
    let data = shared_dataset(&loaded)?;
    let c = &ctx.cfg.corruption;
    let hessians: Vec<Option<HessianReport>> = if stressors.iter().any(|s| matches!(s, Stressor::FkerasFlips { .. })) {
        let hc = ctx.hessian_config(c.k_eigs, 1);
        loaded.par_iter().map(|l| analyze(&l.model, &l.params, &data.test, &hc).map(Some)).collect::<llab_core::Result<_>>()?
    } else {
        vec![None; loaded.len()]
    };
    let entries: Vec<SweepEntry> = loaded
        .iter()
        .zip(&runs)
        .zip(&hessians)
        .map(|((l, r), h)| SweepEntry {
            bits: r.bits,
            variant: r.variant.label().into(),
            seed: r.seed,
            model: &l.model,
            params: &l.params,
            hessian: h.as_ref(),
        })
        .collect();
    let mut files = Vec::new();
    for s in &stressors {
        let curve = robustness_sweep(&entries, s, &data.test, c.batch_size, c.seed)?;
        files.push(ctx.write(&format!("robustness_{}.csv", s.label()), curve.csv().as_bytes())?);
        files.push(ctx.write_json(&format!("robustness_{}.json", s.label()), &curve)?);
        log::info!("robustness {}", s.label());
    }
    Ok(files)
}

// ---------------------------------------------------------------- sweep

/// Trains the grid, then runs every enabled analysis on it, then aggregates.
/// Each stage is recorded in the manifest as it finishes.
pub fn cmd_sweep(ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = ctx.cfg.metrics.clone();
    let mut all = Vec::new();
    let mut stage = |files: Vec<PathBuf>| -> Result<()> {
        ctx.record(&files)?;
        all.extend(files);
        Ok(())
    };
    stage(cmd_train(ctx)?)?;
    if m.hessian {
        stage(cmd_hessian(ctx, &[], None)?)?;
    }
    if m.landscape {
        stage(cmd_landscape(ctx, &[])?)?;
    }
    if m.cka && ctx.cfg.seeds.len() >= 2 {
        stage(cmd_cka(ctx, &[])?)?;
    }
    if m.modeconn && ctx.cfg.seeds.len() >= 2 {
        stage(cmd_modeconn(ctx, &[])?)?;
    }
    if m.corruption {
        stage(cmd_corrupt(ctx, &[])?)?;
    }
    stage(cmd_report(ctx)?)?;
    Ok(all)
}

// ---------------------------------------------------------------- report

/// Renders one CSV. The SVG goes next to it unless `output` is given.
pub fn cmd_plot(csv_path: &Path, kind: PlotKind, output: Option<&Path>) -> Result<PathBuf> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| CliError::io(csv_path, e))?;
    let title = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let svg = plot::emit_plot(&text, kind, &title)?;
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| csv_path.with_extension("svg"));
    write_atomic(&out, svg.as_bytes())?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Regularizer,
    pub bits: u32,
    pub seed: u64,
    pub test_loss: f64,
    pub trace: Option<f64>,
    pub trace_stderr: Option<f64>,
    pub lambda_1: Option<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    match std::fs::read_to_string(path) {
        Ok(t) => serde_json::from_str(&t)
            .map(Some)
            .map_err(|e| CliError::config(format!("{}: {}", path.display(), e))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-instance clean loss (recomputed from the checkpoint) and curvature.
pub fn summary_rows(ctx: &Context) -> Result<Vec<SummaryRow>> {
    let runs: Vec<Run> = ctx.cfg.runs().into_iter().filter(|r| ctx.checkpoint_path(r).exists()).collect();
    let loaded = open_all(&runs.iter().map(|r| ctx.checkpoint_path(r)).collect::<Vec<_>>())?;
    let data = datasets(&loaded)?;
    runs.par_iter()
        .zip(loaded.par_iter().zip(data.par_iter()))
        .map(|(r, (l, d))| {
            let h: Option<HessianArtifact> = read_json(&ctx.path(&format!("{}_hessian.json", l.stem)))?;
            Ok(SummaryRow {
                variant: r.variant,
                bits: r.bits,
                seed: r.seed,
                test_loss: evaluate(&l.model, &l.params, &d.test, EVAL_BATCH)?,
                trace: h.as_ref().map(|h| h.report.trace),
                trace_stderr: h.as_ref().map(|h| h.report.stderr),
                lambda_1: h.as_ref().and_then(|h| h.report.eigenvalues.first().copied()),
            })
        })
        .collect()
}

/// `bit_width,variant,mean,std,n_seeds` over the values `f` picks out.
fn figure_csv(ctx: &Context, rows: &[SummaryRow], f: impl Fn(&SummaryRow) -> Option<f64>) -> Option<String> {
    let mut s = String::from("bit_width,variant,mean,std,n_seeds\n");
    let mut any = false;
    for v in ctx.cfg.variant_list() {
        for &b in &ctx.cfg.bits {
            let vals: Vec<f64> = rows.iter().filter(|r| r.variant == v && r.bits == b).filter_map(&f).collect();
            if vals.is_empty() {
                continue;
            }
            any = true;
            let (m, sd) = mean_std(&vals);
            s.push_str(&format!("{},{},{},{},{}\n", b, v.label(), m, sd, vals.len()));
        }
    }
    any.then_some(s)
}

/// Group statistics read from per-group JSON (`cka_*`, `modeconn_*`).
fn group_figure(ctx: &Context, prefix: &str, pick: impl Fn(&Path) -> Result<Option<(f64, usize)>>) -> Result<Option<String>> {
    let mut s = String::from("bit_width,variant,mean,std,n_seeds\n");
    let mut any = false;
    for v in ctx.cfg.variant_list() {
        for &b in &ctx.cfg.bits {
            if let Some((value, n)) = pick(&ctx.path(&format!("{}_{}_b{}.json", prefix, v.label(), b)))? {
                any = true;
                s.push_str(&format!("{},{},{},0,{}\n", b, v.label(), value, n));
            }
        }
    }
    Ok(any.then_some(s))
}

/// Without a CSV argument: aggregates the out-dir into `summary.csv`,
/// `fig_*.csv` and one SVG per figure and robustness curve.
pub fn cmd_report(ctx: &Context) -> Result<Vec<PathBuf>> {
    let rows = summary_rows(ctx)?;
    let mut files = Vec::new();
    let mut figures: Vec<(String, String)> = Vec::new();
    if !rows.is_empty() {
        let mut s = String::from("model,variant,bits,seed,test_loss,trace,trace_stderr,lambda_1\n");
        for r in &rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                ctx.cfg.model,
                r.variant.label(),
                r.bits,
                r.seed,
                r.test_loss,
                opt(r.trace),
                opt(r.trace_stderr),
                opt(r.lambda_1)
            ));
        }
        files.push(ctx.write("summary.csv", s.as_bytes())?);
        let picks: [(&str, fn(&SummaryRow) -> Option<f64>); 3] =
            [("test_loss", |r| Some(r.test_loss)), ("trace", |r| r.trace), ("lambda_1", |r| r.lambda_1)];
        for (name, f) in picks {
            if let Some(csv) = figure_csv(ctx, &rows, f) {
                figures.push((format!("fig_{}", name), csv));
            }
        }
    }
    let cka = group_figure(ctx, "cka", |p| {
        Ok(read_json::<CkaArtifact>(p)?.and_then(|a| a.clean.mean_offdiag.map(|m| (m, a.checkpoints.len()))))
    })?;
    if let Some(csv) = cka {
        figures.push(("fig_cka".into(), csv));
    }
    let mc = group_figure(ctx, "modeconn", |p| {
        Ok(read_json::<ModeconnArtifact>(p)?.map(|a| (a.report.max_mc, a.checkpoints.len())))
    })?;
    if let Some(csv) = mc {
        figures.push(("fig_max_mc".into(), csv));
    }
    for s in STRESSORS {
        let p = ctx.path(&format!("robustness_{}.csv", s));
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            let svg = plot::emit_plot(&text, PlotKind::MultiLine, &format!("robustness {}", s))?;
            files.push(ctx.write(&format!("robustness_{}.svg", s), svg.as_bytes())?);
        }
    }
    for (name, csv) in &figures {
        files.push(ctx.write(&format!("{}.csv", name), csv.as_bytes())?);
        let svg = plot::emit_plot(csv, PlotKind::MultiLine, name.trim_start_matches("fig_"))?;
        files.push(ctx.write(&format!("{}.svg", name), svg.as_bytes())?);
    }
    if files.is_empty() {
        return Err(CliError::config(format!("nothing to report in {}", ctx.out.display())));
    }
    Ok(files)
}
