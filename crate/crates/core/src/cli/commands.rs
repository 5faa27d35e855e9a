use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;

use super::{CliError, ConfigError, RunConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::completion::{build_completion_conditioning, finetune_completion, sparsify, COMPLETION_CHANNELS};
use crate::datagen::{
    generate_split, normalize_depth, read_manifest, read_pfm, read_ppm, write_pfm, DatasetQuantiles, DepthGrid,
    Difficulty, NormKind, Sample, Scene, Split,
};
use crate::evalkit::{
    coupling_cost, evaluate_image, summarize, EvalOptions, FitSpace, MetricsReport, Norm, Pairing, METRICS_HEADER,
};
use crate::flowmatch::{
    build_mixed_dataset, mixed_size, pseudo_label, stream, train, train_teacher, LogRow, StartDistribution,
    TrainConfig, TrainState, DIAGNOSTIC_STREAM, LOG_HEADER, SAMPLE_STREAM,
};
use crate::network::{UNet, UNetConfig};
use crate::sampler::{ensemble_predict, ensemble_predict_batch, DepthModel, SamplerConfig};
use crate::tensor::Tensor;

pub const DIAGNOSE_HEADER: &str = "section,subject,metric,setting,value";

fn invalid(key: &str, value: impl ToString, reason: &str) -> CliError {
    ConfigError::Invalid {
        key: key.into(),
        value: value.to_string(),
        reason: reason.into(),
    }
    .into()
}

fn difficulty(cfg: &RunConfig) -> Difficulty {
    Difficulty::parse(cfg.text("difficulty")).expect("validated on entry")
}

fn fit_spaces(cfg: &RunConfig) -> Vec<FitSpace> {
    cfg.list("fit-space").iter().map(|s| FitSpace::parse(s).expect("validated on entry")).collect()
}

fn nfe_list(cfg: &RunConfig) -> Vec<usize> {
    cfg.list("nfe").iter().map(|s| s.parse().expect("validated on entry")).collect()
}

fn scenes(cfg: &RunConfig, split: Split, count_key: &str) -> Result<Vec<Scene>, CliError> {
    Ok(generate_split(
        cfg.seed(),
        split,
        cfg.count(count_key),
        cfg.count("height"),
        cfg.count("width"),
        difficulty(cfg),
    )?)
}

/// Scenes listed in a manifest; images are read with `channels` channels.
pub(crate) fn manifest_scenes(path: &Path, channels: usize) -> Result<Vec<Scene>, CliError> {
    read_manifest(path)?
        .into_iter()
        .map(|rec| {
            let image = read_ppm(&rec.image, channels == 1)?;
            let d = read_pfm(&rec.depth)?;
            let (h, w) = (d.dim(1), d.dim(2));
            if image.shape()[1..] != [h, w] {
                return Err(CliError::ShapeMismatch(format!(
                    "{} is {:?} but {} is {h}x{w}",
                    rec.image.display(),
                    image.shape(),
                    rec.depth.display()
                )));
            }
            Ok(Scene {
                image,
                depth: DepthGrid::new(h, w, d.data().to_vec())?,
                source: rec.source,
            })
        })
        .collect()
}

fn dataset(cfg: &RunConfig, split: Split, count_key: &str, channels: usize) -> Result<Vec<Scene>, CliError> {
    match cfg.text("manifest") {
        "" => scenes(cfg, split, count_key),
        path => manifest_scenes(Path::new(path), channels),
    }
}

fn samples(scenes: &[Scene], q: &DatasetQuantiles) -> Result<Vec<Sample>, CliError> {
    Ok(scenes.iter().map(|s| Sample::from_scene(s, q)).collect::<Result<Vec<_>, _>>()?)
}

/// Optimiser settings shared by every command that trains.
fn fit_config(cfg: &RunConfig, base: TrainConfig) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.count("batch-size"),
        learning_rate: cfg.float("lr"),
        ema_rate: cfg.float("ema-rate"),
        log_every: cfg.count("log-every"),
        seed: cfg.seed(),
        ..base
    }
}

/// Network and path settings shared by `train` and `diagnose`.
fn train_config(cfg: &RunConfig, preset: TrainConfig, steps: usize, start: StartDistribution) -> TrainConfig {
    let mut t = fit_config(cfg, preset.clone());
    // an explicit preset wins over the defaults of the keys it covers
    if cfg.command() == "train" {
        if !cfg.is_explicit("batch-size") {
            t.batch_size = preset.batch_size;
        }
        if !cfg.is_explicit("lr") {
            t.learning_rate = preset.learning_rate;
        }
        if !cfg.is_explicit("ema-rate") {
            t.ema_rate = preset.ema_rate;
        }
    }
    TrainConfig {
        sigma_min: cfg.float("sigma-min"),
        t_s: cfg.float("t-s"),
        steps,
        start,
        ..t
    }
}

fn net_config(cfg: &RunConfig) -> UNetConfig {
    UNetConfig {
        base_width: cfg.count("base-width"),
        depth_levels: cfg.count("depth-levels"),
        time_embed_dim: cfg.count("time-embed-dim"),
        ..UNetConfig::default()
    }
}

fn rng_note(seed: u64) -> String {
    format!("chacha8 master seed {seed}; streams data=1 augment=2 sample=3 diagnostic=4; init seed {seed}")
}

fn describe(t: &TrainConfig) -> String {
    format!(
        "batch_size={} learning_rate={:e} ema_rate={} sigma_min={:e} t_s={} steps={} start={} seed={}",
        t.batch_size,
        t.learning_rate,
        t.ema_rate,
        t.sigma_min,
        t.t_s,
        t.steps,
        t.start.name(),
        t.seed
    )
}

/// Writes lines to stdout and, when present, to a log file.
struct Tee<'a> {
    out: &'a mut dyn Write,
    file: Option<BufWriter<File>>,
}

impl<'a> Tee<'a> {
    fn new(out: &'a mut dyn Write, path: Option<&Path>) -> Result<Self, CliError> {
        let file = path.map(File::create).transpose()?.map(BufWriter::new);
        Ok(Self { out, file })
    }

    fn line(&mut self, s: &str) -> std::io::Result<()> {
        writeln!(self.out, "{s}")?;
        self.out.flush()?;
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{s}")?;
            f.flush()?;
        }
        Ok(())
    }

    /// Training callback that records the first write error.
    fn train_rows<'b>(
        &'b mut self,
        prefix: &'b str,
        failed: &'b mut Option<std::io::Error>,
    ) -> Box<dyn FnMut(&LogRow) + 'b>
    where
        'a: 'b,
    {
        Box::new(move |row: &LogRow| {
            if failed.is_none() {
                if let Err(e) = self.line(&format!("{prefix}{}", row.to_csv())) {
                    *failed = Some(e);
                }
            }
        })
    }
}

fn log_path(cfg: &RunConfig, checkpoint: &Path) -> PathBuf {
    match cfg.text("log") {
        "" => checkpoint.with_extension("log.csv"),
        p => PathBuf::from(p),
    }
}

fn check_io(failed: Option<std::io::Error>) -> Result<(), CliError> {
    failed.map_or(Ok(()), |e| Err(e.into()))
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub path: PathBuf,
    pub ground_truth: usize,
    pub pseudo: usize,
}

impl TrainOutcome {
    pub fn samples(&self) -> usize {
        self.ground_truth + self.pseudo
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainOutcome, CliError> {
    let preset = TrainConfig::preset(cfg.text("preset")).expect("validated on entry");
    let start = StartDistribution::parse(cfg.text("start")).expect("validated on entry");
    let config = train_config(cfg, preset, cfg.count("steps"), start);
    config.validate()?;
    let net_cfg = net_config(cfg);
    let net = UNet::new(net_cfg.clone())?;
    let path = PathBuf::from(cfg.text("out"));
    let k = cfg.float("teacher-ratio");
    if k < 0.0 {
        return Err(invalid("teacher-ratio", k, "must be non-negative"));
    }

    let gt = dataset(cfg, Split::Train, "gt-count", net_cfg.cond_channels)?;
    if gt.is_empty() {
        return Err(invalid("gt-count", 0, "need at least one training scene"));
    }
    let norm = NormKind::parse(cfg.text("norm")).expect("validated on entry");
    let q = DatasetQuantiles::from_grids(gt.iter().map(|s| &s.depth), norm)?;

    let mut log = Tee::new(out, Some(&log_path(cfg, &path)))?;
    log.line(&format!("# preset={} {}", cfg.text("preset"), describe(&config)))?;
    log.line(&format!("# quantiles d2={:?} d98={:?} kind={}", q.d2, q.d98, q.kind.name()))?;

    let mut data = gt.clone();
    let mut pseudo_count = 0;
    if k > 0.0 {
        let teacher = match cfg.text("teacher") {
            "" => {
                let tcfg = TrainConfig {
                    steps: cfg.count("teacher-steps"),
                    ..config.clone()
                };
                let mut state = TrainState::new(net.init_params(config.seed), &tcfg);
                let mut failed = None;
                train_teacher(&net, &mut state, &samples(&gt, &q)?, &tcfg, &mut log.train_rows("# teacher ", &mut failed))?;
                check_io(failed)?;
                let ckpt = Checkpoint {
                    net: net_cfg.clone(),
                    train: tcfg,
                    quantiles: q,
                    params: state.params,
                    ema: state.ema,
                    rng_note: format!("teacher; {}", rng_note(config.seed)),
                };
                save_checkpoint(&path.with_extension("teacher.ckpt"), &ckpt)?;
                ckpt
            }
            p => load_checkpoint(Path::new(p))?,
        };
        let teacher_net = teacher.network()?;
        let pool = scenes(cfg, Split::Unlabeled, "unlabeled-count")?;
        let images: Vec<Tensor<f32>> = pool.into_iter().map(|s| s.image).collect();
        let pseudo = pseudo_label(&teacher_net, &teacher.ema, &images, &q)?;
        data = build_mixed_dataset(&gt, &pseudo, k, config.seed)?;
        pseudo_count = data.len() - gt.len();
        debug_assert_eq!(data.len(), mixed_size(gt.len(), k));
    }
    log.line(&format!(
        "# training samples: {} (ground truth {}, pseudo-labelled {})",
        data.len(),
        gt.len(),
        pseudo_count
    ))?;
    log.line(LOG_HEADER)?;

    let mut state = TrainState::new(net.init_params(config.seed), &config);
    let mut failed = None;
    train(&net, &mut state, &samples(&data, &q)?, &config, None, &mut log.train_rows("", &mut failed))?;
    check_io(failed)?;
    let checkpoint = Checkpoint {
        net: net_cfg,
        train: config,
        quantiles: q,
        params: state.params,
        ema: state.ema,
        rng_note: rng_note(cfg.seed()),
    };
    save_checkpoint(&path, &checkpoint)?;
    log.line(&format!("# wrote {}", path.display()))?;
    Ok(TrainOutcome {
        checkpoint,
        path,
        ground_truth: gt.len(),
        pseudo: pseudo_count,
    })
}

fn sampler_config(cfg: &RunConfig, nfe: usize) -> SamplerConfig {
    SamplerConfig {
        nfe,
        ensemble_size: cfg.count("ensemble"),
        use_ema: cfg.flag("use-ema"),
    }
}

fn estimation_checkpoint(cfg: &RunConfig) -> Result<(Checkpoint, UNet), CliError> {
    let ckpt = load_checkpoint(Path::new(cfg.text("checkpoint")))?;
    let net = ckpt.network()?;
    if ckpt.net.completion_channels != 0 {
        return Err(invalid(
            "checkpoint",
            cfg.text("checkpoint"),
            "this is a completion model; it needs the `complete` command",
        ));
    }
    Ok((ckpt, net))
}

pub struct SampleOutcome {
    pub depth_files: Vec<PathBuf>,
    pub std_files: Vec<PathBuf>,
}

pub fn cmd_sample(cfg: &RunConfig, images: &[PathBuf], out: &mut dyn Write) -> Result<SampleOutcome, CliError> {
    let nfe = cfg.single("nfe")?.parse().expect("validated on entry");
    let sc = sampler_config(cfg, nfe);
    sc.validate()?;
    let (ckpt, net) = estimation_checkpoint(cfg)?;
    let model = ckpt.model(&net, sc.use_ema);
    let dir = PathBuf::from(cfg.text("out-dir"));
    std::fs::create_dir_all(&dir)?;
    let mut rng = stream(cfg.seed(), SAMPLE_STREAM);
    let mut result = SampleOutcome {
        depth_files: Vec::new(),
        std_files: Vec::new(),
    };
    writeln!(out, "image,height,width,ms")?;
    for path in images {
        let t0 = Instant::now();
        let image = read_ppm(path, ckpt.net.cond_channels == 1)?;
        if image.dim(0) != ckpt.net.cond_channels {
            return Err(CliError::ShapeMismatch(format!(
                "{} has {} channels, the checkpoint expects {}",
                path.display(),
                image.dim(0),
                ckpt.net.cond_channels
            )));
        }
        let (h, w) = (image.dim(1), image.dim(2));
        ckpt.net.check_spatial(h, w).map_err(|e| CliError::ShapeMismatch(e.to_string()))?;
        let e = ensemble_predict(&model, &image, None, &sc, &mut rng)?;
        let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let depth_file = dir.join(format!("{stem}.depth.pfm"));
        let std_file = dir.join(format!("{stem}.std.pfm"));
        write_pfm(&depth_file, &e.mean_depth.to_tensor())?;
        write_pfm(&std_file, &e.std_depth)?;
        writeln!(out, "{},{h},{w},{}", path.display(), t0.elapsed().as_millis())?;
        out.flush()?;
        result.depth_files.push(depth_file);
        result.std_files.push(std_file);
    }
    Ok(result)
}

fn append_rows(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

pub struct EvalRow {
    pub nfe: usize,
    pub fit_space: FitSpace,
    pub report: MetricsReport,
}

/// Ensemble every image of `scenes` through `model` and score each fit
/// space. Every call restarts the sampling stream, so settings are compared
/// on the same noise.
fn score(
    model: &DepthModel,
    scenes: &[Scene],
    extras: Option<&[Tensor<f32>]>,
    sc: &SamplerConfig,
    seed: u64,
    spaces: &[FitSpace],
    base_opts: &EvalOptions,
    label: &dyn Fn(FitSpace) -> String,
) -> Result<Vec<MetricsReport>, CliError> {
    let images: Vec<Tensor<f32>> = scenes.iter().map(|s| s.image.clone()).collect();
    let results = ensemble_predict_batch(model, &images, extras, sc, &mut stream(seed, SAMPLE_STREAM))?;
    spaces
        .iter()
        .map(|&space| {
            let opts = EvalOptions {
                fit_space: space,
                ..base_opts.clone()
            };
            let per_image = results
                .iter()
                .zip(scenes)
                .map(|(r, s)| evaluate_image(&r.mean_depth, Some(r), &s.depth, &opts))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(summarize(&label(space), &per_image))
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<EvalRow>, CliError> {
    let (ckpt, net) = estimation_checkpoint(cfg)?;
    let scenes = dataset(cfg, Split::Eval, "eval-count", ckpt.net.cond_channels)?;
    if scenes.is_empty() {
        return Err(invalid("eval-count", 0, "need at least one evaluation scene"));
    }
    let opts = EvalOptions {
        fit_space: FitSpace::Log,
        edge_threshold: cfg.float("edge-threshold"),
        edge_tolerance: cfg.count("edge-tolerance"),
        unc_quantile: cfg.float("unc-quantile"),
    };
    let spaces = fit_spaces(cfg);
    writeln!(out, "{METRICS_HEADER}")?;
    let mut rows = Vec::new();
    for nfe in nfe_list(cfg) {
        let sc = sampler_config(cfg, nfe);
        sc.validate()?;
        let model = ckpt.model(&net, sc.use_ema);
        let label = |space: FitSpace| format!("{}[nfe={nfe} fit={} ens={}]", cfg.text("label"), space.name(), sc.ensemble_size);
        let reports = score(&model, &scenes, None, &sc, cfg.seed(), &spaces, &opts, &label)?;
        for (space, report) in spaces.iter().zip(reports) {
            writeln!(out, "{}", report.to_csv())?;
            out.flush()?;
            rows.push(EvalRow {
                nfe,
                fit_space: *space,
                report,
            });
        }
    }
    let lines: Vec<String> = rows.iter().map(|r| r.report.to_csv()).collect();
    append_rows(Path::new(cfg.text("report")), METRICS_HEADER, &lines)?;
    Ok(rows)
}

pub struct CompleteOutcome {
    pub base: MetricsReport,
    pub completed: MetricsReport,
    pub checkpoint: Checkpoint,
    /// Largest value of the normalised distance channel over the pixels with
    /// valid ground truth, the only ones a mask can observe.
    pub max_distance: f32,
}

pub fn cmd_complete(cfg: &RunConfig, out: &mut dyn Write) -> Result<CompleteOutcome, CliError> {
    let keep = cfg.float("keep-fraction");
    let nfe = cfg.single("nfe")?.parse().expect("validated on entry");
    let space = FitSpace::parse(&cfg.single("fit-space")?).expect("validated on entry");
    let sc = sampler_config(cfg, nfe);
    sc.validate()?;
    let (base, base_net) = estimation_checkpoint(cfg)?;
    let q = base.quantiles;
    let config = TrainConfig {
        steps: cfg.count("finetune-steps"),
        ..fit_config(cfg, base.train.clone())
    };
    config.validate()?;
    let path = PathBuf::from(cfg.text("completion-out"));
    let mut log = Tee::new(out, Some(&log_path(cfg, &path)))?;
    log.line(&format!("# keep_fraction={keep} {}", describe(&config)))?;

    let train_scenes = scenes(cfg, Split::Train, "gt-count")?;
    let mut base_state = TrainState::new(base.params.clone(), &config);
    base_state.ema = base.ema.clone();
    log.line(LOG_HEADER)?;
    let mut failed = None;
    let (net, state) = finetune_completion(
        &base_net,
        &base_state,
        &train_scenes,
        &q,
        keep,
        &config,
        &mut log.train_rows("", &mut failed),
    )?;
    check_io(failed)?;
    debug_assert_eq!(net.config().completion_channels, COMPLETION_CHANNELS);
    let checkpoint = Checkpoint {
        net: net.config().clone(),
        train: config,
        quantiles: q,
        params: state.params,
        ema: state.ema,
        rng_note: format!("completion keep_fraction={keep}; {}", rng_note(cfg.seed())),
    };
    save_checkpoint(&path, &checkpoint)?;

    let eval_scenes = scenes(cfg, Split::Eval, "eval-count")?;
    let mut pattern = stream(cfg.seed(), DIAGNOSTIC_STREAM);
    let mut max_distance = 0.0f32;
    let mut extras = Vec::with_capacity(eval_scenes.len());
    for s in &eval_scenes {
        let c = build_completion_conditioning(&sparsify(&s.depth, keep, pattern.next_u64())?, &q)?;
        let observable = c.mask_distance.data().iter().zip(s.depth.valid()).filter(|(_, &v)| v);
        max_distance = observable.fold(max_distance, |m, (&d, _)| m.max(d));
        extras.push(c.to_tensor());
    }
    let zeros = if max_distance == 0.0 { " (all zeros)" } else { "" };
    log.line(&format!(
        "# sanity: keep_fraction={keep} distance channel max {max_distance:.6}{zeros} over valid pixels of {} scenes",
        eval_scenes.len()
    ))?;

    let opts = EvalOptions::default();
    let tag = |model: &'static str| move |s: FitSpace| format!("{model}[keep={keep} nfe={nfe} fit={}]", s.name());
    let base_report = score(&base.model(&base_net, sc.use_ema), &eval_scenes, None, &sc, cfg.seed(), &[space], &opts, &tag("base"))?
        .remove(0);
    let completed_model = checkpoint.model(&net, sc.use_ema);
    let completed_report = score(&completed_model, &eval_scenes, Some(&extras), &sc, cfg.seed(), &[space], &opts, &tag("completed"))?
        .remove(0);
    log.line(&format!("# rmse base {:.6} completed {:.6}", base_report.rmse, completed_report.rmse))?;
    log.line(METRICS_HEADER)?;
    log.line(&base_report.to_csv())?;
    log.line(&completed_report.to_csv())?;
    append_rows(
        Path::new(cfg.text("completion-report")),
        METRICS_HEADER,
        &[base_report.to_csv(), completed_report.to_csv()],
    )?;
    Ok(CompleteOutcome {
        base: base_report,
        completed: completed_report,
        checkpoint,
        max_distance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingRow {
    pub batch: usize,
    pub norm: Norm,
    pub paired: f64,
    pub random: f64,
    pub optimal: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwinResult {
    pub nfe: [usize; 2],
    /// Ensemble-mean delta1 at each `nfe`.
    pub image_start: [f64; 2],
    pub noise_start: [f64; 2],
}

pub struct DiagnoseOutcome {
    pub coupling: Vec<CouplingRow>,
    pub twin: Option<TwinResult>,
}

pub fn cmd_diagnose(cfg: &RunConfig, out: &mut dyn Write) -> Result<DiagnoseOutcome, CliError> {
    let (batches, size) = (cfg.count("coupling-batches"), cfg.count("coupling-size"));
    let norm_kind = NormKind::parse(cfg.text("norm")).expect("validated on entry");
    let pool = generate_split(
        cfg.seed(),
        Split::Diagnostic,
        batches * size,
        cfg.count("height"),
        cfg.count("width"),
        difficulty(cfg),
    )?;
    let mut lines = vec![DIAGNOSE_HEADER.to_string()];
    let mut coupling = Vec::new();
    if !pool.is_empty() {
        let q = DatasetQuantiles::from_grids(pool.iter().map(|s| &s.depth), norm_kind)?;
        let mut perms = stream(cfg.seed(), DIAGNOSTIC_STREAM);
        for (b, chunk) in pool.chunks(size.max(1)).enumerate() {
            let x0: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
            let x1 = chunk
                .iter()
                .map(|s| normalize_depth(&s.depth, &q))
                .collect::<Result<Vec<_>, _>>()?;
            let perm_seed = perms.next_u64();
            for norm in [Norm::L1, Norm::L2] {
                let row = CouplingRow {
                    batch: b,
                    norm,
                    paired: coupling_cost(&x0, &x1, Pairing::Paired, norm)?,
                    random: coupling_cost(&x0, &x1, Pairing::Random(perm_seed), norm)?,
                    optimal: coupling_cost(&x0, &x1, Pairing::Optimal, norm)?,
                };
                for (name, v) in [("paired", row.paired), ("random", row.random), ("optimal", row.optimal)] {
                    lines.push(format!("coupling,batch{b},{},{name},{v:.6}", norm.name()));
                }
                coupling.push(row);
            }
        }
        for norm in [Norm::L1, Norm::L2] {
            let rows: Vec<&CouplingRow> = coupling.iter().filter(|r| r.norm == norm).collect();
            let mean = |f: fn(&CouplingRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
            for (name, v) in [("paired", mean(|r| r.paired)), ("random", mean(|r| r.random)), ("optimal", mean(|r| r.optimal))] {
                lines.push(format!("coupling,mean,{},{name},{v:.6}", norm.name()));
            }
        }
    }
    for l in &lines {
        writeln!(out, "{l}")?;
    }
    out.flush()?;

    let twin = if cfg.flag("twin") {
        let result = twin_training(cfg, out)?;
        let mut extra = Vec::new();
        for (subject, d) in [("image-start", result.image_start), ("noise-start", result.noise_start)] {
            for (nfe, v) in result.nfe.iter().zip(d) {
                extra.push(format!("twin,{subject},delta1,nfe={nfe},{v:.6}"));
            }
        }
        for l in &extra {
            writeln!(out, "{l}")?;
        }
        lines.extend(extra);
        Some(result)
    } else {
        None
    };
    let mut f = BufWriter::new(File::create(cfg.text("diagnose-report"))?);
    for l in &lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(DiagnoseOutcome { coupling, twin })
}

/// Two models identical except for the starting distribution, scored on
/// the same held-out scenes and sampling noise.
fn twin_training(cfg: &RunConfig, out: &mut dyn Write) -> Result<TwinResult, CliError> {
    const NFE: [usize; 2] = [1, 10];
    let gt = scenes(cfg, Split::Train, "gt-count")?;
    let eval = scenes(cfg, Split::Eval, "eval-count")?;
    if gt.is_empty() || eval.is_empty() {
        return Err(invalid("gt-count", gt.len(), "twin training needs training and evaluation scenes"));
    }
    let norm_kind = NormKind::parse(cfg.text("norm")).expect("validated on entry");
    let q = DatasetQuantiles::from_grids(gt.iter().map(|s| &s.depth), norm_kind)?;
    let data = samples(&gt, &q)?;
    let net = UNet::new(net_config(cfg))?;
    let space = FitSpace::parse(&cfg.single("fit-space")?).expect("validated on entry");
    let mut deltas = Vec::new();
    for start in [StartDistribution::Image, StartDistribution::Noise] {
        let config = train_config(cfg, TrainConfig::desk(), cfg.count("twin-steps"), start);
        config.validate()?;
        let mut state = TrainState::new(net.init_params(config.seed), &config);
        let mut log = Tee::new(out, None)?;
        let prefix = format!("# twin {}-start ", start.name());
        let mut failed = None;
        train(&net, &mut state, &data, &config, None, &mut log.train_rows(&prefix, &mut failed))?;
        check_io(failed)?;
        let params = if cfg.flag("use-ema") { &state.ema } else { &state.params };
        let model = DepthModel {
            net: &net,
            params,
            quantiles: q,
            t_s: config.t_s,
            start,
        };
        let mut d = [0.0; 2];
        for (slot, nfe) in d.iter_mut().zip(NFE) {
            let sc = sampler_config(cfg, nfe);
            let reports = score(&model, &eval, None, &sc, cfg.seed(), &[space], &EvalOptions::default(), &|_| String::new())?;
            *slot = reports[0].delta1;
        }
        deltas.push(d);
    }
    Ok(TwinResult {
        nfe: NFE,
        image_start: deltas[0],
        noise_start: deltas[1],
    })
}
