use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use opgrain_core::bias::{char_position_counts, roundness_summary, PositionHistogram, RoundnessSummary};
use opgrain_core::enrich::supervised::{build_training_rows, enrich_supervised, train, TrainingLog};
use opgrain_core::enrich::{enrich_unsupervised, EnrichmentModel, TrainConfig, Variant};
use opgrain_core::metrics::{build_curve, cardinality, CurveSpace};
use opgrain_core::records::{load_records, write_csv, write_jsonl, FileMeta, InputDigest, LoadedRecords};
use opgrain_core::simulator::{simulate, SimulatorConfig};
use opgrain_core::PredictionRecord;
use opgrain_gateway::{ClassifyOutput, Gateway, GatewayConfig, Instance, PromptTemplate, TwoStageVariant};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::cli::{Cli, Command, EnrichCommand, Format, GatewayArgs, GatewayCommand};
use crate::error::{CliError, Result};
use crate::plots::curve_svg;
use crate::report::{
    check_alignment, dataset_for, method_report, AnalysisReport, CompareRow, Comparison, ReportMeta, ScoreSource,
    COMPARE_COLUMNS,
};

pub const TOOL: &str = "opgrain";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { config } => cmd_simulate(&cli, config),
        Command::Analyze {
            input,
            plots_dir,
            ece_bins,
            aggregate,
        } => cmd_analyze(&cli, input, plots_dir.as_deref(), *ece_bins, aggregate),
        Command::Compare { inputs } => cmd_compare(&cli, inputs),
        Command::Enrich { action } => match action {
            EnrichCommand::Unsupervised { input } => cmd_enrich_unsupervised(&cli, input),
            EnrichCommand::Train {
                input,
                variant,
                config,
                noise_mode,
            } => cmd_train(&cli, input, (*variant).into(), config.as_deref(), noise_mode.map(Into::into)),
            EnrichCommand::Apply { input, model } => cmd_apply(&cli, input, model),
        },
        Command::Bias { input } => cmd_bias(&cli, input),
        Command::Gateway { action } => cmd_gateway(&cli, action),
    }
}

fn meta(method: &str, seed: Option<u64>, calls: Option<u32>, inputs: Vec<InputDigest>) -> FileMeta {
    FileMeta {
        tool: TOOL.into(),
        version: VERSION.into(),
        seed,
        method: Some(method.into()),
        calls_per_instance: calls,
        inputs,
        extra: Default::default(),
    }
}

fn digest(path: &Path) -> Result<InputDigest> {
    Ok(InputDigest::of_file(path)?)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<LoadedRecords> {
    let loaded = load_records(path)?;
    if loaded.report.rejected > 0 {
        warn!(
            path = %path.display(),
            rejected = loaded.report.rejected,
            "some lines were rejected"
        );
    }
    Ok(loaded)
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Config("--out is required for this command".into()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

/// Writes JSON to `out`, or stdout when no path is given.
fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))? + "\n";
    match out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
        }
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Data(e.to_string())),
    }
}

fn write_records(cli: &Cli, meta: &FileMeta, records: &[PredictionRecord]) -> Result<PathBuf> {
    let path = required_out(cli)?;
    let w = create(path)?;
    match cli.format {
        Format::Json => write_jsonl(w, Some(meta), records)?,
        Format::Csv => write_csv(w, records)?,
    }
    Ok(path.to_path_buf())
}

#[derive(Debug, Serialize, Deserialize)]
struct LatentFile {
    seed: u64,
    latent: Vec<f64>,
    subpop: Vec<usize>,
}

/// Sibling path holding the simulator's un-quantized probabilities.
pub fn latent_path(out: &Path) -> PathBuf {
    out.with_extension("latent.json")
}

fn cmd_simulate(cli: &Cli, config_path: &Path) -> Result<()> {
    let mut config: SimulatorConfig = read_json(config_path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let sim = simulate(&config)?;
    let mut m = meta("simulated", Some(config.seed), Some(1), vec![digest(config_path)?]);
    m.extra.insert("n".into(), json!(config.n));
    let out = write_records(cli, &m, &sim.records)?;
    emit_json(
        Some(&latent_path(&out)),
        &LatentFile {
            seed: config.seed,
            latent: sim.latent,
            subpop: sim.subpop,
        },
    )?;
    info!(n = config.n, out = %out.display(), "simulated records written");
    Ok(())
}

fn report_meta(cli: &Cli, inputs: Vec<InputDigest>, source: Option<FileMeta>) -> ReportMeta {
    ReportMeta {
        tool: TOOL.into(),
        version: VERSION.into(),
        seed: cli.seed.or(source.as_ref().and_then(|m| m.seed)),
        resolution: cli.resolution,
        inputs,
        source,
    }
}

fn write_plots(dir: &Path, records: &[PredictionRecord], source: ScoreSource, primary: bool) -> Result<()> {
    let data = dataset_for(records, source)?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (space, stem) in [(CurveSpace::Pr, "pr"), (CurveSpace::Roc, "roc")] {
        let curve = build_curve(&data, space)?;
        let name = if primary {
            format!("{stem}.svg")
        } else {
            format!("{stem}_{}.svg", source.name())
        };
        let path = dir.join(name);
        let title = format!("{} operating points ({})", stem.to_uppercase(), source.name());
        fs::write(&path, curve_svg(&curve, &title)).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

fn cmd_analyze(
    cli: &Cli,
    input: &Path,
    plots_dir: Option<&Path>,
    ece_bins: usize,
    aggregate: &[ScoreSource],
) -> Result<()> {
    let loaded = load(input)?;
    let records = &loaded.records;
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: no records", input.display())));
    }
    let mut sources = Vec::new();
    if records.iter().any(|r| r.score_pos.is_some()) {
        sources.push(ScoreSource::ScorePos);
    }
    if records.iter().any(|r| r.score_enriched.is_some()) {
        sources.push(ScoreSource::Enriched);
    }
    for s in aggregate {
        if !sources.contains(s) {
            sources.push(*s);
        }
    }
    if sources.is_empty() {
        return Err(CliError::Data(format!("{}: no score column to analyze", input.display())));
    }

    let methods = sources
        .iter()
        .map(|s| method_report(records, *s, s.name(), cli.resolution, ece_bins))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = plots_dir {
        for (i, s) in sources.iter().enumerate() {
            write_plots(dir, records, *s, i == 0)?;
        }
    }
    let report = AnalysisReport {
        metadata: report_meta(cli, vec![digest(input)?], loaded.meta),
        methods,
    };
    match cli.format {
        Format::Json => emit_json(cli.out.as_deref(), &report),
        Format::Csv => {
            let rows: Vec<CompareRow> = report
                .methods
                .iter()
                .map(|m| CompareRow {
                    method: m.method.clone(),
                    source: input.display().to_string(),
                    calls_per_instance: report.metadata.source.as_ref().and_then(|s| s.calls_per_instance),
                    cardinality: m.cardinality,
                    g_pre: m.granularity.g_precision,
                    g_rec: m.granularity.g_recall,
                    g_fpr: m.granularity.g_fpr,
                    prauc: m.prauc.trapezoid,
                    auroc: m.auroc,
                })
                .collect();
            match cli.out.as_deref() {
                Some(path) => write_rows(create(path)?, &rows),
                None => write_rows(io::stdout(), &rows),
            }
        }
    }
}

fn write_rows<W: Write>(w: W, rows: &[CompareRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| CliError::Data(e.to_string());
    wtr.write_record(COMPARE_COLUMNS).map_err(csv_err)?;
    for row in rows {
        wtr.write_record(row.csv_fields()).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| CliError::Data(e.to_string()))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(format!(".{ext}"));
    PathBuf::from(s)
}

fn cmd_compare(cli: &Cli, inputs: &[PathBuf]) -> Result<()> {
    let out = required_out(cli)?;
    let mut files = Vec::new();
    let mut metas = Vec::new();
    let mut digests = Vec::new();
    for path in inputs {
        let loaded = load(path)?;
        digests.push(digest(path)?);
        metas.push(loaded.meta);
        files.push((path.display().to_string(), loaded.records));
    }
    check_alignment(&files)?;

    let mut rows = Vec::new();
    for ((name, records), (meta, path)) in files.iter().zip(metas.iter().zip(inputs)) {
        let source = ScoreSource::primary(records);
        let method = meta
            .as_ref()
            .and_then(|m| m.method.clone())
            .unwrap_or_else(|| file_stem(path));
        let m = method_report(records, source, &method, cli.resolution, opgrain_core::metrics::DEFAULT_ECE_BINS)?;
        rows.push(CompareRow {
            method,
            source: name.clone(),
            calls_per_instance: meta.as_ref().and_then(|m| m.calls_per_instance),
            cardinality: m.cardinality,
            g_pre: m.granularity.g_precision,
            g_rec: m.granularity.g_recall,
            g_fpr: m.granularity.g_fpr,
            prauc: m.prauc.trapezoid,
            auroc: m.auroc,
        });
    }
    let table = Comparison {
        metadata: report_meta(cli, digests, None),
        rows,
    };
    emit_json(Some(&with_suffix(out, "json")), &table)?;
    write_rows(create(&with_suffix(out, "csv"))?, &table.rows)
}

fn cmd_enrich_unsupervised(cli: &Cli, input: &Path) -> Result<()> {
    let loaded = load(input)?;
    let seed = cli.seed.unwrap_or(0);
    let mut records = loaded.records;
    let scored: Vec<usize> = (0..records.len()).filter(|&i| records[i].score_pos.is_some()).collect();
    if scored.is_empty() {
        return Err(CliError::Data(format!("{}: no record has a score", input.display())));
    }
    let scores: Vec<f64> = scored.iter().map(|&i| records[i].score_pos.expect("filtered")).collect();
    let enriched = enrich_unsupervised(&scores, seed);
    for (&i, &e) in scored.iter().zip(&enriched.enriched) {
        records[i].score_enriched = Some(e);
    }
    let calls = loaded.meta.as_ref().and_then(|m| m.calls_per_instance).unwrap_or(1);
    let m = meta("unsupervised", Some(seed), Some(calls), vec![digest(input)?]);
    write_records(cli, &m, &records)?;
    Ok(())
}

/// A trained calibrator with its provenance and training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub meta: FileMeta,
    pub model: EnrichmentModel,
    pub best_val_prauc: Option<f64>,
    pub training: TrainingLog,
}

fn usable_for(record: &PredictionRecord, variant: Variant) -> bool {
    record.score_pos.is_some() && (variant == Variant::OneCall || !record.samples_pos.is_empty())
}

fn variant_method(variant: Variant) -> &'static str {
    match variant {
        Variant::OneCall => "supervised-1call",
        Variant::TwoCall => "supervised-2call",
    }
}

fn cmd_train(
    cli: &Cli,
    input: &Path,
    variant: Variant,
    config: Option<&Path>,
    noise_mode: Option<opgrain_core::enrich::NoiseMode>,
) -> Result<()> {
    let out = required_out(cli)?;
    let mut train_config: TrainConfig = match config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        train_config.seed = seed;
    }
    if let Some(mode) = noise_mode {
        train_config.noise_mode = mode;
    }
    let loaded = load(input)?;
    let records: Vec<PredictionRecord> = loaded
        .records
        .into_iter()
        .filter(|r| r.label.is_some() && usable_for(r, variant))
        .collect();
    let rows = build_training_rows(&records, variant)?;
    let (model, log) = train(&rows, &train_config)?;
    let best = log.cells[log.best_cell].best_val_prauc;
    info!(
        best_val_prauc = ?best,
        learning_rate = log.cells[log.best_cell].learning_rate,
        lambda = log.cells[log.best_cell].lambda,
        w = model.w,
        "training finished"
    );
    let mut inputs = vec![digest(input)?];
    if let Some(path) = config {
        inputs.push(digest(path)?);
    }
    let file = ModelFile {
        meta: meta(
            variant_method(variant),
            Some(train_config.seed),
            Some(variant.calls_per_instance()),
            inputs,
        ),
        model,
        best_val_prauc: best,
        training: log,
    };
    emit_json(Some(out), &file)
}

fn cmd_apply(cli: &Cli, input: &Path, model_path: &Path) -> Result<()> {
    let file: ModelFile = read_json(model_path)?;
    let variant = file.model.variant;
    let seed = cli.seed.or(file.meta.seed).unwrap_or(0);
    let loaded = load(input)?;
    let mut records = loaded.records;
    let usable: Vec<usize> = (0..records.len()).filter(|&i| usable_for(&records[i], variant)).collect();
    if usable.is_empty() {
        return Err(CliError::Data(format!("{}: no record has the model's inputs", input.display())));
    }
    let subset: Vec<PredictionRecord> = usable.iter().map(|&i| records[i].clone()).collect();
    let enriched = enrich_supervised(&file.model, &subset, seed)?;
    for (&i, &e) in usable.iter().zip(&enriched.enriched) {
        records[i].score_enriched = Some(e);
    }
    let m = meta(
        variant_method(variant),
        Some(seed),
        Some(variant.calls_per_instance()),
        vec![digest(input)?, digest(model_path)?],
    );
    write_records(cli, &m, &records)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct BiasReport {
    metadata: ReportMeta,
    n_records: usize,
    n_texts: usize,
    cardinality: usize,
    roundness: RoundnessSummary,
    positions: PositionHistogram,
}

fn cmd_bias(cli: &Cli, input: &Path) -> Result<()> {
    let loaded = load(input)?;
    let texts: Vec<&str> = loaded
        .records
        .iter()
        .filter_map(|r| r.score_pos_text.as_deref())
        .collect();
    let roundness = roundness_summary(&texts).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let scores: Vec<f64> = loaded.records.iter().filter_map(|r| r.score_pos).collect();
    let report = BiasReport {
        metadata: report_meta(cli, vec![digest(input)?], loaded.meta.clone()),
        n_records: loaded.records.len(),
        n_texts: texts.len(),
        cardinality: cardinality(&scores),
        roundness,
        positions: char_position_counts(&texts),
    };
    emit_json(cli.out.as_deref(), &report)
}

fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn gateway_config(cli: &Cli, args: &GatewayArgs) -> Result<GatewayConfig> {
    let mut c: GatewayConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => GatewayConfig::default(),
    };
    if let Some(v) = &args.endpoint {
        c.endpoint_url = v.clone();
    }
    if let Some(v) = &args.model {
        c.model_name = v.clone();
    }
    if let Some(v) = args.temperature {
        c.temperature = v;
    }
    if let Some(v) = args.samples {
        c.n_samples = v;
    }
    if let Some(v) = args.max_in_flight {
        c.max_in_flight = v;
    }
    if let Some(v) = args.max_attempts {
        c.retry.max_attempts = v;
    }
    if let Some(v) = args.backoff_ms {
        c.retry.base_backoff_ms = v;
    }
    if let Some(v) = args.timeout_ms {
        c.timeout_ms = v;
    }
    if let Some(v) = &args.api_key_env {
        c.api_key_env = Some(v.clone());
    }
    if let Some(v) = args.reduction {
        c.reduction = v;
    }
    c.greedy_pass |= args.greedy_pass;
    if let Some(seed) = cli.seed {
        c.seed = seed;
    }
    c.validate()?;
    Ok(c)
}

fn context_text(args: &GatewayArgs) -> Result<String> {
    match (&args.context, &args.context_file) {
        (Some(c), _) => Ok(c.clone()),
        (None, Some(path)) => fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
        (None, None) => Err(CliError::Config("one of --context or --context-file is required".into())),
    }
}

fn cmd_gateway(cli: &Cli, action: &GatewayCommand) -> Result<()> {
    let args = match action {
        GatewayCommand::Classify { args, .. } | GatewayCommand::TwoStage { args, .. } => args,
    };
    required_out(cli)?;
    let config = gateway_config(cli, args)?;
    let context = context_text(args)?;
    let instances = read_instances(&args.instances)?;
    let (template, calls_per_sample) = match action {
        GatewayCommand::Classify { template, .. } => (PromptTemplate::new(*template, context, args.classes.clone()), 1),
        GatewayCommand::TwoStage { cot, .. } => {
            let variant = if *cot { TwoStageVariant::Cot } else { TwoStageVariant::Plain };
            let name = match variant {
                TwoStageVariant::Plain => opgrain_gateway::TemplateName::TwoStage,
                TwoStageVariant::Cot => opgrain_gateway::TemplateName::TwoStageCot,
            };
            (PromptTemplate::new(name, context, args.classes.clone()), 2)
        }
    };

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Config(format!("async runtime: {e}")))?;
    let gateway = Gateway::new(config.clone())?;
    let ClassifyOutput { records, stats } = runtime.block_on(gateway.classify(&instances, &template))?;
    info!(?stats, "gateway run finished");

    let calls = (config.n_samples + usize::from(config.greedy_pass && config.n_samples > 1)) * calls_per_sample;
    let mut m = meta(
        &template.name.to_string(),
        Some(config.seed),
        Some(calls as u32),
        vec![digest(&args.instances)?],
    );
    m.extra.insert("model".into(), Value::String(config.model_name.clone()));
    m.extra.insert("temperature".into(), json!(config.temperature));
    m.extra.insert("n_samples".into(), json!(config.n_samples));
    m.extra.insert("stats".into(), json!(stats));
    write_records(cli, &m, &records)?;
    Ok(())
}
