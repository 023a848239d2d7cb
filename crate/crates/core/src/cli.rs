//! Command-line front end. `dispatch` parses argv, runs one subcommand inside a
//! sized rayon pool, and maps failures to sysexits-style codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{build_wiring, debias_toy, inlet_scores, kl_heatmap, outlet_scores, HubScoreTable};
use crate::error::{Error, ErrorCategory, Result};
use crate::evaluation::{classwise_mean_auc, head_detection_pr_auc, EvalReport};
use crate::head_scores::{head_score, BundlePatterns, ScoreKind};
use crate::preprocessing::{preprocess_bundle, preprocess_weights, PreprocessOptions};
use crate::rand_baseline::{empirical_pk_distribution, loose_reference, tight_reference, KlDirection};
use crate::similarity::{layerwise_frobenius_stats, score_all_pairs, Metric, PairMode, PairingType, SimilarityTable};
use crate::tensor_io::{load_annotations, load_bundle, HeadClassAnnotations, HeadId, TensorBundle, WType, WeightRef};
use crate::unembed::{display_token, project_head, UnembedPreprocessing};
use crate::weights::ModelWeights;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_BUNDLE: i32 = 65;
pub const EXIT_NUMERICAL: i32 = 70;
pub const EXIT_IO: i32 = 74;

pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Usage => EXIT_USAGE,
        ErrorCategory::Bundle => EXIT_BUNDLE,
        ErrorCategory::Numerical => EXIT_NUMERICAL,
        ErrorCategory::Io => EXIT_IO,
    }
}

/// Seed for one subsystem: the first 8 bytes of SHA-256("headsim/{label}/{seed}").
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("headsim/{label}/{seed}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Parser)]
#[command(name = "headsim", version, about = "Weight-space similarity of attention heads")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "HEADSIM_THREADS")]
    threads: Option<usize>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, env = "HEADSIM_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Score every head pair of one or more pairings (CSV).
    Similarity(SimilarityArgs),
    /// Top-k edges per pairing as Graphviz DOT or JSON.
    Wiring(WiringArgs),
    /// PK inlet/outlet hub scores (CSV).
    Hubs(HubsArgs),
    /// PK between random subspaces: samples CSV plus a JSON stats block.
    RandBaseline(RandBaselineArgs),
    /// Attention-pattern head scores (CSV).
    HeadScores(HeadScoresArgs),
    /// Top tokens of a head weight through the unembedding (JSON).
    ProjectUnembed(ProjectUnembedArgs),
    /// Head detection or pair classification AUCs (JSON).
    Evaluate(EvaluateArgs),
    /// Write a preprocessed copy of a bundle.
    Preprocess(PreprocessArgs),
    /// KL of every pairing's PK distribution against the random reference (4x4 CSV).
    KlHeatmap(KlHeatmapArgs),
    /// Layerwise Frobenius norms of QK and OV circuits (CSV).
    Norms(NormsArgs),
}

#[derive(Debug, Args, Serialize)]
struct BundleArgs {
    /// Tensor bundle directory.
    #[arg(long, env = "HEADSIM_BUNDLE")]
    bundle: PathBuf,
    /// Apply all weight preprocessing steps in memory before scoring.
    #[arg(long)]
    preprocess: bool,
}

#[derive(Debug, Args, Serialize)]
struct SimilarityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    bundle: BundleArgs,
    #[arg(long, default_value = "pk")]
    metric: Metric,
    /// One or more pairings, e.g. OQ or OQ,OK,OV.
    #[arg(long, value_delimiter = ',', required = true)]
    pairing: Vec<PairingType>,
    #[arg(long, default_value = "strict_earlier")]
    mode: PairMode,
    /// Subtract the mean score of random Gaussian weights and renormalize.
    #[arg(long)]
    debias: bool,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum GraphFormat {
    Dot,
    Json,
}

#[derive(Debug, Args, Serialize)]
struct WiringArgs {
    #[command(flatten)]
    #[serde(flatten)]
    bundle: BundleArgs,
    #[arg(long, default_value = "pk")]
    metric: Metric,
    #[arg(long, value_delimiter = ',', default_value = "OQ,OK,OV")]
    pairings: Vec<PairingType>,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long)]
    debias: bool,
    /// Head class annotations for node colors.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Label nodes with the top N unembedding tokens of their O weight.
    #[arg(long, default_value_t = 0)]
    label_tokens: usize,
    /// Output format (default: from the extension of --out, else dot).
    #[arg(long)]
    format: Option<GraphFormat>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum HubChoice {
    Inlet,
    Outlet,
    Both,
}

#[derive(Debug, Args, Serialize)]
struct HubsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    bundle: BundleArgs,
    #[arg(long, value_delimiter = ',', default_value = "OQ,OK,OV")]
    pairings: Vec<PairingType>,
    #[arg(long, value_enum, default_value = "both")]
    direction: HubChoice,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct RandBaselineArgs {
    #[arg(long, default_value_t = 768)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    m: usize,
    #[arg(long, default_value_t = 10_000)]
    pairs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct HeadScoresArgs {
    #[arg(long, env = "HEADSIM_BUNDLE")]
    bundle: PathBuf,
    #[arg(long)]
    kind: ScoreKind,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ProjectUnembedArgs {
    #[command(flatten)]
    #[serde(flatten)]
    bundle: BundleArgs,
    #[arg(long)]
    head: HeadId,
    #[arg(long, default_value = "O")]
    wtype: WType,
    #[arg(long, default_value = "center-normalize")]
    prep: UnembedPreprocessing,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Task {
    Detection,
    Classification,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    bundle: BundleArgs,
    #[arg(long, default_value = "pk")]
    metric: Metric,
    #[arg(long, value_enum)]
    task: Task,
    /// Head class annotations (default: the shipped GPT2-small table).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Pairings for the detection task.
    #[arg(long, value_delimiter = ',', default_value = "OQ,OK,OV")]
    pairings: Vec<PairingType>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_ln_fold: bool,
    #[arg(long)]
    no_center_writes: bool,
    #[arg(long)]
    no_center_unembed: bool,
    #[arg(long)]
    no_fold_bias: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DirectionArg {
    EmpiricalToReference,
    ReferenceToEmpirical,
}

#[derive(Debug, Args, Serialize)]
struct KlHeatmapArgs {
    #[command(flatten)]
    #[serde(flatten)]
    bundle: BundleArgs,
    #[arg(long, value_enum, default_value = "empirical-to-reference")]
    direction: DirectionArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct NormsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    bundle: BundleArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{}]: {}", category.as_str(), e.to_string().replace('\n', " "));
            exit_code(category)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| execute(cli))
}

/// The config echo attached to every output.
fn config_echo(cli: &Cli) -> Result<Value> {
    let command = serde_json::to_value(&cli.command)?;
    let (name, args) = match command {
        Value::Object(m) if m.len() == 1 => m.into_iter().next().expect("one entry"),
        other => ("unknown".to_string(), other),
    };
    Ok(json!({
        "tool": "headsim",
        "version": env!("CARGO_PKG_VERSION"),
        "command": name,
        "seed": cli.seed,
        "args": args,
    }))
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(p, bytes).map_err(|e| Error::io(p, e))
        }
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// CSV output plus its `<out>.config.json` sidecar.
fn write_csv_with_echo(cli: &Cli, out: Option<&Path>, bytes: &[u8], extra: Option<Value>) -> Result<()> {
    write_out(out, bytes)?;
    if let Some(p) = out {
        let mut echo = config_echo(cli)?;
        if let Some(extra) = extra {
            echo["result"] = extra;
        }
        write_out(Some(&sidecar_path(p)), &pretty(&echo)?)?;
    }
    Ok(())
}

fn write_json_with_echo(cli: &Cli, out: Option<&Path>, result: Value) -> Result<()> {
    let mut echo = config_echo(cli)?;
    echo["result"] = result;
    write_out(out, &pretty(&echo)?)
}

fn pretty(v: &Value) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn load_weights(args: &BundleArgs, with_unembed: bool) -> Result<(TensorBundle, ModelWeights)> {
    let bundle = load_bundle(&args.bundle)?;
    let mut weights = ModelWeights::from_bundle(&bundle, with_unembed)?;
    if args.preprocess {
        weights = preprocess_weights(&weights, PreprocessOptions::default())?;
    }
    Ok((bundle, weights))
}

fn annotations_or_default(path: Option<&Path>) -> Result<HeadClassAnnotations> {
    match path {
        Some(p) => load_annotations(p),
        None => Ok(HeadClassAnnotations::gpt2_small()),
    }
}

fn score_tables(
    cli: &Cli,
    weights: &ModelWeights,
    metric: Metric,
    pairings: &[PairingType],
    mode: PairMode,
    debias: bool,
) -> Result<(Vec<SimilarityTable>, Vec<Value>)> {
    let mut tables = Vec::with_capacity(pairings.len());
    let mut notes = Vec::new();
    for &p in pairings {
        let table = score_all_pairs(weights, metric, p, mode)?;
        if debias {
            let seed = derive_seed(cli.seed, &format!("debias/{p}"));
            let (t, info) = debias_toy(&table, &weights.config, 8, seed)?;
            if info.all_zero {
                eprintln!("warning: {p} scores are all at or below the random bias {:.6}", info.bias);
            }
            notes.push(json!({ "pairing": p, "debias": info }));
            tables.push(t);
        } else {
            tables.push(table);
        }
    }
    Ok((tables, notes))
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Similarity(a) => {
            let (_, weights) = load_weights(&a.bundle, false)?;
            let (tables, notes) = score_tables(cli, &weights, a.metric, &a.pairing, a.mode, a.debias)?;
            let mut buf = Vec::new();
            SimilarityTable::write_csv_many(&tables, &mut buf)?;
            let extra = (!notes.is_empty()).then_some(Value::Array(notes));
            write_csv_with_echo(cli, a.out.as_deref(), &buf, extra)
        }
        Command::Wiring(a) => {
            let (bundle, weights) = load_weights(&a.bundle, a.label_tokens > 0)?;
            let (tables, _) = score_tables(cli, &weights, a.metric, &a.pairings, PairMode::StrictEarlier, a.debias)?;
            let mut diagram = build_wiring(&tables, a.k)?;
            if a.label_tokens > 0 {
                let vocab = bundle.vocab()?;
                let mut heads: Vec<HeadId> = diagram.edges.iter().flat_map(|e| [e.src, e.dst]).collect();
                heads.sort();
                heads.dedup();
                for h in heads {
                    let r = project_head(
                        &weights,
                        WeightRef { head: h, wtype: WType::O },
                        UnembedPreprocessing::default(),
                        a.label_tokens,
                        vocab.as_deref(),
                    )?;
                    let labels = r
                        .top_k
                        .iter()
                        .map(|t| t.token.as_deref().map(display_token).unwrap_or_else(|| t.id.to_string()))
                        .collect();
                    diagram.labels.insert(h, labels);
                }
            }
            let annotations = a.annotations.as_deref().map(load_annotations).transpose()?;
            let format = a.format.unwrap_or_else(|| match a.out.as_deref().and_then(|p| p.extension()) {
                Some(ext) if ext == "json" => GraphFormat::Json,
                _ => GraphFormat::Dot,
            });
            match format {
                GraphFormat::Dot => {
                    let echo = serde_json::to_string(&config_echo(cli)?)?;
                    let dot = diagram.to_dot(annotations.as_ref(), Some(&format!("config: {echo}")));
                    write_out(a.out.as_deref(), dot.as_bytes())
                }
                GraphFormat::Json => write_json_with_echo(cli, a.out.as_deref(), serde_json::to_value(&diagram)?),
            }
        }
        Command::Hubs(a) => {
            let (_, weights) = load_weights(&a.bundle, false)?;
            let mut buf = Vec::new();
            let mut first = true;
            for &p in &a.pairings {
                let table = score_all_pairs(&weights, Metric::Pk, p, PairMode::StrictEarlier)?;
                let mut hubs: Vec<HubScoreTable> = Vec::new();
                if matches!(a.direction, HubChoice::Inlet | HubChoice::Both) {
                    hubs.push(inlet_scores(&table, &weights.config)?);
                }
                if matches!(a.direction, HubChoice::Outlet | HubChoice::Both) {
                    hubs.push(outlet_scores(&table, &weights.config)?);
                }
                for h in hubs {
                    let mut part = Vec::new();
                    h.write_csv(&mut part)?;
                    let skip = if first { 0 } else { part.iter().position(|&b| b == b'\n').map_or(0, |i| i + 1) };
                    buf.extend_from_slice(&part[skip..]);
                    first = false;
                }
            }
            write_csv_with_echo(cli, a.out.as_deref(), &buf, None)
        }
        Command::RandBaseline(a) => {
            let seed = derive_seed(cli.seed, "rand-baseline");
            let dist = empirical_pk_distribution(a.d, a.m, a.pairs, seed)?;
            let tight = tight_reference(a.d, a.m)?;
            let loose = loose_reference(a.d, a.m)?;
            let stats = json!({
                "n": dist.samples.len(),
                "mean": dist.mean,
                "variance": dist.variance,
                "standard_error": dist.standard_error(),
                "tight_reference": tight,
                "loose_reference": loose,
                "mean_z": (dist.mean - tight.mean) / dist.standard_error(),
            });
            let mut buf = String::from("index,pk\n");
            for (i, s) in dist.samples.iter().enumerate() {
                buf.push_str(&format!("{i},{s:.17e}\n"));
            }
            match a.out.as_deref() {
                Some(p) => {
                    write_csv_with_echo(cli, Some(p), buf.as_bytes(), Some(stats.clone()))?;
                    let mut echo = config_echo(cli)?;
                    echo["result"] = stats;
                    write_out(None, &pretty(&echo)?)
                }
                None => {
                    write_out(None, buf.as_bytes())?;
                    write_json_with_echo(cli, None, stats)
                }
            }
        }
        Command::HeadScores(a) => {
            let bundle = load_bundle(&a.bundle)?;
            let src = BundlePatterns::new(&bundle)?;
            let table = head_score(&src, a.kind)?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            write_csv_with_echo(cli, a.out.as_deref(), &buf, None)
        }
        Command::ProjectUnembed(a) => {
            let (bundle, weights) = load_weights(&a.bundle, true)?;
            weights.config.check_head(a.head)?;
            let vocab = bundle.vocab()?;
            let ranking = project_head(
                &weights,
                WeightRef { head: a.head, wtype: a.wtype },
                a.prep,
                a.top,
                vocab.as_deref(),
            )?;
            write_json_with_echo(cli, a.out.as_deref(), serde_json::to_value(&ranking)?)
        }
        Command::Evaluate(a) => {
            let (_, weights) = load_weights(&a.bundle, false)?;
            let annotations = annotations_or_default(a.annotations.as_deref())?;
            annotations.validate(&weights.config)?;
            let result = match a.task {
                Task::Detection => {
                    let positives = annotations.functional_heads();
                    let reports = a
                        .pairings
                        .iter()
                        .map(|&p| {
                            let t = score_all_pairs(&weights, a.metric, p, PairMode::StrictEarlier)?;
                            Ok(EvalReport {
                                metric: a.metric,
                                pairing: p,
                                class: None,
                                pr_auc: head_detection_pr_auc(&t, &positives)?,
                                roc_auc: None,
                                positives: positives.len(),
                                pairs: t.len(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    serde_json::to_value(reports)?
                }
                Task::Classification => serde_json::to_value(classwise_mean_auc(&weights, a.metric, &annotations)?)?,
            };
            write_json_with_echo(cli, a.out.as_deref(), result)
        }
        Command::Preprocess(a) => {
            let bundle = load_bundle(&a.input)?;
            let opts = PreprocessOptions {
                ln_fold: !a.no_ln_fold,
                center_writes: !a.no_center_writes,
                center_unembed: !a.no_center_unembed,
                fold_bias: !a.no_fold_bias,
            };
            let out = preprocess_bundle(&bundle, &a.out, opts)?;
            write_out(
                Some(&a.out.join("preprocess.config.json")),
                &pretty(&config_echo(cli)?)?,
            )?;
            eprintln!("wrote {} tensors to {}", out.len(), a.out.display());
            Ok(())
        }
        Command::KlHeatmap(a) => {
            let (_, weights) = load_weights(&a.bundle, false)?;
            let direction = match a.direction {
                DirectionArg::EmpiricalToReference => KlDirection::EmpiricalToReference,
                DirectionArg::ReferenceToEmpirical => KlDirection::ReferenceToEmpirical,
            };
            let heatmap = kl_heatmap(&weights, direction)?;
            let floored: Vec<String> = heatmap
                .cells
                .iter()
                .filter(|c| c.floored)
                .map(|c| c.pairing.to_string())
                .collect();
            if !floored.is_empty() {
                eprintln!("warning: variance floor applied for {}", floored.join(","));
            }
            let mut buf = Vec::new();
            heatmap.write_csv(&mut buf)?;
            write_csv_with_echo(cli, a.out.as_deref(), &buf, Some(serde_json::to_value(&heatmap)?))
        }
        Command::Norms(a) => {
            let (_, weights) = load_weights(&a.bundle, false)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["layer", "qk_mean", "qk_std", "ov_mean", "ov_std"])?;
            for s in layerwise_frobenius_stats(&weights) {
                w.write_record([
                    s.layer.to_string(),
                    format!("{:.17e}", s.qk_mean),
                    format!("{:.17e}", s.qk_std),
                    format!("{:.17e}", s.ov_mean),
                    format!("{:.17e}", s.ov_std),
                ])?;
            }
            let buf = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
            write_csv_with_echo(cli, a.out.as_deref(), &buf, None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_labelled() {
        assert_eq!(derive_seed(7, "a"), derive_seed(7, "a"));
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
        assert_ne!(derive_seed(7, "a"), derive_seed(8, "a"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(dispatch(["headsim"]), EXIT_USAGE);
        assert_eq!(dispatch(["headsim", "frobnicate"]), EXIT_USAGE);
        assert_eq!(
            dispatch(["headsim", "norms", "--bundle", "/nonexistent/bundle"]),
            EXIT_BUNDLE
        );
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("a/b.csv")), PathBuf::from("a/b.csv.config.json"));
    }
}
