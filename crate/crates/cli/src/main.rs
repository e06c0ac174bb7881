use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use proscore::assess::{
    evaluate, score_fuse, select_lambda, FusionNorm, Normalization, ScoreTable, DEFAULT_LAMBDA_STEP,
};
use proscore::binio::{sniff_magic, write_file};
use proscore::corpus::{load_corpus, save_corpus, synth_corpus, Corpus, Split, SynthConfig};
use proscore::dnf::{dnf_embed, dnf_train, DnfModel, DNF_MAGIC};
use proscore::flow::{flow_embed, flow_train, flow_utterance_loglik, AdamConfig, FlowConfig, FlowModel, FLOW_MAGIC};
use proscore::gmm::{gmm_loglik, gmm_train, GmmModel};
use proscore::gop::{competition_sweep, gop_score, sweep_tsv};
use proscore::ivector::{ivector_infer, tmatrix_train, ubm_stats, IVectorModel, IVECTOR_MAGIC};
use proscore::matrix::Matrix;
use proscore::pipeline::{
    embeddings_tsv, flow_input_normalization, read_embeddings_tsv, run_pipeline, svr_examples, PipelineConfig,
    RunOptions, TargetMode,
};
use proscore::regress::{svr_predict, svr_train, Gamma, Kernel, SvrModel, SvrParams};
use proscore::{Error, Result};

const DEFAULT_SEED: u64 = 7;

#[derive(Parser)]
#[command(name = "proscore", version, about = "ASR-free pronunciation proficiency scoring")]
struct Cli {
    /// Seed for synthesis and training; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Retrain stages even when cached artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured pipeline end to end.
    Run { config: Option<PathBuf> },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a diagonal GMM (the UBM) on the train split.
    TrainGmm {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 64)]
        components: usize,
        #[arg(long, default_value_t = 30)]
        iters: usize,
    },
    /// Train the i-vector loadings on top of a UBM.
    TrainIvector {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ubm: PathBuf,
        #[arg(long, default_value_t = 16)]
        rank: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// Train a normalizing flow by maximum likelihood.
    TrainFlow {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        flow: FlowArgs,
    },
    /// Train a discriminative flow with per-class prior means.
    TrainDnf {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        flow: FlowArgs,
        #[arg(long, default_value_t = 5)]
        classes: usize,
    },
    /// Write utterance embeddings from an i-vector, flow or DNF model.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an SVR from embeddings to rater scores.
    TrainSvr {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = TargetArg::Mean)]
        targets: TargetArg,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = KernelArg::Rbf)]
        kernel: KernelArg,
        /// "scale" or a positive number.
        #[arg(long, default_value = "scale")]
        gamma: String,
    },
    /// Score utterances with GOP and any given models.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        gmm: Option<PathBuf>,
        #[arg(long)]
        flow: Option<PathBuf>,
        /// SVR model; needs --embeddings.
        #[arg(long)]
        svr: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Column name for SVR predictions.
        #[arg(long, default_value = "predicted")]
        name: String,
    },
    /// Fuse GOP with a predicted score column.
    Fuse {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "predicted")]
        predicted: String,
        /// Fixed weight; chosen on the dev split when absent.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum, default_value_t = NormArg::Zscore)]
        normalization: NormArg,
    },
    /// PCC of every score column on one split.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
    },
    /// Sweep the two-Gaussian phone competition posterior over δ.
    Simulate {
        #[arg(long)]
        a: f64,
        #[arg(long, allow_hyphen_values = true)]
        delta_min: f64,
        #[arg(long, allow_hyphen_values = true)]
        delta_max: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlowArgs {
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Write the per-epoch loss as TSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Mean,
    PerRater,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Linear,
    Rbf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Zscore,
    None,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::Divergence(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

fn train_frames(corpus: &Corpus) -> Result<Matrix> {
    Matrix::vstack(corpus.split(Split::Train).iter().map(|u| &u.features.frames))
}

fn adam(f: &FlowArgs, seed: u64) -> AdamConfig {
    AdamConfig {
        learning_rate: f.learning_rate,
        batch_size: f.batch_size,
        epochs: f.epochs,
        seed,
        ..AdamConfig::default()
    }
}

fn backbone(corpus: &Corpus, frames: &Matrix, f: &FlowArgs, seed: u64) -> Result<FlowModel> {
    let (mean, scale) = flow_input_normalization(frames);
    FlowModel::new(corpus.feature_dim(), &FlowConfig { layers: f.layers, hidden: f.hidden }, seed)?
        .with_input_normalization(mean, scale)
}

fn write_trace(path: Option<&Path>, trace: &[f64]) -> Result<()> {
    if let Some(p) = path {
        let mut text = String::from("epoch\tnll\n");
        for (e, v) in trace.iter().enumerate() {
            text.push_str(&format!("{e}\t{v}\n"));
        }
        write_text(p, &text)?;
    }
    Ok(())
}

fn labels(corpus: &Corpus) -> BTreeMap<String, f64> {
    corpus.utterances.iter().map(|u| (u.id().to_string(), u.rating.mean_score)).collect()
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Run { config } => {
            let path = config.or(cli.config).ok_or_else(|| Error::Config("run needs a config file".into()))?;
            let cfg = PipelineConfig::load(&path)?;
            let out = run_pipeline(&cfg, RunOptions { force: cli.force, seed: cli.seed })?;
            print!("{}", out.report.to_tsv());
            eprintln!("report written to {}", out.report_path.display());
        }
        Command::Synth { out } => {
            let mut s = match &cli.config {
                Some(p) => PipelineConfig::load(p)?.synth.unwrap_or_default(),
                None => SynthConfig::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let generated = synth_corpus(&s)?;
            let manifest = save_corpus(&generated.corpus, &out)?;
            let oracle: String = std::iter::once("utterance_id\tproficiency\n".to_string())
                .chain(generated.oracle.iter().map(|(id, r)| format!("{id}\t{r}\n")))
                .collect();
            write_text(&out.join("oracle.tsv"), &oracle)?;
            println!("{}", manifest.display());
        }
        Command::TrainGmm { data, components, iters } => {
            let corpus = load_corpus(&data.manifest)?;
            let (m, trace) = gmm_train(&train_frames(&corpus)?, components, iters, seed)?;
            m.save(&data.out)?;
            log::info!("final mean log-likelihood {:?}", trace.loglik.last());
        }
        Command::TrainIvector { data, ubm, rank, iters } => {
            let corpus = load_corpus(&data.manifest)?;
            let ubm = GmmModel::load(&ubm)?;
            let stats =
                corpus.split(Split::Train).iter().map(|u| ubm_stats(&ubm, &u.features)).collect::<Result<Vec<_>>>()?;
            let (m, _) = tmatrix_train(&ubm, &stats, rank, iters, seed)?;
            m.save(&data.out)?;
        }
        Command::TrainFlow { data, flow } => {
            let corpus = load_corpus(&data.manifest)?;
            let frames = train_frames(&corpus)?;
            let init = backbone(&corpus, &frames, &flow, seed)?;
            let (m, trace) = flow_train(&init, &frames, &adam(&flow, seed))?;
            m.save(&data.out)?;
            write_trace(flow.trace.as_deref(), &trace)?;
        }
        Command::TrainDnf { data, flow, classes } => {
            let corpus = load_corpus(&data.manifest)?;
            let train = corpus.split(Split::Train);
            let frames = train_frames(&corpus)?;
            let labels: Vec<usize> =
                train.iter().flat_map(|u| std::iter::repeat_n(u.rating.class(), u.features.len())).collect();
            let init = backbone(&corpus, &frames, &flow, seed)?;
            let (m, trace) = dnf_train(&init, &frames, &labels, classes, &adam(&flow, seed))?;
            m.save(&data.out)?;
            write_trace(flow.trace.as_deref(), &trace)?;
        }
        Command::Embed { model, manifest, out } => {
            let corpus = load_corpus(&manifest)?;
            let magic = sniff_magic(&model)?;
            let mut emb = BTreeMap::new();
            if &magic == IVECTOR_MAGIC {
                let m = IVectorModel::load(&model)?;
                for u in &corpus.utterances {
                    let st = ubm_stats(&m.ubm, &u.features)?;
                    emb.insert(u.id().to_string(), ivector_infer(&m, &st)?.mean);
                }
            } else if &magic == FLOW_MAGIC {
                let m = FlowModel::load(&model)?;
                for u in &corpus.utterances {
                    emb.insert(u.id().to_string(), flow_embed(&m, &u.features)?);
                }
            } else if &magic == DNF_MAGIC {
                let m = DnfModel::load(&model)?;
                for u in &corpus.utterances {
                    emb.insert(u.id().to_string(), dnf_embed(&m, &u.features)?);
                }
            } else {
                return Err(Error::format(&model, "not an i-vector, flow or DNF model"));
            }
            write_text(&out, &embeddings_tsv(&emb))?;
        }
        Command::TrainSvr { embeddings, manifest, out, split, targets, c, epsilon, kernel, gamma } => {
            let corpus = load_corpus(&manifest)?;
            let text = std::fs::read_to_string(&embeddings).map_err(|e| Error::io(&embeddings, e))?;
            let emb = read_embeddings_tsv(&text)?;
            let gamma =
                match gamma.as_str() {
                    "scale" => Gamma::Scale,
                    g => Gamma::Value(g.parse().map_err(|_| {
                        Error::InvalidArgument(format!("--gamma `{g}` is neither \"scale\" nor a number"))
                    })?),
                };
            let params = SvrParams {
                c,
                epsilon,
                kernel: match kernel {
                    KernelArg::Linear => Kernel::Linear,
                    KernelArg::Rbf => Kernel::Rbf,
                },
                gamma,
                ..SvrParams::default()
            };
            let mode = match targets {
                TargetArg::Mean => TargetMode::Mean,
                TargetArg::PerRater => TargetMode::PerRater,
            };
            let (x, y) = svr_examples(&corpus, corpus.splits.ids(split.into()), &emb, mode)?;
            svr_train(&x, &y, &params)?.save(&out)?;
        }
        Command::Score { manifest, out, split, gmm, flow, svr, embeddings, name } => {
            let corpus = load_corpus(&manifest)?;
            let utts: Vec<_> = match split {
                Some(s) => corpus.split(s.into()),
                None => corpus.utterances.iter().collect(),
            };
            let mut table = ScoreTable::new(utts.iter().map(|u| (u.id().to_string(), u.rating.mean_score)))?;
            let gop = utts
                .iter()
                .map(|u| gop_score(&u.posteriors, &u.alignment).map(|r| (u.id().to_string(), r.gop)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            table.set_column_from("gop", &gop)?;
            if let Some(p) = gmm {
                let m = GmmModel::load(&p)?;
                let v = utts
                    .iter()
                    .map(|u| gmm_loglik(&m, &u.features).map(|(_, mean)| (u.id().to_string(), mean)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                table.set_column_from("gmm_loglik", &v)?;
            }
            if let Some(p) = flow {
                let m = FlowModel::load(&p)?;
                let v = utts
                    .iter()
                    .map(|u| flow_utterance_loglik(&m, &u.features).map(|l| (u.id().to_string(), l)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                table.set_column_from("nf_loglik", &v)?;
            }
            match (svr, embeddings) {
                (Some(s), Some(e)) => {
                    let m = SvrModel::load(&s)?;
                    let text = std::fs::read_to_string(&e).map_err(|err| Error::io(&e, err))?;
                    let emb = read_embeddings_tsv(&text)?;
                    let mut v = BTreeMap::new();
                    for u in &utts {
                        let z = emb.get(u.id()).ok_or_else(|| Error::Data(format!("no embedding for {}", u.id())))?;
                        v.insert(u.id().to_string(), svr_predict(&m, z)?);
                    }
                    table.set_column_from(&name, &v)?;
                }
                (None, None) => {}
                _ => return Err(Error::InvalidArgument("--svr and --embeddings go together".into())),
            }
            write_text(&out, &table.scores_tsv())?;
        }
        Command::Fuse { scores, manifest, out, predicted, lambda, normalization } => {
            let corpus = load_corpus(&manifest)?;
            let text = std::fs::read_to_string(&scores).map_err(|e| Error::io(&scores, e))?;
            let table = ScoreTable::from_scores_tsv(&text, &labels(&corpus))?;
            let mode = match normalization {
                NormArg::Zscore => Normalization::Zscore,
                NormArg::None => Normalization::None,
            };
            let dev = table.subset(corpus.splits.ids(Split::Dev))?;
            let norm = FusionNorm::fit(&dev, "gop", &predicted, mode)?;
            let lambda = match lambda {
                Some(l) => l,
                None => select_lambda(&dev, "gop", &predicted, &norm, DEFAULT_LAMBDA_STEP)?.lambda,
            };
            let fused = score_fuse(&table, "gop", &predicted, "fused", lambda, &norm)?;
            write_text(&out, &fused.scores_tsv())?;
            eprintln!("lambda\t{lambda:.2}");
        }
        Command::Evaluate { scores, manifest, out, split } => {
            let corpus = load_corpus(&manifest)?;
            let text = std::fs::read_to_string(&scores).map_err(|e| Error::io(&scores, e))?;
            let table = ScoreTable::from_scores_tsv(&text, &labels(&corpus))?;
            let report = evaluate(&table, &corpus.splits, split.into(), &BTreeMap::new())?;
            match out {
                Some(p) => write_text(&p, &report.to_tsv())?,
                None => print!("{}", report.to_tsv()),
            }
        }
        Command::Simulate { a, delta_min, delta_max, steps, out } => {
            if steps == 0 || !delta_min.is_finite() || !delta_max.is_finite() || delta_min > delta_max {
                return Err(Error::InvalidArgument(format!(
                    "need steps >= 1 and a finite range, got [{delta_min}, {delta_max}] with {steps} steps"
                )));
            }
            let deltas: Vec<f64> = if steps == 1 {
                vec![delta_min]
            } else {
                (0..steps).map(|i| delta_min + (delta_max - delta_min) * i as f64 / (steps - 1) as f64).collect()
            };
            let tsv = sweep_tsv(&competition_sweep(a, &deltas)?);
            match out {
                Some(p) => write_text(&p, &tsv)?,
                None => print!("{tsv}"),
            }
        }
    }
    Ok(())
}
