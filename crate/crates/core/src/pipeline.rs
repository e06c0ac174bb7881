//! End-to-end experiment driver: corpus, marginal models, embeddings,
//! SVR predictors, fusion and the PCC report.
//!
//! Every trained artifact is cached next to a digest of everything that
//! determines it, so a rerun retrains only the stages whose inputs changed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assess::{
    evaluate, feature_fuse, inter_rater_pcc, score_fuse, select_lambda, ColumnStats, FusionConfig, FusionNorm, Report,
    ScoreTable,
};
use crate::binio;
use crate::corpus::{
    load_corpus, save_corpus_to, stack_context, synth_corpus, Corpus, FeatureSequence, Split, SynthConfig,
};
use crate::dnf::{dnf_embed, dnf_train, DnfModel};
use crate::error::{Error, Result};
use crate::flow::{flow_embed, flow_train, flow_utterance_loglik, AdamConfig, FlowConfig, FlowModel};
use crate::gmm::{gmm_loglik, gmm_train, GmmModel};
use crate::gop::gop_score;
use crate::ivector::{ivector_infer, tmatrix_train, ubm_stats, IVectorModel};
use crate::matrix::Matrix;
use crate::regress::{svr_predict_all, svr_train, SvrModel, SvrParams};

pub const REPORT_FILE: &str = "report.tsv";
pub const SCORES_FILE: &str = "scores.tsv";
pub const LAMBDA_CURVES_FILE: &str = "lambda_curves.tsv";
pub const HUMAN_SYSTEM: &str = "human_pairwise";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Gop,
    Gmm,
    Ivector,
    Nf,
    Dnf,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Gop => "gop",
            System::Gmm => "gmm",
            System::Ivector => "ivector",
            System::Nf => "nf",
            System::Dnf => "dnf",
        }
    }

    fn embeds(self) -> bool {
        matches!(self, System::Ivector | System::Nf | System::Dnf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Score,
    Feature,
}

/// How utterance ratings become SVR targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// One example per utterance with the mean rater score.
    #[default]
    Mean,
    /// One example per rater score.
    PerRater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub components: usize,
    pub iters: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig { components: 64, iters: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvectorConfig {
    pub rank: usize,
    pub iters: usize,
}

impl Default for IvectorConfig {
    fn default() -> Self {
        IvectorConfig { rank: 16, iters: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowStageConfig {
    pub layers: usize,
    pub hidden: usize,
    pub adam: AdamConfig,
}

impl Default for FlowStageConfig {
    fn default() -> Self {
        FlowStageConfig { layers: 6, hidden: 32, adam: AdamConfig { epochs: 10, ..AdamConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnfStageConfig {
    pub classes: usize,
    pub adam: AdamConfig,
}

impl Default for DnfStageConfig {
    fn default() -> Self {
        DnfStageConfig { classes: 5, adam: AdamConfig { epochs: 10, ..AdamConfig::default() } }
    }
}

fn default_systems() -> Vec<System> {
    vec![System::Gop, System::Gmm, System::Ivector, System::Nf, System::Dnf]
}

fn default_fusion_modes() -> Vec<FusionMode> {
    vec![FusionMode::Score, FusionMode::Feature]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds corpus synthesis and every training stage.
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default = "default_systems")]
    pub systems: Vec<System>,
    #[serde(default = "default_fusion_modes")]
    pub fusion_modes: Vec<FusionMode>,
    #[serde(default)]
    pub svr_targets: TargetMode,
    /// When present, the corpus is generated and written to the manifest
    /// location before the run.
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub context: ContextConfig,
    #[serde(default)]
    pub gmm: GmmConfig,
    #[serde(default)]
    pub ivector: IvectorConfig,
    #[serde(default)]
    pub flow: FlowStageConfig,
    #[serde(default)]
    pub dnf: DnfStageConfig,
    #[serde(default)]
    pub svr: SvrParams,
    #[serde(default)]
    pub fusion: FusionConfig,
}

impl PipelineConfig {
    /// Parses a config; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<PipelineConfig> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.paths.manifest.as_mut() {
            resolve(m);
        }
        resolve(&mut cfg.paths.model_dir);
        resolve(&mut cfg.paths.report_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.paths.manifest.as_deref().ok_or_else(|| Error::Config("paths.manifest is missing".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let manifest = self.manifest_path()?;
        if self.synth.is_none() && !manifest.is_file() {
            return Err(Error::Config(format!(
                "paths.manifest: {} does not exist and no [synth] section is given",
                manifest.display()
            )));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if self.systems.is_empty() {
            return Err(Error::Config("systems must name at least one system".into()));
        }
        if !self.fusion_modes.is_empty() && !self.systems.contains(&System::Gop) {
            return Err(Error::Config("fusion_modes need the gop system".into()));
        }
        if self.gmm.components == 0 || self.gmm.iters == 0 {
            return Err(Error::Config("gmm.components and gmm.iters must be >= 1".into()));
        }
        if self.ivector.rank == 0 || self.ivector.iters == 0 {
            return Err(Error::Config("ivector.rank and ivector.iters must be >= 1".into()));
        }
        if self.flow.layers == 0 || self.flow.hidden == 0 {
            return Err(Error::Config("flow.layers and flow.hidden must be >= 1".into()));
        }
        self.flow.adam.validate()?;
        if self.dnf.classes == 0 {
            return Err(Error::Config("dnf.classes must be >= 1".into()));
        }
        self.dnf.adam.validate()?;
        self.svr.validate()?;
        self.fusion.validate()
    }

    fn wants(&self, s: System) -> bool {
        self.systems.contains(&s)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Retrain every stage even when cached artifacts match.
    pub force: bool,
    /// Overrides the configured seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: Report,
    pub scores: ScoreTable,
    pub lambdas: BTreeMap<String, f64>,
    pub report_path: PathBuf,
}

/// Hex SHA-256 over length-prefixed parts.
pub fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Content digest of a corpus, independent of its on-disk layout.
pub fn corpus_digest(c: &Corpus) -> String {
    let mut h = Sha256::new();
    let f64s = |h: &mut Sha256, v: &[f64]| v.iter().for_each(|x| h.update(x.to_le_bytes()));
    for name in &c.phone_table {
        h.update(name.as_bytes());
        h.update([0]);
    }
    f64s(&mut h, c.prior.as_slice());
    for u in &c.utterances {
        h.update(u.id().as_bytes());
        h.update([0]);
        h.update((u.features.frames.rows() as u64).to_le_bytes());
        f64s(&mut h, u.features.frames.as_slice());
        f64s(&mut h, u.posteriors.post.as_slice());
        for s in &u.alignment.segments {
            for v in [s.phone, s.start, s.end] {
                h.update((v as u64).to_le_bytes());
            }
        }
        h.update(&u.rating.rater_scores);
        h.update([0xff]);
    }
    for split in [Split::Train, Split::Dev, Split::Eval] {
        for id in c.splits.ids(split) {
            h.update(id.as_bytes());
            h.update([0]);
        }
        h.update([0xfe]);
    }
    hex::encode(h.finalize())
}

/// Stable byte rendering of a config value for cache keys.
fn section<T: std::fmt::Debug>(v: &T) -> Vec<u8> {
    format!("{v:?}").into_bytes()
}

/// Loads `file` when its recorded digest equals `key`, otherwise trains,
/// saves and records the digest.
struct StageCache<'a> {
    dir: &'a Path,
    force: bool,
}

impl StageCache<'_> {
    fn get<T>(
        &self,
        file: &str,
        key: &str,
        load: impl FnOnce(&Path) -> Result<T>,
        save: impl FnOnce(&T, &Path) -> Result<()>,
        train: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let path = self.dir.join(file);
        let digest_path = self.dir.join(format!("{file}.digest"));
        if !self.force && path.is_file() {
            if let Ok(recorded) = std::fs::read_to_string(&digest_path) {
                if recorded.trim() == key {
                    log::info!("{file}: up to date");
                    return load(&path);
                }
            }
        }
        log::info!("{file}: training");
        let value = train()?;
        save(&value, &path)?;
        binio::write_file(&digest_path, format!("{key}\n").as_bytes())?;
        Ok(value)
    }
}

/// Frames with the configured context window applied.
pub fn contextual_features(corpus: &Corpus, ctx: ContextConfig) -> BTreeMap<String, FeatureSequence> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            let fs = if ctx.left == 0 && ctx.right == 0 {
                u.features.clone()
            } else {
                stack_context(&u.features, ctx.left, ctx.right)
            };
            (u.id().to_string(), fs)
        })
        .collect()
}

fn stacked_frames(feats: &BTreeMap<String, FeatureSequence>, ids: &[String]) -> Result<Matrix> {
    Matrix::vstack(ids.iter().map(|id| &feats[id].frames))
}

/// Fixed standardization for flow inputs, from training frames.
pub fn flow_input_normalization(frames: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let scale = frames.column_variances().into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    (frames.column_means(), scale)
}

/// SVR design matrix and targets for the given utterances.
pub fn svr_examples(
    corpus: &Corpus,
    ids: &[String],
    features: &BTreeMap<String, Vec<f64>>,
    mode: TargetMode,
) -> Result<(Matrix, Vec<f64>)> {
    let mut x = Matrix::zeros(0, 0);
    let mut y = Vec::new();
    for id in ids {
        let u = corpus.get(id).ok_or_else(|| Error::Data(format!("unknown utterance {id}")))?;
        let row = features.get(id).ok_or_else(|| Error::Data(format!("no embedding for {id}")))?;
        match mode {
            TargetMode::Mean => {
                x.push_row(row)?;
                y.push(u.rating.mean_score);
            }
            TargetMode::PerRater => {
                for &s in &u.rating.rater_scores {
                    x.push_row(row)?;
                    y.push(f64::from(s));
                }
            }
        }
    }
    Ok((x, y))
}

/// Writes `utterance_id` followed by one column per embedding dimension.
pub fn embeddings_tsv(emb: &BTreeMap<String, Vec<f64>>) -> String {
    let dim = emb.values().next().map_or(0, Vec::len);
    let mut out = String::from("utterance_id");
    for d in 0..dim {
        let _ = write!(out, "\tz{d}");
    }
    out.push('\n');
    for (id, v) in emb {
        out.push_str(id);
        for x in v {
            let _ = write!(out, "\t{x}");
        }
        out.push('\n');
    }
    out
}

pub fn read_embeddings_tsv(text: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| Error::Data("empty embeddings file".into()))?;
    let cols = header.split('\t').count();
    if !header.starts_with("utterance_id") {
        return Err(Error::Data("embeddings file must start with utterance_id".into()));
    }
    let mut out = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols {
            return Err(Error::Data(format!("embeddings line {}: expected {cols} fields", n + 2)));
        }
        let v = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::Data(format!("embeddings line {}: bad number", n + 2))))
            .collect::<Result<Vec<f64>>>()?;
        if out.insert(f[0].to_string(), v).is_some() {
            return Err(Error::Data(format!("duplicate embedding for {}", f[0])));
        }
    }
    Ok(out)
}

/// Stage seeds derived from the run seed.
struct Seeds {
    gmm: u64,
    tmatrix: u64,
    flow_init: u64,
    flow_adam: u64,
    dnf_adam: u64,
}

impl Seeds {
    fn from(seed: u64) -> Seeds {
        Seeds {
            gmm: seed,
            tmatrix: seed.wrapping_add(1),
            flow_init: seed.wrapping_add(2),
            flow_adam: seed.wrapping_add(3),
            dnf_adam: seed.wrapping_add(4),
        }
    }
}

/// Runs every configured stage and writes the report, the per-utterance
/// score table and the dev fusion curves under `paths.report_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, opts: RunOptions) -> Result<PipelineOutput> {
    cfg.validate()?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let seeds = Seeds::from(seed);
    let manifest = cfg.manifest_path()?;
    let models = &cfg.paths.model_dir;
    let cache = StageCache { dir: models, force: opts.force };

    if let Some(synth) = &cfg.synth {
        let mut s = synth.clone();
        s.seed = seed;
        let key = digest(&[b"synth", &section(&s)]);
        let stamp = manifest.with_extension("digest");
        let fresh = !opts.force && manifest.is_file() && std::fs::read_to_string(&stamp).is_ok_and(|k| k.trim() == key);
        if !fresh {
            log::info!("synthesizing corpus at {}", manifest.display());
            let generated = synth_corpus(&s)?;
            save_corpus_to(&generated.corpus, manifest)?;
            binio::write_file(&stamp, format!("{key}\n").as_bytes())?;
        }
    }
    let corpus = load_corpus(manifest)?;
    let corpus_key = corpus_digest(&corpus);
    let feats = contextual_features(&corpus, cfg.context);
    let data_key = digest(&[corpus_key.as_bytes(), &section(&cfg.context)]);
    let train_ids = corpus.splits.ids(Split::Train).to_vec();
    if train_ids.is_empty() {
        return Err(Error::Data("the train split is empty".into()));
    }
    let all_ids: Vec<String> = corpus.utterances.iter().map(|u| u.id().to_string()).collect();
    let train_frames = stacked_frames(&feats, &train_ids)?;

    let mut table = ScoreTable::new(corpus.utterances.iter().map(|u| (u.id().to_string(), u.rating.mean_score)))?;
    let mut gop = BTreeMap::new();
    if cfg.wants(System::Gop) {
        for u in &corpus.utterances {
            gop.insert(u.id().to_string(), gop_score(&u.posteriors, &u.alignment)?.gop);
        }
        table.set_column_from("gop", &gop)?;
    }

    // UBM / GMM
    let need_gmm = cfg.wants(System::Gmm) || cfg.wants(System::Ivector);
    let gmm_key = digest(&[b"gmm", data_key.as_bytes(), &section(&cfg.gmm), &seeds.gmm.to_le_bytes()]);
    let ubm = if need_gmm {
        Some(cache.get("ubm.pgmm", &gmm_key, GmmModel::load, GmmModel::save, || {
            gmm_train(&train_frames, cfg.gmm.components, cfg.gmm.iters, seeds.gmm).map(|(m, _)| m)
        })?)
    } else {
        None
    };
    if cfg.wants(System::Gmm) {
        let ubm = ubm.as_ref().expect("trained above");
        let mut ll = BTreeMap::new();
        for id in &all_ids {
            ll.insert(id.clone(), gmm_loglik(ubm, &feats[id])?.1);
        }
        table.set_column_from("gmm_loglik", &ll)?;
    }

    let mut embeddings: Vec<(System, String, BTreeMap<String, Vec<f64>>)> = Vec::new();
    if cfg.wants(System::Ivector) {
        let ubm = ubm.as_ref().expect("trained above");
        let key = digest(&[b"ivector", gmm_key.as_bytes(), &section(&cfg.ivector), &seeds.tmatrix.to_le_bytes()]);
        let stats = all_ids
            .iter()
            .map(|id| ubm_stats(ubm, &feats[id]).map(|s| (id.clone(), s)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let model = cache.get("ivector.pivm", &key, IVectorModel::load, IVectorModel::save, || {
            let train: Vec<_> = train_ids.iter().map(|id| stats[id].clone()).collect();
            tmatrix_train(ubm, &train, cfg.ivector.rank, cfg.ivector.iters, seeds.tmatrix).map(|(m, _)| m)
        })?;
        let emb = stats
            .iter()
            .map(|(id, st)| ivector_infer(&model, st).map(|p| (id.clone(), p.mean)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        embeddings.push((System::Ivector, key, emb));
    }

    let flow_cfg = FlowConfig { layers: cfg.flow.layers, hidden: cfg.flow.hidden };
    let dim = corpus.feature_dim() * (1 + cfg.context.left + cfg.context.right);
    let backbone = || -> Result<FlowModel> {
        let (mean, scale) = flow_input_normalization(&train_frames);
        FlowModel::new(dim, &flow_cfg, seeds.flow_init)?.with_input_normalization(mean, scale)
    };
    if cfg.wants(System::Nf) {
        let adam = AdamConfig { seed: seeds.flow_adam, ..cfg.flow.adam.clone() };
        let key = digest(&[
            b"flow",
            data_key.as_bytes(),
            &section(&cfg.flow),
            &seeds.flow_init.to_le_bytes(),
            &section(&adam),
        ]);
        let model = cache.get("flow.pnf1", &key, FlowModel::load, FlowModel::save, || {
            flow_train(&backbone()?, &train_frames, &adam).map(|(m, _)| m)
        })?;
        let mut ll = BTreeMap::new();
        let mut emb = BTreeMap::new();
        for id in &all_ids {
            ll.insert(id.clone(), flow_utterance_loglik(&model, &feats[id])?);
            emb.insert(id.clone(), flow_embed(&model, &feats[id])?);
        }
        table.set_column_from("nf_loglik", &ll)?;
        embeddings.push((System::Nf, key, emb));
    }
    if cfg.wants(System::Dnf) {
        let adam = AdamConfig { seed: seeds.dnf_adam, ..cfg.dnf.adam.clone() };
        let key = digest(&[
            b"dnf",
            data_key.as_bytes(),
            &section(&cfg.flow.layers),
            &section(&cfg.flow.hidden),
            &section(&cfg.dnf.classes),
            &seeds.flow_init.to_le_bytes(),
            &section(&adam),
        ]);
        let model = cache.get("dnf.pdnf", &key, DnfModel::load, DnfModel::save, || {
            let mut labels = Vec::with_capacity(train_frames.rows());
            for id in &train_ids {
                let class = corpus.get(id).expect("split id").rating.class();
                if class >= cfg.dnf.classes {
                    return Err(Error::Config(format!("dnf.classes = {} cannot hold class {class}", cfg.dnf.classes)));
                }
                labels.extend(std::iter::repeat_n(class, feats[id].len()));
            }
            dnf_train(&backbone()?, &train_frames, &labels, cfg.dnf.classes, &adam).map(|(m, _)| m)
        })?;
        let emb = all_ids
            .iter()
            .map(|id| dnf_embed(&model, &feats[id]).map(|z| (id.clone(), z)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        embeddings.push((System::Dnf, key, emb));
    }

    // SVR predictors, trained on the train split only
    let svr_key = section(&cfg.svr);
    let targets = section(&cfg.svr_targets);
    let gop_stats = ColumnStats::fit(&train_ids.iter().map(|id| gop[id]).collect::<Vec<_>>());
    let feature_fusion = cfg.fusion_modes.contains(&FusionMode::Feature) && cfg.wants(System::Gop);
    let mut predicted_columns = Vec::new();
    let mut feature_columns = Vec::new();
    for (system, emb_key, emb) in &embeddings {
        debug_assert!(system.embeds());
        let name = format!("{}_svr", system.name());
        let key = digest(&[b"svr", emb_key.as_bytes(), &svr_key, &targets]);
        let model = cache.get(&format!("{name}.psvr"), &key, SvrModel::load, SvrModel::save, || {
            let (x, y) = svr_examples(&corpus, &train_ids, emb, cfg.svr_targets)?;
            svr_train(&x, &y, &cfg.svr)
        })?;
        let x_all = Matrix::from_rows(&all_ids.iter().map(|id| emb[id].clone()).collect::<Vec<_>>())?;
        table.set_column(&name, svr_predict_all(&model, &x_all)?)?;
        predicted_columns.push(name);

        if feature_fusion {
            let fused_emb: BTreeMap<String, Vec<f64>> = emb
                .iter()
                .map(|(id, z)| {
                    let mut v = z.clone();
                    v.push(gop_stats.apply(gop[id]));
                    (id.clone(), v)
                })
                .collect();
            let fname = format!("{}_feature_fusion", system.name());
            let key = digest(&[b"svr-feature", emb_key.as_bytes(), corpus_key.as_bytes(), &svr_key, &targets]);
            let model = cache.get(&format!("{fname}.psvr"), &key, SvrModel::load, SvrModel::save, || {
                let (x, y) = svr_examples(&corpus, &train_ids, &fused_emb, cfg.svr_targets)?;
                svr_train(&x, &y, &cfg.svr)
            })?;
            let gop_all: Vec<f64> = all_ids.iter().map(|id| gop[id]).collect();
            let x_fused = feature_fuse(&x_all, &gop_all, &gop_stats)?;
            feature_columns.push((fname, svr_predict_all(&model, &x_fused)?));
        }
    }

    // score fusion with the weight chosen on dev
    let mut lambdas = BTreeMap::new();
    let mut curves = String::from("system\tlambda\tdev_pcc\n");
    if cfg.fusion_modes.contains(&FusionMode::Score) && cfg.wants(System::Gop) {
        let dev = table.subset(corpus.splits.ids(Split::Dev))?;
        for pred in &predicted_columns {
            let system = pred.trim_end_matches("_svr");
            let out = format!("{system}_score_fusion");
            let norm = FusionNorm::fit(&dev, "gop", pred, cfg.fusion.normalization)?;
            let lambda = match cfg.fusion.lambda {
                Some(l) => l,
                None => {
                    let sel = select_lambda(&dev, "gop", pred, &norm, cfg.fusion.grid_step)?;
                    for (l, r) in &sel.curve {
                        let _ = writeln!(curves, "{out}\t{l:.2}\t{r:.6}");
                    }
                    sel.lambda
                }
            };
            table = score_fuse(&table, "gop", pred, &out, lambda, &norm)?;
            lambdas.insert(out, lambda);
        }
    }
    for (name, values) in feature_columns {
        table.set_column(&name, values)?;
    }

    let eval_ids = corpus.splits.ids(Split::Eval);
    if eval_ids.len() < 2 {
        return Err(Error::Data("the eval split needs at least 2 utterances".into()));
    }
    let mut report = Report::default();
    let ratings: Vec<Vec<f64>> = eval_ids
        .iter()
        .map(|id| corpus.get(id).expect("split id").rating.rater_scores.iter().map(|&s| f64::from(s)).collect())
        .collect();
    if ratings.iter().all(|r| r.len() == ratings[0].len()) && ratings[0].len() >= 2 {
        match inter_rater_pcc(&Matrix::from_rows(&ratings)?) {
            Ok(h) => report.push(HUMAN_SYSTEM, Split::Eval, h, None),
            Err(e) => log::warn!("no inter-rater agreement: {e}"),
        }
    }
    report.rows.extend(evaluate(&table, &corpus.splits, Split::Eval, &lambdas)?.rows);

    let dir = &cfg.paths.report_dir;
    let report_path = dir.join(REPORT_FILE);
    binio::write_file(&report_path, report.to_tsv().as_bytes())?;
    binio::write_file(&dir.join(SCORES_FILE), table.to_tsv().as_bytes())?;
    binio::write_file(&dir.join(LAMBDA_CURVES_FILE), curves.as_bytes())?;
    Ok(PipelineOutput { report, scores: table, lambdas, report_path })
}
