//! On-disk corpus layout.
//!
//! A corpus directory holds a TOML manifest that maps each role to a path
//! (relative paths resolve against the manifest's directory):
//!
//! ```toml
//! version = 1
//! features = "features"      # directory of <utterance_id>.prf
//! posteriors = "posteriors"  # directory of <utterance_id>.ppg
//! alignments = "alignments.tsv"
//! labels = "labels.tsv"
//! splits = "splits.tsv"
//! prior = "prior.tsv"        # optional, uniform when absent
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    Corpus, FeatureSequence, PhoneAlignment, PhonePrior, PosteriorGram, RatedUtterance, Segment, Split, SplitManifest,
    Utterance,
};
use crate::binio::{self, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"PRF1";
pub const ALIGNMENTS_HEADER: &str = "utterance_id\tphone_name\tstart_frame\tend_frame";
pub const LABELS_HEADER: &str = "utterance_id\tscores";
const SPLITS_HEADER: &str = "utterance_id\tsplit";
const PRIOR_HEADER: &str = "phone_name\tprior";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: Option<u32>,
    pub features: Option<PathBuf>,
    pub posteriors: Option<PathBuf>,
    pub alignments: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    #[serde(skip)]
    base: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// Standard layout relative to the manifest directory.
    pub fn standard() -> Manifest {
        Manifest {
            version: Some(1),
            features: Some("features".into()),
            posteriors: Some("posteriors".into()),
            alignments: Some("alignments.tsv".into()),
            labels: Some("labels.tsv".into()),
            splits: Some("splits.tsv".into()),
            prior: Some("prior.tsv".into()),
            base: PathBuf::new(),
        }
    }

    pub fn role(&self, name: &str) -> Result<PathBuf> {
        let p = match name {
            "features" => &self.features,
            "posteriors" => &self.posteriors,
            "alignments" => &self.alignments,
            "labels" => &self.labels,
            "splits" => &self.splits,
            "prior" => &self.prior,
            _ => return Err(Error::Config(format!("unknown manifest role {name}"))),
        };
        let p = p.as_ref().ok_or_else(|| Error::Config(format!("manifest is missing the `{name}` entry")))?;
        Ok(self.base.join(p))
    }

    pub fn feature_path(&self, id: &str) -> Result<PathBuf> {
        Ok(self.role("features")?.join(format!("{id}.prf")))
    }

    pub fn posterior_path(&self, id: &str) -> Result<PathBuf> {
        Ok(self.role("posteriors")?.join(format!("{id}.ppg")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

fn write_prf(w: &mut BinWriter<&mut Vec<u8>>, m: &Matrix) -> std::io::Result<()> {
    w.header(FEATURE_MAGIC)?;
    w.matrix(m)
}

pub fn write_features(path: &Path, fs: &FeatureSequence) -> Result<()> {
    binio::write_file(path, &binio::to_bytes(|w| write_prf(w, &fs.frames)))
}

fn read_prf<R: std::io::Read>(r: &mut BinReader<R>, path: &Path) -> Result<Matrix> {
    r.header(FEATURE_MAGIC).map_err(|m| Error::format(path, m))?;
    r.matrix().map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_features(path: &Path, utterance_id: &str) -> Result<FeatureSequence> {
    let bytes = binio::read_file(path)?;
    let mut r = BinReader::new(Cursor::new(bytes));
    let m = read_prf(&mut r, path)?;
    r.expect_eof().map_err(|e| Error::format(path, e.to_string()))?;
    FeatureSequence::new(utterance_id, m)
}

/// Posteriorgram file: phone table (count, then length-prefixed names)
/// followed by a PRF1 matrix block.
pub fn write_posteriorgram(path: &Path, pg: &PosteriorGram) -> Result<()> {
    let bytes = binio::to_bytes(|w| {
        w.usize(pg.phone_table.len())?;
        for name in &pg.phone_table {
            w.string(name)?;
        }
        write_prf(w, &pg.post)
    });
    binio::write_file(path, &bytes)
}

pub fn read_posteriorgram(path: &Path, utterance_id: &str) -> Result<PosteriorGram> {
    let bytes = binio::read_file(path)?;
    let mut r = BinReader::new(Cursor::new(bytes));
    let fmt = |e: std::io::Error| Error::format(path, e.to_string());
    let n = r.usize().map_err(fmt)?;
    let mut table = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        table.push(r.string().map_err(fmt)?);
    }
    let m = read_prf(&mut r, path)?;
    r.expect_eof().map_err(fmt)?;
    PosteriorGram::new(utterance_id, m, table)
}

fn read_tsv(path: &Path, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || (n == 0 && line == header) {
            continue;
        }
        rows.push((n + 1, line.split('\t').map(str::to_string).collect()));
    }
    Ok(rows)
}

fn bad_line(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::format(path, format!("line {line}: {msg}"))
}

pub fn write_alignments(path: &Path, alignments: &[&PhoneAlignment], phone_table: &[String]) -> Result<()> {
    let mut out = String::from(ALIGNMENTS_HEADER);
    out.push('\n');
    for al in alignments {
        for s in &al.segments {
            let name = phone_table
                .get(s.phone)
                .ok_or_else(|| Error::Data(format!("{}: phone {} not in table", al.utterance_id, s.phone)))?;
            let _ = writeln!(out, "{}\t{name}\t{}\t{}", al.utterance_id, s.start, s.end);
        }
    }
    binio::write_file(path, out.as_bytes())
}

/// Reads alignments, resolving phone names through `phone_table`.
pub fn read_alignments(path: &Path, phone_table: &[String]) -> Result<BTreeMap<String, PhoneAlignment>> {
    let lookup: BTreeMap<&str, usize> = phone_table.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut segs: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for (line, cols) in read_tsv(path, ALIGNMENTS_HEADER)? {
        if cols.len() != 4 {
            return Err(bad_line(path, line, "expected 4 columns"));
        }
        let phone =
            *lookup.get(cols[1].as_str()).ok_or_else(|| bad_line(path, line, format!("unknown phone {}", cols[1])))?;
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad_line(path, line, format!("bad frame index {s}")));
        segs.entry(cols[0].clone()).or_default().push(Segment {
            phone,
            start: parse(&cols[2])?,
            end: parse(&cols[3])?,
        });
    }
    segs.into_iter().map(|(id, s)| PhoneAlignment::new(id.clone(), s).map(|a| (id, a))).collect()
}

pub fn write_labels(path: &Path, labels: &[&RatedUtterance]) -> Result<()> {
    let mut out = String::from(LABELS_HEADER);
    out.push('\n');
    for l in labels {
        let scores: Vec<String> = l.rater_scores.iter().map(u8::to_string).collect();
        let _ = writeln!(out, "{}\t{}", l.utterance_id, scores.join(","));
    }
    binio::write_file(path, out.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, RatedUtterance>> {
    let mut out = BTreeMap::new();
    for (line, cols) in read_tsv(path, LABELS_HEADER)? {
        if cols.len() != 2 {
            return Err(bad_line(path, line, "expected 2 columns"));
        }
        let scores = cols[1]
            .split(',')
            .map(|s| s.trim().parse::<u8>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad_line(path, line, "bad rater score"))?;
        let r = RatedUtterance::new(cols[0].clone(), scores)?;
        if out.insert(cols[0].clone(), r).is_some() {
            return Err(bad_line(path, line, format!("duplicate utterance {}", cols[0])));
        }
    }
    Ok(out)
}

pub fn write_splits(path: &Path, splits: &SplitManifest) -> Result<()> {
    let mut rows: Vec<(&str, Split)> = Vec::new();
    for s in [Split::Train, Split::Dev, Split::Eval] {
        rows.extend(splits.ids(s).iter().map(|id| (id.as_str(), s)));
    }
    rows.sort();
    let mut out = String::from(SPLITS_HEADER);
    out.push('\n');
    for (id, s) in rows {
        let _ = writeln!(out, "{id}\t{}", s.name());
    }
    binio::write_file(path, out.as_bytes())
}

pub fn read_splits(path: &Path) -> Result<SplitManifest> {
    let (mut train, mut dev, mut eval) = (Vec::new(), Vec::new(), Vec::new());
    for (line, cols) in read_tsv(path, SPLITS_HEADER)? {
        if cols.len() != 2 {
            return Err(bad_line(path, line, "expected 2 columns"));
        }
        let id = cols[0].clone();
        match Split::parse(&cols[1]) {
            Some(Split::Train) => train.push(id),
            Some(Split::Dev) => dev.push(id),
            Some(Split::Eval) => eval.push(id),
            None => return Err(bad_line(path, line, format!("unknown split {}", cols[1]))),
        }
    }
    SplitManifest::new(train, dev, eval)
}

fn write_prior(path: &Path, prior: &PhonePrior, phone_table: &[String]) -> Result<()> {
    let mut out = String::from(PRIOR_HEADER);
    out.push('\n');
    for (name, p) in phone_table.iter().zip(prior.as_slice()) {
        // {:e} is the shortest round-tripping representation
        let _ = writeln!(out, "{name}\t{p:e}");
    }
    binio::write_file(path, out.as_bytes())
}

fn read_prior(path: &Path, phone_table: &[String]) -> Result<PhonePrior> {
    let mut by_name = BTreeMap::new();
    for (line, cols) in read_tsv(path, PRIOR_HEADER)? {
        if cols.len() != 2 {
            return Err(bad_line(path, line, "expected 2 columns"));
        }
        let p: f64 = cols[1].parse().map_err(|_| bad_line(path, line, "bad probability"))?;
        by_name.insert(cols[0].clone(), p);
    }
    let prior = phone_table
        .iter()
        .map(|n| by_name.get(n).copied().ok_or_else(|| Error::format(path, format!("no prior for phone {n}"))))
        .collect::<Result<Vec<_>>>()?;
    PhonePrior::new(prior)
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\', '\t']) || id.starts_with('.') {
        return Err(Error::Data(format!("utterance id {id:?} is not usable as a file name")));
    }
    Ok(())
}

/// Loads and cross-validates the corpus referenced by a manifest file.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest = Manifest::load(manifest_path)?;
    let splits = read_splits(&manifest.role("splits")?)?;
    if splits.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut labels = read_labels(&manifest.role("labels")?)?;

    let mut ids: Vec<&String> = splits.all_ids().collect();
    ids.sort();
    let mut posteriors = Vec::with_capacity(ids.len());
    for id in &ids {
        check_id(id)?;
        posteriors.push(read_posteriorgram(&manifest.posterior_path(id)?, id)?);
    }
    let phone_table = posteriors[0].phone_table.clone();
    let mut alignments = read_alignments(&manifest.role("alignments")?, &phone_table)?;
    let prior = match manifest.prior {
        Some(_) => read_prior(&manifest.role("prior")?, &phone_table)?,
        None => PhonePrior::uniform(phone_table.len()),
    };

    let mut utterances = Vec::with_capacity(ids.len());
    for (id, pg) in ids.iter().zip(posteriors) {
        let features = read_features(&manifest.feature_path(id)?, id)?;
        let alignment = alignments.remove(id.as_str()).ok_or_else(|| Error::Data(format!("{id}: no alignment")))?;
        let rating = labels.remove(id.as_str()).ok_or_else(|| Error::Data(format!("{id}: no labels")))?;
        utterances.push(Utterance { features, posteriors: pg, alignment, rating });
    }
    if let Some(id) = alignments.keys().next() {
        return Err(Error::Data(format!("alignment for unknown utterance {id}")));
    }
    Corpus::new(phone_table, prior, utterances, splits)
}

/// Writes a corpus in the standard layout and returns the manifest path.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let manifest_path = dir.join("manifest.toml");
    save_corpus_to(corpus, &manifest_path)?;
    Ok(manifest_path)
}

/// Writes a corpus in the standard layout next to the given manifest path.
pub fn save_corpus_to(corpus: &Corpus, manifest_path: &Path) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    let mut manifest = Manifest::standard();
    binio::write_file(manifest_path, manifest.to_toml().as_bytes())?;
    manifest.base = dir.to_path_buf();
    for u in &corpus.utterances {
        check_id(u.id())?;
        write_features(&manifest.feature_path(u.id())?, &u.features)?;
        write_posteriorgram(&manifest.posterior_path(u.id())?, &u.posteriors)?;
    }
    let als: Vec<&PhoneAlignment> = corpus.utterances.iter().map(|u| &u.alignment).collect();
    write_alignments(&manifest.role("alignments")?, &als, &corpus.phone_table)?;
    let labels: Vec<&RatedUtterance> = corpus.utterances.iter().map(|u| &u.rating).collect();
    write_labels(&manifest.role("labels")?, &labels)?;
    write_splits(&manifest.role("splits")?, &corpus.splits)?;
    write_prior(&manifest.role("prior")?, &corpus.prior, &corpus.phone_table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_corpus(frames: usize, dim: usize) -> Corpus {
        let phones = vec!["a".to_string(), "b".to_string()];
        let data: Vec<f64> = (0..frames * dim).map(|i| (i as f64).sin()).collect();
        let features = FeatureSequence::new("u1", Matrix::from_vec(frames, dim, data).unwrap()).unwrap();
        let post = Matrix::from_vec(frames, 2, (0..frames).flat_map(|_| [0.25, 0.75]).collect()).unwrap();
        let posteriors = PosteriorGram::new("u1", post, phones.clone()).unwrap();
        let alignment = PhoneAlignment::new("u1", vec![Segment { phone: 1, start: 0, end: frames }]).unwrap();
        let rating = RatedUtterance::new("u1", vec![3, 4]).unwrap();
        let splits = SplitManifest::new(vec!["u1".into()], vec![], vec![]).unwrap();
        Corpus::new(phones, PhonePrior::uniform(2), vec![Utterance { features, posteriors, alignment, rating }], splits)
            .unwrap()
    }

    #[test]
    fn minimal_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_corpus(10, 40);
        let manifest = save_corpus(&c, dir.path()).unwrap();
        let back = load_corpus(&manifest).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back, c);
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_corpus(4, 2);
        let manifest = save_corpus(&c, dir.path()).unwrap();
        std::fs::write(dir.path().join("splits.tsv"), "utterance_id\tsplit\n").unwrap();
        let err = load_corpus(&manifest).unwrap_err();
        assert!(err.to_string().contains("empty corpus"), "{err}");
    }

    #[test]
    fn bad_posterior_row_names_utterance_and_row() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_corpus(4, 2);
        let manifest = save_corpus(&c, dir.path()).unwrap();
        // rewrite row 2 so that it sums to 0.9
        let mut post = c.utterances[0].posteriors.post.clone();
        post.row_mut(2).copy_from_slice(&[0.15, 0.75]);
        let bytes = binio::to_bytes(|w| {
            w.usize(2)?;
            w.string("a")?;
            w.string("b")?;
            w.header(FEATURE_MAGIC)?;
            w.matrix(&post)
        });
        std::fs::write(dir.path().join("posteriors/u1.ppg"), bytes).unwrap();
        let err = load_corpus(&manifest).unwrap_err().to_string();
        assert!(err.contains("u1") && err.contains("row 2"), "{err}");
    }

    #[test]
    fn missing_feature_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_corpus(&tiny_corpus(3, 2), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("features/u1.prf")).unwrap();
        let err = load_corpus(&manifest).unwrap_err().to_string();
        assert!(err.contains("u1.prf"), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_corpus(&tiny_corpus(3, 2), dir.path()).unwrap();
        let fs = FeatureSequence::new("u1", Matrix::zeros(5, 2)).unwrap();
        write_features(&dir.path().join("features/u1.prf"), &fs).unwrap();
        let err = load_corpus(&manifest).unwrap_err().to_string();
        assert!(err.contains("u1") && err.contains("frames"), "{err}");
    }

    #[test]
    fn manifest_missing_role_names_it() {
        let m = Manifest::default();
        let err = m.role("labels").unwrap_err().to_string();
        assert!(err.contains("labels"));
    }

    #[test]
    fn prf_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.prf");
        std::fs::write(&p, b"NOPE\x01\0\0\0").unwrap();
        assert!(read_features(&p, "x").is_err());
    }
}
