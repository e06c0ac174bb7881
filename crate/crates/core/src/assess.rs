//! Fusion and evaluation: Pearson correlation, score and feature fusion,
//! interpolation-weight selection, rater agreement and the PCC report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Split, SplitManifest};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const REPORT_HEADER: &str = "system\tsplit\tpcc\tlambda";
pub const DEFAULT_LAMBDA_STEP: f64 = 0.02;
/// Dev PCCs closer than this count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Sample Pearson correlation.
pub fn pcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!("pcc of lengths {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pcc needs at least 2 points, got {n}")));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("pcc of a constant vector is undefined".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-utterance scores keyed by utterance id, with the mean rater label.
/// Rows are kept sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    ids: Vec<String>,
    labels: Vec<f64>,
    columns: Vec<(String, Vec<f64>)>,
}

impl ScoreTable {
    pub fn new(rows: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut rows: Vec<(String, f64)> = rows.into_iter().collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Data(format!("duplicate utterance id {}", w[0].0)));
        }
        if let Some((id, _)) = rows.iter().find(|(_, l)| !l.is_finite()) {
            return Err(Error::Data(format!("non-finite label for {id}")));
        }
        let (ids, labels) = rows.into_iter().unzip();
        Ok(ScoreTable { ids, labels, columns: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Data(format!("score table has no `{name}` column")))
    }

    /// Adds or replaces a column; values follow the sorted id order.
    pub fn set_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Dimension(format!(
                "column `{name}` has {} values for {} rows",
                values.len(),
                self.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite `{name}` score for {}", self.ids[i])));
        }
        match self.columns.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = values,
            None => self.columns.push((name.to_string(), values)),
        }
        Ok(())
    }

    /// Adds a column from an id-keyed map that must cover every row.
    pub fn set_column_from(&mut self, name: &str, values: &BTreeMap<String, f64>) -> Result<()> {
        let missing: Vec<&str> = self.ids.iter().filter(|id| !values.contains_key(*id)).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("column `{name}` lacks utterances: {}", missing.join(", "))));
        }
        let v = self.ids.iter().map(|id| values[id]).collect();
        self.set_column(name, v)
    }

    /// Rows for the given ids, all of which must be present.
    pub fn subset(&self, ids: &[String]) -> Result<ScoreTable> {
        let index: BTreeMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let missing: Vec<&str> = ids.iter().filter(|id| !index.contains_key(id.as_str())).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("utterances missing from score table: {}", missing.join(", "))));
        }
        let mut rows: Vec<usize> = ids.iter().map(|id| index[id.as_str()]).collect();
        rows.sort_unstable();
        rows.dedup();
        Ok(ScoreTable {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            columns: self.columns.iter().map(|(n, v)| (n.clone(), rows.iter().map(|&r| v[r]).collect())).collect(),
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("utterance_id\tlabel_mean");
        for (n, _) in &self.columns {
            out.push('\t');
            out.push_str(n);
        }
        out.push('\n');
        for (r, id) in self.ids.iter().enumerate() {
            let _ = write!(out, "{id}\t{}", self.labels[r]);
            for (_, v) in &self.columns {
                let _ = write!(out, "\t{}", v[r]);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<ScoreTable> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> =
            lines.next().ok_or_else(|| Error::Data("empty score table".into()))?.split('\t').collect();
        if header.len() < 2 || header[0] != "utterance_id" || header[1] != "label_mean" {
            return Err(Error::Data("score table must start with utterance_id\tlabel_mean".into()));
        }
        let mut rows = Vec::new();
        let mut cols: Vec<Vec<(String, f64)>> = vec![Vec::new(); header.len() - 2];
        for (ln, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != header.len() {
                return Err(Error::Data(format!("score table line {}: expected {} fields", ln + 2, header.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::Data(format!("score table line {}: bad number `{s}`", ln + 2)))
            };
            rows.push((fields[0].to_string(), num(fields[1])?));
            for (c, f) in fields[2..].iter().enumerate() {
                cols[c].push((fields[0].to_string(), num(f)?));
            }
        }
        let mut table = ScoreTable::new(rows)?;
        for (name, values) in header[2..].iter().zip(cols) {
            table.set_column_from(name, &values.into_iter().collect())?;
        }
        Ok(table)
    }
}

impl ScoreTable {
    /// Score columns only: `utterance_id` then one column per score.
    pub fn scores_tsv(&self) -> String {
        let full = self.to_tsv();
        full.lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split('\t').collect();
                f.remove(1);
                f.join("\t") + "\n"
            })
            .collect()
    }

    /// Reads a score file with or without a `label_mean` column, taking
    /// labels from `labels`.
    pub fn from_scores_tsv(text: &str, labels: &BTreeMap<String, f64>) -> Result<ScoreTable> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> =
            lines.next().ok_or_else(|| Error::Data("empty score file".into()))?.split('\t').collect();
        if header.first() != Some(&"utterance_id") {
            return Err(Error::Data("score file must start with utterance_id".into()));
        }
        let keep: Vec<usize> = (1..header.len()).filter(|&c| header[c] != "label_mean").collect();
        let mut ids = Vec::new();
        let mut cols: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); keep.len()];
        for (ln, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != header.len() {
                return Err(Error::Data(format!("score file line {}: expected {} fields", ln + 2, header.len())));
            }
            let id = f[0].to_string();
            let label = labels.get(&id).ok_or_else(|| Error::Data(format!("no label for scored utterance {id}")))?;
            for (k, &c) in keep.iter().enumerate() {
                let v = f[c]
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("score file line {}: bad number `{}`", ln + 2, f[c])))?;
                cols[k].insert(id.clone(), v);
            }
            ids.push((id, *label));
        }
        let mut table = ScoreTable::new(ids)?;
        for (k, &c) in keep.iter().enumerate() {
            table.set_column_from(header[c], &cols[k])?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Zscore,
    None,
}

/// Mean and standard deviation of one score column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    pub const IDENTITY: ColumnStats = ColumnStats { mean: 0.0, std: 1.0 };

    /// Population statistics; a constant column gets unit scale.
    pub fn fit(xs: &[f64]) -> ColumnStats {
        if xs.is_empty() {
            return Self::IDENTITY;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        ColumnStats { mean, std: if var > 0.0 { var.sqrt() } else { 1.0 } }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Fusion normalization fitted on the development split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionNorm {
    pub gop: ColumnStats,
    pub predicted: ColumnStats,
}

impl FusionNorm {
    pub fn fit(dev: &ScoreTable, gop: &str, predicted: &str, mode: Normalization) -> Result<FusionNorm> {
        let (g, p) = (dev.column(gop)?, dev.column(predicted)?);
        Ok(match mode {
            Normalization::Zscore => FusionNorm { gop: ColumnStats::fit(g), predicted: ColumnStats::fit(p) },
            Normalization::None => FusionNorm { gop: ColumnStats::IDENTITY, predicted: ColumnStats::IDENTITY },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Fixed interpolation weight; selected on the dev split when absent.
    pub lambda: Option<f64>,
    pub normalization: Normalization,
    pub grid_step: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { lambda: None, normalization: Normalization::Zscore, grid_step: DEFAULT_LAMBDA_STEP }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("fusion.lambda {l} is outside [0, 1]")));
            }
        }
        if !(self.grid_step > 0.0 && self.grid_step <= 1.0) {
            return Err(Error::Config("fusion.grid_step must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `λ·gop + (1−λ)·predicted` on normalized components.
pub fn fuse_values(gop: &[f64], predicted: &[f64], lambda: f64, norm: &FusionNorm) -> Vec<f64> {
    gop.iter()
        .zip(predicted)
        .map(|(g, p)| lambda * norm.gop.apply(*g) + (1.0 - lambda) * norm.predicted.apply(*p))
        .collect()
}

/// Writes the fused score of `gop` and `predicted` into column `out`.
pub fn score_fuse(
    table: &ScoreTable,
    gop: &str,
    predicted: &str,
    out: &str,
    lambda: f64,
    norm: &FusionNorm,
) -> Result<ScoreTable> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} is outside [0, 1]")));
    }
    let fused = fuse_values(table.column(gop)?, table.column(predicted)?, lambda, norm);
    let mut t = table.clone();
    t.set_column(out, fused)?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub pcc: f64,
    /// `(λ, dev PCC)` over the grid; NaN where the fused score is constant.
    pub curve: Vec<(f64, f64)>,
}

/// Exhaustive grid search on the dev table; ties go to the smaller weight.
pub fn select_lambda(
    dev: &ScoreTable,
    gop: &str,
    predicted: &str,
    norm: &FusionNorm,
    grid_step: f64,
) -> Result<LambdaSelection> {
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::InvalidArgument("grid step must lie in (0, 1]".into()));
    }
    let labels = dev.labels();
    if labels.len() < 2 || labels.iter().all(|l| *l == labels[0]) {
        return Err(Error::Data("development labels are constant; cannot select lambda".into()));
    }
    let (g, p) = (dev.column(gop)?, dev.column(predicted)?);
    let steps = (1.0 / grid_step).round() as usize;
    let mut curve = Vec::with_capacity(steps + 1);
    let mut best: Option<(f64, f64)> = None;
    for k in 0..=steps {
        let lambda = k as f64 / steps as f64;
        let r = pcc(&fuse_values(g, p, lambda, norm), labels).unwrap_or(f64::NAN);
        curve.push((lambda, r));
        if !r.is_nan() && best.is_none_or(|(_, b)| r > b + TIE_TOLERANCE) {
            best = Some((lambda, r));
        }
    }
    let (lambda, pcc) = best.ok_or_else(|| Error::Data("fused dev scores are constant for every lambda".into()))?;
    Ok(LambdaSelection { lambda, pcc, curve })
}

/// Appends the GOP score as a standardized last column.
pub fn feature_fuse(embeddings: &Matrix, gop: &[f64], stats: &ColumnStats) -> Result<Matrix> {
    if embeddings.rows() != gop.len() {
        return Err(Error::Dimension(format!("{} embeddings but {} GOP scores", embeddings.rows(), gop.len())));
    }
    let d = embeddings.cols();
    let mut data = Vec::with_capacity(gop.len() * (d + 1));
    for (r, g) in gop.iter().enumerate() {
        data.extend_from_slice(&embeddings.as_slice()[r * d..(r + 1) * d]);
        data.push(stats.apply(*g));
    }
    Matrix::from_vec(gop.len(), d + 1, data)
}

/// Mean pairwise PCC over raters (columns). Raters with constant scores are
/// left out.
pub fn inter_rater_pcc(ratings: &Matrix) -> Result<f64> {
    if ratings.cols() < 2 {
        return Err(Error::InvalidArgument("inter-rater agreement needs at least 2 raters".into()));
    }
    let columns: Vec<Vec<f64>> = (0..ratings.cols()).map(|c| ratings.iter_rows().map(|r| r[c]).collect()).collect();
    let kept: Vec<&Vec<f64>> = columns
        .iter()
        .enumerate()
        .filter(|(c, col)| {
            let constant = col.iter().all(|v| *v == col[0]);
            if constant {
                log::warn!("rater {c} gave constant scores and is excluded");
            }
            !constant
        })
        .map(|(_, col)| col)
        .collect();
    if kept.len() < 2 {
        return Err(Error::Data("fewer than 2 raters with varying scores".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            total += pcc(kept[i], kept[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub system: String,
    pub split: String,
    pub pcc: f64,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, system: &str, split: Split, pcc: f64, lambda: Option<f64>) {
        self.rows.push(ReportRow { system: system.to_string(), split: split.name().to_string(), pcc, lambda });
    }

    pub fn get(&self, system: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let lambda = r.lambda.map(|l| format!("{l:.2}")).unwrap_or_default();
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{lambda}", r.system, r.split, r.pcc);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Report> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Data(format!("report must start with `{REPORT_HEADER}`")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Data(format!("report line {}: malformed", n + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            rows.push(ReportRow {
                system: f[0].to_string(),
                split: f[1].to_string(),
                pcc: f[2].parse().map_err(|_| bad())?,
                lambda: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad())?) },
            });
        }
        Ok(Report { rows })
    }
}

/// PCC of every score column on one split. `lambdas` attaches the selected
/// fusion weight to fused columns. A constant column is reported as NaN.
pub fn evaluate(
    table: &ScoreTable,
    splits: &SplitManifest,
    split: Split,
    lambdas: &BTreeMap<String, f64>,
) -> Result<Report> {
    let ids: Vec<String> = splits.ids(split).to_vec();
    let present: BTreeSet<&str> = table.ids().iter().map(String::as_str).collect();
    let missing: Vec<&str> = ids.iter().map(String::as_str).filter(|id| !present.contains(id)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("{} utterances not scored: {}", split.name(), missing.join(", "))));
    }
    let sub = table.subset(&ids)?;
    let mut report = Report::default();
    for name in sub.column_names() {
        let r = match pcc(sub.column(name)?, sub.labels()) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{name}: {e}");
                f64::NAN
            }
        };
        report.push(name, split, r, lambdas.get(name).copied());
    }
    Ok(report)
}
