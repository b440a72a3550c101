//! Stage drivers over a work directory, plus the in-memory experiment loop
//! used by sweeps.
//!
//! Work directory layout:
//!
//! ```text
//! descriptors/<modality>/<id>.fvd   extracted per-keyframe descriptors
//! gmm-<modality>.bin                trained GMM
//! features/<modality>/<id>.fvd      one feature row per video (T = 1)
//! features/<modality>/index.jsonl   feature index
//! tfidf.json                        text model
//! svm-<modality>.bin                one-vs-rest SVMs
//! scores/<name>.tsv                 per-genre score tables
//! reports/<name>.tsv, .jsonl        evaluation reports
//! ```
//!
//! Concurrent invocations on the same work directory are not supported.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_manifest, load_manifest_with_genres, read_descriptors, write_descriptors, DatasetManifest,
    DescriptorSequence, Split, VideoEntry,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::fisher::{encode_fisher, normalize_values, NormalizationSpec, DEFAULT_ALPHA};
use crate::fusion::{fuse, minmax_calibrate, read_score_table, write_score_table, FusionMode, ScoreTable};
use crate::gmm::{read_gmm, train_gmm, write_gmm, DiagonalGmm, GmmTrainConfig, GmmTrainingLog};
use crate::io_util::{read_all, write_all};
use crate::svm::{decision_scores, read_svm, train_svm, write_svm, LinearSvmModel, SvmTrainConfig};
use crate::text::{encode_tfidf, fit_tfidf, tokenize, write_tfidf, TermCounts, DEFAULT_TERMS_PER_GENRE};
use crate::visual::{extract_visual_sequence, DEFAULT_KEYFRAMES};

pub const VISUAL_MODALITY: &str = "visual";
pub const TEXT_MODALITY: &str = "text";
pub const DEFAULT_K: usize = 64;
pub const DEFAULT_NORMALIZATION: &str = "PN + L2 Norm";

/// Optional settings, as read from a TOML config file or collected
/// from command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub manifest: Option<PathBuf>,
    pub genres: Option<PathBuf>,
    pub work: Option<PathBuf>,
    pub keyframes: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    pub rel_tol: Option<f64>,
    pub variance_floor: Option<f64>,
    pub sample_cap: Option<usize>,
    pub norm: Option<String>,
    pub alpha: Option<f64>,
    pub c: Option<f64>,
    pub max_epochs: Option<usize>,
    pub tolerance: Option<f64>,
    pub m: Option<usize>,
    pub fusion: Option<String>,
    pub modality: Option<String>,
}

impl ConfigOverrides {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_all(path)?)
            .map_err(|_| Error::InvalidConfig(format!("{} is not valid UTF-8", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.genres, &mut cfg.work].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Fields set in `over` win.
    pub fn merge(self, over: ConfigOverrides) -> ConfigOverrides {
        ConfigOverrides {
            manifest: over.manifest.or(self.manifest),
            genres: over.genres.or(self.genres),
            work: over.work.or(self.work),
            keyframes: over.keyframes.or(self.keyframes),
            k: over.k.or(self.k),
            seed: over.seed.or(self.seed),
            max_iters: over.max_iters.or(self.max_iters),
            rel_tol: over.rel_tol.or(self.rel_tol),
            variance_floor: over.variance_floor.or(self.variance_floor),
            sample_cap: over.sample_cap.or(self.sample_cap),
            norm: over.norm.or(self.norm),
            alpha: over.alpha.or(self.alpha),
            c: over.c.or(self.c),
            max_epochs: over.max_epochs.or(self.max_epochs),
            tolerance: over.tolerance.or(self.tolerance),
            m: over.m.or(self.m),
            fusion: over.fusion.or(self.fusion),
            modality: over.modality.or(self.modality),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    /// Optional genre list file fixing the genre order.
    pub genres: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub n_keyframes: usize,
    pub gmm: GmmTrainConfig,
    pub norm_name: String,
    pub alpha: f64,
    pub normalization: NormalizationSpec,
    pub svm: SvmTrainConfig,
    pub m: usize,
    pub fusion: FusionMode,
    pub modality: String,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(manifest: impl Into<PathBuf>, work_dir: impl Into<PathBuf>) -> Self {
        Self::from_overrides(ConfigOverrides {
            manifest: Some(manifest.into()),
            work: Some(work_dir.into()),
            ..Default::default()
        })
        .expect("defaults are valid")
    }

    /// Fills unset fields with defaults and validates the result. The seed
    /// drives both GMM and SVM training.
    pub fn from_overrides(o: ConfigOverrides) -> Result<Self> {
        let manifest = o
            .manifest
            .ok_or_else(|| Error::InvalidConfig("no manifest given".into()))?;
        let seed = o.seed.unwrap_or(0);
        let mut gmm = GmmTrainConfig::new(o.k.unwrap_or(DEFAULT_K)).with_seed(seed);
        if let Some(v) = o.max_iters {
            gmm.max_iters = v;
        }
        if let Some(v) = o.rel_tol {
            gmm.rel_tol = v;
        }
        if let Some(v) = o.variance_floor {
            gmm.variance_floor = v;
        }
        if let Some(v) = o.sample_cap {
            gmm.sample_cap = v;
        }
        gmm.validate()?;
        let mut svm = SvmTrainConfig {
            seed,
            ..SvmTrainConfig::default()
        };
        if let Some(v) = o.c {
            svm.c = v;
        }
        if let Some(v) = o.max_epochs {
            svm.max_epochs = v;
        }
        if let Some(v) = o.tolerance {
            svm.tolerance = v;
        }
        svm.validate()?;
        let alpha = o.alpha.unwrap_or(DEFAULT_ALPHA);
        let norm_name = o.norm.unwrap_or_else(|| DEFAULT_NORMALIZATION.to_string());
        let normalization = NormalizationSpec::parse(&norm_name, alpha)?;
        let n_keyframes = o.keyframes.unwrap_or(DEFAULT_KEYFRAMES);
        if n_keyframes == 0 {
            return Err(Error::InvalidConfig("keyframes must be at least 1".into()));
        }
        let m = o.m.unwrap_or(DEFAULT_TERMS_PER_GENRE);
        if m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        let fusion = o.fusion.as_deref().unwrap_or("max").parse()?;
        let modality = o.modality.unwrap_or_else(|| VISUAL_MODALITY.to_string());
        if modality.is_empty() || modality.contains(['/', '\\']) || modality.starts_with("fusion-") {
            return Err(Error::InvalidConfig(format!("invalid modality name {modality:?}")));
        }
        Ok(Self {
            manifest,
            genres: o.genres,
            work_dir: o.work.unwrap_or_else(|| PathBuf::from("work")),
            n_keyframes,
            gmm,
            norm_name,
            alpha,
            normalization,
            svm,
            m,
            fusion,
            modality,
            seed,
        })
    }

    pub fn with_modality(&self, modality: &str) -> Self {
        Self {
            modality: modality.to_string(),
            ..self.clone()
        }
    }

    pub fn load_manifest(&self) -> Result<DatasetManifest> {
        match &self.genres {
            Some(g) => load_manifest_with_genres(&self.manifest, g),
            None => load_manifest(&self.manifest),
        }
    }

    pub fn work(&self) -> WorkDir {
        WorkDir(self.work_dir.clone())
    }
}

/// Paths of every artifact inside a work directory.
#[derive(Debug, Clone)]
pub struct WorkDir(pub PathBuf);

impl WorkDir {
    pub fn descriptor(&self, modality: &str, video_id: &str) -> PathBuf {
        self.0.join("descriptors").join(modality).join(format!("{video_id}.fvd"))
    }

    pub fn gmm(&self, modality: &str) -> PathBuf {
        self.0.join(format!("gmm-{modality}.bin"))
    }

    pub fn feature(&self, modality: &str, video_id: &str) -> PathBuf {
        self.0.join("features").join(modality).join(format!("{video_id}.fvd"))
    }

    pub fn feature_index(&self, modality: &str) -> PathBuf {
        self.0.join("features").join(modality).join("index.jsonl")
    }

    pub fn tfidf(&self) -> PathBuf {
        self.0.join("tfidf.json")
    }

    pub fn svm(&self, modality: &str) -> PathBuf {
        self.0.join(format!("svm-{modality}.bin"))
    }

    pub fn scores(&self, name: &str) -> PathBuf {
        self.0.join("scores").join(format!("{name}.tsv"))
    }

    pub fn report(&self, name: &str, ext: &str) -> PathBuf {
        self.0.join("reports").join(format!("{name}.{ext}"))
    }
}

fn require(path: &Path, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command: command.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractSummary {
    pub written: usize,
    pub skipped: usize,
}

/// Extracts visual descriptors for every video that has a frames directory.
pub fn extract_visual(cfg: &PipelineConfig) -> Result<ExtractSummary> {
    let manifest = cfg.load_manifest()?;
    let work = cfg.work();
    let (with_frames, without): (Vec<&VideoEntry>, Vec<&VideoEntry>) =
        manifest.entries.iter().partition(|e| e.frames_dir.is_some());
    for e in &without {
        log::warn!("{}: no frames_dir, skipping visual extraction", e.video_id);
    }
    with_frames.par_iter().try_for_each(|e| {
        let dir = e.frames_dir.as_ref().expect("partitioned on frames_dir");
        let seq = extract_visual_sequence(dir, cfg.n_keyframes)?.with_ids(e.video_id.clone(), VISUAL_MODALITY);
        write_descriptors(&seq, &work.descriptor(VISUAL_MODALITY, &e.video_id))
    })?;
    Ok(ExtractSummary {
        written: with_frames.len(),
        skipped: without.len(),
    })
}

/// Descriptor file of `entry` for `modality`: an explicit manifest path wins,
/// otherwise extracted visual descriptors in the work directory.
fn descriptor_source(cfg: &PipelineConfig, entry: &VideoEntry, modality: &str) -> Result<Option<PathBuf>> {
    if let Some(p) = entry.descriptor_paths.get(modality) {
        return Ok(Some(p.clone()));
    }
    if modality == VISUAL_MODALITY && entry.frames_dir.is_some() {
        let p = cfg.work().descriptor(modality, &entry.video_id);
        require(&p, "extract-visual")?;
        return Ok(Some(p));
    }
    Ok(None)
}

/// A descriptor sequence together with its manifest entry index.
pub type IndexedSequence = (usize, DescriptorSequence);

/// Loads the `modality` descriptors of all manifest entries (optionally one
/// split). Videos without a source for the modality are skipped with a
/// warning.
pub fn load_sequences(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
    modality: &str,
    split: Option<Split>,
) -> Result<Vec<IndexedSequence>> {
    let mut sources = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if split.is_some_and(|s| s != e.split) {
            continue;
        }
        match descriptor_source(cfg, e, modality)? {
            Some(p) => sources.push((i, p)),
            None => log::warn!("{}: no {modality} descriptors, skipping", e.video_id),
        }
    }
    sources
        .into_par_iter()
        .map(|(i, p)| {
            let seq = read_descriptors(&p)?.with_ids(manifest.entries[i].video_id.clone(), modality);
            Ok((i, seq))
        })
        .collect()
}

/// Row-wise concatenation of descriptor sequences.
pub fn stack_descriptors<'a>(seqs: impl IntoIterator<Item = &'a DescriptorSequence>) -> Result<Array2<f64>> {
    let views: Vec<ArrayView2<f64>> = seqs.into_iter().map(|s| s.data().view()).collect();
    if views.is_empty() {
        return Err(Error::InvalidInput("no descriptors to stack".into()));
    }
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|_| Error::DimensionMismatch {
        expected: views[0].ncols(),
        got: views.iter().map(|v| v.ncols()).find(|&c| c != views[0].ncols()).unwrap_or(0),
    })
}

/// Trains the GMM of the configured modality on all training descriptors.
pub fn run_train_gmm(cfg: &PipelineConfig) -> Result<GmmTrainingLog> {
    let manifest = cfg.load_manifest()?;
    let train = load_sequences(cfg, &manifest, &cfg.modality, Some(Split::Train))?;
    if train.is_empty() {
        return Err(Error::InvalidInput(format!("no training videos have {} descriptors", cfg.modality)));
    }
    let data = stack_descriptors(train.iter().map(|(_, s)| s))?;
    let (model, log) = train_gmm(data.view(), &cfg.gmm)?;
    write_gmm(&model, &cfg.work().gmm(&cfg.modality))?;
    Ok(log)
}

/// Normalized Fisher vectors, one row per sequence.
pub fn fisher_matrix(model: &DiagonalGmm, seqs: &[&DescriptorSequence], spec: &NormalizationSpec) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = seqs
        .par_iter()
        .map(|s| {
            let mut v = encode_fisher(model, s)?.into_values();
            normalize_values(&mut v, spec);
            Ok(v)
        })
        .collect::<Result<_>>()?;
    rows_to_matrix(rows, 2 * model.k() * model.dim())
}

fn rows_to_matrix(rows: Vec<Vec<f64>>, dim: usize) -> Result<Array2<f64>> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, dim), flat).map_err(|e| Error::InvalidInput(e.to_string()))
}

/// One line of `features/<modality>/index.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndexEntry {
    pub video_id: String,
    pub split: String,
    pub genre: String,
    /// GMM size and descriptor dimension for Fisher features.
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub dim: usize,
    pub normalization: String,
}

fn write_features(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
    modality: &str,
    rows: &[(usize, Vec<f64>)],
    index_entry: impl Fn(&VideoEntry, usize) -> FeatureIndexEntry,
) -> Result<()> {
    let work = cfg.work();
    rows.par_iter().try_for_each(|(i, v)| {
        let data = Array2::from_shape_vec((1, v.len()), v.clone()).expect("one row");
        let bytes = crate::dataset::fvd1_bytes(&data)?;
        write_all(&work.feature(modality, &manifest.entries[*i].video_id), &bytes)
    })?;
    let mut index = String::new();
    for (i, v) in rows {
        let entry = index_entry(&manifest.entries[*i], v.len());
        index.push_str(&serde_json::to_string(&entry).expect("plain struct serializes"));
        index.push('\n');
    }
    write_all(&work.feature_index(modality), index.as_bytes())
}

/// Encodes every video of the configured modality with the trained GMM and
/// the configured normalization.
pub fn run_encode_fv(cfg: &PipelineConfig) -> Result<usize> {
    let work = cfg.work();
    let gmm_path = work.gmm(&cfg.modality);
    require(&gmm_path, "train-gmm")?;
    let model = read_gmm(&gmm_path)?;
    let manifest = cfg.load_manifest()?;
    let seqs = load_sequences(cfg, &manifest, &cfg.modality, None)?;
    let refs: Vec<&DescriptorSequence> = seqs.iter().map(|(_, s)| s).collect();
    let fv = fisher_matrix(&model, &refs, &cfg.normalization)?;
    let rows: Vec<(usize, Vec<f64>)> = seqs.iter().map(|(i, _)| *i).zip(fv.rows().into_iter().map(|r| r.to_vec())).collect();
    let norm = cfg.normalization.to_string();
    write_features(cfg, &manifest, &cfg.modality, &rows, |e, dim| FeatureIndexEntry {
        video_id: e.video_id.clone(),
        split: e.split.to_string(),
        genre: manifest.genres[e.genre].clone(),
        k: Some(model.k()),
        d: Some(model.dim()),
        dim,
        normalization: norm.clone(),
    })?;
    Ok(rows.len())
}

fn read_metadata(entry: &VideoEntry) -> Result<Option<TermCounts>> {
    let Some(path) = &entry.metadata_path else {
        return Ok(None);
    };
    let text = String::from_utf8_lossy(&read_all(path)?).into_owned();
    Ok(Some(tokenize(&text)))
}

/// Whether any manifest entry has metadata.
pub fn has_metadata(manifest: &DatasetManifest) -> bool {
    manifest.entries.iter().any(|e| e.metadata_path.is_some())
}

/// Fits the TF-IDF model on training metadata and writes text features for
/// every video. Videos without metadata get an all-zero feature row.
pub fn run_train_text(cfg: &PipelineConfig) -> Result<usize> {
    let manifest = cfg.load_manifest()?;
    let docs: Vec<Option<TermCounts>> = manifest.entries.par_iter().map(read_metadata).collect::<Result<_>>()?;
    let train: Vec<(TermCounts, usize)> = manifest
        .entries
        .iter()
        .zip(&docs)
        .filter(|(e, _)| e.split == Split::Train)
        .filter_map(|(e, d)| d.clone().map(|d| (d, e.genre)))
        .collect();
    if train.is_empty() {
        return Err(Error::InvalidInput("no training video has metadata".into()));
    }
    let model = fit_tfidf(&train, &manifest.genres, cfg.m)?;
    if model.dim() == 0 {
        log::warn!("no discriminative terms selected; text features are empty");
    }
    write_tfidf(&model, &cfg.work().tfidf())?;
    let empty = TermCounts::new();
    let rows: Vec<(usize, Vec<f64>)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            if d.is_none() {
                log::warn!("{}: no metadata, using an empty document", manifest.entries[i].video_id);
            }
            (i, encode_tfidf(&model, d.as_ref().unwrap_or(&empty)))
        })
        .collect();
    write_features(cfg, &manifest, TEXT_MODALITY, &rows, |e, dim| FeatureIndexEntry {
        video_id: e.video_id.clone(),
        split: e.split.to_string(),
        genre: manifest.genres[e.genre].clone(),
        k: None,
        d: None,
        dim,
        normalization: "tfidf+l2".into(),
    })?;
    Ok(rows.len())
}

fn upstream_of(modality: &str) -> &'static str {
    if modality == TEXT_MODALITY {
        "train-text"
    } else {
        "encode-fv"
    }
}

struct FeatureSet {
    video_ids: Vec<String>,
    labels: Vec<usize>,
    features: Array2<f64>,
}

fn read_feature_index(cfg: &PipelineConfig, modality: &str) -> Result<Vec<FeatureIndexEntry>> {
    let path = cfg.work().feature_index(modality);
    require(&path, upstream_of(modality))?;
    let text = String::from_utf8_lossy(&read_all(&path)?).into_owned();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn load_features(cfg: &PipelineConfig, manifest: &DatasetManifest, modality: &str, split: Split) -> Result<FeatureSet> {
    let index = read_feature_index(cfg, modality)?;
    let work = cfg.work();
    let wanted: Vec<&FeatureIndexEntry> = index.iter().filter(|e| e.split == split.to_string()).collect();
    let dim = wanted.first().map_or(0, |e| e.dim);
    let rows: Vec<Vec<f64>> = wanted
        .par_iter()
        .map(|e| {
            let seq = read_descriptors(&work.feature(modality, &e.video_id))?;
            if seq.len() != 1 || seq.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: seq.dim(),
                });
            }
            Ok(seq.data().row(0).to_vec())
        })
        .collect::<Result<_>>()?;
    let labels = wanted
        .iter()
        .map(|e| {
            manifest
                .entry(&e.video_id)
                .map(|m| m.genre)
                .ok_or_else(|| Error::MissingLabel(e.video_id.clone()))
        })
        .collect::<Result<_>>()?;
    Ok(FeatureSet {
        video_ids: wanted.iter().map(|e| e.video_id.clone()).collect(),
        labels,
        features: rows_to_matrix(rows, dim)?,
    })
}

/// Trains one-vs-rest SVMs on the training features of the configured
/// modality.
pub fn run_train_svm(cfg: &PipelineConfig) -> Result<LinearSvmModel> {
    let manifest = cfg.load_manifest()?;
    let train = load_features(cfg, &manifest, &cfg.modality, Split::Train)?;
    let (model, _) = train_svm(train.features.view(), &train.labels, manifest.genres.len(), &cfg.svm)?;
    write_svm(&model, &cfg.work().svm(&cfg.modality))?;
    Ok(model)
}

/// Decision scores of `model` for every row of `features`.
pub fn score_table(
    model: &LinearSvmModel,
    modality: &str,
    video_ids: Vec<String>,
    genres: Vec<String>,
    features: ArrayView2<f64>,
) -> Result<ScoreTable> {
    let rows: Vec<Vec<f64>> = features
        .rows()
        .into_iter()
        .map(|r| decision_scores(model, r.as_slice().expect("standard layout")))
        .collect::<Result<_>>()?;
    let scores = rows_to_matrix(rows, model.n_genres())?;
    ScoreTable::new(modality, video_ids, genres, scores)
}

/// Scores all test videos of the configured modality.
pub fn run_predict(cfg: &PipelineConfig) -> Result<ScoreTable> {
    let work = cfg.work();
    let svm_path = work.svm(&cfg.modality);
    require(&svm_path, "train-svm")?;
    let model = read_svm(&svm_path)?;
    let manifest = cfg.load_manifest()?;
    let test = load_features(cfg, &manifest, &cfg.modality, Split::Test)?;
    let features = test.features.as_standard_layout();
    let table = score_table(&model, &cfg.modality, test.video_ids, manifest.genres.clone(), features.view())?;
    write_score_table(&table, &work.scores(&cfg.modality))?;
    Ok(table)
}

fn read_scores(cfg: &PipelineConfig, name: &str) -> Result<ScoreTable> {
    let path = cfg.work().scores(name);
    require(&path, "predict")?;
    read_score_table(&path)
}

/// Calibrates and fuses the score tables of `modalities`.
pub fn run_fuse(cfg: &PipelineConfig, modalities: &[String]) -> Result<ScoreTable> {
    let tables: Vec<ScoreTable> = modalities
        .iter()
        .map(|m| read_scores(cfg, m).map(|t| minmax_calibrate(&t)))
        .collect::<Result<_>>()?;
    let fused = fuse(&tables, cfg.fusion)?;
    write_score_table(&fused, &cfg.work().scores(&fused.modality))?;
    Ok(fused)
}

/// Ground-truth genre of every test video.
pub fn test_truth(manifest: &DatasetManifest) -> HashMap<String, usize> {
    manifest
        .split(Split::Test)
        .map(|e| (e.video_id.clone(), e.genre))
        .collect()
}

/// Evaluates `scores/<name>.tsv` and writes the TSV and JSON-lines reports.
pub fn run_evaluate(cfg: &PipelineConfig, name: &str) -> Result<EvalReport> {
    let table = read_scores(cfg, name)?;
    let manifest = cfg.load_manifest()?;
    let report = evaluate(&table, &test_truth(&manifest))?;
    let work = cfg.work();
    write_all(&work.report(name, "tsv"), report.to_tsv().as_bytes())?;
    write_all(&work.report(name, "jsonl"), report.to_jsonl().as_bytes())?;
    Ok(report)
}

pub const TIMING_STAGES: [&str; 7] = ["visual-features", "gmm-train", "fv-encode", "text", "svm", "fuse", "evaluate"];

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub seconds: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
    pub report: EvalReport,
}

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stage\tseconds\tpercent")?;
        for s in &self.stages {
            writeln!(f, "{}\t{:.3}\t{:.1}", s.stage, s.seconds, s.percent)?;
        }
        writeln!(f, "total\t{:.3}\t100.0", self.total_seconds)?;
        write!(f, "MAP\t{:.6}", self.report.map)
    }
}

/// Runs the whole pipeline once and measures each stage. The text and fuse
/// stages only run when the manifest has metadata.
pub fn run_timing(cfg: &PipelineConfig) -> Result<TimingReport> {
    let manifest = cfg.load_manifest()?;
    let with_text = has_metadata(&manifest);
    let mut secs = [0.0f64; 7];
    let mut timed = |stage: usize, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let start = Instant::now();
        f()?;
        secs[stage] += start.elapsed().as_secs_f64();
        Ok(())
    };

    let needs_extraction = cfg.modality == VISUAL_MODALITY
        && manifest
            .entries
            .iter()
            .any(|e| e.frames_dir.is_some() && !e.descriptor_paths.contains_key(VISUAL_MODALITY));
    if needs_extraction {
        timed(0, &mut || extract_visual(cfg).map(drop))?;
    }
    timed(1, &mut || run_train_gmm(cfg).map(drop))?;
    timed(2, &mut || run_encode_fv(cfg).map(drop))?;
    let text_cfg = cfg.with_modality(TEXT_MODALITY);
    if with_text {
        timed(3, &mut || run_train_text(cfg).map(drop))?;
    }
    timed(4, &mut || {
        run_train_svm(cfg)?;
        run_predict(cfg)?;
        if with_text {
            run_train_svm(&text_cfg)?;
            run_predict(&text_cfg)?;
        }
        Ok(())
    })?;
    let mut final_name = cfg.modality.clone();
    if with_text {
        timed(5, &mut || {
            final_name = run_fuse(cfg, &[cfg.modality.clone(), TEXT_MODALITY.to_string()])?.modality;
            Ok(())
        })?;
    }
    let mut report = None;
    timed(6, &mut || {
        report = Some(run_evaluate(cfg, &final_name)?);
        Ok(())
    })?;

    let total: f64 = secs.iter().sum();
    let stages = TIMING_STAGES
        .iter()
        .zip(secs)
        .map(|(&stage, seconds)| StageTiming {
            stage,
            seconds,
            percent: if total > 0.0 { 100.0 * seconds / total } else { 0.0 },
        })
        .collect();
    Ok(TimingReport {
        stages,
        total_seconds: total,
        report: report.expect("evaluate stage ran"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub normalization: String,
    pub report: EvalReport,
}

pub fn sweep_to_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k\tnormalization\tMAP\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{:.6}\n", r.k, r.normalization, r.report.map));
    }
    out
}

/// Train/test sequences of one modality with their labels.
pub struct Experiment {
    pub genres: Vec<String>,
    pub train: Vec<(DescriptorSequence, usize)>,
    pub test: Vec<(DescriptorSequence, usize)>,
}

impl Experiment {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let manifest = cfg.load_manifest()?;
        let seqs = load_sequences(cfg, &manifest, &cfg.modality, None)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in seqs {
            let e = &manifest.entries[i];
            match e.split {
                Split::Train => train.push((s, e.genre)),
                Split::Test => test.push((s, e.genre)),
            }
        }
        Ok(Self {
            genres: manifest.genres,
            train,
            test,
        })
    }

    /// Trains a GMM with `gmm_cfg` on all training descriptors.
    pub fn fit_gmm(&self, gmm_cfg: &GmmTrainConfig) -> Result<DiagonalGmm> {
        let data = stack_descriptors(self.train.iter().map(|(s, _)| s))?;
        Ok(train_gmm(data.view(), gmm_cfg)?.0)
    }

    /// Encodes, trains SVMs and evaluates test MAP for one GMM and
    /// normalization, without touching the file system.
    pub fn evaluate_with(&self, model: &DiagonalGmm, spec: &NormalizationSpec, svm_cfg: &SvmTrainConfig) -> Result<EvalReport> {
        let train_refs: Vec<&DescriptorSequence> = self.train.iter().map(|(s, _)| s).collect();
        let test_refs: Vec<&DescriptorSequence> = self.test.iter().map(|(s, _)| s).collect();
        let x_train = fisher_matrix(model, &train_refs, spec)?;
        let x_test = fisher_matrix(model, &test_refs, spec)?;
        let labels: Vec<usize> = self.train.iter().map(|(_, g)| *g).collect();
        let (svm, _) = train_svm(x_train.view(), &labels, self.genres.len(), svm_cfg)?;
        let ids: Vec<String> = self.test.iter().map(|(s, _)| s.video_id().to_string()).collect();
        let truth: HashMap<String, usize> = self.test.iter().map(|(s, g)| (s.video_id().to_string(), *g)).collect();
        let table = score_table(&svm, "sweep", ids, self.genres.clone(), x_test.view())?;
        evaluate(&table, &truth)
    }
}

/// One evaluation per (K, normalization) cell. Each K trains one GMM shared
/// by all normalizations.
pub fn run_sweep(cfg: &PipelineConfig, ks: &[usize], norms: &[(String, NormalizationSpec)]) -> Result<Vec<SweepRow>> {
    if ks.is_empty() || norms.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one K and one normalization".into()));
    }
    let exp = Experiment::load(cfg)?;
    let mut rows = Vec::new();
    for &k in ks {
        let gmm_cfg = GmmTrainConfig { k, ..cfg.gmm.clone() };
        gmm_cfg.validate()?;
        let model = exp.fit_gmm(&gmm_cfg)?;
        for (name, spec) in norms {
            let report = exp.evaluate_with(&model, spec, &cfg.svm)?;
            log::info!("sweep K={k} {name}: MAP {:.4}", report.map);
            rows.push(SweepRow {
                k,
                normalization: name.clone(),
                report,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_corpus, write_corpus, CorpusSpec};

    fn small_corpus(dir: &Path) -> PathBuf {
        let spec = CorpusSpec {
            train_per_genre: 6,
            test_per_genre: 3,
            dim: 6,
            min_frames: 5,
            max_frames: 10,
            separation: 2.0,
            ..CorpusSpec::default()
        };
        write_corpus(&generate_corpus(&spec), dir).unwrap()
    }

    #[test]
    fn config_file_and_overrides() {
        let file = ConfigOverrides::parse("k = 8\nnorm = \"l2\"\nseed = 3\nc = 0.5\n").unwrap();
        let flags = ConfigOverrides {
            k: Some(16),
            manifest: Some("m.tsv".into()),
            ..Default::default()
        };
        let cfg = PipelineConfig::from_overrides(file.merge(flags)).unwrap();
        assert_eq!(cfg.gmm.k, 16);
        assert_eq!(cfg.gmm.seed, 3);
        assert_eq!(cfg.svm.seed, 3);
        assert_eq!(cfg.svm.c, 0.5);
        assert_eq!(cfg.normalization.to_string(), "l2");
        assert_eq!(cfg.work_dir, PathBuf::from("work"));
        assert!(ConfigOverrides::parse("bogus = 1").is_err());
        assert!(PipelineConfig::from_overrides(ConfigOverrides::default()).is_err());
        let bad_k = ConfigOverrides {
            k: Some(0),
            manifest: Some("m.tsv".into()),
            ..Default::default()
        };
        assert!(PipelineConfig::from_overrides(bad_k).is_err());
    }

    #[test]
    fn config_paths_resolve_against_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "manifest = \"data/m.tsv\"\nwork = \"/abs/work\"\n").unwrap();
        let o = ConfigOverrides::load(&p).unwrap();
        assert_eq!(o.manifest.unwrap(), dir.path().join("data/m.tsv"));
        assert_eq!(o.work.unwrap(), PathBuf::from("/abs/work"));
    }

    #[test]
    fn staged_pipeline_on_small_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_corpus(dir.path());
        let mut cfg = PipelineConfig::new(&manifest, dir.path().join("work"));
        cfg.gmm.k = 4;

        assert!(matches!(
            run_evaluate(&cfg, VISUAL_MODALITY),
            Err(Error::MissingArtifact { ref command, .. }) if command == "predict"
        ));
        assert!(run_encode_fv(&cfg).unwrap_err().to_string().contains("run train-gmm first"));

        run_train_gmm(&cfg).unwrap();
        assert_eq!(run_encode_fv(&cfg).unwrap(), 27);
        let index = read_feature_index(&cfg, VISUAL_MODALITY).unwrap();
        assert_eq!(index[0].k, Some(4));
        assert_eq!(index[0].dim, 48);
        assert_eq!(index[0].normalization, "pn(0.5)+l2");
        run_train_svm(&cfg).unwrap();
        let table = run_predict(&cfg).unwrap();
        assert_eq!(table.scores.dim(), (9, 3));
        let report = run_evaluate(&cfg, VISUAL_MODALITY).unwrap();
        assert!((0.0..=1.0).contains(&report.map));
        assert!(cfg.work().report(VISUAL_MODALITY, "jsonl").is_file());

        let fused = run_fuse(&cfg, &[VISUAL_MODALITY.to_string()]).unwrap();
        assert_eq!(fused.modality, "fusion-max");
        assert!(cfg.work().scores("fusion-max").is_file());
    }

    #[test]
    fn stages_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_corpus(dir.path());
        let run = |work: &str| {
            let mut cfg = PipelineConfig::new(&manifest, dir.path().join(work));
            cfg.gmm.k = 3;
            run_train_gmm(&cfg).unwrap();
            run_encode_fv(&cfg).unwrap();
            run_train_svm(&cfg).unwrap();
            run_predict(&cfg).unwrap();
            cfg.work()
        };
        let (a, b) = (run("a"), run("b"));
        for p in [
            a.gmm(VISUAL_MODALITY),
            a.svm(VISUAL_MODALITY),
            a.scores(VISUAL_MODALITY),
            a.feature_index(VISUAL_MODALITY),
        ] {
            let q = b.0.join(p.strip_prefix(&a.0).unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap(), "{}", p.display());
        }
    }

    #[test]
    fn sweep_emits_one_row_per_cell() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_corpus(dir.path());
        let cfg = PipelineConfig::new(&manifest, dir.path().join("work"));
        let norms = vec![
            ("L2 Norm".to_string(), NormalizationSpec::parse("l2", 0.5).unwrap()),
            ("PN + L2 Norm".to_string(), NormalizationSpec::parse("pn+l2", 0.5).unwrap()),
        ];
        let rows = run_sweep(&cfg, &[2, 4, 8], &norms).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![2, 2, 4, 4, 8, 8]);
        assert_eq!(sweep_to_tsv(&rows).lines().count(), 7);
    }

    #[test]
    fn timing_percentages_sum_to_100() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_corpus(dir.path());
        let mut cfg = PipelineConfig::new(&manifest, dir.path().join("work"));
        cfg.gmm.k = 2;
        let t = run_timing(&cfg).unwrap();
        let names: Vec<&str> = t.stages.iter().map(|s| s.stage).collect();
        assert_eq!(names, TIMING_STAGES);
        let total: f64 = t.stages.iter().map(|s| s.percent).sum();
        assert!((total - 100.0).abs() < 0.1);
        // descriptor-only manifest: nothing to extract, no text, no fusion
        for stage in ["visual-features", "text", "fuse"] {
            assert_eq!(t.stages.iter().find(|s| s.stage == stage).unwrap().seconds, 0.0);
        }
        assert!(t.to_string().lines().last().unwrap().starts_with("MAP\t"));
    }

    #[test]
    fn stack_rejects_mixed_dims() {
        let a = DescriptorSequence::new("a", "v", Array2::zeros((2, 3))).unwrap();
        let b = DescriptorSequence::new("b", "v", Array2::zeros((1, 4))).unwrap();
        assert!(stack_descriptors([&a, &b]).is_err());
        assert_eq!(stack_descriptors([&a, &a]).unwrap().dim(), (4, 3));
    }
}
