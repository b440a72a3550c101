//! TF-IDF metadata features with per-genre χ² term selection.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::io_util::{read_all, write_all};

pub const DEFAULT_TERMS_PER_GENRE: usize = 20;

/// Term multiset: term → occurrence count.
pub type TermCounts = BTreeMap<String, usize>;

/// NFC-normalizes, lowercases, splits on non-alphanumerics and drops tokens
/// shorter than two characters.
pub fn tokenize(text: &str) -> TermCounts {
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    let mut out = TermCounts::new();
    for token in normalized.split(|c: char| !c.is_alphanumeric()) {
        if token.chars().count() >= 2 {
            *out.entry(token.to_string()).or_default() += 1;
        }
    }
    out
}

/// 2×2 contingency counts of one term against one genre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TermGenreStats {
    /// docs in the genre containing the term
    pub a: u64,
    /// docs in the genre lacking the term
    pub b: u64,
    /// docs outside the genre containing the term
    pub c: u64,
    /// docs outside the genre lacking the term
    pub d: u64,
}

impl TermGenreStats {
    pub fn n(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn chi_square(&self) -> f64 {
        chi_square(self.a, self.b, self.c, self.d)
    }

    /// The term is relatively more frequent inside the genre than outside it.
    pub fn favours_genre(&self) -> bool {
        if self.a + self.b == 0 {
            return false;
        }
        if self.c + self.d == 0 {
            return true;
        }
        // A/(A+B) > C/(C+D) without division
        self.a as u128 * (self.c + self.d) as u128 > self.c as u128 * (self.a + self.b) as u128
    }
}

/// N(AD − BC)² / ((A+B)(C+D)(A+C)(B+D)), or 0 when any marginal is empty.
pub fn chi_square(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let (a, b, c, d) = (a as f64, b as f64, c as f64, d as f64);
    let denom = (a + b) * (c + d) * (a + c) * (b + d);
    if denom == 0.0 {
        return 0.0;
    }
    let n = a + b + c + d;
    let cross = a * d - b * c;
    n * cross * cross / denom
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfModel {
    /// Terms per genre kept by the χ² ranking.
    pub m: usize,
    pub vocabulary: Vec<String>,
    pub idf: Vec<f64>,
    /// Lexicographically ordered union of the per-genre selections.
    pub selected_terms: Vec<String>,
    /// Selections per genre, best first.
    pub per_genre: Vec<Vec<String>>,
    #[serde(skip)]
    selected_idf: Vec<f64>,
}

impl TfIdfModel {
    fn finish(mut self) -> Result<Self> {
        if self.vocabulary.len() != self.idf.len() {
            return Err(Error::InvalidModel("vocabulary and idf lengths differ".into()));
        }
        self.selected_idf = self
            .selected_terms
            .iter()
            .map(|t| {
                self.vocabulary
                    .binary_search(t)
                    .map(|i| self.idf[i])
                    .map_err(|_| Error::InvalidModel(format!("selected term {t:?} not in vocabulary")))
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn idf_of(&self, term: &str) -> Option<f64> {
        self.vocabulary.binary_search_by(|t| t.as_str().cmp(term)).ok().map(|i| self.idf[i])
    }

    pub fn dim(&self) -> usize {
        self.selected_terms.len()
    }
}

/// Document frequencies and contingency tables for a labelled corpus.
#[derive(Debug, Clone)]
pub struct CorpusStats {
    pub n_docs: u64,
    pub genre_sizes: Vec<u64>,
    /// term → per-genre document frequency
    pub df_by_genre: BTreeMap<String, Vec<u64>>,
}

impl CorpusStats {
    pub fn new(docs: &[(TermCounts, usize)], n_genres: usize) -> Result<Self> {
        let mut genre_sizes = vec![0u64; n_genres];
        let mut df_by_genre: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for (tokens, genre) in docs {
            if *genre >= n_genres {
                return Err(Error::InvalidInput(format!("genre index {genre} out of range")));
            }
            genre_sizes[*genre] += 1;
            for term in tokens.keys() {
                df_by_genre.entry(term.clone()).or_insert_with(|| vec![0; n_genres])[*genre] += 1;
            }
        }
        Ok(Self {
            n_docs: docs.len() as u64,
            genre_sizes,
            df_by_genre,
        })
    }

    pub fn stats(&self, term: &str, genre: usize) -> TermGenreStats {
        let per_genre = self.df_by_genre.get(term);
        let a = per_genre.map_or(0, |v| v[genre]);
        let df: u64 = per_genre.map_or(0, |v| v.iter().sum());
        let in_genre = self.genre_sizes[genre];
        TermGenreStats {
            a,
            b: in_genre - a,
            c: df - a,
            d: self.n_docs - in_genre - (df - a),
        }
    }
}

/// Fits IDF over the training documents and keeps, for each genre, the `m`
/// terms with the highest χ² among those that are relatively more frequent
/// inside the genre (ties broken lexicographically). Terms with χ² = 0 are
/// never kept.
pub fn fit_tfidf(train_docs: &[(TermCounts, usize)], genres: &[String], m: usize) -> Result<TfIdfModel> {
    if train_docs.is_empty() {
        return Err(Error::InvalidInput("cannot fit TF-IDF on an empty corpus".into()));
    }
    if m == 0 {
        return Err(Error::InvalidConfig("m must be at least 1".into()));
    }
    let stats = CorpusStats::new(train_docs, genres.len())?;
    let n = stats.n_docs as f64;
    let vocabulary: Vec<String> = stats.df_by_genre.keys().cloned().collect();
    let idf = stats
        .df_by_genre
        .values()
        .map(|per_genre| (n / per_genre.iter().sum::<u64>() as f64).ln())
        .collect();

    let mut per_genre = Vec::with_capacity(genres.len());
    for g in 0..genres.len() {
        let mut ranked: Vec<(f64, &String)> = vocabulary
            .iter()
            .filter_map(|t| {
                let s = stats.stats(t, g);
                let chi = s.chi_square();
                (s.favours_genre() && chi > 0.0).then_some((chi, t))
            })
            .collect();
        ranked.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(y.1)));
        per_genre.push(ranked.into_iter().take(m).map(|(_, t)| t.clone()).collect::<Vec<_>>());
    }
    let mut selected_terms: Vec<String> = per_genre.iter().flatten().cloned().collect();
    selected_terms.sort();
    selected_terms.dedup();

    TfIdfModel {
        m,
        vocabulary,
        idf,
        selected_terms,
        per_genre,
        selected_idf: Vec::new(),
    }
    .finish()
}

/// Raw tf × idf over the selected terms, then L2-normalized.
pub fn encode_tfidf(model: &TfIdfModel, tokens: &TermCounts) -> Vec<f64> {
    let mut v: Vec<f64> = model
        .selected_terms
        .iter()
        .zip(&model.selected_idf)
        .map(|(t, idf)| tokens.get(t).copied().unwrap_or(0) as f64 * idf)
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn write_tfidf(model: &TfIdfModel, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(model).map_err(|e| Error::InvalidModel(e.to_string()))?;
    write_all(path, json.as_bytes())
}

pub fn read_tfidf(path: &Path) -> Result<TfIdfModel> {
    let bytes = read_all(path)?;
    let model: TfIdfModel = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    model.finish()
}
