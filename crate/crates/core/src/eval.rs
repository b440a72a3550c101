//! Average Precision per genre and Mean Average Precision.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::ScoreTable;

/// Videos ordered by descending score for one genre, ties broken by
/// ascending video id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub genre: usize,
    pub video_ids: Vec<String>,
    pub relevant: Vec<bool>,
}

impl RankedList {
    pub fn from_scores(genre: usize, video_ids: &[String], scores: &[f64], relevant: &[bool]) -> Result<Self> {
        if video_ids.len() != scores.len() || scores.len() != relevant.len() {
            return Err(Error::InvalidInput("ids, scores and relevance differ in length".into()));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| video_ids[a].cmp(&video_ids[b]))
        });
        for w in order.windows(2) {
            if video_ids[w[0]] == video_ids[w[1]] {
                return Err(Error::DuplicateId(video_ids[w[0]].clone()));
            }
        }
        Ok(Self {
            genre,
            video_ids: order.iter().map(|&i| video_ids[i].clone()).collect(),
            relevant: order.iter().map(|&i| relevant[i]).collect(),
        })
    }
}

/// (1/R) Σ over relevant ranks r of precision@r.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, _) in relevance.iter().enumerate().filter(|(_, rel)| **rel) {
        hits += 1;
        sum += hits as f64 / (rank + 1) as f64;
    }
    if hits == 0 {
        return Err(Error::NoRelevant);
    }
    Ok(sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenreResult {
    pub genre: String,
    pub relevant_count: usize,
    /// `None` when the genre has no relevant test video.
    pub average_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub genres: Vec<GenreResult>,
    pub map: f64,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("genre\trelevant_count\tAP\n");
        for g in &self.genres {
            let ap = g.average_precision.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!("{}\t{}\t{}\n", g.genre, g.relevant_count, ap));
        }
        out.push_str(&format!("MAP\t\t{:.6}\n", self.map));
        out
    }

    /// One JSON object per genre, then a final `{"map": ...}` line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for g in &self.genres {
            out.push_str(&serde_json::to_string(g).expect("plain struct serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::json!({ "map": self.map }).to_string());
        out.push('\n');
        out
    }
}

/// Ranks every scored video per genre and averages AP over genres that have
/// at least one relevant video. `truth` maps video id → genre index in
/// `scores.genres`.
pub fn evaluate(scores: &ScoreTable, truth: &HashMap<String, usize>) -> Result<EvalReport> {
    if scores.n_videos() == 0 {
        return Err(Error::InvalidInput("no scored test videos".into()));
    }
    let labels: Vec<usize> = scores
        .video_ids
        .iter()
        .map(|id| truth.get(id).copied().ok_or_else(|| Error::MissingLabel(id.clone())))
        .collect::<Result<_>>()?;

    let mut genres = Vec::with_capacity(scores.genres.len());
    let mut aps = Vec::new();
    for (g, name) in scores.genres.iter().enumerate() {
        let relevant: Vec<bool> = labels.iter().map(|&l| l == g).collect();
        let relevant_count = relevant.iter().filter(|r| **r).count();
        let ap = if relevant_count == 0 {
            log::warn!("genre {name:?} has no relevant test video; excluded from MAP");
            None
        } else {
            let col = scores.scores.column(g).to_vec();
            let ranked = RankedList::from_scores(g, &scores.video_ids, &col, &relevant)?;
            Some(average_precision(&ranked.relevant)?)
        };
        if let Some(ap) = ap {
            aps.push(ap);
        }
        genres.push(GenreResult {
            genre: name.clone(),
            relevant_count,
            average_precision: ap,
        });
    }
    if aps.is_empty() {
        return Err(Error::InvalidInput("no genre has a relevant test video".into()));
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok(EvalReport { genres, map })
}
