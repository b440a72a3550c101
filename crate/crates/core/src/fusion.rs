//! Per-genre score tables and their late fusion.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io_util::{read_all, write_all};

/// Scores of test videos (rows) for each genre (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub modality: String,
    pub video_ids: Vec<String>,
    pub genres: Vec<String>,
    pub scores: Array2<f64>,
}

impl ScoreTable {
    pub fn new(
        modality: impl Into<String>,
        video_ids: Vec<String>,
        genres: Vec<String>,
        scores: Array2<f64>,
    ) -> Result<Self> {
        if scores.dim() != (video_ids.len(), genres.len()) {
            return Err(Error::InvalidInput(format!(
                "score matrix {:?} does not match {} videos x {} genres",
                scores.dim(),
                video_ids.len(),
                genres.len()
            )));
        }
        if let Some(((row, col), _)) = scores.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self {
            modality: modality.into(),
            video_ids,
            genres,
            scores,
        })
    }

    pub fn n_videos(&self) -> usize {
        self.video_ids.len()
    }
}

/// Maps every genre column affinely onto [0, 1]; constant columns become 0.5.
pub fn minmax_calibrate(table: &ScoreTable) -> ScoreTable {
    let mut out = table.clone();
    for mut col in out.scores.columns_mut() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            col.mapv_inplace(|v| (v - lo) / range);
        } else {
            col.fill(0.5);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Max,
    Sum,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(FusionMode::Max),
            "sum" => Ok(FusionMode::Sum),
            other => Err(Error::InvalidConfig(format!("unknown fusion mode {other:?} (max or sum)"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Max => "max",
            FusionMode::Sum => "sum",
        })
    }
}

/// Element-wise max or sum of already calibrated tables.
pub fn fuse(tables: &[ScoreTable], mode: FusionMode) -> Result<ScoreTable> {
    let (first, rest) = tables
        .split_first()
        .ok_or_else(|| Error::InvalidInput("nothing to fuse".into()))?;
    let mut scores = first.scores.clone();
    for t in rest {
        if t.video_ids != first.video_ids || t.genres != first.genres {
            return Err(Error::InvalidInput(format!(
                "table {:?} does not share videos and genres with {:?}",
                t.modality, first.modality
            )));
        }
        match mode {
            FusionMode::Max => scores.zip_mut_with(&t.scores, |a, &b| *a = a.max(b)),
            FusionMode::Sum => scores += &t.scores,
        }
    }
    Ok(ScoreTable {
        modality: format!("fusion-{mode}"),
        video_ids: first.video_ids.clone(),
        genres: first.genres.clone(),
        scores,
    })
}

/// TSV with header `video_id` + genre names. Values use Rust's shortest
/// round-trip formatting.
pub fn score_table_to_tsv(table: &ScoreTable) -> String {
    let mut out = String::from("video_id");
    for g in &table.genres {
        out.push('\t');
        out.push_str(g);
    }
    out.push('\n');
    for (id, row) in table.video_ids.iter().zip(table.scores.rows()) {
        out.push_str(id);
        for v in row {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_score_table(table: &ScoreTable, path: &Path) -> Result<()> {
    write_all(path, score_table_to_tsv(table).as_bytes())
}

/// Reads a score table; the modality is taken from the file stem.
pub fn read_score_table(path: &Path) -> Result<ScoreTable> {
    let text = String::from_utf8(read_all(path)?).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "not valid UTF-8".into(),
    })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty score table".into()))?;
    let mut cols = header.split('\t');
    if cols.next() != Some("video_id") {
        return Err(parse_err(1, "header must start with video_id".into()));
    }
    let genres: Vec<String> = cols.map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        let mut cells = line.split('\t');
        let id = cells.next().unwrap_or_default().to_string();
        let row: Vec<f64> = cells
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(i + 1, e.to_string()))?;
        if row.len() != genres.len() {
            return Err(parse_err(i + 1, format!("expected {} scores, found {}", genres.len(), row.len())));
        }
        ids.push(id);
        values.extend(row);
    }
    let scores = Array2::from_shape_vec((ids.len(), genres.len()), values).unwrap();
    let modality = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ScoreTable::new(modality, ids, genres, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn table(name: &str, scores: Array2<f64>) -> ScoreTable {
        let ids = (0..scores.nrows()).map(|i| format!("v{i}")).collect();
        let genres = (0..scores.ncols()).map(|i| format!("g{i}")).collect();
        ScoreTable::new(name, ids, genres, scores).unwrap()
    }

    #[test]
    fn calibration_cases() {
        let t = minmax_calibrate(&table("a", array![[0.0, 3.0], [5.0, 3.0], [10.0, 3.0]]));
        assert_eq!(t.scores.column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(t.scores.column(1).to_vec(), vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn max_and_sum() {
        let a = table("a", array![[0.2, 0.8]]);
        let b = table("b", array![[0.5, 0.4]]);
        let max = fuse(&[a.clone(), b.clone()], FusionMode::Max).unwrap();
        assert_eq!(max.scores, array![[0.5, 0.8]]);
        assert_eq!(max.modality, "fusion-max");
        let sum = fuse(&[a.clone(), b], FusionMode::Sum).unwrap();
        assert!((sum.scores[(0, 0)] - 0.7).abs() < 1e-15);
        assert!((sum.scores[(0, 1)] - 1.2).abs() < 1e-15);
        assert_eq!(sum.modality, "fusion-sum");
        assert_eq!(fuse(std::slice::from_ref(&a), FusionMode::Max).unwrap().scores, a.scores);
    }

    #[test]
    fn mismatched_tables_rejected() {
        let a = table("a", array![[0.2, 0.8]]);
        let b = table("b", array![[0.2, 0.8], [0.1, 0.1]]);
        assert!(fuse(&[a.clone(), b], FusionMode::Sum).is_err());
        let mut c = a.clone();
        c.video_ids[0] = "other".into();
        assert!(fuse(&[a, c], FusionMode::Max).is_err());
        assert!(fuse(&[], FusionMode::Max).is_err());
    }

    #[test]
    fn invalid_table_rejected() {
        assert!(ScoreTable::new("x", vec!["a".into()], vec!["g".into()], array![[f64::NAN]]).is_err());
        assert!(ScoreTable::new("x", vec!["a".into()], vec![], array![[1.0]]).is_err());
    }

    #[test]
    fn tsv_roundtrip_is_exact() {
        let t = table("visual", array![[0.1, -2.5e-7], [1.0 / 3.0, 12345.678]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("visual.tsv");
        write_score_table(&t, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("video_id\tg0\tg1\n"));
        assert_eq!(read_score_table(&p).unwrap(), t);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("MAX".parse::<FusionMode>().unwrap(), FusionMode::Max);
        assert_eq!("sum".parse::<FusionMode>().unwrap(), FusionMode::Sum);
        assert!("mean".parse::<FusionMode>().is_err());
    }
}
