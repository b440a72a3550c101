//! Corpus manifest and descriptor file formats.
//!
//! The manifest is a UTF-8 TSV with the header
//! `video_id  split  genre  frames_dir  descriptors  metadata_path`. The
//! `descriptors` cell holds `modality=path` pairs separated by `;`. Empty
//! cells mean "absent". Relative paths are resolved against the directory
//! holding the manifest.
//!
//! Descriptor sequences are stored either as FVD1 binary files
//! (little-endian: `"FVD1"`, `u32 T`, `u32 D`, `u32 0`, then `T*D` binary32
//! values row-major) or as headerless CSV with one keyframe per row.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io_util::{read_all, write_all, LeReader};

pub const FVD1_MAGIC: &[u8; 4] = b"FVD1";
pub const FVD1_HEADER_LEN: usize = 16;

const MANIFEST_COLUMNS: [&str; 6] = [
    "video_id",
    "split",
    "genre",
    "frames_dir",
    "descriptors",
    "metadata_path",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(other.to_string()),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub video_id: String,
    pub split: Split,
    /// Index into [`DatasetManifest::genres`].
    pub genre: usize,
    pub frames_dir: Option<PathBuf>,
    pub descriptor_paths: BTreeMap<String, PathBuf>,
    pub metadata_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<VideoEntry>,
    pub genres: Vec<String>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn entry(&self, video_id: &str) -> Option<&VideoEntry> {
        self.entries.iter().find(|e| e.video_id == video_id)
    }

    pub fn genre_index(&self, name: &str) -> Option<usize> {
        self.genres.iter().position(|g| g == name)
    }
}

/// Loads a manifest; the genre list is the sorted set of genre names found.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_impl(path, None)
}

/// Loads a manifest with an explicit genre list file (one name per line).
pub fn load_manifest_with_genres(path: &Path, genre_list: &Path) -> Result<DatasetManifest> {
    let text = String::from_utf8(read_all(genre_list)?).map_err(|_| Error::Parse {
        path: genre_list.to_path_buf(),
        line: 0,
        message: "not valid UTF-8".into(),
    })?;
    let mut genres = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        if !seen.insert(name.to_string()) {
            return Err(Error::Parse {
                path: genre_list.to_path_buf(),
                line: i + 1,
                message: format!("duplicate genre {name:?}"),
            });
        }
        genres.push(name.to_string());
    }
    load_manifest_impl(path, Some(genres))
}

struct RawRow {
    line: usize,
    video_id: String,
    split: Split,
    genre: String,
    frames_dir: Option<PathBuf>,
    descriptor_paths: BTreeMap<String, PathBuf>,
    metadata_path: Option<PathBuf>,
}

fn load_manifest_impl(path: &Path, explicit_genres: Option<Vec<String>>) -> Result<DatasetManifest> {
    let bytes = read_all(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "not valid UTF-8".into(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let resolve = |cell: &str| -> Option<PathBuf> {
        let cell = cell.trim();
        (!cell.is_empty()).then(|| base.join(cell))
    };

    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((header_idx, header)) = lines.next() else {
        return Err(Error::NoEntries);
    };
    let header: Vec<&str> = header.split('\t').map(str::trim).collect();
    if header != MANIFEST_COLUMNS {
        return Err(parse_err(
            header_idx + 1,
            format!("expected header {:?}", MANIFEST_COLUMNS.join("\t")),
        ));
    }

    let mut rows = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != MANIFEST_COLUMNS.len() {
            return Err(parse_err(
                lineno,
                format!("expected {} columns, found {}", MANIFEST_COLUMNS.len(), cells.len()),
            ));
        }
        let video_id = cells[0].trim();
        if video_id.is_empty() {
            return Err(parse_err(lineno, "empty video_id".into()));
        }
        if !ids.insert(video_id.to_string()) {
            return Err(Error::DuplicateId(video_id.to_string()));
        }
        let split = cells[1].trim().parse::<Split>().map_err(|token| Error::UnknownSplit {
            path: path.to_path_buf(),
            line: lineno,
            token,
        })?;
        let genre = cells[2].trim();
        if genre.is_empty() {
            return Err(parse_err(lineno, "empty genre".into()));
        }
        let mut descriptor_paths = BTreeMap::new();
        for pair in cells[4].split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (modality, p) = pair
                .split_once('=')
                .ok_or_else(|| parse_err(lineno, format!("descriptor entry {pair:?} is not modality=path")))?;
            let (modality, p) = (modality.trim(), p.trim());
            if modality.is_empty() || p.is_empty() {
                return Err(parse_err(lineno, format!("descriptor entry {pair:?} is incomplete")));
            }
            if descriptor_paths.insert(modality.to_string(), base.join(p)).is_some() {
                return Err(parse_err(lineno, format!("modality {modality:?} listed twice")));
            }
        }
        let row = RawRow {
            line: lineno,
            video_id: video_id.to_string(),
            split,
            genre: genre.to_string(),
            frames_dir: resolve(cells[3]),
            descriptor_paths,
            metadata_path: resolve(cells[5]),
        };
        if row.frames_dir.is_none() && row.descriptor_paths.is_empty() && row.metadata_path.is_none() {
            return Err(parse_err(
                lineno,
                "entry needs at least one of frames_dir, descriptors, metadata_path".into(),
            ));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::NoEntries);
    }

    let genres = match explicit_genres {
        Some(g) => g,
        None => rows
            .iter()
            .map(|r| r.genre.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let entries = rows
        .into_iter()
        .map(|r| {
            let genre = genres
                .iter()
                .position(|g| *g == r.genre)
                .ok_or_else(|| parse_err(r.line, format!("genre {:?} not in genre list", r.genre)))?;
            Ok(VideoEntry {
                video_id: r.video_id,
                split: r.split,
                genre,
                frames_dir: r.frames_dir,
                descriptor_paths: r.descriptor_paths,
                metadata_path: r.metadata_path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest { entries, genres })
}

/// Serializes a manifest back to TSV. Paths are written as given.
pub fn manifest_to_tsv(manifest: &DatasetManifest) -> String {
    let mut out = MANIFEST_COLUMNS.join("\t");
    out.push('\n');
    let path_cell = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    for e in &manifest.entries {
        let descriptors = e
            .descriptor_paths
            .iter()
            .map(|(m, p)| format!("{m}={}", p.display()))
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.video_id,
            e.split,
            manifest.genres[e.genre],
            path_cell(&e.frames_dir),
            descriptors,
            path_cell(&e.metadata_path),
        ));
    }
    out
}

/// T×D per-keyframe descriptors of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSequence {
    video_id: String,
    modality: String,
    data: Array2<f64>,
}

impl DescriptorSequence {
    pub fn new(video_id: impl Into<String>, modality: impl Into<String>, data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "descriptor sequence must be at least 1x1, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            video_id: video_id.into(),
            modality: modality.into(),
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Number of keyframes.
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        // Standard layout is enforced in `new`.
        self.data.as_slice().unwrap().chunks_exact(self.dim())
    }

    pub fn with_ids(mut self, video_id: impl Into<String>, modality: impl Into<String>) -> Self {
        self.video_id = video_id.into();
        self.modality = modality.into();
        self
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }
}

pub(crate) fn check_finite(data: &Array2<f64>) -> Result<()> {
    for ((row, col), v) in data.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
    }
    Ok(())
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads an FVD1 file, or a CSV file when the extension is `.csv`/`.txt`.
///
/// The returned sequence takes its video id from the file stem and has an
/// empty modality; use [`DescriptorSequence::with_ids`] to relabel.
pub fn read_descriptors(path: &Path) -> Result<DescriptorSequence> {
    let is_text = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv") || e.eq_ignore_ascii_case("txt"));
    let data = if is_text {
        read_csv_matrix(path)?
    } else {
        read_fvd1_matrix(path)?
    };
    DescriptorSequence::new(stem_of(path), "", data)
}

fn read_fvd1_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = read_all(path)?;
    let mut r = LeReader::new(&bytes);
    if r.take(4) != Some(FVD1_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "FVD1".into(),
        });
    }
    let header_err = || Error::SizeMismatch {
        path: path.to_path_buf(),
        expected: FVD1_HEADER_LEN,
        found: bytes.len(),
    };
    let t = r.u32().ok_or_else(header_err)? as usize;
    let d = r.u32().ok_or_else(header_err)? as usize;
    let reserved = r.u32().ok_or_else(header_err)?;
    if reserved != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("reserved header field is {reserved}, expected 0"),
        });
    }
    let expected = t * d;
    let found = r.remaining() / 4;
    if !r.remaining().is_multiple_of(4) || found != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let values: Vec<f64> = (0..expected).map(|_| r.f32().unwrap() as f64).collect();
    let data = Array2::from_shape_vec((t, d), values).expect("shape checked above");
    check_finite(&data)?;
    Ok(data)
}

fn read_csv_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = String::from_utf8(read_all(path)?).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "not valid UTF-8".into(),
    })?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("not a number: {:?}", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: rows,
                    col: values.len() - before,
                });
            }
            values.push(v);
        }
        let n = values.len() - before;
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected {w} values, found {n}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "no rows".into(),
    })?;
    Ok(Array2::from_shape_vec((rows, width), values).expect("row widths checked"))
}

/// Encodes a matrix as FVD1 bytes. Values are narrowed to binary32.
pub fn fvd1_bytes(data: &Array2<f64>) -> Result<Vec<u8>> {
    let (t, d) = data.dim();
    let mut out = Vec::with_capacity(FVD1_HEADER_LEN + 4 * t * d);
    out.extend_from_slice(FVD1_MAGIC);
    for field in [t as u32, d as u32, 0u32] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for ((row, col), &v) in data.indexed_iter() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

pub fn write_descriptors(seq: &DescriptorSequence, path: &Path) -> Result<()> {
    write_all(path, &fvd1_bytes(seq.data())?)
}
