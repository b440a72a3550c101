//! Seeded synthetic corpora for demos and end-to-end tests.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{manifest_to_tsv, write_descriptors, DatasetManifest, DescriptorSequence, Split, VideoEntry};
use crate::error::Result;
use crate::io_util::write_all;
use crate::visual::{write_ppm, FrameImage};

/// Shape of a descriptor-level synthetic genre task.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_genres: usize,
    pub train_per_genre: usize,
    pub test_per_genre: usize,
    pub dim: usize,
    /// Mixture components per genre.
    pub components: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Standard deviation of the shared component means around the origin.
    pub spread: f64,
    /// Standard deviation of each genre's offset from the shared means.
    pub separation: f64,
    /// Genre stddevs are the shared ones scaled by exp(u), u uniform in
    /// [-jitter, jitter].
    pub scale_jitter: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_genres: 3,
            train_per_genre: 40,
            test_per_genre: 20,
            dim: 92,
            components: 2,
            min_frames: 20,
            max_frames: 40,
            spread: 3.0,
            separation: 0.05,
            scale_jitter: 0.2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub split: Split,
    pub genre: usize,
    pub sequence: DescriptorSequence,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub genres: Vec<String>,
    pub videos: Vec<SyntheticVideo>,
}

struct GenreModel {
    weights: Vec<f64>,
    means: Array2<f64>,
    stddevs: Array2<f64>,
}

/// Every genre gets its own diagonal GMM whose components are shifted copies
/// of a shared set of components; each video draws a random number of frames
/// from its genre's mixture.
pub fn generate_corpus(spec: &CorpusSpec) -> SyntheticCorpus {
    assert!(spec.n_genres > 0 && spec.dim > 0 && spec.components > 0);
    assert!(spec.min_frames >= 1 && spec.min_frames <= spec.max_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centre = Normal::new(0.0, spec.spread).expect("finite spread");
    let offset = Normal::new(0.0, spec.separation).expect("finite separation");
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    let shared = Array2::from_shape_fn((spec.components, spec.dim), |_| centre.sample(&mut rng));
    let shared_std = Array2::from_shape_fn((spec.components, spec.dim), |_| rng.random_range(0.5..1.5));
    let models: Vec<GenreModel> = (0..spec.n_genres)
        .map(|_| {
            let raw: Vec<f64> = (0..spec.components).map(|_| rng.random_range(0.3..0.7)).collect();
            let total: f64 = raw.iter().sum();
            GenreModel {
                weights: raw.iter().map(|w| w / total).collect(),
                means: shared.mapv(|m| m + offset.sample(&mut rng)),
                stddevs: shared_std.mapv(|s| {
                    let u = if spec.scale_jitter > 0.0 {
                        rng.random_range(-spec.scale_jitter..spec.scale_jitter)
                    } else {
                        0.0
                    };
                    s * u.exp()
                }),
            }
        })
        .collect();

    let genres = (0..spec.n_genres).map(|g| format!("genre{g}")).collect();
    let mut videos = Vec::new();
    for (split, per_genre) in [(Split::Train, spec.train_per_genre), (Split::Test, spec.test_per_genre)] {
        for i in 0..per_genre {
            for (g, model) in models.iter().enumerate() {
                let t = rng.random_range(spec.min_frames..=spec.max_frames);
                let mut data = Array2::zeros((t, spec.dim));
                for mut row in data.rows_mut() {
                    let u: f64 = rng.random();
                    let mut c = 0;
                    let mut acc = model.weights[0];
                    while u >= acc && c + 1 < model.weights.len() {
                        c += 1;
                        acc += model.weights[c];
                    }
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = model.means[(c, j)] + model.stddevs[(c, j)] * std_normal.sample(&mut rng);
                    }
                }
                let video_id = format!("{split}-g{g}-{i:03}");
                let sequence = DescriptorSequence::new(video_id.clone(), "visual", data).expect("finite samples");
                videos.push(SyntheticVideo {
                    video_id,
                    split,
                    genre: g,
                    sequence,
                });
            }
        }
    }
    SyntheticCorpus { genres, videos }
}

/// Writes `descriptors/<id>.fvd` for every video and a `manifest.tsv` that
/// lists them under the `visual` modality. Returns the manifest path.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(corpus.videos.len());
    for v in &corpus.videos {
        let rel = PathBuf::from("descriptors").join(format!("{}.fvd", v.video_id));
        write_descriptors(&v.sequence, &dir.join(&rel))?;
        entries.push(VideoEntry {
            video_id: v.video_id.clone(),
            split: v.split,
            genre: v.genre,
            frames_dir: None,
            descriptor_paths: [("visual".to_string(), rel)].into_iter().collect(),
            metadata_path: None,
        });
    }
    let manifest = DatasetManifest {
        entries,
        genres: corpus.genres.clone(),
    };
    let path = dir.join("manifest.tsv");
    write_all(&path, manifest_to_tsv(&manifest).as_bytes())?;
    Ok(path)
}

const FIXTURE_GENRES: [&str; 3] = ["documentary", "music", "sports"];
const FIXTURE_WORDS: [&[&str]; 3] = [
    &["nature", "history", "wildlife", "interview", "archive", "planet"],
    &["concert", "guitar", "song", "album", "live", "band"],
    &["football", "match", "goal", "league", "score", "team"],
];
const COMMON_WORDS: [&str; 6] = ["video", "episode", "new", "watch", "channel", "full"];

/// Frame and metadata fixture: 12 videos over 3 genres (3 train + 1 test per
/// genre), each with a directory of small PPM frames and a metadata text
/// file. Returns the manifest path.
pub fn write_frame_fixture(dir: &Path, seed: u64) -> Result<PathBuf> {
    const FRAMES: usize = 6;
    const W: usize = 48;
    const H: usize = 36;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for i in 0..4 {
        for (g, genre) in FIXTURE_GENRES.iter().enumerate() {
            let split = if i < 3 { Split::Train } else { Split::Test };
            let video_id = format!("{genre}-{i}");
            let frames_rel = PathBuf::from("frames").join(&video_id);
            for f in 0..FRAMES {
                let shift = rng.random_range(0..8usize);
                let noise: Vec<u8> = (0..W * H).map(|_| rng.random_range(0..24u8)).collect();
                let frame = FrameImage::from_fn(W, H, |x, y| {
                    let n = noise[y * W + x];
                    match g {
                        // brown/grey diagonal texture
                        0 => {
                            let v = if (x + y + shift) / 6 % 2 == 0 { 110 } else { 150 };
                            [v + n, (v / 2) + n, 30 + n]
                        }
                        // purple/pink vertical stripes
                        1 => {
                            if (x + shift) / 4 % 2 == 0 {
                                [120 + n, 10 + n, 120 + n]
                            } else {
                                [230 + n / 2, 180 + n, 190 + n]
                            }
                        }
                        // green field with white horizontal lines
                        _ => {
                            if (y + shift) % 9 == 0 {
                                [230 + n / 2, 230 + n / 2, 230 + n / 2]
                            } else {
                                [20 + n, 120 + n, 20 + n]
                            }
                        }
                    }
                })?;
                write_ppm(&frame, &dir.join(&frames_rel).join(format!("frame{f:03}.ppm")))?;
            }

            let mut words = Vec::new();
            for _ in 0..12 {
                let pool: &[&str] = if rng.random_bool(0.6) {
                    FIXTURE_WORDS[g]
                } else {
                    &COMMON_WORDS
                };
                words.push(pool[rng.random_range(0..pool.len())]);
            }
            let meta_rel = PathBuf::from("metadata").join(format!("{video_id}.txt"));
            write_all(&dir.join(&meta_rel), format!("{}\n", words.join(" ")).as_bytes())?;

            entries.push(VideoEntry {
                video_id,
                split,
                genre: g,
                frames_dir: Some(frames_rel),
                descriptor_paths: Default::default(),
                metadata_path: Some(meta_rel),
            });
        }
    }
    let manifest = DatasetManifest {
        entries,
        genres: FIXTURE_GENRES.iter().map(|s| s.to_string()).collect(),
    };
    let path = dir.join("manifest.tsv");
    write_all(&path, manifest_to_tsv(&manifest).as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_manifest, read_descriptors};

    #[test]
    fn corpus_shape() {
        let c = generate_corpus(&CorpusSpec::default());
        assert_eq!(c.videos.len(), 180);
        assert_eq!(c.videos.iter().filter(|v| v.split == Split::Train).count(), 120);
        for g in 0..3 {
            assert_eq!(c.videos.iter().filter(|v| v.genre == g && v.split == Split::Test).count(), 20);
        }
        assert!(c.videos.iter().all(|v| v.sequence.dim() == 92 && (20..=40).contains(&v.sequence.len())));
    }

    #[test]
    fn corpus_is_seeded() {
        let spec = CorpusSpec {
            train_per_genre: 2,
            test_per_genre: 1,
            ..CorpusSpec::default()
        };
        let a = generate_corpus(&spec);
        let b = generate_corpus(&spec);
        let c = generate_corpus(&CorpusSpec { seed: 8, ..spec });
        assert!(a.videos.iter().zip(&b.videos).all(|(x, y)| x.sequence == y.sequence));
        assert!(a.videos.iter().zip(&c.videos).any(|(x, y)| x.sequence != y.sequence));
    }

    #[test]
    fn written_corpus_loads_back() {
        let spec = CorpusSpec {
            train_per_genre: 2,
            test_per_genre: 1,
            dim: 5,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec);
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(&c, dir.path()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 9);
        assert_eq!(m.genres, c.genres);
        let e = &m.entries[0];
        let seq = read_descriptors(&e.descriptor_paths["visual"]).unwrap();
        assert_eq!(seq.data().dim(), c.videos[0].sequence.data().dim());
        let diff = (seq.data() - c.videos[0].sequence.data()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-5));
    }

    #[test]
    fn frame_fixture_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_frame_fixture(dir.path(), 1).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 12);
        assert_eq!(m.split(Split::Test).count(), 3);
        for e in &m.entries {
            assert_eq!(crate::visual::list_frame_files(e.frames_dir.as_ref().unwrap()).unwrap().len(), 6);
            assert!(e.metadata_path.as_ref().unwrap().is_file());
        }
    }
}
