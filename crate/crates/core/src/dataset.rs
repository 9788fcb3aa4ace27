//! Dataset records, JSONL shards, and corpus persistence.
//!
//! A corpus is a directory:
//!
//! ```text
//! corpus/
//!   manifest.json     metadata + content hash of everything below
//!   train.jsonl       one DatasetRecord per line
//!   val.jsonl
//!   test.jsonl
//!   images/<id>.png
//! ```
//!
//! Scenes are generated from disjoint seed ranges per index, so splits are
//! disjoint by construction; the manifest hash makes the lineage checkable
//! offline.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Canvas};
use crate::hash::Hasher;
use crate::scenegen::{
    generate_annotated_scene, render, Color, Raster, RefExpression, Scene, SceneConfig,
    SceneObject, Shape, Size,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    #[serde(rename = "box")]
    pub box_px: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub text: String,
    pub target_index: usize,
}

/// One JSONL line: a scene with annotations. `expressions` is empty for
/// detection-only shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image: String,
    pub canvas: Canvas,
    pub seed: u64,
    pub objects: Vec<ObjectRecord>,
    pub expressions: Vec<ExpressionRecord>,
    pub split: Split,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::InvalidConfig(format!("record {} has no objects", self.id)));
        }
        for o in &self.objects {
            o.box_px.validate(self.canvas)?;
        }
        for e in &self.expressions {
            if e.target_index >= self.objects.len() {
                return Err(Error::InvalidConfig(format!(
                    "record {}: expression target {} out of range",
                    self.id, e.target_index
                )));
            }
        }
        Ok(())
    }

    /// Reconstructs the scene for oracle matching and re-rendering.
    pub fn scene(&self) -> Scene {
        Scene {
            canvas: self.canvas,
            objects: self
                .objects
                .iter()
                .map(|o| SceneObject {
                    shape: o.shape,
                    color: o.color,
                    size: o.size,
                    box_px: o.box_px,
                })
                .collect(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub scene_config: SceneConfig,
    pub n_scenes: usize,
    pub detection_only: bool,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub counts: SplitCounts,
    pub corpus_hash: String,
}

/// A corpus in memory: records plus rendered rasters, index-aligned.
pub struct Corpus {
    pub records: Vec<DatasetRecord>,
    pub rasters: Vec<Raster>,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Split identifier embedding the corpus hash, for train/eval
    /// disjointness checks.
    pub fn split_id(&self, split: Split) -> String {
        format!("{}@{}", split.name(), &self.manifest.corpus_hash[..16])
    }
}

/// Floor-based split sizes, remainder to train.
pub fn split_counts(n: usize, val_fraction: f64, test_fraction: f64) -> Result<SplitCounts> {
    if !(0.0..1.0).contains(&val_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || val_fraction + test_fraction >= 1.0
    {
        return Err(Error::InvalidConfig(format!(
            "split fractions val={val_fraction} test={test_fraction} must leave room for train"
        )));
    }
    let val = (n as f64 * val_fraction).floor() as usize;
    let test = (n as f64 * test_fraction).floor() as usize;
    Ok(SplitCounts { train: n - val - test, val, test })
}

fn split_of(index: usize, counts: &SplitCounts) -> Split {
    if index < counts.train {
        Split::Train
    } else if index < counts.train + counts.val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generates a corpus deterministically from (seed, config). Scene i uses
/// seed `seed + i`; detection-only corpora drop the expressions.
pub fn generate_corpus(
    seed: u64,
    scene_config: &SceneConfig,
    n_scenes: usize,
    val_fraction: f64,
    test_fraction: f64,
    detection_only: bool,
    id_prefix: &str,
) -> Result<Corpus> {
    scene_config.validate()?;
    if n_scenes == 0 {
        return Err(Error::InvalidConfig("n_scenes must be positive".into()));
    }
    let counts = split_counts(n_scenes, val_fraction, test_fraction)?;
    let built: Vec<(DatasetRecord, Raster)> = (0..n_scenes)
        .into_par_iter()
        .map(|i| -> Result<(DatasetRecord, Raster)> {
            let scene_seed = seed.wrapping_add(i as u64);
            let (scene, expressions) = generate_annotated_scene(scene_seed, scene_config)?;
            let raster = render(&scene);
            let id = format!("{id_prefix}-{i:06}");
            let record = DatasetRecord {
                image: format!("images/{id}.png"),
                id,
                canvas: scene.canvas,
                seed: scene_seed,
                objects: scene
                    .objects
                    .iter()
                    .map(|o| ObjectRecord {
                        shape: o.shape,
                        color: o.color,
                        size: o.size,
                        box_px: o.box_px,
                    })
                    .collect(),
                expressions: if detection_only {
                    Vec::new()
                } else {
                    expressions
                        .into_iter()
                        .map(|RefExpression { text, target_index }| ExpressionRecord {
                            text,
                            target_index,
                        })
                        .collect()
                },
                split: split_of(i, &counts),
            };
            Ok((record, raster))
        })
        .collect::<Result<_>>()?;

    let (records, rasters): (Vec<_>, Vec<_>) = built.into_iter().unzip();
    let corpus_hash = corpus_hash(&records, &rasters)?;
    let manifest = Manifest {
        format_version: 1,
        seed,
        scene_config: scene_config.clone(),
        n_scenes,
        detection_only,
        val_fraction,
        test_fraction,
        counts,
        corpus_hash,
    };
    Ok(Corpus { records, rasters, manifest })
}

fn jsonl_for(records: &[DatasetRecord], split: Split) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.split == split) {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn png_bytes(raster: &Raster) -> Result<Vec<u8>> {
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(raster.w, raster.h, raster.data.clone())
            .ok_or_else(|| Error::ShapeMismatch("raster buffer size".into()))?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

/// Content hash over the JSONL shards (train, val, test order) and the PNG
/// bytes in record order.
fn corpus_hash(records: &[DatasetRecord], rasters: &[Raster]) -> Result<String> {
    let mut h = Hasher::new();
    for split in Split::ALL {
        h.update(&jsonl_for(records, split)?);
    }
    for raster in rasters {
        h.update(&png_bytes(raster)?);
    }
    Ok(h.finish())
}

/// Writes shards, images, and the manifest. Refuses to overwrite an existing
/// manifest unless `force` is set.
pub fn write_corpus(dir: &Path, corpus: &Corpus, force: bool) -> Result<()> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::WouldOverwrite(manifest_path));
    }
    let images = dir.join("images");
    std::fs::create_dir_all(&images)
        .map_err(|e| Error::io(format!("creating {}", images.display()), e))?;
    for split in Split::ALL {
        let path = dir.join(format!("{}.jsonl", split.name()));
        std::fs::write(&path, jsonl_for(&corpus.records, split)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    for (record, raster) in corpus.records.iter().zip(&corpus.rasters) {
        let path = dir.join(&record.image);
        std::fs::write(&path, png_bytes(raster)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    let mut file = std::fs::File::create(&manifest_path)
        .map_err(|e| Error::io(format!("creating {}", manifest_path.display()), e))?;
    serde_json::to_writer_pretty(&mut file, &corpus.manifest)?;
    file.write_all(b"\n")
        .map_err(|e| Error::io("finishing manifest", e))?;
    Ok(())
}

/// Loads a corpus directory, decoding PNGs and verifying the manifest hash.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::NotFound(manifest_path));
    }
    let manifest: Manifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?,
    )?;
    let mut records = Vec::new();
    for split in Split::ALL {
        let path = dir.join(format!("{}.jsonl", split.name()));
        let body = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        for line in body.lines().filter(|l| !l.trim().is_empty()) {
            let record: DatasetRecord = serde_json::from_str(line)?;
            record.validate()?;
            records.push(record);
        }
    }
    // restore record order (ids are generation-ordered)
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let rasters: Vec<Raster> = records
        .iter()
        .map(|r| -> Result<Raster> {
            let path = dir.join(&r.image);
            let img = image::open(&path)
                .map_err(Error::Image)?
                .to_rgb8();
            Ok(Raster { w: img.width(), h: img.height(), data: img.into_raw() })
        })
        .collect::<Result<_>>()?;
    let actual = corpus_hash(&records, &rasters)?;
    if actual != manifest.corpus_hash {
        return Err(Error::InvalidConfig(format!(
            "corpus hash mismatch in {}: manifest {}, content {}",
            dir.display(),
            &manifest.corpus_hash[..16],
            &actual[..16]
        )));
    }
    Ok(Corpus { records, rasters, manifest })
}

/// Returns the directory a corpus lives in under an output root.
pub fn corpus_dir(out_root: &Path, name: &str) -> PathBuf {
    out_root.join("data").join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SceneConfig {
        SceneConfig { max_objects: 3, ..SceneConfig::default() }
    }

    #[test]
    fn split_counts_floor_remainder_to_train() {
        let c = split_counts(10, 0.15, 0.15).unwrap();
        assert_eq!((c.train, c.val, c.test), (8, 1, 1));
        let c = split_counts(100, 0.2, 0.1).unwrap();
        assert_eq!((c.train, c.val, c.test), (70, 20, 10));
        let c = split_counts(7, 0.33, 0.33).unwrap();
        assert_eq!((c.train, c.val, c.test), (3, 2, 2));
        assert!(split_counts(10, 0.6, 0.5).is_err());
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_corpus(7, &small_cfg(), 20, 0.2, 0.2, false, "scene").unwrap();
        let b = generate_corpus(7, &small_cfg(), 20, 0.2, 0.2, false, "scene").unwrap();
        assert_eq!(a.manifest.corpus_hash, b.manifest.corpus_hash);
        assert_eq!(a.records, b.records);
        let c = generate_corpus(8, &small_cfg(), 20, 0.2, 0.2, false, "scene").unwrap();
        assert_ne!(a.manifest.corpus_hash, c.manifest.corpus_hash);
    }

    #[test]
    fn detection_only_drops_expressions() {
        let c = generate_corpus(7, &small_cfg(), 5, 0.2, 0.2, true, "det").unwrap();
        assert!(c.records.iter().all(|r| r.expressions.is_empty()));
        let g = generate_corpus(7, &small_cfg(), 5, 0.2, 0.2, false, "det").unwrap();
        assert!(g.records.iter().all(|r| !r.expressions.is_empty()));
        // same scenes otherwise
        assert_eq!(c.records[0].objects, g.records[0].objects);
    }

    #[test]
    fn expressions_cover_every_object() {
        let c = generate_corpus(3, &small_cfg(), 15, 0.2, 0.2, false, "scene").unwrap();
        for r in &c.records {
            assert_eq!(r.expressions.len(), r.objects.len(), "{}", r.id);
            let scene = r.scene();
            for e in &r.expressions {
                let m = crate::scenegen::match_expression(&scene, &e.text).unwrap();
                assert_eq!(m, vec![e.target_index]);
            }
        }
    }

    #[test]
    fn write_load_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(11, &small_cfg(), 12, 0.25, 0.25, false, "scene").unwrap();
        write_corpus(dir.path(), &corpus, false).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.manifest, corpus.manifest);
        assert_eq!(loaded.records, corpus.records);
        assert_eq!(loaded.rasters, corpus.rasters);
        // overwrite refused without force
        assert!(matches!(
            write_corpus(dir.path(), &corpus, false),
            Err(Error::WouldOverwrite(_))
        ));
        write_corpus(dir.path(), &corpus, true).unwrap();
    }

    #[test]
    fn tampering_breaks_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(11, &small_cfg(), 6, 0.2, 0.2, false, "scene").unwrap();
        write_corpus(dir.path(), &corpus, false).unwrap();
        let shard = dir.path().join("train.jsonl");
        let mut body = std::fs::read_to_string(&shard).unwrap();
        body = body.replacen("circle", "square", 1);
        if body.contains("square") {
            std::fs::write(&shard, body).unwrap();
            assert!(load_corpus(dir.path()).is_err());
        }
    }

    #[test]
    fn split_ids_are_distinct_and_stable() {
        let c = generate_corpus(5, &small_cfg(), 10, 0.2, 0.2, false, "scene").unwrap();
        let train = c.split_id(Split::Train);
        let val = c.split_id(Split::Val);
        assert_ne!(train, val);
        assert!(train.starts_with("train@"));
        assert_eq!(train, c.split_id(Split::Train));
    }

    #[test]
    fn png_roundtrip_is_exact() {
        let corpus = generate_corpus(2, &small_cfg(), 2, 0.0, 0.0, false, "scene").unwrap();
        let bytes = png_bytes(&corpus.rasters[0]).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(img.into_raw(), corpus.rasters[0].data);
    }
}
