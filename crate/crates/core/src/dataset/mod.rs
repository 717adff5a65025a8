//! Synthetic referring-segmentation corpus: multi-object scenes, two-clause
//! instructions, exact target masks, deterministic splits and on-disk layout.
//!
//! Layout of a generated dataset directory:
//!
//! ```text
//! vocab.txt                  one token per line, line number = id
//! <split>/manifest.txt       split name, config echo, then one sample id per line
//! <split>/samples.jsonl      instruction, bbox and scene per sample
//! <split>/<id>.png           RGB image
//! <split>/<id>_mask.png      target mask (0 / 255)
//! ```

mod render;
mod scene;
mod segments;
mod split;

pub use render::{instruction_for, render_sample, resolve_instruction, z_buffer, SampleRecord, VERBS};
pub use scene::{
    generate_scene, Color, Quadrant, SceneConfig, SceneObject, SceneSpec, ShapeKind, SizeClass, ROOMS,
};
pub use segments::{connected_segments, select_target_mask, LabelMap, Segment};
pub use split::{split_ids, Split, SplitSizes};

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocabulary;
use crate::types::{BinaryMask, Image};

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub sizes: SplitSizes,
    pub seed: u64,
    /// Scenes whose target keeps less than this visible fraction are redrawn.
    pub min_visible_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 2,
            max_objects: 4,
            sizes: SplitSizes {
                train: 800,
                val: 100,
                test: 100,
            },
            seed: 0,
            min_visible_fraction: 0.5,
        }
    }
}

/// Ordered sample ids of one split plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub ids: Vec<String>,
    pub config: DatasetConfig,
    pub vocab_hash: String,
}

impl DatasetManifest {
    pub fn to_text(&self) -> Result<String> {
        let mut s = format!(
            "# split: {}\n# config: {}\n# vocab_sha256: {}\n",
            self.split,
            serde_json::to_string(&self.config)?,
            self.vocab_hash
        );
        for id in &self.ids {
            s.push_str(id);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(&format!("# {key}: ")))
                .map(str::to_string)
                .ok_or_else(|| Error::format(path, format!("missing '# {key}:' header")))
        };
        let split: Split = header("split")?.parse()?;
        let config: DatasetConfig = serde_json::from_str(&header("config")?)?;
        let vocab_hash = header("vocab_sha256")?;
        let ids = lines.filter(|l| !l.is_empty()).map(str::to_string).collect();
        Ok(Self {
            split,
            ids,
            config,
            vocab_hash,
        })
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MAX_SAMPLE_ATTEMPTS: u64 = 64;

/// Generates the `index`-th sample of a corpus. Scenes that cannot be laid out
/// or whose target is mostly hidden are redrawn with a derived seed.
pub fn generate_sample(config: &DatasetConfig, index: usize) -> Result<SampleRecord> {
    if config.min_objects > config.max_objects {
        return Err(Error::Config(format!(
            "min_objects {} > max_objects {}",
            config.min_objects, config.max_objects
        )));
    }
    let base = mix_seed(config.seed, index as u64);
    let mut last_err = None;
    for attempt in 0..MAX_SAMPLE_ATTEMPTS {
        let seed = mix_seed(base, attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(config.min_objects..=config.max_objects);
        let scene_cfg = SceneConfig::new(config.image_size, count);
        let scene = match generate_scene(seed, &scene_cfg) {
            Ok(s) => s,
            Err(e @ Error::Generation(_)) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let sample = match render_sample(&scene, format!("s{index:06}")) {
            Ok(s) => s,
            Err(e @ Error::Generation(_)) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let target = scene.target_object();
        let bb = target.bbox(config.image_size);
        let full = (bb.y_min..=bb.y_max)
            .flat_map(|y| (bb.x_min..=bb.x_max).map(move |x| (x, y)))
            .filter(|&(x, y)| target.covers(x, y, config.image_size))
            .count();
        if (sample.mask().count() as f64) < config.min_visible_fraction * full as f64 {
            continue;
        }
        return Ok(sample);
    }
    Err(last_err.unwrap_or_else(|| {
        Error::Generation(format!("sample {index}: no acceptable scene in {MAX_SAMPLE_ATTEMPTS} attempts"))
    }))
}

/// A fully materialized dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub vocab: Vocabulary,
    splits: [Vec<SampleRecord>; 3],
}

fn split_index(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

impl Dataset {
    /// Generates all samples, builds the vocabulary and partitions the ids.
    pub fn generate(config: DatasetConfig) -> Result<Self> {
        let total = config.sizes.total();
        if total == 0 {
            return Err(Error::Config("dataset with zero samples".into()));
        }
        let mut samples = (0..total)
            .map(|i| generate_sample(&config, i))
            .collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_corpus(samples.iter().map(|s| s.instruction.as_str()));
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let parts = split_ids(&ids, config.sizes, mix_seed(config.seed, u64::MAX))?;
        let mut by_id: std::collections::HashMap<String, SampleRecord> =
            samples.drain(..).map(|s| (s.id.clone(), s)).collect();
        let splits = parts.map(|ids| {
            ids.iter()
                .map(|id| by_id.remove(id).expect("split ids come from the sample list"))
                .collect()
        });
        Ok(Self {
            config,
            vocab,
            splits,
        })
    }

    pub fn split(&self, split: Split) -> &[SampleRecord] {
        &self.splits[split_index(split)]
    }

    pub fn manifest(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            split,
            ids: self.split(split).iter().map(|s| s.id.clone()).collect(),
            config: self.config,
            vocab_hash: self.vocab.hash(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        for split in Split::ALL {
            let sdir = dir.join(split.name());
            fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
            let mpath = sdir.join("manifest.txt");
            fs::write(&mpath, self.manifest(split).to_text()?).map_err(|e| Error::io(&mpath, e))?;
            let jpath = sdir.join("samples.jsonl");
            let mut jsonl = fs::File::create(&jpath).map_err(|e| Error::io(&jpath, e))?;
            for s in self.split(split) {
                writeln!(jsonl, "{}", serde_json::to_string(s)?).map_err(|e| Error::io(&jpath, e))?;
                s.image().save_png(&sdir.join(format!("{}.png", s.id)))?;
                s.mask().save_png(&sdir.join(format!("{}_mask.png", s.id)))?;
            }
        }
        Ok(())
    }

    /// Loads one split of a saved dataset, returning its manifest and samples.
    pub fn load_split(dir: &Path, split: Split) -> Result<(DatasetManifest, Vec<SampleRecord>)> {
        let sdir = dir.join(split.name());
        let mpath = sdir.join("manifest.txt");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = DatasetManifest::parse(&text, &mpath)?;
        if manifest.split != split {
            return Err(Error::format(&mpath, format!("manifest is for split {}", manifest.split)));
        }
        let jpath = sdir.join("samples.jsonl");
        let jtext = fs::read_to_string(&jpath).map_err(|e| Error::io(&jpath, e))?;
        let mut by_id = std::collections::HashMap::new();
        for line in jtext.lines().filter(|l| !l.trim().is_empty()) {
            let rec: SampleRecord = serde_json::from_str(line)?;
            by_id.insert(rec.id.clone(), rec);
        }
        let mut samples = Vec::with_capacity(manifest.ids.len());
        for id in &manifest.ids {
            let mut rec = by_id
                .remove(id)
                .ok_or_else(|| Error::format(&jpath, format!("no record for {id}")))?;
            rec.image = Some(Image::load_png(&sdir.join(format!("{id}.png")))?);
            rec.gt_mask = Some(BinaryMask::load_png(&sdir.join(format!("{id}_mask.png")))?);
            samples.push(rec);
        }
        Ok((manifest, samples))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let mut config = None;
        let mut splits: [Vec<SampleRecord>; 3] = Default::default();
        for split in Split::ALL {
            let (manifest, samples) = Self::load_split(dir, split)?;
            if manifest.vocab_hash != vocab.hash() {
                return Err(Error::format(dir.join("vocab.txt"), "vocabulary hash differs from manifest"));
            }
            config = Some(manifest.config);
            splits[split_index(split)] = samples;
        }
        Ok(Self {
            config: config.expect("three splits loaded"),
            vocab,
            splits,
        })
    }
}
