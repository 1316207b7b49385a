use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModalityBatch, ModalityData, ALPHABET_SIZE};
use crate::parallel::map_range;
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

use super::attributes::{AttributeSet, Background, Color, Level, Quadrant, Shape, Size};
use super::caption::{encode_caption, make_caption, MAX_CAPTION_LEN};
use super::render::{decode_png, encode_png, render_image, RgbImage, IMAGE_PIXELS};

pub const FORMAT_VERSION: u32 = 1;
const WRITE_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Sample counts of one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: Level,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl LevelSpec {
    pub const DEFAULT_TEST_COUNT: usize = 10_000;
    pub const DESK_TRAIN_COUNT: usize = 2_000;

    /// Full-size counts: 90% train, 10% validation.
    pub fn paper(level: Level) -> Self {
        let (train_count, val_count) = match level.number() {
            1 => (67_500, 7_500),
            2 => (108_000, 12_000),
            3 => (270_000, 30_000),
            4 => (540_000, 60_000),
            _ => (864_000, 96_000),
        };
        Self { level, train_count, val_count, test_count: Self::DEFAULT_TEST_COUNT }
    }

    /// Reduced profile: `train_count` training samples and a validation
    /// split holding 10% of the total.
    pub fn with_train_count(level: Level, train_count: usize) -> Self {
        Self {
            level,
            train_count,
            val_count: (train_count as f64 / 9.0).round() as usize,
            test_count: Self::DEFAULT_TEST_COUNT,
        }
    }

    pub fn desk(level: Level) -> Self {
        Self::with_train_count(level, Self::DESK_TRAIN_COUNT)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }

    /// Samples per attribute combination in `split`, if the split divides
    /// evenly.
    pub fn per_combination_count(&self, split: Split) -> Option<usize> {
        let n = self.level.combination_count();
        let c = self.count(split);
        (c % n == 0).then_some(c / n)
    }
}

/// Written next to the splits as `dataset.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub format_version: u32,
    pub level: Level,
    pub master_seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl DatasetInfo {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }
}

/// Attributes of sample `index` of a split: combinations are dealt round
/// robin, so every combination appears equally often whenever the split
/// size is a multiple of the combination count.
pub fn split_attributes(level: Level, index: usize) -> AttributeSet {
    let all = AttributeSet::enumerate(level);
    all[index % all.len()]
}

/// Per-sample seed: the master seed hashed with the split and the index.
pub fn sample_seed(master_seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(master_seed, &[split.stream(), index as u64])
}

/// One manifest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Relative to the split directory.
    pub image: String,
    pub caption: String,
    pub attributes: AttributeSet,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    image: String,
    caption: String,
    shape: Shape,
    size: Size,
    color: Option<Color>,
    quadrant: Option<Quadrant>,
    background: Background,
    seed: u64,
}

impl Record {
    fn to_line(&self) -> ManifestLine {
        let a = &self.attributes;
        ManifestLine {
            image: self.image.clone(),
            caption: self.caption.clone(),
            shape: a.shape,
            size: a.size,
            color: a.color,
            quadrant: a.quadrant,
            background: a.background,
            seed: self.seed,
        }
    }

    fn from_line(level: Level, line: ManifestLine) -> Result<Self> {
        let attributes = AttributeSet::new(level, line.shape, line.size, line.color, line.quadrant, line.background)?;
        if make_caption(&attributes) != line.caption {
            return Err(Error::Contract(format!("caption {:?} does not match the attributes", line.caption)));
        }
        Ok(Self { image: line.image, caption: line.caption, attributes, seed: line.seed })
    }
}

fn level_dir(out_dir: &Path, level: Level) -> PathBuf {
    out_dir.join(format!("level_{level}"))
}

fn write_split(dir: &Path, spec: &LevelSpec, split: Split, master_seed: u64) -> Result<()> {
    let split_dir = dir.join(split.name());
    let images = split_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let gen_err = |index: usize| move |source| Error::Generation { split: split.name().into(), index, source };
    let manifest_path = split_dir.join("manifest.jsonl");
    let captions_path = split_dir.join("captions.txt");
    let mut manifest = BufWriter::new(File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
    let mut captions = BufWriter::new(File::create(&captions_path).map_err(|e| Error::io(&captions_path, e))?);

    let total = spec.count(split);
    let mut start = 0;
    while start < total {
        let end = (start + WRITE_CHUNK).min(total);
        let encoded = map_range(end - start, |i| {
            let index = start + i;
            let attributes = split_attributes(spec.level, index);
            let seed = sample_seed(master_seed, split, index);
            encode_png(&render_image(&attributes, seed)).map(|png| (attributes, seed, png))
        });
        for (i, item) in encoded.into_iter().enumerate() {
            let index = start + i;
            let (attributes, seed, png) = item?;
            let name = format!("images/{index:07}.png");
            fs::write(split_dir.join(&name), png).map_err(gen_err(index))?;
            let record = Record { image: name, caption: make_caption(&attributes), attributes, seed };
            serde_json::to_writer(&mut manifest, &record.to_line())?;
            manifest.write_all(b"\n").map_err(gen_err(index))?;
            writeln!(captions, "{}", record.caption).map_err(gen_err(index))?;
        }
        start = end;
    }
    manifest.flush().map_err(gen_err(total))?;
    captions.flush().map_err(gen_err(total))?;
    Ok(())
}

/// Generate every split of `spec` under `out_dir/level_N`.
pub fn generate_dataset(spec: &LevelSpec, out_dir: &Path, master_seed: u64) -> Result<DatasetInfo> {
    let dir = level_dir(out_dir, spec.level);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for split in Split::ALL {
        write_split(&dir, spec, split, master_seed)?;
    }
    let info = DatasetInfo {
        format_version: FORMAT_VERSION,
        level: spec.level,
        master_seed,
        train_count: spec.train_count,
        val_count: spec.val_count,
        test_count: spec.test_count,
    };
    let path = dir.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&path, e))?;
    Ok(info)
}

/// Images as the image modality, `batch × pixels` in `[0, 1]`.
pub fn image_modality(images: &[&RgbImage]) -> Result<ModalityData> {
    if images.is_empty() {
        return Err(Error::Contract("no images".into()));
    }
    let mut pixels = Vec::with_capacity(images.len() * IMAGE_PIXELS);
    for img in images {
        pixels.extend(img.data.iter().map(|&v| f64::from(v) / 255.0));
    }
    Ok(ModalityData::Image(Tensor::new(&[images.len(), IMAGE_PIXELS], pixels)?))
}

/// Captions as the text modality.
pub fn text_modality(captions: &[&str]) -> Result<ModalityData> {
    let b = captions.len();
    if b == 0 {
        return Err(Error::Contract("no captions".into()));
    }
    let mut onehot = Vec::with_capacity(b * MAX_CAPTION_LEN * ALPHABET_SIZE);
    let mut mask = Vec::with_capacity(b * MAX_CAPTION_LEN);
    for c in captions {
        let e = encode_caption(c)?;
        onehot.extend(e.onehot);
        mask.extend(e.mask.iter().map(|&m| f64::from(u8::from(m))));
    }
    Ok(ModalityData::Text {
        onehot: Tensor::new(&[b, MAX_CAPTION_LEN, ALPHABET_SIZE], onehot)?,
        mask: Tensor::new(&[b, MAX_CAPTION_LEN], mask)?,
    })
}

/// Stack images and captions into a bimodal batch.
pub fn batch_from_records(images: &[&RgbImage], captions: &[&str]) -> Result<ModalityBatch> {
    if images.len() != captions.len() {
        return Err(Error::Contract(format!("{} images with {} captions", images.len(), captions.len())));
    }
    ModalityBatch::new(vec![Some(image_modality(images)?), Some(text_modality(captions)?)])
}

/// Index batches over `0..n`, optionally shuffled; the last incomplete batch
/// is dropped.
pub fn batch_order(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng_for(seed, &[]));
    }
    order.chunks_exact(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Reader over one split of a generated level.
#[derive(Clone, Debug)]
pub struct DatasetReader {
    split_dir: PathBuf,
    pub info: DatasetInfo,
    pub records: Vec<Record>,
    images: Option<Vec<RgbImage>>,
}

impl DatasetReader {
    /// `level_dir` is the `level_N` directory holding `dataset.json`.
    pub fn open(level_dir: &Path, split: Split) -> Result<Self> {
        let info_path = level_dir.join("dataset.json");
        let raw = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let info: DatasetInfo = serde_json::from_str(&raw)?;
        if info.format_version != FORMAT_VERSION {
            return Err(Error::Contract(format!("unsupported dataset format {}", info.format_version)));
        }
        let split_dir = level_dir.join(split.name());
        let manifest_path = split_dir.join("manifest.jsonl");
        let file = File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let bad = |message: String| Error::Manifest { path: manifest_path.clone(), line: i + 1, message };
            let line = line.map_err(|e| bad(e.to_string()))?;
            let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            records.push(Record::from_line(info.level, parsed).map_err(|e| bad(e.to_string()))?);
        }
        if records.len() != info.count(split) {
            return Err(Error::Manifest {
                path: manifest_path,
                line: records.len(),
                message: format!("expected {} records", info.count(split)),
            });
        }
        Ok(Self { split_dir, info, records, images: None })
    }

    pub fn level(&self) -> Level {
        self.info.level
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Keep only the first `n` records.
    pub fn truncate(&mut self, n: usize) {
        self.records.truncate(n);
        if let Some(images) = &mut self.images {
            images.truncate(n);
        }
    }

    fn read_image(&self, i: usize) -> Result<RgbImage> {
        let path = self.split_dir.join(&self.records[i].image);
        let bad =
            |message: String| Error::Manifest { path: self.split_dir.join("manifest.jsonl"), line: i + 1, message };
        let bytes = fs::read(&path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        decode_png(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    /// Decode every image into memory.
    pub fn preload(&mut self) -> Result<()> {
        if self.images.is_none() {
            let images = map_range(self.len(), |i| self.read_image(i)).into_iter().collect::<Result<Vec<_>>>()?;
            self.images = Some(images);
        }
        Ok(())
    }

    pub fn image(&self, i: usize) -> Result<RgbImage> {
        match &self.images {
            Some(images) => Ok(images[i].clone()),
            None => self.read_image(i),
        }
    }

    /// Index batches of exactly `batch_size`; the last partial batch is
    /// dropped. With a seed the order is a seeded shuffle.
    pub fn batch_order(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
        batch_order(self.len(), batch_size, shuffle_seed)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ModalityBatch> {
        let owned;
        let images: Vec<&RgbImage> = match &self.images {
            Some(all) => indices.iter().map(|&i| &all[i]).collect(),
            None => {
                owned = indices.iter().map(|&i| self.read_image(i)).collect::<Result<Vec<_>>>()?;
                owned.iter().collect()
            }
        };
        let captions: Vec<&str> = indices.iter().map(|&i| self.records[i].caption.as_str()).collect();
        batch_from_records(&images, &captions)
    }
}
