//! Synthetic instance-segmentation data: Voronoi partitions of a square grid
//! rendered as flat gray regions with additive noise. Each instance gets one
//! of `n` evenly spaced gray levels, assigned in random order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::tensor::{read_tensor, write_tensor, EmbeddingMap, LabelMask};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Height and width of every image.
    pub size: usize,
    pub instances: usize,
    pub train: usize,
    pub test: usize,
    /// Half-width of the uniform noise added to each pixel.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { size: 32, instances: 6, train: 64, test: 16, noise: 0.02, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.instances < 2 {
            return contract_err("synthetic images need at least two instances");
        }
        if self.size == 0 || self.train == 0 || self.test == 0 {
            return contract_err("image size and split sizes must be positive");
        }
        if self.instances > self.size * self.size {
            return contract_err("more instances than pixels");
        }
        if !(self.noise >= 0.0) {
            return contract_err("noise amplitude must be non-negative");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "size: {}\ninstances: {}\ntrain: {}\ntest: {}\nnoise: {}\nseed: {}\n",
            self.size, self.instances, self.train, self.test, self.noise, self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fields: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once(':'))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |key: &str| {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| Error::Contract(format!("spec.txt is missing `{key}`")))
        };
        let bad = |key: &str| Error::Contract(format!("spec.txt has a malformed `{key}`"));
        let int = |key: &str| get(key)?.parse::<usize>().map_err(|_| bad(key));
        Ok(Self {
            size: int("size")?,
            instances: int("instances")?,
            train: int("train")?,
            test: int("test")?,
            noise: get("noise")?.parse().map_err(|_| bad("noise"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        })
    }
}

/// A `1 x H x W` image with its instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: EmbeddingMap,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Labels every pixel with `1 + index` of its nearest seed (Euclidean, ties
/// to the lower index).
pub fn voronoi_partition(height: usize, width: usize, seeds: &[(usize, usize)]) -> Result<LabelMask> {
    if seeds.is_empty() {
        return contract_err("Voronoi partition needs at least one seed");
    }
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let mut best = (usize::MAX, 0usize);
            for (k, &(sr, sc)) in seeds.iter().enumerate() {
                let d = r.abs_diff(sr).pow(2) + c.abs_diff(sc).pow(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            labels.push(best.1 as u32 + 1);
        }
    }
    LabelMask::new(height, width, labels)
}

/// splitmix64 step; used to derive independent sub-seeds.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn try_sample(spec: &SyntheticSpec, seed: u64) -> Result<Option<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.size;
    let picks = rand::seq::index::sample(&mut rng, n * n, spec.instances);
    let seeds: Vec<(usize, usize)> = picks.iter().map(|p| (p / n, p % n)).collect();
    let mask = voronoi_partition(n, n, &seeds)?;
    if mask.instance_ids().len() != spec.instances {
        return Ok(None);
    }
    // evenly spaced levels in random order: neighbours always differ by >= 1/n
    let mut levels: Vec<f64> = (0..spec.instances).map(|k| (k as f64 + 0.5) / spec.instances as f64).collect();
    levels.shuffle(&mut rng);
    let pixels = mask
        .labels()
        .iter()
        .map(|&id| {
            let noise = if spec.noise > 0.0 { rng.random_range(-spec.noise..=spec.noise) } else { 0.0 };
            // stored on disk as f32, so keep images f32-exact in memory too
            f64::from((levels[id as usize - 1] + noise).clamp(0.0, 1.0) as f32)
        })
        .collect();
    Ok(Some(Sample { image: EmbeddingMap::new(1, n, n, pixels)?, mask }))
}

pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    let base = mix_seed(spec.seed, index as u64);
    for attempt in 0u64.. {
        if let Some(sample) = try_sample(spec, mix_seed(base, attempt))? {
            return Ok(sample);
        }
    }
    unreachable!()
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let train = (0..spec.train).map(|i| generate_sample(spec, i)).collect::<Result<_>>()?;
    let test = (spec.train..spec.train + spec.test)
        .map(|i| generate_sample(spec, i))
        .collect::<Result<_>>()?;
    Ok(Dataset { spec: spec.clone(), train, test })
}

pub fn image_path(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join(format!("img_{index:04}.grdt"))
}

pub fn label_path(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join(format!("lbl_{index:04}.grdt"))
}

/// Writes `img_%04d.grdt`, `lbl_%04d.grdt` (train first, then test) and `spec.txt`.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, s) in dataset.train.iter().chain(&dataset.test).enumerate() {
        write_tensor(image_path(dir, i), &s.image.to_tensor())?;
        write_tensor(label_path(dir, i), &s.mask.to_tensor())?;
    }
    fs::write(dir.join("spec.txt"), dataset.spec.to_text())?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let spec = SyntheticSpec::from_text(&fs::read_to_string(dir.join("spec.txt"))?)?;
    let load = |i: usize| -> Result<Sample> {
        Ok(Sample {
            image: EmbeddingMap::from_tensor(&read_tensor(image_path(dir, i))?)?,
            mask: LabelMask::from_tensor(&read_tensor(label_path(dir, i))?)?,
        })
    };
    let train = (0..spec.train).map(load).collect::<Result<_>>()?;
    let test = (spec.train..spec.train + spec.test).map(load).collect::<Result<_>>()?;
    Ok(Dataset { spec, train, test })
}
