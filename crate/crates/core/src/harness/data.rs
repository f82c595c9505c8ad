//! Procedural paired images with an in-distribution and a shifted test split.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::io::{create_dir, load_json, load_tensor, save_json, save_pgm, save_tensor};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

pub const DATASET_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// `x = clean + noise`, `y = clean`.
    Denoise,
    /// `y` is a gamma remap of `x`; the shifted split blurs `x`.
    Style,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub image_size: usize,
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_calib: usize,
    pub n_id_test: usize,
    pub n_ood_test: usize,
    /// In-distribution noise standard deviation (denoise).
    pub noise_sigma: f32,
    /// Noise multiplier of the shifted split (denoise).
    pub shift_multiplier: f32,
    /// Target contrast exponent (style).
    pub gamma: f32,
    /// Box blur radius of the shifted split (style).
    pub blur_radius: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            image_size: 32,
            kind: TaskKind::Denoise,
            n_train: 512,
            n_calib: 128,
            n_id_test: 256,
            n_ood_test: 256,
            noise_sigma: 0.15,
            shift_multiplier: 2.0,
            gamma: 0.6,
            blur_radius: 1,
            seed: 7,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_calib == 0 || self.n_id_test == 0 || self.n_ood_test == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!("image_size {} must be a multiple of 4, ≥ 8", self.image_size)));
        }
        if !(self.noise_sigma >= 0.0 && self.shift_multiplier > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config("noise_sigma ≥ 0, shift_multiplier > 0 and gamma > 0 required".into()));
        }
        Ok(())
    }

    fn split_range(&self, split: SplitName) -> std::ops::Range<u64> {
        let sizes = [self.n_train, self.n_calib, self.n_id_test, self.n_ood_test].map(|n| n as u64);
        let idx = split as usize;
        let start: u64 = sizes[..idx].iter().sum();
        start..start + sizes[idx]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train = 0,
    Calib = 1,
    IdTest = 2,
    OodTest = 3,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [SplitName::Train, SplitName::Calib, SplitName::IdTest, SplitName::OodTest];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Calib => "calib",
            SplitName::IdTest => "id_test",
            SplitName::OodTest => "ood_test",
        }
    }

    pub fn is_shifted(&self) -> bool {
        *self == SplitName::OodTest
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: SplitName,
    pub ids: Vec<u64>,
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    pub train: Split,
    pub calib: Split,
    pub id_test: Split,
    pub ood_test: Split,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Calib => &self.calib,
            SplitName::IdTest => &self.id_test,
            SplitName::OodTest => &self.ood_test,
        }
    }
}

/// Smooth Gaussian blobs plus a few flat rectangles, clamped to `[−0.95, 0.95]`.
pub fn clean_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let s = size as f32;
    let mut img = vec![-0.5f32; size * size];
    for _ in 0..rng.random_range(2..=4) {
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let sigma = rng.random_range(s / 10.0..s / 4.0);
        let amp = rng.random_range(0.4..1.0) * if rng.random::<bool>() { 1.0 } else { -0.5 };
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                img[y * size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let (y0, x0) = (rng.random_range(0..size - 2), rng.random_range(0..size - 2));
        let (h, w) = (rng.random_range(2..=size / 3), rng.random_range(2..=size / 3));
        let amp = rng.random_range(0.3..0.7) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                img[y * size + x] += amp;
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(-0.95, 0.95);
    }
    Tensor::new(vec![1, size, size], img).expect("square image")
}

fn box_blur(img: &Tensor, radius: usize) -> Tensor {
    let size = img.shape()[2];
    let src = img.data();
    let r = radius as isize;
    let mut out = vec![0.0f32; src.len()];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let (mut acc, mut cnt) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < size as isize && xx < size as isize {
                        acc += src[(yy as usize) * size + xx as usize];
                        cnt += 1.0;
                    }
                }
            }
            out[y as usize * size + x as usize] = acc / cnt;
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

fn gamma_remap(img: &Tensor, gamma: f32) -> Tensor {
    let data = img.data().iter().map(|&v| ((v + 1.0) * 0.5).max(0.0).powf(gamma) * 2.0 - 1.0).collect();
    Tensor::new(img.shape().to_vec(), data).expect("same shape")
}

/// Input/target pair for sample `id`; depends only on `(spec.seed, id)`.
pub fn make_pair(spec: &DataSpec, id: u64, shifted: bool) -> (Tensor, Tensor) {
    let mut rng = stream_rng(spec.seed, id);
    let clean = clean_image(spec.image_size, &mut rng);
    match spec.kind {
        TaskKind::Denoise => {
            let sigma = spec.noise_sigma * if shifted { spec.shift_multiplier } else { 1.0 };
            let noisy = clean
                .data()
                .iter()
                .map(|&v| (v + sigma * rng.sample::<f32, _>(StandardNormal)).clamp(-1.0, 1.0))
                .collect();
            (Tensor::new(clean.shape().to_vec(), noisy).expect("same shape"), clean)
        }
        TaskKind::Style => {
            let target = gamma_remap(&clean, spec.gamma);
            let input = if shifted && spec.blur_radius > 0 { box_blur(&clean, spec.blur_radius) } else { clean };
            (input, target)
        }
    }
}

fn make_split(spec: &DataSpec, name: SplitName) -> Split {
    let ids: Vec<u64> = spec.split_range(name).collect();
    let (inputs, targets) = ids.iter().map(|&id| make_pair(spec, id, name.is_shifted())).unzip();
    Split { name, ids, inputs, targets }
}

pub fn generate(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        train: make_split(spec, SplitName::Train),
        calib: make_split(spec, SplitName::Calib),
        id_test: make_split(spec, SplitName::IdTest),
        ood_test: make_split(spec, SplitName::OodTest),
    })
}

#[derive(Serialize, Deserialize)]
struct SplitIndex {
    name: SplitName,
    ids: Vec<u64>,
    inputs_sha256: String,
    targets_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    format: u32,
    spec: DataSpec,
    splits: Vec<SplitIndex>,
}

fn blob_names(name: SplitName) -> (String, String) {
    (format!("{name}_inputs.tnsr"), format!("{name}_targets.tnsr"))
}

/// Writes `[N, C, H, W]` stacks per split plus `index.json`, and the first
/// `pgm_samples` images of each test split as PGM.
pub fn save_dataset(data: &Dataset, dir: &Path, pgm_samples: usize) -> Result<()> {
    create_dir(dir)?;
    let mut splits = Vec::new();
    for name in SplitName::ALL {
        let split = data.split(name);
        let (xi, yi) = blob_names(name);
        splits.push(SplitIndex {
            name,
            ids: split.ids.clone(),
            inputs_sha256: save_tensor(&dir.join(xi), &Tensor::stack(&split.inputs)?)?,
            targets_sha256: save_tensor(&dir.join(yi), &Tensor::stack(&split.targets)?)?,
        });
        if name != SplitName::Train && pgm_samples > 0 {
            let pgm = dir.join("pgm");
            create_dir(&pgm)?;
            for (i, id) in split.ids.iter().take(pgm_samples).enumerate() {
                save_pgm(&pgm.join(format!("{name}_{id}_x.pgm")), &split.inputs[i])?;
                save_pgm(&pgm.join(format!("{name}_{id}_y.pgm")), &split.targets[i])?;
            }
        }
    }
    save_json(&dir.join("index.json"), &DatasetIndex { format: DATASET_FORMAT, spec: data.spec.clone(), splits })
}

fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    (0..t.shape()[0]).map(|i| t.index_outer(i)).collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index: DatasetIndex = load_json(&dir.join("index.json"))?;
    if index.format != DATASET_FORMAT {
        return Err(Error::Version { found: index.format, expected: DATASET_FORMAT });
    }
    let mut loaded = Vec::new();
    for name in SplitName::ALL {
        let entry = index
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Corrupt { path: dir.join("index.json"), detail: format!("missing split {name}") })?;
        let (xi, yi) = blob_names(name);
        let inputs = unstack(&load_tensor(&dir.join(&xi), Some(&entry.inputs_sha256))?)?;
        let targets = unstack(&load_tensor(&dir.join(&yi), Some(&entry.targets_sha256))?)?;
        if inputs.len() != entry.ids.len() || targets.len() != entry.ids.len() {
            return Err(Error::Corrupt { path: dir.join(xi), detail: "sample count differs from index".into() });
        }
        loaded.push(Split { name, ids: entry.ids.clone(), inputs, targets });
    }
    let mut it = loaded.into_iter();
    Ok(Dataset {
        spec: index.spec,
        train: it.next().expect("four splits"),
        calib: it.next().expect("four splits"),
        id_test: it.next().expect("four splits"),
        ood_test: it.next().expect("four splits"),
    })
}
