//! Volumes, label maps, and datasets of synthetic tumour phantoms.

mod augment;
pub(crate) mod io;
mod phantom;
mod preprocess;

pub use augment::{GeometricTransform, uniform_perturbation};
pub use io::{load_labels, load_volume, save_labels, save_volume, LABEL_MAGIC, VOLUME_MAGIC};
pub use phantom::{generate_phantom, PhantomParams};
pub use preprocess::{resize, standardize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// External label codes in internal-index order.
pub const LABEL_CODES: [u8; 4] = [0, 1, 2, 4];
pub const NUM_CLASSES: usize = 4;
pub const NUM_CHANNELS: usize = 4;
pub const CHANNEL_NAMES: [&str; 4] = ["T1", "T1Gd", "T2", "FLAIR"];

pub fn code_to_index(code: u8) -> Result<usize> {
    match code {
        0 => Ok(0),
        1 => Ok(1),
        2 => Ok(2),
        4 => Ok(3),
        other => Err(Error::InvalidArgument(format!("unknown label code {other}"))),
    }
}

pub fn index_to_code(index: usize) -> Result<u8> {
    LABEL_CODES
        .get(index)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("class index {index} out of range")))
}

/// Four-channel intensity volume `[4, D, H, W]` (T1, T1Gd, T2, FLAIR).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    tensor: Tensor,
}

impl Volume {
    pub fn new(subject_id: impl Into<String>, tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::shape(
                "Volume::new",
                format!("expected [C,D,H,W], got {:?}", tensor.shape()),
            ));
        }
        if !tensor.all_finite() {
            return Err(Error::InvalidArgument("volume contains non-finite values".into()));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            tensor,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.tensor.shape();
        [s[1], s[2], s[3]]
    }

    pub fn with_tensor(&self, tensor: Tensor) -> Result<Self> {
        Self::new(self.subject_id.clone(), tensor)
    }
}

/// Per-voxel class map stored as external codes {0, 1, 2, 4}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    extents: [usize; 3],
    codes: Vec<u8>,
}

impl LabelMap {
    pub fn new(extents: [usize; 3], codes: Vec<u8>) -> Result<Self> {
        if extents.iter().product::<usize>() != codes.len() || extents.contains(&0) {
            return Err(Error::shape(
                "LabelMap::new",
                format!("extents {extents:?} vs {} codes", codes.len()),
            ));
        }
        if let Some(bad) = codes.iter().find(|c| code_to_index(**c).is_err()) {
            return Err(Error::InvalidArgument(format!("unknown label code {bad}")));
        }
        Ok(Self { extents, codes })
    }

    pub fn filled(extents: [usize; 3], code: u8) -> Result<Self> {
        Self::new(extents, vec![code; extents.iter().product()])
    }

    pub fn from_indices(extents: [usize; 3], indices: &[usize]) -> Result<Self> {
        let codes = indices
            .iter()
            .map(|&i| index_to_code(i))
            .collect::<Result<Vec<_>>>()?;
        Self::new(extents, codes)
    }

    /// Per-voxel argmax over the class axis of a `[N, D, H, W]` probability volume.
    /// Ties resolve to the lowest class index.
    pub fn from_probabilities(probs: &Tensor) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 4 || s[0] != NUM_CLASSES {
            return Err(Error::shape(
                "LabelMap::from_probabilities",
                format!("expected [{NUM_CLASSES},D,H,W], got {s:?}"),
            ));
        }
        let inner = probs.inner_len();
        let p = probs.data();
        let indices: Vec<usize> = (0..inner)
            .map(|v| {
                (1..NUM_CLASSES).fold(0, |best, c| {
                    if p[c * inner + v] > p[best * inner + v] {
                        c
                    } else {
                        best
                    }
                })
            })
            .collect();
        Self::from_indices([s[1], s[2], s[3]], &indices)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.codes
            .iter()
            .map(|&c| code_to_index(c).expect("validated on construction"))
            .collect()
    }

    /// One-hot encoding `[4, D, H, W]` in internal class order.
    pub fn one_hot(&self) -> OneHotLabels {
        let n = self.codes.len();
        let mut data = vec![0.0; NUM_CLASSES * n];
        for (v, idx) in self.indices().into_iter().enumerate() {
            data[idx * n + v] = 1.0;
        }
        let [d, h, w] = self.extents;
        OneHotLabels(Tensor::new(vec![NUM_CLASSES, d, h, w], data).expect("consistent extents"))
    }

    /// Voxel count per internal class index.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut hist = [0; NUM_CLASSES];
        for i in self.indices() {
            hist[i] += 1;
        }
        hist
    }
}

/// `[N, D, H, W]` tensor with exactly one 1 per voxel across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotLabels(Tensor);

impl OneHotLabels {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 {
            return Err(Error::shape("OneHotLabels::new", format!("{s:?}")));
        }
        let inner = tensor.inner_len();
        let d = tensor.data();
        for v in 0..inner {
            let mut ones = 0;
            for c in 0..s[0] {
                match d[c * inner + v] {
                    x if x == 1.0 => ones += 1,
                    x if x == 0.0 => {}
                    x => {
                        return Err(Error::InvalidArgument(format!(
                            "one-hot entry {x} is neither 0 nor 1"
                        )))
                    }
                }
            }
            if ones != 1 {
                return Err(Error::InvalidArgument(format!(
                    "voxel {v} has {ones} active classes"
                )));
            }
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub volume: Volume,
    pub labels: LabelMap,
}

impl Subject {
    pub fn id(&self) -> &str {
        &self.volume.subject_id
    }
}

/// Disjoint train/test partition of subjects.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Subject>,
    pub test: Vec<Subject>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle followed by a partition with `round(n * test_fraction)` test subjects.
pub fn split_dataset(subjects: Vec<Subject>, test_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} not in (0,1)"
        )));
    }
    let n = subjects.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::InvalidArgument(format!(
            "{n} subjects with test fraction {test_fraction} leaves an empty split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Subject>> = subjects.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index visited once");
    let test: Vec<Subject> = order[..n_test].iter().map(|&i| take(i)).collect();
    let train: Vec<Subject> = order[n_test..].iter().map(|&i| take(i)).collect();
    Ok(Dataset { train, test })
}

impl Dataset {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            train: self.train.iter().map(|s| s.id().to_string()).collect(),
            test: self.test.iter().map(|s| s.id().to_string()).collect(),
        }
    }
}

/// Generate, standardize and split `n_subjects` phantoms.
pub fn synthetic_dataset(n_subjects: usize, extent: usize, test_fraction: f64, seed: u64) -> Result<Dataset> {
    let subjects = (0..n_subjects)
        .map(|i| {
            let (volume, labels) = generate_phantom(subject_seed(seed, i), extent)?;
            let volume = Volume::new(subject_name(i), standardize(&volume)?.into_tensor())?;
            Ok(Subject { volume, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    split_dataset(subjects, test_fraction, seed)
}

pub fn subject_name(i: usize) -> String {
    format!("subject_{i:03}")
}

pub fn subject_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}
