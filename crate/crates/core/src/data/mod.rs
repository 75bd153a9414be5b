//! Digit ingestion, scene synthesis and on-disk datasets.

pub mod context;
pub mod idx;
pub mod store;
pub mod synth;

pub use context::{make_context_sets, paste_object, ContextPositive, ContextSets};
pub use idx::{load_idx, Digits};
pub use store::{read_dataset, read_manifest, write_dataset, DatasetInfo, DatasetManifest, SampleEntry};
pub use synth::{synth_multi, synth_single, Placement, SynthConfig};

use crate::error::{invalid, shape_err, Result};
use crate::masks::ObjectMask;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One scene: an `(H, W, 1)` image and the visible mask and class of each
/// object in it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    image: Tensor,
    objects: Vec<ObjectMask>,
    split: Split,
    seed: u64,
    placements: Vec<Placement>,
}

impl Sample {
    pub fn new(image: Tensor, objects: Vec<ObjectMask>, split: Split, seed: u64) -> Result<Self> {
        let (h, w, c) = image.hwc()?;
        if c != 1 || image.rank() != 3 {
            return Err(shape_err!("sample images are (H, W, 1), got {:?}", image.shape()));
        }
        if objects.is_empty() {
            return Err(invalid!("a sample needs at least one object"));
        }
        if let Some(o) = objects.iter().find(|o| o.mask().shape() != [h, w]) {
            return Err(shape_err!(
                "object {} mask {:?} does not match image {h}x{w}",
                o.object(),
                o.mask().shape()
            ));
        }
        Ok(Sample {
            image,
            objects,
            split,
            seed,
            placements: Vec::new(),
        })
    }

    pub fn with_placements(mut self, placements: Vec<Placement>) -> Self {
        self.placements = placements;
        self
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn objects(&self) -> &[ObjectMask] {
        &self.objects
    }

    /// Number of objects `K`.
    pub fn k(&self) -> usize {
        self.objects.len()
    }

    /// Class of every object, in object order (duplicates kept).
    pub fn labels(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.label()).collect()
    }

    /// Distinct classes present, ascending.
    pub fn label_set(&self) -> Vec<usize> {
        let mut l = self.labels();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Random stream the sample was generated from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Where each digit was drawn, for synthesized samples.
    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    /// `m_k · X`: object `k` shown alone on a black background.
    pub fn isolated(&self, k: usize) -> Result<Tensor> {
        let o = self
            .objects
            .get(k)
            .ok_or_else(|| invalid!("object {k} out of range"))?;
        let m = o.mask().clone().reshape(self.image.shape().to_vec())?;
        self.image.zip_map(&m, |x, m| x * m)
    }
}
