//! Assembles the three-way poisoned training mixture: untouched clean
//! samples, trigger-stamped samples relabeled to the target class ("dirty"),
//! and fuzzy-trigger samples keeping their true labels ("cover").

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dataset::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::seed::{rng_from, substream, substream_indexed};
use crate::trigger::{apply_trigger, make_cover_trigger, CoverMethod, TriggerSpec};
use crate::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoisonConfig {
    /// Fraction of the train split to poison (dirty + cover combined).
    pub poison_rate: f64,
    /// Relative weights of dirty vs cover samples within the poison budget.
    pub dirty_cover_ratio: (f64, f64),
    /// Fraction of trigger support pixels dropped per cover sample
    /// (`cover_method = mask`).
    pub mask_rate: f64,
    /// Noise scale per cover sample (`cover_method = noise`).
    pub noise_sigma: f64,
    pub cover_method: CoverMethod,
    pub seed: u64,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        Self {
            poison_rate: 0.01,
            dirty_cover_ratio: (50.0, 50.0),
            mask_rate: 0.2,
            noise_sigma: 0.1,
            cover_method: CoverMethod::Mask,
            seed: 0,
        }
    }
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.poison_rate) {
            return Err(Error::contract(format!(
                "poison_rate must lie in [0, 0.5), got {}",
                self.poison_rate
            )));
        }
        let (wd, wc) = self.dirty_cover_ratio;
        if wd < 0.0 || wc < 0.0 || (wd == 0.0 && wc == 0.0) {
            return Err(Error::contract(
                "dirty_cover_ratio weights must be nonnegative and not both zero",
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::contract(format!(
                "mask_rate must lie in [0, 1], got {}",
                self.mask_rate
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::contract("noise_sigma must be >= 0"));
        }
        Ok(())
    }

    fn cover_param(&self) -> f64 {
        match self.cover_method {
            CoverMethod::Mask => self.mask_rate,
            CoverMethod::Noise => self.noise_sigma,
            CoverMethod::RandomSample => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleTag {
    Clean,
    Dirty,
    Cover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    /// Index into the merged training view.
    pub index: usize,
    pub tag: SampleTag,
    /// Index of the originating sample in the base dataset.
    pub source_index: usize,
}

/// The poisoned training mixture. Merged-view ordering is clean samples (in
/// base order), then dirty, then cover.
#[derive(Debug, Clone)]
pub struct PoisonedDataset {
    pub clean: LabeledDataset,
    pub dirty: Vec<(Image, usize)>,
    pub cover: Vec<(Image, usize)>,
    /// Realized drop masks of the cover triggers (empty unless `mask` method).
    pub cover_masks: Vec<Array2<u8>>,
    pub provenance: Vec<ProvenanceEntry>,
    pub config: PoisonConfig,
    pub num_classes: usize,
}

impl PoisonedDataset {
    pub fn total_len(&self) -> usize {
        self.clean.len() + self.dirty.len() + self.cover.len()
    }

    /// Sample `i` of the merged view: image, training label, provenance tag.
    pub fn get(&self, i: usize) -> (&Image, usize, SampleTag) {
        let nc = self.clean.len();
        let nd = self.dirty.len();
        if i < nc {
            (&self.clean.images[i], self.clean.labels[i], SampleTag::Clean)
        } else if i < nc + nd {
            let (img, label) = &self.dirty[i - nc];
            (img, *label, SampleTag::Dirty)
        } else {
            let (img, label) = &self.cover[i - nc - nd];
            (img, *label, SampleTag::Cover)
        }
    }
}

/// Draws poison sources without replacement (dirty and cover disjoint),
/// stamps and relabels dirty samples, builds a fresh fuzzy trigger per cover
/// sample, and passes everything else through as clean.
pub fn build_poisoned_dataset(
    base: &LabeledDataset,
    spec: &TriggerSpec,
    cfg: &PoisonConfig,
) -> Result<PoisonedDataset> {
    cfg.validate()?;
    if base.split != Split::Train {
        return Err(Error::contract("poisoning applies to a train split"));
    }
    if spec.target_label >= base.num_classes {
        return Err(Error::contract(format!(
            "target label {} out of range for {} classes",
            spec.target_label, base.num_classes
        )));
    }
    let n = base.len();
    let n_poison = (cfg.poison_rate * n as f64).round() as usize;
    if n_poison > n {
        return Err(Error::contract(format!(
            "poison budget {n_poison} exceeds dataset size {n}"
        )));
    }
    let (wd, wc) = cfg.dirty_cover_ratio;
    let n_dirty = (n_poison as f64 * wd / (wd + wc)).round() as usize;
    let n_cover = n_poison - n_dirty;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(substream(cfg.seed, "poison-select")));
    let dirty_src = &order[..n_dirty];
    let cover_src = &order[n_dirty..n_poison];

    let mut selected = vec![false; n];
    let mut dirty = Vec::with_capacity(n_dirty);
    let mut cover = Vec::with_capacity(n_cover);
    let mut cover_masks = Vec::with_capacity(n_cover);
    let mut provenance = Vec::with_capacity(n);

    for &src in dirty_src {
        selected[src] = true;
        dirty.push((apply_trigger(&base.images[src], spec)?, spec.target_label));
    }
    for (k, &src) in cover_src.iter().enumerate() {
        selected[src] = true;
        let cover_seed = substream_indexed(cfg.seed, "cover-trigger", k as u64);
        let fuzzy = make_cover_trigger(spec, cfg.cover_method, cfg.cover_param(), cover_seed)?;
        cover.push((fuzzy.apply(&base.images[src])?, base.labels[src]));
        if cfg.cover_method == CoverMethod::Mask {
            cover_masks.push(fuzzy.realized_mask.clone());
        }
    }

    let mut clean_images = Vec::with_capacity(n - n_poison);
    let mut clean_labels = Vec::with_capacity(n - n_poison);
    for src in 0..n {
        if !selected[src] {
            provenance.push(ProvenanceEntry {
                index: clean_images.len(),
                tag: SampleTag::Clean,
                source_index: src,
            });
            clean_images.push(base.images[src].clone());
            clean_labels.push(base.labels[src]);
        }
    }
    let n_clean = clean_images.len();
    for (k, &src) in dirty_src.iter().enumerate() {
        provenance.push(ProvenanceEntry {
            index: n_clean + k,
            tag: SampleTag::Dirty,
            source_index: src,
        });
    }
    for (k, &src) in cover_src.iter().enumerate() {
        provenance.push(ProvenanceEntry {
            index: n_clean + n_dirty + k,
            tag: SampleTag::Cover,
            source_index: src,
        });
    }

    let clean = LabeledDataset::new(clean_images, clean_labels, base.num_classes, Split::Train)?;
    Ok(PoisonedDataset {
        clean,
        dirty,
        cover,
        cover_masks,
        provenance,
        config: *cfg,
        num_classes: base.num_classes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonManifest {
    pub base_samples: usize,
    pub num_classes: usize,
    pub target_label: usize,
    pub config: PoisonConfig,
    pub entries: Vec<ProvenanceEntry>,
}

impl PoisonManifest {
    pub fn from_dataset(ds: &PoisonedDataset, target_label: usize) -> Self {
        Self {
            base_samples: ds.total_len(),
            num_classes: ds.num_classes,
            target_label,
            config: ds.config,
            entries: ds.provenance.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("manifest encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("manifest decode: {e}"),
        })
    }
}
