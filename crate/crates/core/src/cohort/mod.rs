//! Longitudinal cohorts: synthetic generation, same-subject pair
//! construction, paired augmentation, subject-level folds and the on-disk
//! dataset format.

mod augment;
mod folds;
mod generate;
mod io;
mod pairs;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use augment::{augment_pair, augment_pair_with, AugmentParams};
pub use folds::{split_folds, Fold};
pub use generate::{generate_cohort, render_image, render_raw, Anatomy, GeneratorConfig};
pub use io::{load_cohort, save_cohort, MANIFEST_FILE, MANIFEST_VERSION};
pub use pairs::{build_pairs, ImagePair};

/// Diagnosis group. The synthetic generator labels normal-speed subjects
/// `NC` and fast agers `AD`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "sMCI")]
    Smci,
    #[serde(rename = "pMCI")]
    Pmci,
    #[serde(rename = "AD")]
    Ad,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Nc => "NC",
            Group::Smci => "sMCI",
            Group::Pmci => "pMCI",
            Group::Ad => "AD",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Single-channel 2-D image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(height * width, data.len(), "image buffer size");
        Image { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image::new(height, width, vec![0.0; height * width])
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Mean and (population) standard deviation, accumulated in f64.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    pub subject_id: String,
    pub age: f64,
    pub image: Image,
    pub group: Option<Group>,
    /// Ground-truth latent state used to render the image (evaluation only).
    pub brain_state: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub group: Option<Group>,
    /// Ground-truth aging-speed multiplier (evaluation only).
    pub speed: f64,
    /// Visits ordered by strictly increasing age.
    pub visits: Vec<Visit>,
}

/// A collection of subjects with timestamped visits, keyed by subject id.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub height: usize,
    pub width: usize,
    pub subjects: BTreeMap<String, Subject>,
    pub generator: Option<GeneratorConfig>,
}

impl Cohort {
    pub fn empty(height: usize, width: usize) -> Self {
        Cohort {
            height,
            width,
            subjects: BTreeMap::new(),
            generator: None,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_visits(&self) -> usize {
        self.subjects.values().map(|s| s.visits.len()).sum()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.keys().cloned().collect()
    }

    /// Mean gap between consecutive visits, in years.
    pub fn mean_visit_interval(&self) -> f64 {
        let gaps: Vec<f64> = self
            .subjects
            .values()
            .flat_map(|s| s.visits.windows(2).map(|w| w[1].age - w[0].age))
            .collect();
        if gaps.is_empty() {
            0.0
        } else {
            gaps.iter().sum::<f64>() / gaps.len() as f64
        }
    }

    /// Restrict to the given subject ids (unknown ids are ignored).
    pub fn subset(&self, ids: &[String]) -> Cohort {
        Cohort {
            height: self.height,
            width: self.width,
            subjects: ids
                .iter()
                .filter_map(|id| self.subjects.get(id).map(|s| (id.clone(), s.clone())))
                .collect(),
            generator: self.generator.clone(),
        }
    }

    /// Every visit image in subject/visit order with its subject id, age and group.
    pub fn visits(&self) -> impl Iterator<Item = &Visit> {
        self.subjects.values().flat_map(|s| s.visits.iter())
    }
}
