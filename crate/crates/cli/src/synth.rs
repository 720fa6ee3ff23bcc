//! Synthetic cohorts: Gaussian patch embeddings around per-class centroids.

use std::collections::HashMap;
use std::path::Path;

use mosaix_core::model::{DatasetManifest, EmbeddingSet, LabelGranularity, WsiRecord};
use mosaix_core::storage::{self, StorageError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCohortSpec {
    pub n_classes: usize,
    pub patients_per_class: usize,
    pub wsis_per_patient: usize,
    pub patches_per_mosaic: usize,
    pub dim: usize,
    /// Distance between any two class centroids, in units of the within-class
    /// standard deviation (which is 1).
    pub class_separation: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticCohortSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            patients_per_class: 40,
            wsis_per_patient: 1,
            patches_per_mosaic: 16,
            dim: 64,
            class_separation: 4.0,
            rng_seed: 42,
        }
    }
}

impl SyntheticCohortSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            ("n_classes", self.n_classes),
            ("patients_per_class", self.patients_per_class),
            ("wsis_per_patient", self.wsis_per_patient),
            ("patches_per_mosaic", self.patches_per_mosaic),
            ("dim", self.dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(SynthError::InvalidSpec(format!(
                "{name} must be at least 1"
            )));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(SynthError::InvalidSpec(
                "class_separation must be a finite value >= 0".into(),
            ));
        }
        if self.dim < self.n_classes {
            return Err(SynthError::InvalidSpec(format!(
                "dim {} is smaller than n_classes {}; centroids need one axis per class",
                self.dim, self.n_classes
            )));
        }
        Ok(())
    }

    /// Class centroids: scaled standard basis vectors, so every pair sits at
    /// exactly `class_separation` apart (a regular simplex).
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        let scale = self.class_separation / std::f64::consts::SQRT_2;
        (0..self.n_classes)
            .map(|c| {
                let mut mu = vec![0.0; self.dim];
                mu[c] = scale;
                mu
            })
            .collect()
    }
}

pub fn class_name(c: usize) -> String {
    format!("class_{c}")
}

/// A generated cohort held in memory.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub manifest: DatasetManifest,
    pub embeddings: HashMap<String, EmbeddingSet>,
}

/// Draws a cohort. Patch vectors are `Normal(mu_c, I)`; draws happen in class,
/// patient, slide, patch order from one seeded stream.
pub fn generate_cohort(spec: &SyntheticCohortSpec) -> Result<Cohort, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let centroids = spec.centroids();
    let mut wsis = Vec::new();
    let mut embeddings = HashMap::new();
    for (c, mu) in centroids.iter().enumerate() {
        for p in 0..spec.patients_per_class {
            let patient_id = format!("c{c}-p{p:03}");
            for s in 0..spec.wsis_per_patient {
                let wsi_id = format!("{patient_id}-s{s}");
                let mut data = Vec::with_capacity(spec.patches_per_mosaic * spec.dim);
                for _ in 0..spec.patches_per_mosaic {
                    for m in mu {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        data.push((m + z) as f32);
                    }
                }
                let set = EmbeddingSet::from_float(wsi_id.clone(), spec.dim, data)
                    .expect("finite, non-empty draws");
                wsis.push(WsiRecord {
                    wsi_id: wsi_id.clone(),
                    patient_id: patient_id.clone(),
                    label: class_name(c),
                    mosaic: (0..spec.patches_per_mosaic as u64).collect(),
                    embedding_ref: format!("embeddings/{wsi_id}.wsie"),
                });
                embeddings.insert(wsi_id, set);
            }
        }
    }
    let manifest = DatasetManifest {
        name: format!(
            "synthetic-c{}-sep{}-seed{}",
            spec.n_classes, spec.class_separation, spec.rng_seed
        ),
        classes: (0..spec.n_classes).map(class_name).collect(),
        label_granularity: LabelGranularity::Patient,
        wsis,
    };
    Ok(Cohort {
        manifest,
        embeddings,
    })
}

/// Generates a cohort and writes `manifest.json` plus one embedding file per
/// slide under `out_dir/embeddings/`.
pub fn generate_synthetic(
    spec: &SyntheticCohortSpec,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    let cohort = generate_cohort(spec)?;
    for wsi in &cohort.manifest.wsis {
        storage::write_embeddings(
            &cohort.embeddings[&wsi.wsi_id],
            &out_dir.join(&wsi.embedding_ref),
        )?;
    }
    storage::write_manifest(&cohort.manifest, &out_dir.join("manifest.json"))?;
    Ok(cohort.manifest)
}
