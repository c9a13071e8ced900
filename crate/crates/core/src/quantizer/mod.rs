//! Pseudo-label factory: optional PCA compression of supervision features,
//! k-means codebooks, and frame-to-cluster assignment.

mod kmeans;
mod pca;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use kmeans::{assign_all, fit_kmeans, nearest, sq_dist, KMeansConfig, KMeansFit};
pub use pca::{covariance, fit_pca, jacobi_eigen, PcaTransform};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::io;

/// K centroids, optionally living in the output space of a PCA transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f64>,
    pub pca: Option<PcaTransform>,
    pub inertia_history: Vec<f64>,
    pub seed: u64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    /// Dimension of the raw frames this codebook accepts.
    pub fn input_dim(&self) -> usize {
        match &self.pca {
            Some(p) => p.input_dim(),
            None => self.centroids.ncols(),
        }
    }

    /// Fits PCA (when `pca_rank` is given) and then k-means on the result.
    pub fn fit(frames: ArrayView2<f64>, pca_rank: Option<usize>, cfg: &KMeansConfig) -> Result<Self> {
        let pca = pca_rank.map(|r| fit_pca(frames, r)).transpose()?;
        let fit = match &pca {
            Some(p) => fit_kmeans(p.project(frames)?.view(), cfg)?,
            None => fit_kmeans(frames, cfg)?,
        };
        Ok(Self {
            centroids: fit.centroids,
            pca,
            inertia_history: fit.inertia_history,
            seed: cfg.seed,
        })
    }

    fn prepare(&self, frames: ArrayView2<f64>) -> Result<Option<Array2<f64>>> {
        if frames.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "codebook expects {}-dim frames, got {}",
                self.input_dim(),
                frames.ncols()
            )));
        }
        self.pca.as_ref().map(|p| p.project(frames)).transpose()
    }

    pub fn assign(&self, frames: ArrayView2<f64>) -> Result<Vec<u32>> {
        let projected = self.prepare(frames)?;
        let view = projected.as_ref().map(|p| p.view()).unwrap_or(frames);
        Ok(assign_all(self.centroids.view(), view)
            .into_iter()
            .map(|(c, _)| c as u32)
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CodebookHeader {
            k: self.k(),
            dim: self.centroids.ncols(),
            seed: self.seed,
            pca: self.pca.is_some(),
            pca_input_dim: self.pca.as_ref().map(|p| p.input_dim()),
            inertia_history: self.inertia_history.clone(),
        };
        let mut values: Vec<f64> = self.centroids.iter().copied().collect();
        if let Some(p) = &self.pca {
            values.extend(p.mean.iter());
            values.extend(p.basis.iter());
            values.extend(p.eigenvalues.iter());
        }
        io::write_container(path, &header, &io::f32_le_bytes(values))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload) = io::read_container::<CodebookHeader>(path)?;
        let values = io::f32_from_le(&payload)?;
        let n_centroids = h.k * h.dim;
        let expected = n_centroids
            + h.pca_input_dim
                .map(|d| d + h.dim * d + h.dim)
                .unwrap_or(0);
        if values.len() != expected || h.pca != h.pca_input_dim.is_some() {
            return Err(Error::Format(format!(
                "codebook {} payload holds {} values, expected {expected}",
                path.display(),
                values.len()
            )));
        }
        let centroids = Array2::from_shape_vec((h.k, h.dim), values[..n_centroids].to_vec())
            .expect("length checked");
        let pca = h.pca_input_dim.map(|d| {
            let rest = &values[n_centroids..];
            PcaTransform {
                mean: Array1::from(rest[..d].to_vec()),
                basis: Array2::from_shape_vec((h.dim, d), rest[d..d + h.dim * d].to_vec())
                    .expect("length checked"),
                eigenvalues: Array1::from(rest[d + h.dim * d..].to_vec()),
            }
        });
        Ok(Self {
            centroids,
            pca,
            inertia_history: h.inertia_history,
            seed: h.seed,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookHeader {
    k: usize,
    dim: usize,
    seed: u64,
    pca: bool,
    #[serde(default)]
    pca_input_dim: Option<usize>,
    #[serde(default)]
    inertia_history: Vec<f64>,
}

/// Per-utterance discrete training targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSequence {
    pub utterance_id: String,
    pub labels: Vec<u32>,
    pub k: usize,
    pub frame_rate: f64,
}

impl PseudoLabelSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Writes the label file. `provenance` records which model and settings
    /// produced the labels.
    pub fn save(&self, path: &Path, provenance: Option<&serde_json::Value>) -> Result<()> {
        let header = LabelHeader {
            utterance_id: self.utterance_id.clone(),
            k: self.k,
            frame_rate: self.frame_rate,
            t: self.labels.len(),
            provenance: provenance.cloned(),
        };
        let mut payload = Vec::with_capacity(self.labels.len() * 4);
        for l in &self.labels {
            payload.extend_from_slice(&l.to_le_bytes());
        }
        io::write_container(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<serde_json::Value>)> {
        let (h, payload) = io::read_container::<LabelHeader>(path)?;
        if payload.len() != h.t * 4 {
            return Err(Error::Format(format!(
                "label file {} declares {} labels but holds {} bytes",
                path.display(),
                h.t,
                payload.len()
            )));
        }
        let labels: Vec<u32> = payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= h.k) {
            return Err(Error::LabelRange {
                label: bad as usize,
                k: h.k,
            });
        }
        Ok((
            Self {
                utterance_id: h.utterance_id,
                labels,
                k: h.k,
                frame_rate: h.frame_rate,
            },
            h.provenance,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelHeader {
    utterance_id: String,
    #[serde(rename = "K")]
    k: usize,
    frame_rate: f64,
    #[serde(rename = "T")]
    t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

/// Maps every frame to its nearest centroid (squared Euclidean, ties to the
/// lowest index), projecting through the attached PCA first.
pub fn assign_labels(codebook: &Codebook, features: &FeatureMatrix) -> Result<PseudoLabelSequence> {
    Ok(PseudoLabelSequence {
        utterance_id: features.utterance_id.clone(),
        labels: codebook.assign(features.data.view())?,
        k: codebook.k(),
        frame_rate: features.frame_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use rand::Rng;

    fn matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = io::rng(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn fm(data: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::new("u", data, 50.0, FeatureKind::Hidden).unwrap()
    }

    #[test]
    fn k1_labels_are_zero() {
        let x = matrix(30, 4, 1);
        let cb = Codebook::fit(x.view(), None, &KMeansConfig::new(1, 10, 0)).unwrap();
        let labels = assign_labels(&cb, &fm(x)).unwrap();
        assert!(labels.labels.iter().all(|&l| l == 0));
        assert_eq!(labels.frame_rate, 50.0);
    }

    #[test]
    fn frame_on_centroid_gets_its_label() {
        let x = matrix(60, 3, 2);
        let cb = Codebook::fit(x.view(), None, &KMeansConfig::new(5, 10, 0)).unwrap();
        let labels = cb.assign(cb.centroids.view()).unwrap();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn assignment_is_idempotent() {
        let x = matrix(80, 4, 3);
        let cb = Codebook::fit(x.view(), Some(2), &KMeansConfig::new(6, 10, 9)).unwrap();
        let a = assign_labels(&cb, &fm(x.clone())).unwrap();
        let b = assign_labels(&cb, &fm(x)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let x = matrix(20, 4, 4);
        let cb = Codebook::fit(x.view(), None, &KMeansConfig::new(2, 5, 0)).unwrap();
        assert!(matches!(
            assign_labels(&cb, &fm(matrix(5, 3, 1))),
            Err(Error::Shape(_))
        ));
        let cb = Codebook::fit(x.view(), Some(2), &KMeansConfig::new(2, 5, 0)).unwrap();
        assert!(matches!(
            assign_labels(&cb, &fm(matrix(5, 2, 1))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn codebook_and_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = matrix(50, 5, 5);
        let cb = Codebook::fit(x.view(), Some(3), &KMeansConfig::new(4, 10, 2)).unwrap();
        let p = dir.path().join("cb.bin");
        cb.save(&p).unwrap();
        let back = Codebook::load(&p).unwrap();
        assert_eq!(back.k(), 4);
        assert_eq!(back.input_dim(), 5);
        assert_eq!(back.pca.as_ref().unwrap().rank(), 3);
        assert_eq!(back.inertia_history, cb.inertia_history);

        let labels = assign_labels(&cb, &fm(x)).unwrap();
        let lp = dir.path().join("u.lab");
        let prov = serde_json::json!({"iteration": 0});
        labels.save(&lp, Some(&prov)).unwrap();
        let (l2, p2) = PseudoLabelSequence::load(&lp).unwrap();
        assert_eq!(l2, labels);
        assert_eq!(p2, Some(prov));
    }
}
