//! Generated datasets where the class signal lives only in the metadata.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::features::{write_fmx, FeatureError, FeatureMatrix, ProviderConfig};
use crate::pipeline::ExperimentConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSuite {
    pub n: usize,
    pub classes: usize,
    /// Width of the isotropic-noise image block.
    pub image_dim: usize,
    /// Pure-noise metadata columns besides the signal column.
    pub noise_columns: usize,
    /// Standard deviation of the noise added to the class index in the signal column.
    pub signal_sigma: f64,
    /// Build the signal column from a permutation of the labels, so it carries no class information.
    pub shuffle_metadata: bool,
    pub seed: u64,
}

impl Default for SyntheticSuite {
    fn default() -> Self {
        Self {
            n: 1000,
            classes: 4,
            image_dim: 16,
            noise_columns: 2,
            signal_sigma: 0.3,
            shuffle_metadata: false,
            seed: 0,
        }
    }
}

impl SyntheticSuite {
    pub fn class_name(c: usize) -> String {
        format!("class{c}")
    }

    /// Writes `features.fmx` (with labels), `metadata.csv` and `schema.json`
    /// into `dir` and returns a config that reads them and writes to `out`.
    pub fn write(&self, dir: &Path, out: &Path) -> Result<ExperimentConfig, FeatureError> {
        fs::create_dir_all(dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let labels: Vec<usize> = (0..self.n).map(|i| i % self.classes).collect();
        let mut signal_labels = labels.clone();
        if self.shuffle_metadata {
            signal_labels.shuffle(&mut rng);
        }
        let ids: Vec<String> = (0..self.n).map(|i| format!("s{i:05}")).collect();

        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let image = Array2::from_shape_simple_fn((self.n, self.image_dim), &mut normal);
        let features = FeatureMatrix::from_f64(
            &image,
            ids.clone(),
            Some(labels.iter().map(|&c| Self::class_name(c)).collect()),
            "synthetic isotropic noise",
        )?;
        let features_path = dir.join("features.fmx");
        write_fmx(&features, &features_path)?;

        let mut csv = String::from("sample_id,signal");
        let mut schema = String::from("{\"id_column\": \"sample_id\", \"columns\": {\"signal\": \"numeric\"");
        for j in 0..self.noise_columns {
            let _ = write!(csv, ",noise{j}");
            let _ = write!(schema, ", \"noise{j}\": \"numeric\"");
        }
        csv.push('\n');
        schema.push_str("}}\n");
        for (id, &c) in ids.iter().zip(&signal_labels) {
            let _ = write!(csv, "{id},{}", c as f64 + self.signal_sigma * normal());
            for _ in 0..self.noise_columns {
                let _ = write!(csv, ",{}", normal());
            }
            csv.push('\n');
        }
        fs::write(dir.join("metadata.csv"), csv)?;
        fs::write(dir.join("schema.json"), schema)?;

        Ok(ExperimentConfig {
            name: format!("synthetic-{}", self.seed),
            features: ProviderConfig::File(features_path),
            metadata: dir.join("metadata.csv"),
            schema: dir.join("schema.json"),
            labels: None,
            label_map: None,
            transfer_mode: Default::default(),
            augmentation: None,
            split: Default::default(),
            train: Default::default(),
            seed: self.seed,
            output_dir: out.to_path_buf(),
        })
    }
}
