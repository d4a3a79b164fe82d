//! Materializes config data sources into feature/label matrices.

use laplace_net_core::data::{self, synth::synth_digits};
use laplace_net_core::matrix::{LabelMatrix, Matrix};
use laplace_net_core::rng;

use crate::config::DataSource;
use crate::CliError;

/// A loaded dataset; image-shaped sources carry their (height, width) so
/// exports can round-trip through the IDX format.
pub struct Dataset {
    pub features: Matrix,
    pub labels: LabelMatrix,
    pub image_dims: Option<(u32, u32)>,
}

pub fn load(source: &DataSource, run_seed: u64) -> Result<Dataset, CliError> {
    match source {
        DataSource::TwoMoons {
            n_per_class,
            noise_std,
            seed_offset,
            unit_box,
        } => {
            let seed = rng::derive_seed(run_seed, &[0xda, *seed_offset]);
            let (mut features, labels) = data::gen_two_moons(*n_per_class, *noise_std, seed)?;
            if *unit_box {
                features = features.map(|v| ((v + 1.5) / 4.0).clamp(0.0, 1.0));
            }
            Ok(Dataset {
                features,
                labels,
                image_dims: None,
            })
        }
        DataSource::Blobs {
            n_per_class,
            centers,
            std_dev,
            seed_offset,
        } => {
            let seed = rng::derive_seed(run_seed, &[0xdb, *seed_offset]);
            let center_matrix = Matrix::from_rows(centers)?;
            let (features, labels) = data::gen_blobs(*n_per_class, &center_matrix, *std_dev, seed)?;
            Ok(Dataset {
                features,
                labels,
                image_dims: None,
            })
        }
        DataSource::SynthDigits { count, seed_offset } => {
            let seed = rng::derive_seed(run_seed, &[0xdc, *seed_offset]);
            let (features, labels) = synth_digits(*count, seed);
            Ok(Dataset {
                features,
                labels,
                image_dims: Some((28, 28)),
            })
        }
        DataSource::Csv { path, label_column } => {
            let (features, labels) = data::load_csv(path, *label_column)?;
            Ok(Dataset {
                features,
                labels,
                image_dims: None,
            })
        }
        DataSource::Idx { images, labels } => {
            let (dims, _) = data::read_idx_raw(images)?;
            let image_dims = if dims.len() == 3 {
                Some((dims[1], dims[2]))
            } else {
                None
            };
            let (features, label_matrix) = data::load_idx(images, labels)?;
            Ok(Dataset {
                features,
                labels: label_matrix,
                image_dims,
            })
        }
    }
}
