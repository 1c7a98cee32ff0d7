//! End-to-end composition: train on a dataset directory, embed its sites,
//! and turn embeddings into profile tables.

use std::path::Path;

use crate::dataio::{load_dataset, IndexRecord, LoadedDataset};
use crate::error::{Error, Result};
use crate::model::{PhenoNet, PhenoNetConfig};
use crate::profiles::{Level, ProfileRow, ProfileTable};
use crate::tensor::Tensor;
use crate::train::{fit, EpochLog, TrainConfig};

/// Batch size used for evaluation-mode embedding.
pub const EMBED_BATCH: usize = 32;

/// A trained network with the dataset it was fitted on.
pub struct Trained {
    pub net: PhenoNet<f32>,
    pub data: LoadedDataset,
    pub logs: Vec<EpochLog>,
}

/// Fill the data-dependent model fields (`num_classes`, `out_dim`,
/// `image_size`, ablations) from the dataset and training configuration.
pub fn model_config_for(base: &PhenoNetConfig, data: &LoadedDataset, train: &TrainConfig) -> PhenoNetConfig {
    let mut cfg = base.clone();
    cfg.num_classes = data.encoder.len();
    cfg.out_dim = data.training.targets.shape()[1];
    cfg.image_size = data.training.images.shape()[2];
    train.adjust_model(&mut cfg);
    cfg
}

/// Load `dir`, build a network sized for it and run warm-up plus joint training.
pub fn train_on_dir(
    dir: impl AsRef<Path>,
    model: &PhenoNetConfig,
    train: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<Trained> {
    train.validate()?;
    let data = load_dataset(dir, model.image_size)?;
    let cfg = model_config_for(model, &data, train);
    let mut net = PhenoNet::<f32>::new(cfg)?;
    let logs = fit(&mut net, &data.training, train, on_epoch)?;
    Ok(Trained { net, data, logs })
}

/// Site-level profile table from index records and their `[N, D]` embeddings.
pub fn site_profiles(records: &[IndexRecord], embeddings: &Tensor<f32>) -> Result<ProfileTable> {
    if embeddings.rank() != 2 || embeddings.shape()[0] != records.len() {
        return Err(Error::shape(
            "site_profiles",
            format!("embeddings {:?} for {} records", embeddings.shape(), records.len()),
        ));
    }
    let rows = records
        .iter()
        .map(|r| ProfileRow {
            plate: r.plate.clone(),
            well: r.well.clone(),
            site: r.site.clone(),
            treatment: r.treatment.clone(),
            role: r.role,
            vector: Vec::new(),
        })
        .collect();
    ProfileTable::from_matrix(Level::Site, &embeddings.cast::<f64>(), rows)
}

/// Evaluation-mode embeddings of every site in `data`, as a profile table.
pub fn embed_sites(net: &PhenoNet<f32>, data: &LoadedDataset) -> Result<ProfileTable> {
    let z = net.embed(&data.training.images, EMBED_BATCH)?;
    site_profiles(&data.records, &z)
}
