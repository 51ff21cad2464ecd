//! Glue shared by the command-line tool and tests: turns a catalog, a
//! training split and a SID table into a ready-to-train model.

use std::collections::{BTreeSet, HashSet};

use crate::data::{expand_prefixes, observed_items, ItemCatalog, ItemId, UserSequence};
use crate::error::{Error, Result};
use crate::model::item_dnn::FeatureTable;
use crate::model::{Model, ModelConfig, Params};
use crate::tokenizer::AssignmentTable;
use crate::training::{build_examples, estimate_popularity, Example, PopularityTable, TrainConfig};

/// Fills in the catalog-dependent sizes of `base`.
pub fn model_config_for(catalog: &ItemCatalog, base: &ModelConfig) -> Result<ModelConfig> {
    if catalog.is_empty() {
        return Err(Error::Empty("catalog has no items"));
    }
    let cfg = ModelConfig {
        vocab_size: catalog.pad_id() as usize + 1,
        feature_dim: catalog.static_dim() + 1,
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: Model<f32>,
    pub examples: Vec<Example>,
    pub popularity: PopularityTable,
    /// Items seen in training; everything else is cold-start.
    pub observed: BTreeSet<ItemId>,
}

/// Builds the feature table from training counts, initialises parameters
/// from `init_seed` and expands every training sequence into prefix examples.
pub fn prepare_training(
    catalog: &ItemCatalog,
    train: &[UserSequence],
    table: &AssignmentTable,
    base: &ModelConfig,
    tc: &TrainConfig,
    init_seed: u64,
) -> Result<Prepared> {
    let cfg = model_config_for(catalog, base)?;
    let k = cfg.codebook_size;
    if let Some((_, sid)) = table.iter().find(|(_, s)| s.c1 as usize >= k || s.c2 as usize >= k) {
        let code = sid.c1.max(sid.c2) as usize;
        return Err(Error::CodeOutOfRange { code, k });
    }
    let mut counted = catalog.clone();
    counted.apply_popularity(train);
    let features = FeatureTable::from_catalog(&counted, cfg.vocab_size);
    let params = Params::init(&cfg, init_seed);
    let model = Model::new(cfg, params, features)?;
    let popularity = estimate_popularity(
        train,
        catalog.items.iter().map(|i| i.item_id),
        tc.popularity_eps,
        tc.popularity_targets_only,
    )?;
    let examples = build_examples(
        &expand_prefixes(train),
        model.config.l_max,
        catalog.pad_id(),
        table,
        &popularity,
    )?;
    Ok(Prepared {
        model,
        examples,
        popularity,
        observed: observed_items(train),
    })
}

pub fn cold_start_items(catalog: &ItemCatalog, observed: &BTreeSet<ItemId>) -> HashSet<ItemId> {
    catalog
        .items
        .iter()
        .map(|i| i.item_id)
        .filter(|i| !observed.contains(i))
        .collect()
}
