//! Model files: the parameters in `SPMW` format plus `meta.*` entries for
//! the preservation factor, step count and adapter settings.

use crate::error::DiffusionError;
use crate::model::{LoraAdapter, ToyDenoiser};
use spm_autodiff::{load_spmw, save_spmw, ParamStore, Tensor};
use std::path::Path;

pub fn save_model(model: &ToyDenoiser, path: impl AsRef<Path>) -> Result<(), DiffusionError> {
    let mut store = model.params.clone();
    store.insert("meta.w", Tensor::scalar(model.w));
    store.insert("meta.train_steps", Tensor::scalar(model.train_steps as f64));
    for (i, ad) in model.adapters.iter().enumerate() {
        let entry = vec![ad.rank as f64, ad.alpha, i as f64];
        store.insert(format!("meta.lora.{}", ad.target), Tensor::new(&[3], entry)?);
    }
    Ok(save_spmw(&store, path)?)
}

pub fn model_from_store(mut store: ParamStore) -> Result<ToyDenoiser, DiffusionError> {
    let meta = |s: &mut ParamStore, n: &str| s.remove(n).map(|t| t.data[0]);
    let w = meta(&mut store, "meta.w").unwrap_or(crate::model::DEFAULT_PRESERVATION);
    let train_steps = meta(&mut store, "meta.train_steps").unwrap_or(0.0) as u64;
    let lora_keys: Vec<String> = store.names().filter(|n| n.starts_with("meta.lora.")).cloned().collect();
    let mut adapters = Vec::new();
    for key in lora_keys {
        let t = store.remove(&key).expect("listed");
        if t.numel() != 3 {
            return Err(DiffusionError::Config(format!("malformed `{key}`")));
        }
        let ad = LoraAdapter {
            target: key["meta.lora.".len()..].to_string(),
            rank: t.data[0] as usize,
            alpha: t.data[1],
        };
        if !store.contains(&ad.a_name()) || !store.contains(&ad.b_name()) || !store.contains(&ad.target) {
            return Err(DiffusionError::UnknownTarget(ad.target));
        }
        adapters.push((t.data[2] as usize, ad));
    }
    adapters.sort_by_key(|(i, _)| *i);
    let adapters = adapters.into_iter().map(|(_, ad)| ad).collect();
    let model = ToyDenoiser {
        params: store,
        w,
        adapters,
        train_steps,
    };
    if !model.has_backbone() {
        return Err(DiffusionError::MissingBackbone);
    }
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ToyDenoiser, DiffusionError> {
    model_from_store(load_spmw(path)?)
}
