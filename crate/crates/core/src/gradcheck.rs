//! Central finite differences over every parameter of a small model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::synth::{generate, SynthConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{dialog_graph, dialog_loss, DanLayout, EncodedDialog, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub regions: usize,
    pub candidates: usize,
    pub rounds: usize,
    pub step: f64,
    /// Denominator floor of the relative error, for gradients near zero.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                embed_dim: 8,
                hidden: 16,
                feature_dim: 8,
                d_ref: 8,
                d_find: 16,
                heads: 2,
                layers: 2,
                ..ModelConfig::default()
            },
            regions: 5,
            candidates: 6,
            rounds: 3,
            step: 1e-5,
            floor: 1e-6,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn loss_of(config: &ModelConfig, layout: &DanLayout, store: &ParamStore<f64>, enc: &EncodedDialog, v: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::inference(store);
    let rounds = dialog_graph(&mut g, config, layout, enc, v)?;
    let loss = dialog_loss(&mut g, &rounds, &enc.gt)?;
    Ok(g.value(loss).item())
}

/// One dialog with multi-token answers, so every recurrent weight is exercised.
fn fixture(cfg: &GradCheckConfig) -> Result<Dataset> {
    let synth = SynthConfig {
        rounds_per_dialog: cfg.rounds,
        candidates: cfg.candidates,
        k_min: cfg.regions,
        k_max: cfg.regions,
        feature_dim: cfg.model.feature_dim,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let mut ds = generate(&synth, "gradcheck", 1)?;
    for r in &mut ds.dialogs.dialogs[0].rounds {
        for c in &mut r.candidates {
            c.insert(0, "the".into());
        }
    }
    Ok(ds)
}

pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0 && cfg.floor > 0.0) {
        return Err(Error::config("grad-check step and floor must be positive"));
    }
    let ds = fixture(cfg)?;
    let dialog = &ds.dialogs.dialogs[0];
    let vocab = &ds.dialogs.vocabulary;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (layout, store) = DanLayout::build::<f64>(&cfg.model, vocab.len(), Some(&mut rng))?;
    let enc = EncodedDialog::new(dialog, vocab);
    let v: Tensor<f64> = ds.regions(dialog).cast();

    let mut g = Graph::new(&store);
    let rounds = dialog_graph(&mut g, &cfg.model, &layout, &enc, &v)?;
    let loss = dialog_loss(&mut g, &rounds, &enc.gt)?;
    let value = g.value(loss).item();
    let analytic = g.backward(loss)?.dense(&store);

    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    let params = ids
        .par_iter()
        .zip(analytic.par_iter())
        .map(|(&id, grad)| {
            let mut local = store.clone();
            let n = store.get(id).numel();
            let mut worst: f64 = 0.0;
            let mut max_grad: f64 = 0.0;
            for j in 0..n {
                let x = store.get(id).data()[j];
                local.get_mut(id).data_mut()[j] = x + cfg.step;
                let up = loss_of(&cfg.model, &layout, &local, &enc, &v)?;
                local.get_mut(id).data_mut()[j] = x - cfg.step;
                let down = loss_of(&cfg.model, &layout, &local, &enc, &v)?;
                local.get_mut(id).data_mut()[j] = x;
                let numeric = (up - down) / (2.0 * cfg.step);
                let a = grad.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
                worst = worst.max(rel);
                max_grad = max_grad.max(a.abs());
            }
            Ok(ParamCheck {
                name: store.name(id).to_string(),
                elements: n,
                max_rel_error: worst,
                max_abs_grad: max_grad,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss: value,
        max_rel_error,
        tolerance: cfg.tolerance,
        passed: max_rel_error < cfg.tolerance,
        params,
    })
}
