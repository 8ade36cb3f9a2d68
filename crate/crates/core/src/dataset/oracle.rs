//! A scorer that reads the planted structure directly: it resolves pronouns
//! through the recorded antecedent, finds the object's region by nearest
//! embedding and decodes the colour the same way.

use super::synth::World;
use super::{Dataset, DialogInstance};
use crate::decoder::ScoreDistribution;
use crate::error::{Error, Result};
use crate::eval::Scorer;

pub struct PlantedOracle {
    world: World,
}

fn dot(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| x * y as f64).sum()
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

impl PlantedOracle {
    pub fn new(world: World) -> Self {
        PlantedOracle { world }
    }

    fn named_object(&self, words: &[String]) -> Option<usize> {
        words.iter().find_map(|w| self.world.object_by_name(w))
    }
}

impl Scorer for PlantedOracle {
    fn score_dialog(&self, data: &Dataset, dialog: &DialogInstance) -> Result<Vec<ScoreDistribution>> {
        let regions = data.regions(dialog);
        let k = regions.shape()[0];
        let mut out = Vec::with_capacity(dialog.rounds.len());
        for (t, round) in dialog.rounds.iter().enumerate() {
            let object = match round.antecedent {
                Some(0) => self.named_object(&dialog.caption),
                Some(i) => self.named_object(&dialog.rounds[i - 1].question),
                None => self.named_object(&round.question),
            }
            .ok_or_else(|| Error::usage(format!("{} round {}: no object to resolve", dialog.image_id, t + 1)))?;
            let e_obj = &self.world.object_embeddings[object];
            let region = regions.row_slice(argmax((0..k).map(|j| dot(e_obj, regions.row_slice(j)))));
            let colour = argmax(self.world.attribute_embeddings.iter().map(|e| dot(e, region)));
            let word = &self.world.attributes[colour].0;
            let logits = round
                .candidates
                .iter()
                .map(|c| if c.len() == 1 && &c[0] == word { 10.0 } else { 0.0 })
                .collect();
            out.push(ScoreDistribution::from_logits(logits)?);
        }
        Ok(out)
    }
}
