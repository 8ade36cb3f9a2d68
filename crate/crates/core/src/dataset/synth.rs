//! Seeded synthetic dialogs with planted pronoun references.
//!
//! Every image holds `K` distinct objects, each with a colour. Region `j`
//! carries `(e_obj + e_colour) / √2` plus Gaussian noise, with the object and
//! colour embeddings fixed by the seed. Each object belongs to a pronoun
//! class (`it`, `he`, `she`, `they`). A round either names its object
//! (`what color is the cup`) or refers back with the class pronoun
//! (`what color is it`). The pronoun is only used when exactly one object of
//! that class has been named so far, and that mention is at most
//! `max_antecedent_distance` history elements back, so the referent is
//! unambiguous. The history index of the mention is stored as the round's
//! `antecedent`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, DialogInstance, DialogSet, FeaturePack, Round, MAX_ROUNDS};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PronounClass {
    It,
    He,
    She,
    They,
}

impl PronounClass {
    pub const ALL: [PronounClass; 4] = [PronounClass::It, PronounClass::He, PronounClass::She, PronounClass::They];

    fn index(self) -> usize {
        self as usize
    }

    fn explicit(self, object: &str) -> String {
        match self {
            PronounClass::It => format!("what color is the {object}"),
            PronounClass::He | PronounClass::She => format!("what color is the {object} wearing"),
            PronounClass::They => format!("what color are the {object}"),
        }
    }

    fn pronoun(self) -> &'static str {
        match self {
            PronounClass::It => "what color is it",
            PronounClass::He => "what color is he wearing",
            PronounClass::She => "what color is she wearing",
            PronounClass::They => "what color are they",
        }
    }
}

const OBJECTS: [&[&str]; 4] = [
    &["cup", "ball", "car", "chair", "kite", "clock", "bench", "bag", "umbrella", "bus"],
    &["man", "boy", "waiter", "king", "father", "prince"],
    &["woman", "girl", "waitress", "queen", "mother", "princess"],
    &["dogs", "birds", "horses", "cows", "sheep", "zebras"],
];

const COLOURS: [(&str, &str); 12] = [
    ("red", "crimson"),
    ("blue", "navy"),
    ("green", "emerald"),
    ("yellow", "golden"),
    ("white", "ivory"),
    ("black", "ebony"),
    ("orange", "amber"),
    ("pink", "rose"),
    ("purple", "violet"),
    ("brown", "tan"),
    ("gray", "silver"),
    ("beige", "cream"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_dialogs: usize,
    pub rounds_per_dialog: usize,
    pub candidates: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub feature_dim: usize,
    pub n_objects: usize,
    pub n_attributes: usize,
    pub si_fraction: f64,
    pub max_antecedent_distance: usize,
    /// Standard deviation of the per-region noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dialogs: 200,
            rounds_per_dialog: 6,
            candidates: 20,
            k_min: 6,
            k_max: 12,
            feature_dim: 64,
            n_objects: 16,
            n_attributes: 12,
            si_fraction: 0.5,
            max_antecedent_distance: 3,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if !(0.0..=1.0).contains(&self.si_fraction) {
            return fail(format!("si_fraction {} outside [0, 1]", self.si_fraction));
        }
        if self.rounds_per_dialog == 0 || self.rounds_per_dialog > MAX_ROUNDS {
            return fail(format!("rounds_per_dialog must be in 1..={MAX_ROUNDS}"));
        }
        if self.candidates < 2 {
            return fail("need at least 2 candidates".into());
        }
        if self.candidates > 2 * self.n_attributes {
            return fail(format!(
                "{} candidates exceed the {} attribute words available",
                self.candidates,
                2 * self.n_attributes
            ));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return fail(format!("need 1 <= k_min <= k_max, got {}..{}", self.k_min, self.k_max));
        }
        if self.n_objects < self.k_max {
            return fail(format!(
                "{} objects cannot fill images of up to {} distinct regions",
                self.n_objects, self.k_max
            ));
        }
        if self.feature_dim == 0 || self.n_attributes == 0 {
            return fail("feature_dim and n_attributes must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise {} must be a non-negative number", self.noise));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectKind {
    pub name: String,
    pub class: PronounClass,
}

/// The seed-fixed part shared by every split: words and embeddings.
#[derive(Clone, Debug)]
pub struct World {
    pub objects: Vec<ObjectKind>,
    /// `(canonical, synonym)` per attribute.
    pub attributes: Vec<(String, String)>,
    pub object_embeddings: Vec<Vec<f64>>,
    pub attribute_embeddings: Vec<Vec<f64>>,
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

impl World {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        // Interleave the classes so any prefix covers all of them.
        let mut objects = Vec::with_capacity(config.n_objects);
        let mut taken = [0usize; 4];
        for i in 0..config.n_objects {
            let class = PronounClass::ALL[i % 4];
            let list = OBJECTS[class.index()];
            let n = taken[class.index()];
            let name = match list.get(n) {
                Some(w) => (*w).to_string(),
                None => format!("{}{}", list[0], n),
            };
            taken[class.index()] += 1;
            objects.push(ObjectKind { name, class });
        }
        let attributes = (0..config.n_attributes)
            .map(|i| match COLOURS.get(i) {
                Some((a, b)) => (a.to_string(), b.to_string()),
                None => (format!("colour{i}"), format!("shade{i}")),
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let object_embeddings = gaussian_rows(&mut rng, config.n_objects, config.feature_dim);
        let attribute_embeddings = gaussian_rows(&mut rng, config.n_attributes, config.feature_dim);
        Ok(World {
            objects,
            attributes,
            object_embeddings,
            attribute_embeddings,
        })
    }

    pub fn object_by_name(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    /// Every word the generator can emit, in a fixed order.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<String> = "the picture shows what color is are wearing it he she they"
            .split(' ')
            .map(str::to_string)
            .collect();
        words.extend(self.objects.iter().map(|o| o.name.clone()));
        for (a, b) in &self.attributes {
            words.push(a.clone());
            words.push(b.clone());
        }
        Vocabulary::build(words.iter().map(String::as_str))
    }
}

/// 64-bit FNV-1a, to derive an independent stream per split name.
fn split_seed(seed: u64, split: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in split.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

fn words(s: &str) -> Vec<String> {
    s.split(' ').map(str::to_string).collect()
}

struct Scene {
    objects: Vec<usize>,
    colours: Vec<usize>,
}

fn sample_scene(world: &World, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let k = rng.random_range(config.k_min..=config.k_max);
    let mut ids: Vec<usize> = (0..world.objects.len()).collect();
    ids.shuffle(rng);
    ids.truncate(k);
    let colours = (0..k).map(|_| rng.random_range(0..config.n_attributes)).collect();
    Scene { objects: ids, colours }
}

fn scene_features(world: &World, config: &SynthConfig, scene: &Scene, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let v = config.feature_dim;
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut data = Vec::with_capacity(scene.objects.len() * v);
    for (&o, &c) in scene.objects.iter().zip(&scene.colours) {
        for d in 0..v {
            let n: f64 = rng.sample(StandardNormal);
            let x = (world.object_embeddings[o][d] + world.attribute_embeddings[c][d]) * scale + config.noise * n;
            data.push(x as f32);
        }
    }
    Tensor::new(vec![scene.objects.len(), v], data)
}

fn candidate_round(
    world: &World,
    config: &SynthConfig,
    colour: usize,
    question: String,
    antecedent: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Round {
    let (gt, syn) = &world.attributes[colour];
    let mut pool: Vec<&String> = world
        .attributes
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != colour)
        .flat_map(|(_, (a, b))| [a, b])
        .collect();
    pool.shuffle(rng);
    let mut cands: Vec<(&String, f64)> = vec![(gt, 1.0), (syn, 0.5)];
    cands.extend(pool.into_iter().take(config.candidates - 2).map(|w| (w, 0.0)));
    cands.shuffle(rng);
    let gt_index = cands.iter().position(|(_, r)| *r == 1.0).expect("gt present");
    Round {
        question: words(&question),
        candidates: cands.iter().map(|(w, _)| vec![(*w).clone()]).collect(),
        gt_index,
        relevance: Some(cands.iter().map(|(_, r)| *r).collect()),
        antecedent,
    }
}

fn sample_dialog(world: &World, config: &SynthConfig, image_id: String, scene: &Scene, rng: &mut ChaCha8Rng) -> DialogInstance {
    let k = scene.objects.len();
    let class_of = |slot: usize| world.objects[scene.objects[slot]].class;
    // Explicit mentions so far, per class; and what each history element names.
    let mut class_mentions = [0usize; 4];
    let mut named: Vec<Option<usize>> = Vec::new();

    let first = rng.random_range(0..k);
    class_mentions[class_of(first).index()] += 1;
    named.push(Some(first));
    let caption = words(&format!("the picture shows the {}", world.objects[scene.objects[first]].name));

    let mut rounds = Vec::with_capacity(config.rounds_per_dialog);
    for t in 1..=config.rounds_per_dialog {
        let want_si = rng.random::<f64>() < config.si_fraction;
        let referable: Vec<usize> = (0..t)
            .filter(|&i| t - i <= config.max_antecedent_distance)
            .filter(|&i| named[i].is_some_and(|s| class_mentions[class_of(s).index()] == 1))
            .collect();
        if want_si && !referable.is_empty() {
            let i = referable[rng.random_range(0..referable.len())];
            let slot = named[i].expect("filtered on named");
            let q = class_of(slot).pronoun().to_string();
            rounds.push(candidate_round(world, config, scene.colours[slot], q, Some(i), rng));
            named.push(None);
            continue;
        }
        // Prefer objects whose class is still unnamed so pronouns stay usable.
        let fresh: Vec<usize> = (0..k).filter(|&s| class_mentions[class_of(s).index()] == 0).collect();
        let slot = if fresh.is_empty() {
            rng.random_range(0..k)
        } else {
            fresh[rng.random_range(0..fresh.len())]
        };
        let class = class_of(slot);
        class_mentions[class.index()] += 1;
        named.push(Some(slot));
        let q = class.explicit(&world.objects[scene.objects[slot]].name);
        rounds.push(candidate_round(world, config, scene.colours[slot], q, None, rng));
    }
    DialogInstance {
        image_id,
        caption,
        rounds,
    }
}

/// Generates one split. The world depends on `config.seed` only, so splits
/// generated from the same seed share words and embeddings.
pub fn generate(config: &SynthConfig, split: &str, n_dialogs: usize) -> Result<Dataset> {
    let world = World::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, split));
    let mut features = FeaturePack::new(config.feature_dim, config.k_min, config.k_max);
    let mut dialogs = Vec::with_capacity(n_dialogs);
    for n in 0..n_dialogs {
        let image_id = format!("{split}-{n:05}");
        let scene = sample_scene(&world, config, &mut rng);
        features.push(image_id.clone(), scene_features(&world, config, &scene, &mut rng)?)?;
        dialogs.push(sample_dialog(&world, config, image_id, &scene, &mut rng));
    }
    let vocabulary = world.vocabulary();
    Dataset::new(DialogSet { vocabulary, dialogs }, features)
}
