//! WebAssembly bindings behind `www/index.html`: a trust-region projection
//! playground, a learned-pooling demo on 2-d toy sets, and temporal attention
//! over a short frame sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

use setpool::agent::{assign_weights, ActionMode};
use setpool::env::{mean, train_reward_head, EpisodeState, RewardHead};
use setpool::experiment::{prepare, ExperimentConfig, Model, PreparedSet};
use setpool::nn::Adam;
use setpool::offpolicy::trust_region_project;
use setpool::synth::{FeatureRecord, FeatureSetCollection, Media, Split};
use setpool::temporal::{train_temporal_adam, TempConvNet};

const DIM: usize = 2;

fn js(e: setpool::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A fresh seed from the browser's entropy source.
#[wasm_bindgen]
pub fn random_seed() -> u32 {
    let mut b = [0u8; 4];
    getrandom::getrandom(&mut b).expect("entropy source");
    u32::from_le_bytes(b)
}

/// Projects `g` onto the half-space `k . z <= xi`.
#[wasm_bindgen]
pub fn project(g: &[f64], k: &[f64], xi: f64) -> Result<Vec<f64>, JsError> {
    trust_region_project(g, k, xi).map_err(js)
}

fn centroid(identity: u32, identities: u32) -> [f64; 2] {
    let t = std::f64::consts::TAU * identity as f64 / identities as f64;
    [t.cos(), t.sin()]
}

fn noisy(rng: &mut ChaCha8Rng, c: &[f64], sigma: f64) -> Vec<f64> {
    c.iter().map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Identities on the unit circle; items carry Gaussian noise of varying
/// scale, and some are noisier copies of an earlier item in the set.
fn toy_collection(seed: u64) -> setpool::Result<FeatureSetCollection> {
    const IDENTITIES: u32 = 6;
    const SETS: u32 = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut set_id = 0u64;
    for identity in 0..IDENTITIES {
        let c = centroid(identity, IDENTITIES);
        for s in 0..SETS {
            let split = match s {
                0 => Split::Gallery,
                1..=3 => Split::Probe,
                _ => Split::Train,
            };
            let size = rng.gen_range(3..=8);
            let mut sources: Vec<(u32, Vec<f64>, f64)> = Vec::new();
            for i in 0..size {
                let (emb, sigma, dup) = if !sources.is_empty() && rng.gen_bool(0.35) {
                    let (src, first, sigma) = sources[rng.gen_range(0..sources.len())].clone();
                    (noisy(&mut rng, &first, 0.5 * sigma), 1.5 * sigma, Some(src))
                } else {
                    let sigma = rng.gen_range(0.05..0.9);
                    let e = noisy(&mut rng, &c, sigma);
                    sources.push((i, e.clone(), sigma));
                    (e, sigma, None)
                };
                records.push(FeatureRecord {
                    set_id,
                    identity,
                    split,
                    media: Media::Still,
                    frame_index: 0,
                    yaw_degrees: 0.0,
                    quality_sigma: sigma as f32,
                    duplicate_of: dup,
                    embedding: emb.into_iter().map(|v| v as f32).collect(),
                });
            }
            set_id += 1;
        }
    }
    FeatureSetCollection::new(DIM, records)
}

/// Trains the aggregation agent on toy sets and exposes its weights on the
/// probe sets.
#[wasm_bindgen]
pub struct PoolingDemo {
    model: Model,
    sets: Vec<PreparedSet>,
    probes: Vec<usize>,
}

#[wasm_bindgen]
impl PoolingDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<PoolingDemo, JsError> {
        let coll = toy_collection(seed as u64).map_err(js)?;
        let mut config = ExperimentConfig {
            seed: seed as u64,
            ..Default::default()
        };
        config.agent.lambda = 0.05;
        config.agent.lr_policy = Some(5e-4);
        config.agent.lr_value = Some(5e-4);
        config.head.lr = 0.0;
        config.head.warmup_steps = 1000;
        let model = Model::init(config, &coll).map_err(js)?;
        let sets = prepare(&coll);
        let probes = (0..sets.len()).filter(|&i| sets[i].split == Split::Probe).collect();
        Ok(Self { model, sets, probes })
    }

    /// Runs more episodes; returns their mean reward.
    pub fn train(&mut self, episodes: u32) -> Result<f64, JsError> {
        let until = self.model.progress.episodes + episodes as u64;
        let mut total = 0.0;
        self.model
            .train_rl(&self.sets, until, |m| {
                total += m.reward;
                Ok(())
            })
            .map_err(js)?;
        Ok(total / episodes.max(1) as f64)
    }

    pub fn episodes(&self) -> f64 {
        self.model.progress.episodes as f64
    }

    pub fn num_probes(&self) -> usize {
        self.probes.len()
    }

    /// Interleaved x, y of every item in probe set `i`.
    pub fn points(&self, i: usize) -> Vec<f64> {
        self.sets[self.probes[i]].features.concat()
    }

    /// Index of each item's source within the set, or -1.
    pub fn duplicate_of(&self, i: usize) -> Vec<i32> {
        let s = &self.sets[self.probes[i]];
        s.duplicate_of.iter().map(|d| d.map_or(-1, |v| v as i32)).collect()
    }

    pub fn identity_centroid(&self, i: usize) -> Vec<f64> {
        centroid(self.sets[self.probes[i]].identity, 6).to_vec()
    }

    /// The agent's per-item actions in [0, 1] on probe set `i`, rounded to
    /// {0, 1} when `binary` is set. The aggregate divides by their sum.
    pub fn weights(&self, i: usize, binary: bool) -> Result<Vec<f64>, JsError> {
        let features = self.sets[self.probes[i]].features.clone();
        let mode = if binary { ActionMode::Binary } else { ActionMode::Mode };
        let state = EpisodeState::in_order(features).map_err(js)?;
        // deterministic action modes never draw from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, _) = assign_weights(&self.model.agent, state, mode, None, &mut rng).map_err(js)?;
        Ok(w)
    }
}

/// Temporal attention over 8-frame segments in which one frame is corrupted.
#[wasm_bindgen]
pub struct TemporalDemo {
    net: TempConvNet,
    opt: Adam,
    head: RewardHead,
    rng: ChaCha8Rng,
    frames: Vec<Vec<f64>>,
    identity: u32,
}

const SEGMENT: usize = 8;
const T_IDENTITIES: u32 = 4;

#[wasm_bindgen]
impl TemporalDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<TemporalDemo, JsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let mut head = RewardHead::new(DIM, T_IDENTITIES as usize, 0.0, &mut rng).map_err(js)?;
        for _ in 0..300 {
            let batch: Vec<(Vec<f64>, usize)> = (0..16)
                .map(|_| {
                    let id = rng.gen_range(0..T_IDENTITIES);
                    (noisy(&mut rng, &centroid(id, T_IDENTITIES), 0.1), id as usize)
                })
                .collect();
            head = train_reward_head(&head, &batch, 0.1).map_err(js)?;
        }
        let net = TempConvNet::new(DIM, &mut rng).map_err(js)?;
        let opt = Adam::new(net.num_params());
        let mut demo = Self {
            net,
            opt,
            head,
            rng,
            frames: Vec::new(),
            identity: 0,
        };
        demo.resample();
        Ok(demo)
    }

    fn segment(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, u32) {
        let id = rng.gen_range(0..T_IDENTITIES);
        let c = centroid(id, T_IDENTITIES);
        let bad = rng.gen_range(0..SEGMENT);
        let mut frames = Vec::with_capacity(SEGMENT);
        let mut cur = noisy(rng, &c, 0.1);
        for t in 0..SEGMENT {
            if t > 0 {
                cur = noisy(rng, &cur, 0.03);
            }
            frames.push(if t == bad { noisy(rng, &cur, 1.5) } else { cur.clone() });
        }
        (frames, id)
    }

    /// Draws a new segment to display.
    pub fn resample(&mut self) {
        let (frames, id) = Self::segment(&mut self.rng);
        self.frames = frames;
        self.identity = id;
    }

    /// Adam steps on fresh random segments; returns the last batch loss.
    pub fn train(&mut self, steps: u32) -> Result<f64, JsError> {
        let mut loss = f64::NAN;
        for _ in 0..steps {
            let batch: Vec<_> = (0..8)
                .map(|_| {
                    let (f, id) = Self::segment(&mut self.rng);
                    (f, id as usize)
                })
                .collect();
            loss = train_temporal_adam(&mut self.net, &mut self.opt, &self.head, &batch, 1e-2)
                .map_err(js)?;
        }
        Ok(loss)
    }

    pub fn frames(&self) -> Vec<f64> {
        self.frames.concat()
    }

    pub fn attention(&self) -> Result<Vec<f64>, JsError> {
        self.net.attention(&self.frames).map_err(js)
    }

    /// Head loss of the attention-pooled segment and of its plain mean.
    pub fn losses(&self) -> Result<Vec<f64>, JsError> {
        let w = self.attention()?;
        let pooled = setpool::temporal::weighted_sum(&self.frames, &w);
        let label = self.identity as usize;
        Ok(vec![
            self.head.loss(&pooled, label).map_err(js)?,
            self.head.loss(&mean(&self.frames), label).map_err(js)?,
        ])
    }
}
