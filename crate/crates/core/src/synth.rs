//! Synthetic embedding sets and the `SETF` feature-file format.
//!
//! The generator stands in for a face-embedding network. Each identity owns a
//! random unit centroid. An item is built from three declared factors:
//!
//! - pose: `normalize(centroid + pose_offset_scale * sin(yaw) * u_pose)` where
//!   `u_pose` is one random unit direction shared by the whole dataset;
//! - quality: isotropic Gaussian noise whose expected L2 norm is the item's
//!   `quality_sigma` (per-component standard deviation `sigma / sqrt(dim)`);
//! - redundancy: a near-duplicate reuses another item's pre-noise vector with
//!   twice the noise.
//!
//! Video segments share one noisy base vector and drift from frame to frame
//! by a random walk with a quarter of the segment's noise.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const SETF_MAGIC: &[u8; 4] = b"SETF";
pub const SETF_VERSION: u16 = 1;
/// magic + version + embed_dim + record count
pub const SETF_HEADER_BYTES: usize = 4 + 2 + 4 + 8;
/// Fixed part of a record, before the embedding entries.
pub const SETF_RECORD_FIXED_BYTES: usize = 8 + 4 + 1 + 1 + 4 + 4 + 4 + 4 + 8;

pub const MAX_SET_SIZE: usize = 190;
/// Profile boundary in degrees; `|yaw| <= 30` counts as frontal.
pub const FRONTAL_LIMIT_DEG: f64 = 30.0;
const MAX_SEGMENT_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Probe,
    Gallery,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Probe => 1,
            Split::Gallery => 2,
        }
    }

    fn from_code(code: u8, offset: u64) -> Result<Self> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Probe),
            2 => Ok(Split::Gallery),
            other => Err(Error::format(offset, format!("unknown split code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Media {
    Still,
    Video { segment_id: u32 },
}

/// Which yaw angles probe sets may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbePose {
    #[default]
    Any,
    FrontalOnly,
    ProfileOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_identities: u32,
    pub embed_dim: usize,
    pub sets_per_identity: u32,
    pub gallery_sets_per_identity: u32,
    pub probe_sets_per_identity: u32,
    pub set_size_range: [usize; 2],
    pub pose_offset_scale: f64,
    pub quality_noise_range: [f64; 2],
    pub redundancy_rate: f64,
    pub video_fraction: f64,
    pub probe_pose: ProbePose,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_identities: 50,
            embed_dim: 128,
            sets_per_identity: 6,
            gallery_sets_per_identity: 1,
            probe_sets_per_identity: 1,
            set_size_range: [3, 10],
            pose_offset_scale: 0.3,
            quality_noise_range: [0.05, 0.4],
            redundancy_rate: 0.3,
            video_fraction: 0.0,
            probe_pose: ProbePose::Any,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.set_size_range;
        if lo < 1 || hi > MAX_SET_SIZE || lo > hi {
            return Err(Error::Config(format!(
                "set_size_range [{lo}, {hi}] must satisfy 1 <= min <= max <= {MAX_SET_SIZE}"
            )));
        }
        if self.num_identities == 0 || self.embed_dim == 0 || self.sets_per_identity == 0 {
            return Err(Error::Config(
                "num_identities, embed_dim and sets_per_identity must be positive".into(),
            ));
        }
        if self.gallery_sets_per_identity + self.probe_sets_per_identity > self.sets_per_identity {
            return Err(Error::Config(
                "gallery + probe sets per identity exceed sets_per_identity".into(),
            ));
        }
        let [s_lo, s_hi] = self.quality_noise_range;
        if !(s_lo.is_finite() && s_hi.is_finite()) || s_lo < 0.0 || s_lo > s_hi {
            return Err(Error::Config(format!(
                "quality_noise_range [{s_lo}, {s_hi}] must be finite, nonnegative and ordered"
            )));
        }
        if !self.pose_offset_scale.is_finite() || self.pose_offset_scale < 0.0 {
            return Err(Error::Config("pose_offset_scale must be finite and >= 0".into()));
        }
        for (name, v) in [
            ("redundancy_rate", self.redundancy_rate),
            ("video_fraction", self.video_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub set_id: u64,
    pub identity: u32,
    pub split: Split,
    pub media: Media,
    pub frame_index: u32,
    pub yaw_degrees: f32,
    pub quality_sigma: f32,
    /// Index (within the same set) of the item this one duplicates.
    pub duplicate_of: Option<u32>,
    pub embedding: Vec<f32>,
}

impl FeatureRecord {
    pub fn embedding_f64(&self) -> Vec<f64> {
        self.embedding.iter().map(|&v| v as f64).collect()
    }

    pub fn is_frontal(&self) -> bool {
        (self.yaw_degrees as f64).abs() <= FRONTAL_LIMIT_DEG
    }

    pub fn encoded_len(embed_dim: usize) -> usize {
        SETF_RECORD_FIXED_BYTES + 4 * embed_dim
    }
}

/// One set, as a view into a collection.
#[derive(Debug, Clone)]
pub struct FeatureSet<'a> {
    pub set_id: u64,
    pub identity: u32,
    pub split: Split,
    pub items: Vec<&'a FeatureRecord>,
}

impl FeatureSet<'_> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.items.iter().map(|r| r.embedding_f64()).collect()
    }

    pub fn yaws(&self) -> Vec<f64> {
        self.items.iter().map(|r| r.yaw_degrees as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSetCollection {
    embed_dim: usize,
    records: Vec<FeatureRecord>,
}

impl FeatureSetCollection {
    /// Checks dimensions and that every set id has exactly one identity and split.
    pub fn new(embed_dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let mut owners: HashMap<u64, (u32, Split)> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.embedding.len() != embed_dim {
                return Err(Error::dim("record embedding", embed_dim, r.embedding.len()));
            }
            let entry = owners.entry(r.set_id).or_insert((r.identity, r.split));
            if *entry != (r.identity, r.split) {
                return Err(Error::invalid(format!(
                    "record {i}: set {} already belongs to identity {} ({:?})",
                    r.set_id, entry.0, entry.1
                )));
            }
        }
        Ok(Self {
            embed_dim,
            records,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sets in order of first appearance; items keep file order.
    pub fn sets(&self) -> Vec<FeatureSet<'_>> {
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut sets: Vec<FeatureSet<'_>> = Vec::new();
        for r in &self.records {
            let k = *index.entry(r.set_id).or_insert_with(|| {
                sets.push(FeatureSet {
                    set_id: r.set_id,
                    identity: r.identity,
                    split: r.split,
                    items: Vec::new(),
                });
                sets.len() - 1
            });
            sets[k].items.push(r);
        }
        sets
    }

    pub fn sets_in(&self, split: Split) -> Vec<FeatureSet<'_>> {
        self.sets().into_iter().filter(|s| s.split == split).collect()
    }

    /// Number of distinct identities, taken as `max identity + 1`.
    pub fn num_identities(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.identity as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(SETF_MAGIC);
        w.u16(SETF_VERSION);
        w.u32(self.embed_dim as u32);
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.u64(r.set_id);
            w.u32(r.identity);
            w.u8(r.split.code());
            let (media, segment) = match r.media {
                Media::Still => (0u8, 0u32),
                Media::Video { segment_id } => (1, segment_id),
            };
            w.u8(media);
            w.u32(segment);
            w.u32(r.frame_index);
            w.f32(r.yaw_degrees);
            w.f32(r.quality_sigma);
            w.i64(r.duplicate_of.map_or(-1, |d| d as i64));
            for &v in &r.embedding {
                w.f32(v);
            }
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != SETF_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"SETF\""));
        }
        let version = r.u16()?;
        if version != SETF_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let embed_dim = r.u32()? as usize;
        let count_at = r.offset();
        let count = r.u64()?;
        let per_record = FeatureRecord::encoded_len(embed_dim) as u128;
        if count as u128 * per_record > r.remaining() as u128 {
            return Err(Error::format(
                count_at,
                format!("{count} records do not fit in {} bytes", r.remaining()),
            ));
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let start = r.offset();
            let set_id = r.u64()?;
            let identity = r.u32()?;
            let split_at = r.offset();
            let split = Split::from_code(r.u8()?, split_at)?;
            let media_at = r.offset();
            let media_code = r.u8()?;
            let segment_id = r.u32()?;
            let media = match media_code {
                0 if segment_id == 0 => Media::Still,
                0 => return Err(Error::format(media_at, "still record with a segment id")),
                1 => Media::Video { segment_id },
                other => return Err(Error::format(media_at, format!("unknown media {other}"))),
            };
            let frame_index = r.u32()?;
            let yaw_degrees = r.f32()?;
            let quality_sigma = r.f32()?;
            let dup_at = r.offset();
            let dup = r.i64()?;
            let duplicate_of = match dup {
                -1 => None,
                d if (0..=u32::MAX as i64).contains(&d) => Some(d as u32),
                d => return Err(Error::format(dup_at, format!("bad duplicate_of {d}"))),
            };
            let embedding = (0..embed_dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            records.push(FeatureRecord {
                set_id,
                identity,
                split,
                media,
                frame_index,
                yaw_degrees,
                quality_sigma,
                duplicate_of,
                embedding,
            });
            debug_assert_eq!(r.offset() - start, per_record as u64);
        }
        r.expect_end()?;
        Self::new(embed_dim, records).map_err(|e| Error::format(SETF_HEADER_BYTES as u64, e.to_string()))
    }
}

pub fn write_features(collection: &FeatureSetCollection, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, collection.encode())?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSetCollection> {
    FeatureSetCollection::decode(&fs::read(path)?)
}

/// Generator internals that never reach the feature file.
#[derive(Debug, Clone)]
pub struct Latents {
    pub centroids: Vec<Vec<f64>>,
    pub pose_axis: Vec<f64>,
}

pub fn generate(config: &GenConfig) -> Result<FeatureSetCollection> {
    generate_with_latents(config).map(|(c, _)| c)
}

pub fn generate_with_latents(config: &GenConfig) -> Result<(FeatureSetCollection, Latents)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.embed_dim;
    let raw: Vec<Vec<f64>> = (0..config.num_identities)
        .map(|_| random_unit(&mut rng, dim))
        .collect();
    let pose_axis = random_unit(&mut rng, dim);
    // Identities carry no pose component, so reflecting along the pose axis
    // turns a left profile into the same identity's right profile.
    let centroids = if dim > 1 {
        raw.into_iter()
            .map(|mut c| {
                let along: f64 = c.iter().zip(&pose_axis).map(|(a, b)| a * b).sum();
                c.iter_mut().zip(&pose_axis).for_each(|(a, b)| *a -= along * b);
                normalize(&mut c);
                c
            })
            .collect()
    } else {
        raw
    };
    let latents = Latents {
        centroids,
        pose_axis,
    };

    let mut records = Vec::new();
    let mut set_id = 0u64;
    let mut next_segment = 0u32;
    for identity in 0..config.num_identities {
        for k in 0..config.sets_per_identity {
            let split = if k < config.gallery_sets_per_identity {
                Split::Gallery
            } else if k < config.gallery_sets_per_identity + config.probe_sets_per_identity {
                Split::Probe
            } else {
                Split::Train
            };
            let mut gen = SetBuilder {
                config,
                latents: &latents,
                identity,
                split,
                set_id,
                rng: &mut rng,
                next_segment: &mut next_segment,
            };
            records.extend(gen.build());
            set_id += 1;
        }
    }
    Ok((FeatureSetCollection::new(dim, records)?, latents))
}

struct SetBuilder<'a> {
    config: &'a GenConfig,
    latents: &'a Latents,
    identity: u32,
    split: Split,
    set_id: u64,
    rng: &'a mut ChaCha8Rng,
    next_segment: &'a mut u32,
}

impl SetBuilder<'_> {
    fn build(&mut self) -> Vec<FeatureRecord> {
        let [lo, hi] = self.config.set_size_range;
        let size = self.rng.gen_range(lo..=hi);
        let n_video = (self.config.video_fraction * size as f64).round() as usize;
        let n_still = size - n_video;

        let mut out = Vec::with_capacity(size);
        // (pre-noise vector, sigma, yaw) of every non-duplicate still, by item index
        let mut sources: Vec<(usize, Vec<f64>, f64, f64)> = Vec::new();
        for i in 0..n_still {
            let dup = !sources.is_empty() && self.rng.gen::<f64>() < self.config.redundancy_rate;
            let (pre, sigma, yaw, duplicate_of) = if dup {
                let (src_idx, pre, sigma, yaw) = sources.choose(self.rng).unwrap().clone();
                (pre, 2.0 * sigma, yaw, Some(src_idx as u32))
            } else {
                let yaw = self.sample_yaw();
                let sigma = self.sample_sigma();
                let pre = self.pre_noise(yaw);
                sources.push((i, pre.clone(), sigma, yaw));
                (pre, sigma, yaw, None)
            };
            let embedding = self.add_noise(&pre, sigma);
            out.push(self.record(Media::Still, 0, yaw, sigma, duplicate_of, embedding));
        }

        let mut remaining = n_video;
        while remaining > 0 {
            let len = remaining.min(MAX_SEGMENT_LEN);
            remaining -= len;
            let segment_id = *self.next_segment;
            *self.next_segment += 1;
            let yaw = self.sample_yaw();
            let sigma = self.sample_sigma();
            let pre = self.pre_noise(yaw);
            let mut current = self.add_noise(&pre, sigma);
            for frame in 0..len {
                if frame > 0 {
                    current = self.add_noise(&current, sigma / 4.0);
                }
                let jitter: f64 = self.rng.gen_range(-2.0..=2.0);
                let frame_yaw = (yaw + jitter).clamp(-90.0, 90.0);
                out.push(self.record(
                    Media::Video { segment_id },
                    frame as u32,
                    frame_yaw,
                    sigma,
                    None,
                    current.clone(),
                ));
            }
        }
        out
    }

    fn record(
        &self,
        media: Media,
        frame_index: u32,
        yaw: f64,
        sigma: f64,
        duplicate_of: Option<u32>,
        embedding: Vec<f64>,
    ) -> FeatureRecord {
        FeatureRecord {
            set_id: self.set_id,
            identity: self.identity,
            split: self.split,
            media,
            frame_index,
            yaw_degrees: yaw as f32,
            quality_sigma: sigma as f32,
            duplicate_of,
            embedding: embedding.into_iter().map(|v| v as f32).collect(),
        }
    }

    /// 60% uniform in [-30, 30], 40% uniform in +-(30, 90].
    fn sample_yaw(&mut self) -> f64 {
        let pose = if self.split == Split::Probe {
            self.config.probe_pose
        } else {
            ProbePose::Any
        };
        let frontal = match pose {
            ProbePose::Any => self.rng.gen::<f64>() < 0.6,
            ProbePose::FrontalOnly => true,
            ProbePose::ProfileOnly => false,
        };
        if frontal {
            self.rng.gen_range(-FRONTAL_LIMIT_DEG..=FRONTAL_LIMIT_DEG)
        } else {
            // (30, 90]: 90 - [0, 60)
            let mag = 90.0 - self.rng.gen_range(0.0..60.0);
            if self.rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        }
    }

    fn sample_sigma(&mut self) -> f64 {
        let [lo, hi] = self.config.quality_noise_range;
        if lo == hi {
            lo
        } else {
            self.rng.gen_range(lo..=hi)
        }
    }

    fn pre_noise(&self, yaw: f64) -> Vec<f64> {
        let c = &self.latents.centroids[self.identity as usize];
        let off = self.config.pose_offset_scale * yaw.to_radians().sin();
        let mut v: Vec<f64> = c
            .iter()
            .zip(&self.latents.pose_axis)
            .map(|(ci, ui)| ci + off * ui)
            .collect();
        normalize(&mut v);
        v
    }

    fn add_noise(&mut self, base: &[f64], sigma: f64) -> Vec<f64> {
        let per = sigma / (base.len() as f64).sqrt();
        base.iter()
            .map(|b| b + per * self.rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) > 1e-12 {
            return v;
        }
    }
}

/// Normalizes in place and returns the original norm.
pub fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Least-squares estimate of the dataset's pose direction from yaw metadata:
/// the normalized regression of identity-centered embeddings on `sin(yaw)`.
/// Returns `None` when the yaw metadata carries no signal.
pub fn estimate_pose_axis(collection: &FeatureSetCollection) -> Option<Vec<f64>> {
    let dim = collection.embed_dim();
    let mut sums: HashMap<u32, (Vec<f64>, f64, usize)> = HashMap::new();
    for r in collection.records() {
        let e = sums
            .entry(r.identity)
            .or_insert_with(|| (vec![0.0; dim], 0.0, 0));
        for (s, v) in e.0.iter_mut().zip(&r.embedding) {
            *s += *v as f64;
        }
        e.1 += (r.yaw_degrees as f64).to_radians().sin();
        e.2 += 1;
    }
    let mut axis = vec![0.0; dim];
    let mut energy = 0.0;
    for r in collection.records() {
        let (sum, sin_sum, n) = &sums[&r.identity];
        let n = *n as f64;
        let s = (r.yaw_degrees as f64).to_radians().sin() - sin_sum / n;
        for ((a, v), m) in axis.iter_mut().zip(&r.embedding).zip(sum) {
            *a += s * (*v as f64 - m / n);
        }
        energy += s * s;
    }
    if energy < 1e-12 {
        return None;
    }
    (normalize(&mut axis) > 1e-12).then_some(axis)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            num_identities: 4,
            embed_dim: 16,
            sets_per_identity: 3,
            seed: 7,
            ..GenConfig::default()
        }
    }

    #[test]
    fn same_seed_same_collection() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.encode(), b.encode());
        let c = generate(&GenConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_redundancy_means_no_duplicates() {
        let c = generate(&GenConfig {
            redundancy_rate: 0.0,
            ..small()
        })
        .unwrap();
        assert!(c.records().iter().all(|r| r.duplicate_of.is_none()));
    }

    #[test]
    fn duplicates_double_their_source_sigma() {
        let c = generate(&GenConfig {
            redundancy_rate: 0.5,
            ..small()
        })
        .unwrap();
        let mut seen = 0;
        for set in c.sets() {
            for item in &set.items {
                if let Some(src) = item.duplicate_of {
                    let src = set.items[src as usize];
                    assert!(src.duplicate_of.is_none());
                    assert_eq!(item.quality_sigma, (2.0 * src.quality_sigma as f64) as f32);
                    assert_eq!(item.yaw_degrees, src.yaw_degrees);
                    seen += 1;
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn bad_set_size_range_is_a_config_error() {
        for range in [[0, 3], [5, 191], [4, 2]] {
            let cfg = GenConfig {
                set_size_range: range,
                ..small()
            };
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn video_frames_are_consecutive() {
        let c = generate(&GenConfig {
            video_fraction: 0.5,
            set_size_range: [6, 20],
            ..small()
        })
        .unwrap();
        let mut by_segment: HashMap<u32, Vec<u32>> = HashMap::new();
        for r in c.records() {
            if let Media::Video { segment_id } = r.media {
                by_segment.entry(segment_id).or_default().push(r.frame_index);
            }
        }
        assert!(!by_segment.is_empty());
        for frames in by_segment.values() {
            let want: Vec<u32> = (0..frames.len() as u32).collect();
            assert_eq!(frames, &want);
        }
    }

    #[test]
    fn set_ids_own_one_identity_and_split() {
        let c = generate(&small()).unwrap();
        for set in c.sets() {
            assert!(set.items.iter().all(|r| r.identity == set.identity && r.split == set.split));
        }
        let splits: Vec<Split> = c.sets().iter().take(3).map(|s| s.split).collect();
        assert_eq!(splits, vec![Split::Gallery, Split::Probe, Split::Train]);
    }

    #[test]
    fn profile_only_probes() {
        let c = generate(&GenConfig {
            probe_pose: ProbePose::ProfileOnly,
            ..small()
        })
        .unwrap();
        for set in c.sets_in(Split::Probe) {
            assert!(set.items.iter().all(|r| !r.is_frontal()));
        }
    }

    #[test]
    fn pose_axis_estimate_aligns_with_latent() {
        let cfg = GenConfig {
            num_identities: 20,
            embed_dim: 32,
            pose_offset_scale: 0.4,
            ..GenConfig::default()
        };
        let (c, lat) = generate_with_latents(&cfg).unwrap();
        let est = estimate_pose_axis(&c).unwrap();
        let cos: f64 = est.iter().zip(&lat.pose_axis).map(|(a, b)| a * b).sum();
        assert!(cos > 0.9, "cosine {cos}");
    }
}
