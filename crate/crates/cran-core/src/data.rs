//! Dataset storage, the synthetic planted-correlation generator, and
//! batching.
//!
//! The on-disk format is JSON Lines: a header object (dims, counts, splits)
//! followed by one object per pair. Records are ordered train, then val,
//! then test. Feature vectors live inline as JSON arrays by default; an
//! optional flat binary sidecar (little-endian f32) holds them instead for
//! larger files, with byte offsets stored per record.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::ImageInstance;
use crate::error::{Error, Result};

/// One matched image/text pair. `gt_links` lists the ids of all records in
/// the same ground-truth group (always including the record's own id).
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: u64,
    pub image: ImageInstance,
    pub caption: String,
    pub gt_links: Vec<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn all_train(n: usize) -> SplitCounts {
        SplitCounts { train: n, val: 0, test: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?}, expected train|val|test"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub feature_dim: usize,
    pub num_regions: usize,
    pub seed: u64,
    pub noise_sigma: Option<f64>,
}

/// Immutable in-memory dataset: pairs in split order plus derived
/// ground-truth groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub pairs: Vec<Pair>,
    pub splits: SplitCounts,
    /// Ground-truth group id per record (connected component of gt_links).
    pub groups: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        let t = self.splits.train;
        let v = self.splits.val;
        match split {
            Split::Train => 0..t,
            Split::Val => t..t + v,
            Split::Test => t + v..t + v + self.splits.test,
        }
    }

    /// Map record ids to positions; built on demand.
    fn id_index(&self) -> HashMap<u64, usize> {
        self.pairs.iter().enumerate().map(|(i, p)| (p.id, i)).collect()
    }

    /// Ground-truth positions of a record's links restricted to a range.
    pub fn links_within(&self, record: usize, range: &Range<usize>) -> Vec<usize> {
        let idx = self.id_index();
        self.pairs[record]
            .gt_links
            .iter()
            .filter_map(|id| idx.get(id).copied())
            .filter(|i| range.contains(i))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Data("dataset has no pairs".into()));
        }
        if self.splits.total() != self.pairs.len() {
            return Err(Error::Data(format!(
                "splits sum to {} but dataset has {} pairs",
                self.splits.total(),
                self.pairs.len()
            )));
        }
        let dim = self.meta.feature_dim;
        let mut ids = BTreeSet::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if !ids.insert(p.id) {
                return Err(Error::Data(format!("record {i}: duplicate id {}", p.id)));
            }
            if p.image.global_feat.len() != dim {
                return Err(Error::Data(format!(
                    "record {i}: global feature has {} dims, expected {dim}",
                    p.image.global_feat.len()
                )));
            }
            if p.image.regions.is_empty() {
                return Err(Error::Data(format!("record {i}: no regions")));
            }
            for (r, reg) in p.image.regions.iter().enumerate() {
                if reg.len() != dim {
                    return Err(Error::Data(format!(
                        "record {i}: region {r} has {} dims, expected {dim}",
                        reg.len()
                    )));
                }
            }
            let finite = p.image.global_feat.iter().chain(p.image.regions.iter().flatten());
            if finite.clone().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("record {i}: non-finite feature value")));
            }
            if p.gt_links.is_empty() {
                return Err(Error::Data(format!("record {i}: empty gt_links")));
            }
        }
        let idx = self.id_index();
        for (i, p) in self.pairs.iter().enumerate() {
            if !p.gt_links.contains(&p.id) {
                return Err(Error::Data(format!(
                    "record {i}: gt_links must include the record's own id"
                )));
            }
            for link in &p.gt_links {
                let j = *idx.get(link).ok_or_else(|| {
                    Error::Data(format!("record {i}: dangling gt_link {link}"))
                })?;
                if !self.pairs[j].gt_links.contains(&p.id) {
                    return Err(Error::Data(format!(
                        "record {i}: asymmetric gt_link to {link}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn compute_groups(pairs: &[Pair]) -> Vec<usize> {
        let idx: HashMap<u64, usize> =
            pairs.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        let mut parent: Vec<usize> = (0..pairs.len()).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (i, p) in pairs.iter().enumerate() {
            for link in &p.gt_links {
                if let Some(&j) = idx.get(link) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a] = b;
                    }
                }
            }
        }
        let mut label = BTreeMap::new();
        (0..pairs.len())
            .map(|i| {
                let root = find(&mut parent, i);
                let next = label.len();
                *label.entry(root).or_insert(next)
            })
            .collect()
    }

    fn finalize(meta: DatasetMeta, pairs: Vec<Pair>, splits: SplitCounts) -> Result<Dataset> {
        let groups = Self::compute_groups(&pairs);
        let ds = Dataset { meta, pairs, splits, groups };
        ds.validate()?;
        Ok(ds)
    }

    /// Seeded per-epoch batches over a split: shuffled indices chunked to
    /// `batch_size`, the final short batch kept only if it has at least two
    /// elements. Every batch is guaranteed at least two distinct
    /// ground-truth groups (the epoch is reshuffled otherwise).
    pub fn epoch_batches(
        &self,
        split: Split,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<Vec<Vec<usize>>> {
        if batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be at least 2, got {batch_size}"
            )));
        }
        let range = self.split_range(split);
        if range.is_empty() {
            return Err(Error::Data(format!("split {split} is empty")));
        }
        let indices: Vec<usize> = range.collect();
        for attempt in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch.wrapping_mul(101).wrapping_add(attempt));
            let mut shuffled = indices.clone();
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            let mut batches: Vec<Vec<usize>> =
                shuffled.chunks(batch_size).map(|c| c.to_vec()).collect();
            if let Some(last) = batches.last() {
                if last.len() < 2 {
                    batches.pop();
                }
            }
            let ok = batches.iter().all(|b| {
                let mut groups: Vec<usize> = b.iter().map(|&i| self.groups[i]).collect();
                groups.sort_unstable();
                groups.dedup();
                groups.len() >= 2
            });
            if ok && !batches.is_empty() {
                return Ok(batches);
            }
        }
        Err(Error::Data(format!(
            "could not form batches with two ground-truth groups for split {split}"
        )))
    }
}

/// Parameters of the synthetic planted-correlation generator.
///
/// Each pair is built from a latent tuple of `num_regions` distinct concept
/// words: region features are unit-norm concept prototypes plus gaussian
/// noise, the global feature is the mean of the regions plus noise, and the
/// caption deterministically names the concepts with one relation word
/// between the first two ("a cube above a ball and a cone ..."). Concept
/// sets are unique across pairs, so matched pairs are separable by
/// construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_pairs: usize,
    pub feature_dim: usize,
    pub num_regions: usize,
    pub objects: Vec<String>,
    pub relations: Vec<String>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_pairs: 100,
            feature_dim: 32,
            num_regions: 5,
            objects: [
                "cube", "ball", "cone", "ring", "star", "disk", "tree", "fish", "bird", "lamp",
                "drum", "leaf", "gem", "box", "key", "cup",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            relations: ["left of", "above", "below", "near", "behind", "beside"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 {
            return Err(Error::InvalidArgument("num_pairs must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        if self.num_regions < 2 {
            return Err(Error::InvalidArgument("num_regions must be at least 2".into()));
        }
        if self.objects.len() < self.num_regions {
            return Err(Error::InvalidArgument(format!(
                "need at least {} object words, got {}",
                self.num_regions,
                self.objects.len()
            )));
        }
        if self.relations.is_empty() {
            return Err(Error::InvalidArgument("relation vocabulary is empty".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// Unit-norm prototype vector per object word, seeded independently of
    /// the per-pair noise stream.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        self.objects
            .iter()
            .map(|_| {
                let v: Vec<f64> = (0..self.feature_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    pub fn caption(&self, concept_indices: &[usize], relation_index: usize) -> String {
        let w: Vec<&str> = concept_indices.iter().map(|&i| self.objects[i].as_str()).collect();
        let mut caption = format!("a {} {} a {}", w[0], self.relations[relation_index], w[1]);
        for obj in &w[2..] {
            caption.push_str(&format!(" and a {obj}"));
        }
        caption
    }
}

/// Generate a planted-correlation dataset. Records come out in split order
/// (train, val, test); `splits` must sum to `spec.num_pairs`.
pub fn generate_synthetic(spec: &SyntheticSpec, splits: SplitCounts) -> Result<Dataset> {
    spec.validate()?;
    if splits.total() != spec.num_pairs {
        return Err(Error::InvalidArgument(format!(
            "splits sum to {} but num_pairs is {}",
            splits.total(),
            spec.num_pairs
        )));
    }
    let prototypes = spec.prototypes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used_sets: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut pairs = Vec::with_capacity(spec.num_pairs);
    for id in 0..spec.num_pairs as u64 {
        // distinct concepts per pair; concept sets unique across the dataset
        let concepts = {
            let mut found = None;
            for _ in 0..1000 {
                let pick: Vec<usize> =
                    sample(&mut rng, spec.objects.len(), spec.num_regions).into_vec();
                let mut key = pick.clone();
                key.sort_unstable();
                if used_sets.insert(key) {
                    found = Some(pick);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::InvalidArgument(
                    "object vocabulary too small for unique concept sets; add words or reduce num_pairs"
                        .into(),
                )
            })?
        };
        let relation = rng.gen_range(0..spec.relations.len());
        let mut noise = |rng: &mut ChaCha8Rng| -> f64 {
            spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
        };
        let regions: Vec<Vec<f64>> = concepts
            .iter()
            .map(|&c| prototypes[c].iter().map(|&v| v + noise(&mut rng)).collect())
            .collect();
        let global_feat: Vec<f64> = (0..spec.feature_dim)
            .map(|d| {
                let mean: f64 =
                    regions.iter().map(|r| r[d]).sum::<f64>() / regions.len() as f64;
                mean + noise(&mut rng)
            })
            .collect();
        pairs.push(Pair {
            id,
            image: ImageInstance { global_feat, regions },
            caption: spec.caption(&concepts, relation),
            gt_links: vec![id],
        });
    }
    Dataset::finalize(
        DatasetMeta {
            feature_dim: spec.feature_dim,
            num_regions: spec.num_regions,
            seed: spec.seed,
            noise_sigma: Some(spec.noise_sigma),
        },
        pairs,
        splits,
    )
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    feature_dim: usize,
    num_regions: usize,
    num_pairs: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    noise_sigma: Option<f64>,
    splits: SplitCounts,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    sidecar: Option<SidecarRef>,
}

#[derive(Serialize, Deserialize)]
struct SidecarRef {
    /// File name relative to the dataset file.
    path: String,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    global: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    regions: Option<Vec<Vec<f64>>>,
    caption: String,
    gt_links: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    offset: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    num_regions: Option<usize>,
}

/// Write the dataset as JSON Lines with features inline.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset(dataset, path, false)
}

/// Write the dataset with features in a little-endian f32 sidecar next to
/// the JSONL file. Features are quantized to f32 at write time, so a saved
/// file round-trips losslessly afterwards.
pub fn save_dataset_with_sidecar(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset(dataset, path, true)
}

fn write_dataset(dataset: &Dataset, path: &Path, sidecar: bool) -> Result<()> {
    let sidecar_name = sidecar.then(|| {
        let stem = path.file_name().map(|f| f.to_string_lossy().to_string()).unwrap_or_default();
        format!("{stem}.bin")
    });
    let header = Header {
        version: 1,
        feature_dim: dataset.meta.feature_dim,
        num_regions: dataset.meta.num_regions,
        num_pairs: dataset.pairs.len(),
        seed: dataset.meta.seed,
        noise_sigma: dataset.meta.noise_sigma,
        splits: dataset.splits,
        sidecar: sidecar_name.clone().map(|path| SidecarRef { path }),
    };
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut bin: Vec<u8> = Vec::new();
    for p in &dataset.pairs {
        let record = if sidecar {
            let offset = bin.len() as u64;
            for v in p.image.global_feat.iter().chain(p.image.regions.iter().flatten()) {
                bin.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            RecordJson {
                id: p.id,
                global: None,
                regions: None,
                caption: p.caption.clone(),
                gt_links: p.gt_links.clone(),
                offset: Some(offset),
                num_regions: Some(p.image.regions.len()),
            }
        } else {
            RecordJson {
                id: p.id,
                global: Some(p.image.global_feat.clone()),
                regions: Some(p.image.regions.clone()),
                caption: p.caption.clone(),
                gt_links: p.gt_links.clone(),
                offset: None,
                num_regions: None,
            }
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    if let Some(name) = sidecar_name {
        let bin_path = path.with_file_name(name);
        std::fs::write(bin_path, bin)?;
    }
    Ok(())
}

/// Load and validate a dataset; errors name the offending record.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Data("dataset file is empty".into()))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::Data(format!("bad header: {e}")))?;
    if header.version != 1 {
        return Err(Error::Data(format!("unsupported version {}", header.version)));
    }
    let bin: Option<Vec<u8>> = match &header.sidecar {
        Some(s) => {
            let bin_path = path.with_file_name(&s.path);
            let mut buf = Vec::new();
            std::fs::File::open(&bin_path)
                .map_err(|e| Error::Data(format!("sidecar {}: {e}", bin_path.display())))?
                .read_to_end(&mut buf)?;
            Some(buf)
        }
        None => None,
    };
    let mut pairs = Vec::with_capacity(header.num_pairs);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordJson = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("record {i}: {e}")))?;
        let image = match (&bin, rec.global, rec.regions) {
            (None, Some(global_feat), Some(regions)) => ImageInstance { global_feat, regions },
            (Some(bin), _, _) => {
                let n = rec.num_regions.ok_or_else(|| {
                    Error::Data(format!("record {i}: sidecar record missing num_regions"))
                })?;
                let offset = rec.offset.ok_or_else(|| {
                    Error::Data(format!("record {i}: sidecar record missing offset"))
                })? as usize;
                let dim = header.feature_dim;
                let need = (1 + n) * dim * 4;
                let block = bin.get(offset..offset + need).ok_or_else(|| {
                    Error::Data(format!("record {i}: sidecar offset out of range"))
                })?;
                let mut floats = block
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
                let global_feat: Vec<f64> = floats.by_ref().take(dim).collect();
                let regions: Vec<Vec<f64>> =
                    (0..n).map(|_| floats.by_ref().take(dim).collect()).collect();
                ImageInstance { global_feat, regions }
            }
            _ => {
                return Err(Error::Data(format!(
                    "record {i}: missing global/regions features"
                )))
            }
        };
        pairs.push(Pair { id: rec.id, image, caption: rec.caption, gt_links: rec.gt_links });
    }
    if pairs.len() != header.num_pairs {
        return Err(Error::Data(format!(
            "header says {} pairs, file has {}",
            header.num_pairs,
            pairs.len()
        )));
    }
    Dataset::finalize(
        DatasetMeta {
            feature_dim: header.feature_dim,
            num_regions: header.num_regions,
            seed: header.seed,
            noise_sigma: header.noise_sigma,
        },
        pairs,
        header.splits,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_pairs: 12,
            feature_dim: 8,
            num_regions: 3,
            noise_sigma: noise,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn identical_seeds_identical_datasets() {
        let spec = small_spec(0.0, 5);
        let a = generate_synthetic(&spec, SplitCounts::all_train(12)).unwrap();
        let b = generate_synthetic(&spec, SplitCounts::all_train(12)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_synthetic(&small_spec(0.1, 1), SplitCounts::all_train(12)).unwrap();
        let b = generate_synthetic(&small_spec(0.1, 2), SplitCounts::all_train(12)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn disjoint_concepts_mean_disjoint_content_words() {
        let spec = small_spec(0.0, 7);
        let ds = generate_synthetic(&spec, SplitCounts::all_train(12)).unwrap();
        let content_words = |caption: &str| -> BTreeSet<String> {
            caption
                .split_whitespace()
                .filter(|w| spec.objects.iter().any(|o| o == w))
                .map(|w| w.to_string())
                .collect()
        };
        // decode concepts from features, compare word overlap with concept
        // overlap for every pair of records
        let protos = spec.prototypes();
        let decode = |img: &ImageInstance| -> BTreeSet<usize> {
            img.regions
                .iter()
                .map(|r| {
                    (0..protos.len())
                        .max_by(|&a, &b| {
                            let da: f64 = r.iter().zip(&protos[a]).map(|(x, y)| x * y).sum();
                            let db: f64 = r.iter().zip(&protos[b]).map(|(x, y)| x * y).sum();
                            da.total_cmp(&db)
                        })
                        .unwrap()
                })
                .collect()
        };
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                let ci = decode(&ds.pairs[i].image);
                let cj = decode(&ds.pairs[j].image);
                let wi = content_words(&ds.pairs[i].caption);
                let wj = content_words(&ds.pairs[j].caption);
                if ci.is_disjoint(&cj) {
                    assert!(wi.is_disjoint(&wj), "captions share words but concepts disjoint");
                }
            }
        }
    }

    #[test]
    fn zero_noise_nearest_prototype_decoding_is_exact() {
        // brute-force prototype matching recovers every planted concept
        let spec = small_spec(0.0, 3);
        let ds = generate_synthetic(&spec, SplitCounts::all_train(12)).unwrap();
        let protos = spec.prototypes();
        for p in &ds.pairs {
            let caption_words: Vec<&str> = p.caption.split_whitespace().collect();
            for (k, region) in p.image.regions.iter().enumerate() {
                let best = (0..protos.len())
                    .max_by(|&a, &b| {
                        let da: f64 = region.iter().zip(&protos[a]).map(|(x, y)| x * y).sum();
                        let db: f64 = region.iter().zip(&protos[b]).map(|(x, y)| x * y).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                // region k's word appears in the caption
                assert!(
                    caption_words.contains(&spec.objects[best].as_str()),
                    "region {k} decoded to {} which is not in {:?}",
                    spec.objects[best],
                    p.caption
                );
            }
        }
    }

    #[test]
    fn zero_noise_admits_perfect_retrieval() {
        // planted-decoder oracle: score = overlap between decoded image
        // concepts and caption content words; the matched pair must win
        // strictly for every query
        let spec = SyntheticSpec { num_pairs: 30, ..small_spec(0.0, 11) };
        let ds = generate_synthetic(&spec, SplitCounts::all_train(30)).unwrap();
        let protos = spec.prototypes();
        let decode = |img: &ImageInstance| -> BTreeSet<String> {
            img.regions
                .iter()
                .map(|r| {
                    let best = (0..protos.len())
                        .max_by(|&a, &b| {
                            let da: f64 = r.iter().zip(&protos[a]).map(|(x, y)| x * y).sum();
                            let db: f64 = r.iter().zip(&protos[b]).map(|(x, y)| x * y).sum();
                            da.total_cmp(&db)
                        })
                        .unwrap();
                    spec.objects[best].clone()
                })
                .collect()
        };
        let words = |caption: &str| -> BTreeSet<String> {
            caption
                .split_whitespace()
                .filter(|w| spec.objects.iter().any(|o| o == w))
                .map(|s| s.to_string())
                .collect()
        };
        for i in 0..ds.len() {
            let concepts = decode(&ds.pairs[i].image);
            let own: usize = concepts.intersection(&words(&ds.pairs[i].caption)).count();
            for j in 0..ds.len() {
                if i == j {
                    continue;
                }
                let other = concepts.intersection(&words(&ds.pairs[j].caption)).count();
                assert!(own > other, "pair {i} not separable from {j}");
            }
        }
    }

    #[test]
    fn captions_fit_desk_sequence_length() {
        let spec = SyntheticSpec { num_pairs: 200, feature_dim: 4, ..Default::default() };
        let ds = generate_synthetic(&spec, SplitCounts::all_train(200)).unwrap();
        for p in &ds.pairs {
            assert!(p.caption.len() <= 60, "caption too long: {:?}", p.caption);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = small_spec(0.1, 0);
        spec.num_regions = 1;
        assert!(spec.validate().is_err());
        let mut spec = small_spec(0.1, 0);
        spec.noise_sigma = -0.5;
        assert!(spec.validate().is_err());
        let mut spec = small_spec(0.1, 0);
        spec.num_regions = spec.objects.len() + 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn round_trip_reproduces_generator_output_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let spec = small_spec(0.25, 13);
        let ds = generate_synthetic(
            &spec,
            SplitCounts { train: 8, val: 2, test: 2 },
        )
        .unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn sidecar_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let ds =
            generate_synthetic(&small_spec(0.2, 17), SplitCounts::all_train(12)).unwrap();
        save_dataset_with_sidecar(&ds, &path).unwrap();
        assert!(dir.path().join("ds.jsonl.bin").exists());
        let loaded = load_dataset(&path).unwrap();
        // first save quantized to f32; a second save/load changes nothing
        let path2 = dir.path().join("ds2.jsonl");
        save_dataset_with_sidecar(&loaded, &path2).unwrap();
        let loaded2 = load_dataset(&path2).unwrap();
        assert_eq!(loaded, loaded2);
        assert_eq!(
            std::fs::read(dir.path().join("ds.jsonl.bin")).unwrap(),
            std::fs::read(dir.path().join("ds2.jsonl.bin")).unwrap()
        );
    }

    #[test]
    fn dim_mismatch_rejected_with_record_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let mut ds =
            generate_synthetic(&small_spec(0.0, 19), SplitCounts::all_train(12)).unwrap();
        ds.pairs[7].image.regions[1] = vec![1.0, 2.0, 3.0, 4.0]; // 4 dims among 8
        save_dataset(&ds, &path).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("record 7"), "{err}");
        assert!(err.contains("region 1"), "{err}");
    }

    #[test]
    fn empty_pairs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"version":1,"feature_dim":8,"num_regions":3,"num_pairs":0,"seed":0,"#,
                r#""splits":{"train":0,"val":0,"test":0}}"#,
                "\n"
            ),
        )
        .unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn dangling_link_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let mut ds =
            generate_synthetic(&small_spec(0.0, 23), SplitCounts::all_train(12)).unwrap();
        ds.pairs[3].gt_links.push(999);
        save_dataset(&ds, &path).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("record 3") && err.contains("999"), "{err}");
    }

    #[test]
    fn batches_partition_ten_into_4_4_2() {
        let ds = generate_synthetic(
            &SyntheticSpec { num_pairs: 10, ..small_spec(0.0, 29) },
            SplitCounts::all_train(10),
        )
        .unwrap();
        let batches = ds.epoch_batches(Split::Train, 4, 0, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn short_remainder_of_one_is_dropped() {
        let ds = generate_synthetic(
            &SyntheticSpec { num_pairs: 9, ..small_spec(0.0, 31) },
            SplitCounts::all_train(9),
        )
        .unwrap();
        let batches = ds.epoch_batches(Split::Train, 8, 0, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![8]);
    }

    #[test]
    fn batch_order_is_seeded_and_epoch_dependent() {
        let ds = generate_synthetic(
            &SyntheticSpec { num_pairs: 10, ..small_spec(0.0, 37) },
            SplitCounts::all_train(10),
        )
        .unwrap();
        let a = ds.epoch_batches(Split::Train, 4, 5, 0).unwrap();
        let b = ds.epoch_batches(Split::Train, 4, 5, 0).unwrap();
        let c = ds.epoch_batches(Split::Train, 4, 5, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_split_rejected() {
        let ds = generate_synthetic(
            &SyntheticSpec { num_pairs: 10, ..small_spec(0.0, 41) },
            SplitCounts::all_train(10),
        )
        .unwrap();
        assert!(ds.epoch_batches(Split::Test, 4, 0, 0).is_err());
    }

    #[test]
    fn split_ranges_are_disjoint_and_cover() {
        let ds = generate_synthetic(
            &small_spec(0.0, 43),
            SplitCounts { train: 7, val: 3, test: 2 },
        )
        .unwrap();
        let t = ds.split_range(Split::Train);
        let v = ds.split_range(Split::Val);
        let s = ds.split_range(Split::Test);
        assert_eq!(t, 0..7);
        assert_eq!(v, 7..10);
        assert_eq!(s, 10..12);
        assert_eq!(t.len() + v.len() + s.len(), ds.len());
    }
}
