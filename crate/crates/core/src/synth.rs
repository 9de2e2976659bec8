//! Deterministic synthetic real/fake imagery and the paired/unpaired
//! training split built from it.
//!
//! Real images are box-blurred Gaussian random fields. Fakes add a fixed
//! period-4 sinusoidal grid and a faint checkerboard on top of the real
//! generator's output; the grid sits exactly on the (0,4)/(4,0) DCT basis of
//! each 8×8 block, so JPEG quantization weakens it without erasing it, while
//! the checkerboard mostly does not survive.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{compress, sample_agnostic_quality, QualityFactor};
use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const IMAGE_SIZE: usize = 32;
pub const BLUR: usize = 5;
pub const GRID_PERIOD: usize = 4;
pub const GRID_AMPLITUDE: f64 = 6.0;
pub const CHECKER_AMPLITUDE: f64 = 3.0;
pub const FORMAT_VERSION: u32 = 1;

/// Seed domains. The domain tag occupies the top byte of every derived
/// image seed, so training and test images can never share a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedDomain {
    Train = 1,
    TestQualityAware = 2,
    TestQualityAgnostic = 3,
    TestRaw = 4,
    Probe = 5,
}

const DOMAIN_SHIFT: u32 = 56;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(domain: SeedDomain, seed: u64, index: u64) -> u64 {
    let mixed = splitmix64(splitmix64(seed ^ ((domain as u64) << 48)).wrapping_add(index));
    ((domain as u64) << DOMAIN_SHIFT) | (mixed & ((1 << DOMAIN_SHIFT) - 1))
}

pub fn seed_domain_tag(image_seed: u64) -> u64 {
    image_seed >> DOMAIN_SHIFT
}

/// Box-blurred Gaussian field rescaled to span exactly `[0, 255]`.
pub fn gen_real(seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = IMAGE_SIZE + BLUR - 1;
    let field: Vec<f64> = (0..side * side)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut out = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut s = 0.0;
            for dy in 0..BLUR {
                let row = &field[(y + dy) * side + x..(y + dy) * side + x + BLUR];
                s += row.iter().sum::<f64>();
            }
            out[y * IMAGE_SIZE + x] = s / (BLUR * BLUR) as f64;
        }
    }
    let (lo, hi) = out
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    out.iter_mut().for_each(|v| *v = (*v - lo) / span * 255.0);
    GrayImage::new(IMAGE_SIZE, IMAGE_SIZE, out).expect("fixed geometry")
}

/// The additive fake fingerprint at pixel `(x, y)` before clamping.
pub fn fingerprint(x: usize, y: usize) -> f64 {
    let w = 2.0 * PI / GRID_PERIOD as f64;
    let grid = (w * x as f64 + PI / 4.0).cos() + (w * y as f64 + PI / 4.0).cos();
    let checker = if (x + y).is_multiple_of(2) { 1.0 } else { -1.0 };
    GRID_AMPLITUDE * grid + CHECKER_AMPLITUDE * checker
}

pub fn gen_fake(seed: u64) -> GrayImage {
    let mut img = gen_real(seed);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let p = &mut img.pixels_mut()[y * IMAGE_SIZE + x];
            *p = (*p + fingerprint(x, y)).clamp(0.0, 255.0);
        }
    }
    img
}

pub fn gen_image(fake: bool, seed: u64) -> GrayImage {
    if fake {
        gen_fake(seed)
    } else {
        gen_real(seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: GrayImage,
    pub fake: bool,
    pub compressed: bool,
    pub pair_id: Option<u32>,
    pub source_q: Option<QualityFactor>,
    pub image_seed: u64,
}

impl SampleRecord {
    pub fn y_tf(&self) -> f64 {
        if self.fake {
            1.0
        } else {
            0.0
        }
    }

    pub fn y_cmp(&self) -> f64 {
        if self.compressed {
            1.0
        } else {
            0.0
        }
    }

    /// Index into the four aggregation groups: real-raw, real-compressed,
    /// fake-raw, fake-compressed.
    pub fn group(&self) -> Group {
        match (self.fake, self.compressed) {
            (false, false) => Group::RealRaw,
            (false, true) => Group::RealCompressed,
            (true, false) => Group::FakeRaw,
            (true, true) => Group::FakeCompressed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    RealRaw = 0,
    RealCompressed = 1,
    FakeRaw = 2,
    FakeCompressed = 3,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::RealRaw,
        Group::RealCompressed,
        Group::FakeRaw,
        Group::FakeCompressed,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_total: usize,
    pub frac_paired: f64,
    pub train_q: QualityFactor,
    pub seed: u64,
    /// Fraction of the unpaired originals replaced by a compressed copy with
    /// no raw counterpart. Zero reproduces the literal paired/unpaired split.
    #[serde(default)]
    pub unpaired_compressed_frac: f64,
}

impl DatasetParams {
    pub fn new(n_total: usize, frac_paired: f64, train_q: QualityFactor, seed: u64) -> Self {
        DatasetParams {
            n_total,
            frac_paired,
            train_q,
            seed,
            unpaired_compressed_frac: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub params: DatasetParams,
    pub records: Vec<SampleRecord>,
}

pub fn paired_count(n_total: usize, frac_paired: f64) -> usize {
    (frac_paired * n_total as f64).round() as usize
}

/// Generates `n_total` originals (alternating real/fake), picks a
/// class-stratified random subset as the paired set, and appends one
/// compressed copy per paired original. Records are ordered originals first,
/// compressed copies after.
pub fn build_dataset(params: &DatasetParams) -> Result<DatasetSplit> {
    let DatasetParams {
        n_total,
        frac_paired,
        train_q,
        seed,
        unpaired_compressed_frac,
    } = *params;
    if !(frac_paired > 0.0 && frac_paired < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "frac_paired must lie in (0, 1), got {frac_paired}"
        )));
    }
    if !(0.0..=1.0).contains(&unpaired_compressed_frac) {
        return Err(Error::InvalidArgument(
            "unpaired_compressed_frac must lie in [0, 1]".into(),
        ));
    }
    let n_paired = paired_count(n_total, frac_paired);
    if n_total < 4 || n_paired < 2 || n_paired >= n_total {
        return Err(Error::InvalidArgument(format!(
            "n_total={n_total} with frac_paired={frac_paired} gives {n_paired} pairs; \
             need at least 2 pairs and at least one unpaired original"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5eed_5e1e_c7ed));
    let mut real: Vec<usize> = (0..n_total).filter(|i| i % 2 == 0).collect();
    let mut fake: Vec<usize> = (0..n_total).filter(|i| i % 2 == 1).collect();
    real.shuffle(&mut rng);
    fake.shuffle(&mut rng);
    // alternate classes so the paired set is balanced within one sample
    let n_fake_paired = n_paired / 2;
    let n_real_paired = n_paired - n_fake_paired;
    if n_real_paired > real.len() || n_fake_paired > fake.len() {
        return Err(Error::InvalidArgument(
            "not enough originals per class for a balanced paired set".into(),
        ));
    }
    let mut paired: Vec<usize> = real[..n_real_paired]
        .iter()
        .chain(&fake[..n_fake_paired])
        .copied()
        .collect();
    paired.sort_unstable();
    let pair_of: BTreeMap<usize, u32> = paired
        .iter()
        .enumerate()
        .map(|(pid, &i)| (i, pid as u32))
        .collect();

    let mut unpaired: Vec<usize> = (0..n_total).filter(|i| !pair_of.contains_key(i)).collect();
    unpaired.shuffle(&mut rng);
    let n_unpaired_cmp = (unpaired_compressed_frac * unpaired.len() as f64).round() as usize;
    let unpaired_cmp: std::collections::BTreeSet<usize> =
        unpaired[..n_unpaired_cmp].iter().copied().collect();

    let mut records = Vec::with_capacity(n_total + n_paired);
    for i in 0..n_total {
        let is_fake = i % 2 == 1;
        let image_seed = derive_seed(SeedDomain::Train, seed, i as u64);
        let image = gen_image(is_fake, image_seed);
        let (image, compressed, source_q) = if unpaired_cmp.contains(&i) {
            (compress(&image, train_q)?, true, Some(train_q))
        } else {
            (image, false, None)
        };
        records.push(SampleRecord {
            image,
            fake: is_fake,
            compressed,
            pair_id: pair_of.get(&i).copied(),
            source_q,
            image_seed,
        });
    }
    for &i in &paired {
        let orig = &records[i];
        let copy = SampleRecord {
            image: compress(&orig.image, train_q)?,
            fake: orig.fake,
            compressed: true,
            pair_id: orig.pair_id,
            source_q: Some(train_q),
            image_seed: orig.image_seed,
        };
        records.push(copy);
    }
    Ok(DatasetSplit {
        params: params.clone(),
        records,
    })
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(raw_index, compressed_index)` for every pair id, ordered by id.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut by_id: BTreeMap<u32, (Option<usize>, Option<usize>)> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if let Some(pid) = r.pair_id {
                let e = by_id.entry(pid).or_default();
                if r.compressed {
                    e.1 = Some(i);
                } else {
                    e.0 = Some(i);
                }
            }
        }
        by_id
            .into_values()
            .filter_map(|(a, b)| Some((a?, b?)))
            .collect()
    }

    pub fn group_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in &self.records {
            c[r.group() as usize] += 1;
        }
        c
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        let meta = SplitMeta::Train {
            params: self.params.clone(),
        };
        save_records(dir, name, meta, &self.records)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let (meta, records) = load_records(dir, name)?;
        match meta {
            SplitMeta::Train { params } => Ok(DatasetSplit { params, records }),
            SplitMeta::Test { .. } => Err(Error::format(
                dir.join(format!("{name}.json")),
                "manifest describes a test set, not a training split",
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    QualityAware,
    QualityAgnostic,
    /// Uncompressed test images; not part of the evaluation protocol, used
    /// for sanity checks.
    Raw,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::QualityAware => "quality_aware",
            Regime::QualityAgnostic => "quality_agnostic",
            Regime::Raw => "raw",
        }
    }

    fn domain(self) -> SeedDomain {
        match self {
            Regime::QualityAware => SeedDomain::TestQualityAware,
            Regime::QualityAgnostic => SeedDomain::TestQualityAgnostic,
            Regime::Raw => SeedDomain::TestRaw,
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quality_aware" => Ok(Regime::QualityAware),
            "quality_agnostic" => Ok(Regime::QualityAgnostic),
            "raw" => Ok(Regime::Raw),
            other => Err(Error::InvalidArgument(format!("unknown regime {other:?}"))),
        }
    }
}

/// Balanced test set (`n/2` real, the rest fake) compressed per `regime`.
pub fn make_test_set(
    n: usize,
    regime: Regime,
    train_q: QualityFactor,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if n < 2 {
        return Err(Error::InvalidArgument("test set needs n >= 2".into()));
    }
    let domain = regime.domain();
    let mut qrng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ ((domain as u64) << 40)));
    (0..n)
        .map(|i| {
            let is_fake = i % 2 == 1;
            let image_seed = derive_seed(domain, seed, i as u64);
            let raw = gen_image(is_fake, image_seed);
            let q = match regime {
                Regime::QualityAware => Some(train_q),
                Regime::QualityAgnostic => Some(sample_agnostic_quality(&mut qrng)),
                Regime::Raw => None,
            };
            let image = match q {
                Some(q) => compress(&raw, q)?,
                None => raw,
            };
            Ok(SampleRecord {
                image,
                fake: is_fake,
                compressed: q.is_some(),
                pair_id: None,
                source_q: q,
                image_seed,
            })
        })
        .collect()
}

pub fn save_test_set(
    dir: &Path,
    name: &str,
    regime: Regime,
    seed: u64,
    records: &[SampleRecord],
) -> Result<()> {
    save_records(dir, name, SplitMeta::Test { regime, seed }, records)
}

/// Splits a dataset into batches such that both halves of every pair land in
/// the same batch and each batch receives at least two members of each of
/// the four groups whenever the dataset has enough of them.
///
/// The batch count is `ceil(len / batch_size)`, reduced when there are too
/// few pairs per class to give every batch two of each; in that case batches
/// grow beyond `batch_size`.
pub fn stratified_batches<R: Rng + ?Sized>(
    split: &DatasetSplit,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 8 {
        return Err(Error::InvalidArgument(format!(
            "batch_size must be at least 8, got {batch_size}"
        )));
    }
    let n = split.len();
    let pairs = split.pairs();
    let paired: std::collections::HashSet<usize> =
        pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let mut real_pairs: Vec<(usize, usize)> = Vec::new();
    let mut fake_pairs: Vec<(usize, usize)> = Vec::new();
    for &p in &pairs {
        if split.records[p.0].fake {
            fake_pairs.push(p);
        } else {
            real_pairs.push(p);
        }
    }
    let mut singles: [Vec<usize>; 4] = Default::default();
    for (i, r) in split.records.iter().enumerate() {
        if !paired.contains(&i) {
            singles[r.group() as usize].push(i);
        }
    }

    let mut n_batches = n.div_ceil(batch_size).max(1);
    let min_pairs = real_pairs.len().min(fake_pairs.len());
    if min_pairs >= 2 && n_batches > min_pairs / 2 {
        log::debug!(
            "reducing batch count from {n_batches} to {} to keep compressed groups populated",
            min_pairs / 2
        );
        n_batches = min_pairs / 2;
    }

    real_pairs.shuffle(rng);
    fake_pairs.shuffle(rng);
    singles.iter_mut().for_each(|s| s.shuffle(rng));

    let mut batches: Vec<Vec<usize>> = vec![Vec::with_capacity(batch_size + 4); n_batches];
    let mut cursor = 0;
    for p in real_pairs.iter().chain(&fake_pairs) {
        batches[cursor % n_batches].extend([p.0, p.1]);
        cursor += 1;
    }
    for group in &singles {
        for &i in group {
            batches[cursor % n_batches].push(i);
            cursor += 1;
        }
    }
    for b in &mut batches {
        b.sort_unstable();
    }
    batches.shuffle(rng);
    Ok(batches)
}

// ---- serialization ------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SplitMeta {
    Train { params: DatasetParams },
    Test { regime: Regime, seed: u64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RecordEntry {
    index: usize,
    fake: bool,
    compressed: bool,
    pair_id: Option<u32>,
    source_q: Option<QualityFactor>,
    image_seed: u64,
    /// Byte offset of the image in the blob.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(flatten)]
    meta: SplitMeta,
    n_records: usize,
    width: usize,
    height: usize,
    blob: String,
    records: Vec<RecordEntry>,
}

fn save_records(dir: &Path, name: &str, meta: SplitMeta, records: &[SampleRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_name = format!("{name}.bin");
    let blob_path = dir.join(&blob_name);
    let (width, height) = records
        .first()
        .map(|r| (r.image.width(), r.image.height()))
        .unwrap_or((IMAGE_SIZE, IMAGE_SIZE));
    let mut blob = Vec::with_capacity(records.len() * width * height * 8);
    let mut entries = Vec::with_capacity(records.len());
    for (index, r) in records.iter().enumerate() {
        if r.image.width() != width || r.image.height() != height {
            return Err(Error::InvalidArgument(
                "all images in a split must share one size".into(),
            ));
        }
        entries.push(RecordEntry {
            index,
            fake: r.fake,
            compressed: r.compressed,
            pair_id: r.pair_id,
            source_q: r.source_q,
            image_seed: r.image_seed,
            offset: blob.len() as u64,
        });
        for p in r.image.pixels() {
            blob.extend_from_slice(&p.to_le_bytes());
        }
    }
    fs::File::create(&blob_path)
        .and_then(|mut f| f.write_all(&blob))
        .map_err(|e| Error::io(&blob_path, e))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        meta,
        n_records: records.len(),
        width,
        height,
        blob: blob_name,
        records: entries,
    };
    let json_path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

fn load_records(dir: &Path, name: &str) -> Result<(SplitMeta, Vec<SampleRecord>)> {
    let json_path = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(
            &json_path,
            format!("unsupported version {}", manifest.version),
        ));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let npix = manifest.width * manifest.height;
    let mut records = Vec::with_capacity(manifest.records.len());
    for e in &manifest.records {
        let start = e.offset as usize;
        let end = start + npix * 8;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::format(&blob_path, format!("record {} out of bounds", e.index)))?;
        let pixels = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        records.push(SampleRecord {
            image: GrayImage::new(manifest.width, manifest.height, pixels)?,
            fake: e.fake,
            compressed: e.compressed,
            pair_id: e.pair_id,
            source_q: e.source_q,
            image_seed: e.image_seed,
        });
    }
    if records.len() != manifest.n_records {
        return Err(Error::format(&json_path, "record count mismatch"));
    }
    Ok((manifest.meta, records))
}

/// Image seeds listed in a saved manifest; used to audit train/test
/// disjointness without loading pixel data.
pub fn manifest_seeds(dir: &Path, name: &str) -> Result<Vec<u64>> {
    let json_path = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    Ok(manifest.records.iter().map(|r| r.image_seed).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(v: u8) -> QualityFactor {
        QualityFactor::new(v).unwrap()
    }

    #[test]
    fn real_images_are_deterministic_and_full_range() {
        let a = gen_real(42);
        assert_eq!(a, gen_real(42));
        let px = a.pixels();
        let lo = px.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert!((hi - 255.0).abs() < 1e-9);
    }

    #[test]
    fn fake_differs_from_real() {
        for s in 0..20 {
            let r = gen_real(s);
            let f = gen_fake(s);
            let mad: f64 = r
                .pixels()
                .iter()
                .zip(f.pixels())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 1024.0;
            assert!(mad > 0.0);
            assert!(f.pixels().iter().all(|&p| (0.0..=255.0).contains(&p)));
        }
    }

    #[test]
    fn hundred_originals_give_twenty_pairs() {
        let ds = build_dataset(&DatasetParams::new(100, 0.2, q(40), 7)).unwrap();
        assert_eq!(ds.len(), 120);
        assert_eq!(ds.records.iter().filter(|r| !r.compressed).count(), 100);
        assert_eq!(ds.records.iter().filter(|r| r.compressed).count(), 20);
        assert_eq!(ds.pairs().len(), 20);
        for r in &ds.records {
            assert_eq!(r.compressed, r.source_q.is_some());
            if r.pair_id.is_none() {
                assert!(!r.compressed);
            }
        }
    }

    #[test]
    fn ten_originals_give_two_pairs() {
        let ds = build_dataset(&DatasetParams::new(10, 0.2, q(40), 1)).unwrap();
        assert_eq!(ds.pairs().len(), 2);
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        assert!(build_dataset(&DatasetParams::new(3, 0.5, q(40), 1)).is_err());
        assert!(build_dataset(&DatasetParams::new(100, 0.0, q(40), 1)).is_err());
        assert!(build_dataset(&DatasetParams::new(100, 1.0, q(40), 1)).is_err());
        assert!(build_dataset(&DatasetParams::new(5, 0.2, q(40), 1)).is_err());
    }

    #[test]
    fn balance_within_one() {
        for n in [40, 41, 100, 333] {
            let ds = build_dataset(&DatasetParams::new(n, 0.2, q(40), n as u64)).unwrap();
            let p: Vec<_> = ds.records.iter().filter(|r| r.pair_id.is_some() && !r.compressed).collect();
            let u: Vec<_> = ds.records.iter().filter(|r| r.pair_id.is_none()).collect();
            for set in [&p, &u] {
                let fakes = set.iter().filter(|r| r.fake).count() as i64;
                let reals = set.len() as i64 - fakes;
                assert!((fakes - reals).abs() <= 1, "n={n}: {fakes} vs {reals}");
            }
        }
    }

    #[test]
    fn unpaired_compressed_flag() {
        let mut p = DatasetParams::new(100, 0.2, q(40), 3);
        p.unpaired_compressed_frac = 0.25;
        let ds = build_dataset(&p).unwrap();
        let extra = ds
            .records
            .iter()
            .filter(|r| r.compressed && r.pair_id.is_none())
            .count();
        assert_eq!(extra, 20);
        assert_eq!(ds.len(), 120);
    }

    #[test]
    fn batch_size_floor() {
        let ds = build_dataset(&DatasetParams::new(100, 0.2, q(40), 7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(stratified_batches(&ds, 7, &mut rng).is_err());
    }

    #[test]
    fn regime_parsing() {
        assert_eq!("quality_agnostic".parse::<Regime>().unwrap(), Regime::QualityAgnostic);
        assert!("bogus".parse::<Regime>().is_err());
    }

    #[test]
    fn seed_domains_are_tagged() {
        let s = derive_seed(SeedDomain::TestQualityAgnostic, 9, 3);
        assert_eq!(seed_domain_tag(s), SeedDomain::TestQualityAgnostic as u64);
    }
}
