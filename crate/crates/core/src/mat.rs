//! Distorted-image VQA benchmark construction and manifest checks.
//!
//! Coding items are generated from clean VQA sources by applying a seeded
//! [`DistortionSpec`]; every drawn parameter is written to the manifest so
//! any item can be regenerated from its record. Search items are authored
//! by hand and only validated here.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imagekit::{self, DistortionKind, DistortionOp, DistortionSpec, ImageBuffer, ImageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Rotation90,
    Rotation180,
    Dark,
    Overexpose,
    Blur,
    Noise,
    None,
    Crop,
    Composite,
}

impl Category {
    pub const SINGLE: [Category; 7] = [
        Category::Rotation90,
        Category::Rotation180,
        Category::Dark,
        Category::Overexpose,
        Category::Blur,
        Category::Noise,
        Category::None,
    ];

    pub fn is_single(self) -> bool {
        Self::SINGLE.contains(&self)
    }

    /// The distortion kind a single category stands for.
    pub fn single_kind(self) -> Option<DistortionKind> {
        Some(match self {
            Category::Rotation90 => DistortionKind::Rotate90,
            Category::Rotation180 => DistortionKind::Rotate180,
            Category::Dark => DistortionKind::Darken,
            Category::Overexpose => DistortionKind::Overexpose,
            Category::Blur => DistortionKind::Blur,
            Category::Noise => DistortionKind::Noise,
            Category::None => DistortionKind::None,
            Category::Crop | Category::Composite => return Option::None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Simple,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Coding,
    Search,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchItem {
    pub id: String,
    pub image_path: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub category: Category,
    pub split: Split,
    pub task: Task,
    #[serde(default)]
    pub distortion: Option<DistortionSpec>,
    #[serde(default)]
    pub reference_queries: Vec<String>,
    #[serde(default)]
    pub hops: Option<u32>,
    /// Region of interest `[x, y, w, h]` inside a generated crop layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_region: Option<[u32; 4]>,
}

#[derive(Debug, Error)]
pub enum MatError {
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("need {needed} source items, got {available}")]
    InsufficientSources { needed: usize, available: usize },
    #[error("duplicate source id {0}")]
    DuplicateSource(String),
    #[error("item {id}: {source}")]
    Image {
        id: String,
        #[source]
        source: ImageError,
    },
    #[error("split is annotated for search items, not derived ({0})")]
    SearchSplit(String),
    #[error("invalid plan: {0}")]
    Plan(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MatError + '_ {
    move |source| MatError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads JSON Lines, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, MatError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MatError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), MatError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("serializable");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub items: Vec<BenchItem>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, MatError> {
        Ok(Self { items: read_jsonl(path)? })
    }

    pub fn save(&self, path: &Path) -> Result<(), MatError> {
        write_jsonl(path, &self.items)
    }

    pub fn counts(&self) -> BTreeMap<(Task, Category, Split), usize> {
        let mut counts = BTreeMap::new();
        for it in &self.items {
            *counts.entry((it.task, it.category, it.split)).or_default() += 1;
        }
        counts
    }

    pub fn get(&self, id: &str) -> Option<&BenchItem> {
        self.items.iter().find(|i| i.id == id)
    }
}

/// Simple for one single distortion (or none); Hard for composites and crops.
pub fn split_difficulty(item: &BenchItem) -> Result<Split, MatError> {
    if item.task == Task::Search {
        return Err(MatError::SearchSplit(item.id.clone()));
    }
    Ok(match item.category {
        Category::Composite | Category::Crop => Split::Hard,
        _ => Split::Simple,
    })
}

/// One line of a quota table. Composite buckets may pin the kind pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kinds: Option<Vec<DistortionKind>>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub buckets: Vec<Bucket>,
}

const COMPOSITE_ORDER: [DistortionKind; 6] = [
    DistortionKind::Rotate90,
    DistortionKind::Rotate180,
    DistortionKind::Darken,
    DistortionKind::Overexpose,
    DistortionKind::Blur,
    DistortionKind::Noise,
];

fn family(k: DistortionKind) -> u8 {
    match k {
        DistortionKind::Rotate90 | DistortionKind::Rotate180 => 0,
        DistortionKind::Darken | DistortionKind::Overexpose => 1,
        DistortionKind::Blur => 2,
        DistortionKind::Noise => 3,
        DistortionKind::None => 4,
    }
}

fn canonical(mut kinds: Vec<DistortionKind>) -> Vec<DistortionKind> {
    kinds.sort_by_key(|k| COMPOSITE_ORDER.iter().position(|c| c == k));
    kinds
}

impl Plan {
    /// 10 per single category, plus 90 composite and 40 crop items: 200.
    pub fn test_default() -> Self {
        Self::test_with(90, 40)
    }

    pub fn test_with(composite: usize, crop: usize) -> Self {
        let mut buckets: Vec<Bucket> = Category::SINGLE
            .iter()
            .map(|c| Bucket {
                category: *c,
                kinds: Option::None,
                count: 10,
            })
            .collect();
        buckets.push(Bucket {
            category: Category::Composite,
            kinds: Option::None,
            count: composite,
        });
        buckets.push(Bucket {
            category: Category::Crop,
            kinds: Option::None,
            count: crop,
        });
        Self { buckets }
    }

    /// Twelve categories of 100: the seven singles, crop and four fixed
    /// composite pairs.
    pub fn train_default() -> Self {
        use DistortionKind::*;
        let mut buckets: Vec<Bucket> = Category::SINGLE
            .iter()
            .chain([Category::Crop].iter())
            .map(|c| Bucket {
                category: *c,
                kinds: Option::None,
                count: 100,
            })
            .collect();
        for pair in [[Rotate90, Darken], [Rotate180, Overexpose], [Blur, Noise], [Darken, Noise]] {
            buckets.push(Bucket {
                category: Category::Composite,
                kinds: Some(pair.to_vec()),
                count: 100,
            });
        }
        Self { buckets }
    }

    pub fn total(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }

    pub fn validate(&self) -> Result<(), MatError> {
        let mut seen = HashSet::new();
        for b in &self.buckets {
            let key = (b.category, b.kinds.clone().map(canonical));
            if !seen.insert(key) {
                return Err(MatError::Plan(format!("duplicate bucket {:?} {:?}", b.category, b.kinds)));
            }
            if let Some(kinds) = &b.kinds {
                let fams: HashSet<u8> = kinds.iter().map(|k| family(*k)).collect();
                if b.category != Category::Composite || kinds.len() < 2 || fams.len() != kinds.len() || kinds.contains(&DistortionKind::None) {
                    return Err(MatError::Plan(format!("bad composite kinds {kinds:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MatError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| MatError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }

    /// Index of the bucket a coding item counts toward.
    fn bucket_of(&self, item: &BenchItem) -> Option<usize> {
        let kinds = item.distortion.as_ref().map(|d| canonical(d.effective_kinds()));
        self.buckets
            .iter()
            .position(|b| b.category == item.category && b.kinds.is_some() && b.kinds.clone().map(canonical) == kinds)
            .or_else(|| self.buckets.iter().position(|b| b.category == item.category && b.kinds.is_none()))
    }
}

/// A clean VQA item to distort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceItem {
    pub id: String,
    pub image_path: String,
    pub question: String,
    pub gold_answers: Vec<String>,
}

/// Per-item seed: first 8 bytes (big-endian) of SHA-256(master_seed_be ‖ id).
pub fn item_seed(master_seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_be_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Parameter ranges used when drawing distortions.
pub mod ranges {
    pub const DARKEN: (f64, f64) = (0.2, 0.5);
    pub const OVEREXPOSE: (f64, f64) = (1.8, 3.0);
    pub const BLUR_SIGMA: (f64, f64) = (1.0, 3.0);
    pub const NOISE_SIGMA: (f64, f64) = (10.0, 40.0);
}

fn draw_op(kind: DistortionKind, rng: &mut ChaCha8Rng) -> DistortionOp {
    let mut u = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    match kind {
        DistortionKind::Rotate90 => DistortionOp::Rotate90,
        DistortionKind::Rotate180 => DistortionOp::Rotate180,
        DistortionKind::Darken => DistortionOp::Darken { factor: u(ranges::DARKEN) },
        DistortionKind::Overexpose => DistortionOp::Overexpose {
            factor: u(ranges::OVEREXPOSE),
        },
        DistortionKind::Blur => DistortionOp::Blur {
            sigma: u(ranges::BLUR_SIGMA),
        },
        DistortionKind::Noise => DistortionOp::Noise {
            sigma: u(ranges::NOISE_SIGMA),
        },
        DistortionKind::None => DistortionOp::None,
    }
}

/// Two distinct kinds from different families, drawn uniformly over pairs.
fn draw_composite_kinds(rng: &mut ChaCha8Rng) -> Vec<DistortionKind> {
    let mut pairs = Vec::new();
    for (i, a) in COMPOSITE_ORDER.iter().enumerate() {
        for b in &COMPOSITE_ORDER[i + 1..] {
            if family(*a) != family(*b) {
                pairs.push(vec![*a, *b]);
            }
        }
    }
    pairs[rng.random_range(0..pairs.len())].clone()
}

/// Embeds `img` at a random offset in a canvas twice its size filled with
/// seeded distractor blocks. Returns the layout and the region of interest.
pub fn crop_layout(img: &ImageBuffer, seed: u64) -> Result<(ImageBuffer, [u32; 4]), ImageError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (img.width(), img.height());
    let (cw, ch) = (w * 2, h * 2);
    let (ox, oy) = (rng.random_range(0..=w), rng.random_range(0..=h));
    let block = (w.min(h) / 4).max(1);
    let palette: Vec<[u8; 3]> = (0..16).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let colors: Vec<usize> = (0..(cw.div_ceil(block) * ch.div_ceil(block)))
        .map(|_| rng.random_range(0..palette.len()))
        .collect();
    let canvas = ImageBuffer::from_fn(cw, ch, |x, y| {
        if (ox..ox + w).contains(&x) && (oy..oy + h).contains(&y) {
            img.pixel(x - ox, y - oy)
        } else {
            palette[colors[((y / block) * cw.div_ceil(block) + x / block) as usize]]
        }
    })?;
    Ok((canvas, [ox, oy, w, h]))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuildSummary {
    pub manifest: Manifest,
    /// Items whose generated image equals the source though a distortion was applied.
    pub unchanged: Vec<String>,
}

/// Builds a coding benchmark under `out_dir`: `manifest.jsonl` plus
/// `images/<id>.png`. Image paths in `sources` are relative to `source_root`.
pub fn build_coding_bench(
    sources: &[SourceItem],
    source_root: &Path,
    plan: &Plan,
    master_seed: u64,
    out_dir: &Path,
) -> Result<BuildSummary, MatError> {
    plan.validate()?;
    let needed = plan.total();
    if sources.len() < needed {
        return Err(MatError::InsufficientSources {
            needed,
            available: sources.len(),
        });
    }
    let mut ids = HashSet::new();
    for s in sources {
        if !ids.insert(s.id.as_str()) {
            return Err(MatError::DuplicateSource(s.id.clone()));
        }
    }

    let mut assignment: Vec<usize> = plan
        .buckets
        .iter()
        .enumerate()
        .flat_map(|(i, b)| std::iter::repeat_n(i, b.count))
        .collect();
    assignment.shuffle(&mut ChaCha8Rng::seed_from_u64(master_seed));

    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;

    let results: Vec<Result<(BenchItem, bool), MatError>> = sources[..needed]
        .par_iter()
        .zip(assignment.par_iter())
        .map(|(src, bucket)| build_item(src, source_root, &plan.buckets[*bucket], master_seed, &images_dir))
        .collect();

    let mut summary = BuildSummary::default();
    for r in results {
        let (item, changed) = r?;
        if !changed && item.category != Category::None {
            summary.unchanged.push(item.id.clone());
        }
        summary.manifest.items.push(item);
    }
    summary.manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(summary)
}

fn build_item(src: &SourceItem, root: &Path, bucket: &Bucket, master_seed: u64, images_dir: &Path) -> Result<(BenchItem, bool), MatError> {
    let img_err = |source| MatError::Image { id: src.id.clone(), source };
    let seed = item_seed(master_seed, &src.id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = ImageBuffer::load_png(&root.join(&src.image_path)).map_err(img_err)?;

    let (distortion, image, crop_region) = match bucket.category {
        Category::Crop => {
            let (canvas, roi) = crop_layout(&clean, seed).map_err(img_err)?;
            (Option::None, canvas, Some(roi))
        }
        Category::Composite => {
            let kinds = match &bucket.kinds {
                Some(k) => canonical(k.clone()),
                Option::None => draw_composite_kinds(&mut rng),
            };
            let spec = DistortionSpec {
                ops: kinds.into_iter().map(|k| draw_op(k, &mut rng)).collect(),
                seed,
            };
            let img = imagekit::apply_spec(&clean, &spec).map_err(img_err)?;
            (Some(spec), img, Option::None)
        }
        single => {
            let kind = single.single_kind().expect("single category");
            let spec = DistortionSpec {
                ops: vec![draw_op(kind, &mut rng)],
                seed,
            };
            let img = imagekit::apply_spec(&clean, &spec).map_err(img_err)?;
            (Some(spec), img, Option::None)
        }
    };

    let rel = PathBuf::from("images").join(format!("{}.png", src.id));
    image.save_png(&images_dir.join(format!("{}.png", src.id))).map_err(img_err)?;
    let changed = image != clean;
    let mut item = BenchItem {
        id: src.id.clone(),
        image_path: rel.to_string_lossy().replace('\\', "/"),
        question: src.question.clone(),
        gold_answers: src.gold_answers.clone(),
        category: bucket.category,
        split: Split::Simple,
        task: Task::Coding,
        distortion,
        reference_queries: Vec::new(),
        hops: Option::None,
        crop_region,
    };
    item.split = split_difficulty(&item)?;
    Ok((item, changed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    CountMismatch,
    DuplicateId,
    MissingFile,
    SplitConsistency,
    Invariant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub item: Option<String>,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.item {
            Some(id) => write!(f, "{:?} [{id}]: {}", self.kind, self.message),
            Option::None => write!(f, "{:?}: {}", self.kind, self.message),
        }
    }
}

fn check_item(item: &BenchItem) -> Vec<(FindingKind, String)> {
    let mut out = Vec::new();
    let mut bad = |kind, msg: String| out.push((kind, msg));
    if item.gold_answers.is_empty() || item.gold_answers.iter().any(|a| a.trim().is_empty()) {
        bad(FindingKind::Invariant, "gold answers must be non-empty strings".into());
    }
    match item.task {
        Task::Search => {
            if item.distortion.is_some() || item.crop_region.is_some() {
                bad(FindingKind::Invariant, "search items carry no distortion".into());
            }
            if item.category != Category::None {
                bad(FindingKind::Invariant, format!("search items use category none, got {:?}", item.category));
            }
        }
        Task::Coding => {
            if !item.reference_queries.is_empty() || item.hops.is_some() {
                bad(FindingKind::Invariant, "reference_queries/hops are search-only".into());
            }
            let kinds = match &item.distortion {
                Some(spec) => {
                    if let Err(e) = spec.validate() {
                        bad(FindingKind::Invariant, e.to_string());
                    }
                    spec.effective_kinds()
                }
                Option::None => {
                    if !matches!(item.category, Category::Crop | Category::None) {
                        bad(FindingKind::Invariant, format!("{:?} item without distortion spec", item.category));
                    }
                    Vec::new()
                }
            };
            let consistent = match item.category {
                Category::Crop => item.distortion.is_none() || kinds.is_empty(),
                Category::Composite => kinds.len() >= 2,
                Category::None => kinds.is_empty(),
                single => kinds == vec![single.single_kind().expect("single")],
            };
            if !consistent {
                bad(
                    FindingKind::Invariant,
                    format!("category {:?} does not match distortion kinds {kinds:?}", item.category),
                );
            }
            let expected = if kinds.len() >= 2 || item.category == Category::Crop || item.category == Category::Composite {
                Split::Hard
            } else {
                Split::Simple
            };
            if item.split != expected {
                bad(
                    FindingKind::SplitConsistency,
                    format!("split {:?} but distortion implies {expected:?}", item.split),
                );
            }
        }
    }
    out
}

/// Lists every problem found; an empty report means the manifest passes.
/// `base_dir` enables file-existence checks, `plan` enables quota checks
/// over coding items.
pub fn validate_manifest(m: &Manifest, base_dir: Option<&Path>, plan: Option<&Plan>) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut seen = HashSet::new();
    for item in &m.items {
        if !seen.insert(item.id.as_str()) {
            findings.push(Finding {
                kind: FindingKind::DuplicateId,
                item: Some(item.id.clone()),
                message: "id appears more than once".into(),
            });
        }
        if let Some(dir) = base_dir {
            if !dir.join(&item.image_path).is_file() {
                findings.push(Finding {
                    kind: FindingKind::MissingFile,
                    item: Some(item.id.clone()),
                    message: format!("missing image {}", item.image_path),
                });
            }
        }
        for (kind, message) in check_item(item) {
            findings.push(Finding {
                kind,
                item: Some(item.id.clone()),
                message,
            });
        }
    }
    if let Some(plan) = plan {
        let mut actual = vec![0usize; plan.buckets.len()];
        for item in m.items.iter().filter(|i| i.task == Task::Coding) {
            match plan.bucket_of(item) {
                Some(b) => actual[b] += 1,
                Option::None => findings.push(Finding {
                    kind: FindingKind::CountMismatch,
                    item: Some(item.id.clone()),
                    message: format!("no plan bucket for category {:?}", item.category),
                }),
            }
        }
        for (b, got) in plan.buckets.iter().zip(actual) {
            if b.count != got {
                findings.push(Finding {
                    kind: FindingKind::CountMismatch,
                    item: Option::None,
                    message: format!(
                        "bucket {:?}{} expects {} items, found {got}",
                        b.category,
                        b.kinds.as_ref().map(|k| format!(" {k:?}")).unwrap_or_default(),
                        b.count
                    ),
                });
            }
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coding(id: &str, category: Category, ops: Vec<DistortionOp>, split: Split) -> BenchItem {
        BenchItem {
            id: id.into(),
            image_path: format!("images/{id}.png"),
            question: "q".into(),
            gold_answers: vec!["a".into()],
            category,
            split,
            task: Task::Coding,
            distortion: if ops.is_empty() {
                Option::None
            } else {
                Some(DistortionSpec { ops, seed: 1 })
            },
            reference_queries: vec![],
            hops: Option::None,
            crop_region: Option::None,
        }
    }

    #[test]
    fn plan_totals() {
        let test = Plan::test_default();
        assert_eq!(test.total(), 200);
        assert_eq!(test.buckets.iter().filter(|b| b.category.is_single()).map(|b| b.count).sum::<usize>(), 70);
        let train = Plan::train_default();
        assert_eq!(train.total(), 1200);
        assert_eq!(train.buckets.len(), 12);
        assert!(train.buckets.iter().all(|b| b.count == 100));
        test.validate().unwrap();
        train.validate().unwrap();
    }

    #[test]
    fn difficulty_examples() {
        let blur = coding("b", Category::Blur, vec![DistortionOp::Blur { sigma: 1.0 }], Split::Simple);
        assert_eq!(split_difficulty(&blur).unwrap(), Split::Simple);
        let comp = coding(
            "c",
            Category::Composite,
            vec![DistortionOp::Rotate90, DistortionOp::Darken { factor: 0.3 }],
            Split::Hard,
        );
        assert_eq!(split_difficulty(&comp).unwrap(), Split::Hard);
        let crop = coding("k", Category::Crop, vec![], Split::Hard);
        assert_eq!(split_difficulty(&crop).unwrap(), Split::Hard);
        let none = coding("n", Category::None, vec![DistortionOp::None], Split::Simple);
        assert_eq!(split_difficulty(&none).unwrap(), Split::Simple);
        let search = BenchItem { task: Task::Search, ..none };
        assert!(split_difficulty(&search).is_err());
    }

    #[test]
    fn validation_findings() {
        let good = coding("a", Category::Blur, vec![DistortionOp::Blur { sigma: 1.0 }], Split::Simple);
        assert!(validate_manifest(&Manifest { items: vec![good.clone()] }, Option::None, Option::None).is_empty());

        let dup = Manifest {
            items: vec![good.clone(), good.clone()],
        };
        let f = validate_manifest(&dup, Option::None, Option::None);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, FindingKind::DuplicateId);

        let simple_composite = coding(
            "c",
            Category::Composite,
            vec![DistortionOp::Blur { sigma: 1.0 }, DistortionOp::Noise { sigma: 5.0 }],
            Split::Simple,
        );
        let f = validate_manifest(
            &Manifest {
                items: vec![simple_composite],
            },
            Option::None,
            Option::None,
        );
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, FindingKind::SplitConsistency);

        let mismatched = coding("m", Category::Dark, vec![DistortionOp::Blur { sigma: 1.0 }], Split::Simple);
        let f = validate_manifest(&Manifest { items: vec![mismatched] }, Option::None, Option::None);
        assert_eq!(f[0].kind, FindingKind::Invariant);
    }

    #[test]
    fn quota_findings() {
        let plan = Plan {
            buckets: vec![Bucket {
                category: Category::Blur,
                kinds: Option::None,
                count: 2,
            }],
        };
        let one = Manifest {
            items: vec![coding("a", Category::Blur, vec![DistortionOp::Blur { sigma: 1.0 }], Split::Simple)],
        };
        let f = validate_manifest(&one, Option::None, Some(&plan));
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, FindingKind::CountMismatch);
    }

    #[test]
    fn item_seed_is_stable() {
        assert_eq!(item_seed(7, "x"), item_seed(7, "x"));
        assert_ne!(item_seed(7, "x"), item_seed(8, "x"));
        assert_ne!(item_seed(7, "x"), item_seed(7, "y"));
    }

    #[test]
    fn composite_pairs_span_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k = draw_composite_kinds(&mut rng);
            assert_eq!(k.len(), 2);
            assert_ne!(family(k[0]), family(k[1]));
        }
    }

    #[test]
    fn crop_layout_contains_source() {
        let img = ImageBuffer::from_fn(8, 6, |x, y| [x as u8, y as u8, 200]).unwrap();
        let (canvas, [x, y, w, h]) = crop_layout(&img, 11).unwrap();
        assert_eq!((canvas.width(), canvas.height()), (16, 12));
        assert_eq!(imagekit::crop(&canvas, x, y, w, h).unwrap(), img);
    }
}
