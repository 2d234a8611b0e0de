//! Synthetic imbalanced lesion volumes, frozen prompt files, dataset
//! manifests, and ingestion of externally prepared volumes.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{PointLabel, PromptPoint, PromptSet, VolumeSample};
use crate::error::{Error, Result};
use crate::params::named_rng;
use crate::tensor::Tensor;

/// Maximum generation attempts before a lesion target is declared unreachable.
pub const MAX_ATTEMPTS: usize = 20;
/// Standard-deviation floor for z-scoring.
pub const SIGMA_FLOOR: f64 = 1e-8;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipsoid,
    /// Union of 2 to 5 overlapping ellipsoids with perturbed radii.
    Lobulated,
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipsoid" => Ok(ShapeFamily::Ellipsoid),
            "lobulated" => Ok(ShapeFamily::Lobulated),
            other => Err(Error::Config(format!(
                "unknown shape family {other:?} (expected ellipsoid or lobulated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSpec {
    pub n_fg: usize,
    pub n_bg: usize,
    pub seed: u64,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            n_fg: 1,
            n_bg: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub volume_shape: [usize; 3],
    /// Inclusive bounds on the realised lesion fraction.
    pub lesion_fraction_range: (f64, f64),
    pub shape_family: ShapeFamily,
    /// Lesion-minus-background mean offset, in units of `noise_sigma`.
    pub intensity_contrast: f64,
    pub noise_sigma: f64,
    pub count: usize,
    pub seed: u64,
    pub spacing: [f64; 3],
    pub prompts: PromptSpec,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            volume_shape: [32, 32, 32],
            lesion_fraction_range: (0.005, 0.02),
            shape_family: ShapeFamily::Lobulated,
            intensity_contrast: 2.0,
            noise_sigma: 1.0,
            count: 100,
            seed: 42,
            spacing: [1.0; 3],
            prompts: PromptSpec::default(),
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lesion_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.2) {
            return Err(Error::Config(format!(
                "lesion_fraction_range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 0.2"
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if self.volume_shape.contains(&0) {
            return Err(Error::Config("volume_shape extents must be positive".into()));
        }
        if !(self.noise_sigma > 0.0) || !self.intensity_contrast.is_finite() {
            return Err(Error::Config(
                "noise_sigma must be positive and intensity_contrast finite".into(),
            ));
        }
        if self.prompts.n_fg == 0 {
            return Err(Error::Config("at least one foreground prompt is required".into()));
        }
        Ok(())
    }

    pub fn sample_id(index: usize) -> String {
        format!("case_{index:03}")
    }

    /// Number of samples assigned to the training split.
    pub fn train_count(&self) -> usize {
        (TRAIN_FRACTION * self.count as f64).ceil() as usize
    }
}

/// Boolean mask of the voxels whose centres lie inside an axis-aligned
/// ellipsoid.
pub fn rasterize_ellipsoid(shape: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> Vec<bool> {
    let mut mask = vec![false; shape.iter().product()];
    paint_ellipsoid(&mut mask, shape, center, radii);
    mask
}

fn paint_ellipsoid(mask: &mut [bool], shape: [usize; 3], center: [f64; 3], radii: [f64; 3]) {
    let range = |a: usize| {
        let lo = (center[a] - radii[a]).floor().max(0.0) as usize;
        let hi = ((center[a] + radii[a]).ceil() as usize).min(shape[a] - 1);
        lo..=hi
    };
    for i in range(0) {
        let di = (i as f64 - center[0]) / radii[0];
        for j in range(1) {
            let dj = (j as f64 - center[1]) / radii[1];
            for k in range(2) {
                let dk = (k as f64 - center[2]) / radii[2];
                if di * di + dj * dj + dk * dk <= 1.0 {
                    mask[(i * shape[1] + j) * shape[2] + k] = true;
                }
            }
        }
    }
}

struct Lobe {
    offset: [f64; 3],
    radii: [f64; 3],
}

/// Draws the lesion layout at unit scale; the caller rescales the radii
/// until the rasterised volume lands in range.
fn draw_lobes(family: ShapeFamily, rng: &mut ChaCha8Rng) -> Vec<Lobe> {
    let aspect = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(0.7..1.3));
    let mut lobes = vec![Lobe {
        offset: [0.0; 3],
        radii: aspect(rng),
    }];
    if family == ShapeFamily::Lobulated {
        for _ in 1..rng.random_range(2..=5) {
            let dir = [0; 3].map(|_| rng.random_range(-1.0..1.0));
            let r = rng.random_range(0.5..0.9);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            lobes.push(Lobe {
                offset: dir.map(|v| 0.8 * v / norm),
                radii: aspect(rng).map(|a| a * r),
            });
        }
    }
    lobes
}

fn lobes_extent(lobes: &[Lobe]) -> [f64; 3] {
    [0, 1, 2].map(|a| {
        lobes
            .iter()
            .map(|l| l.offset[a].abs() + l.radii[a])
            .fold(0.0, f64::max)
    })
}

/// Generates one lesion mask whose realised fraction lies in `range`.
pub fn generate_lesion(
    shape: [usize; 3],
    range: (f64, f64),
    family: ShapeFamily,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    let n = shape.iter().product::<usize>() as f64;
    let target = rng.random_range(range.0..=range.1) * n;
    let lobes = draw_lobes(family, rng);
    let unit_volume: f64 = lobes
        .iter()
        .map(|l| 4.0 / 3.0 * PI * l.radii.iter().product::<f64>())
        .sum();
    let mut scale = (target / unit_volume).cbrt();
    let extent = lobes_extent(&lobes);
    let fit: [f64; 3] = [0; 3].map(|_| rng.random_range(0.0..1.0));
    for _ in 0..MAX_ATTEMPTS {
        let half = extent.map(|e| e * scale);
        // place it fully inside when possible, otherwise centre it and let
        // the border clip it
        let center: [f64; 3] = [0, 1, 2].map(|a| {
            let room = shape[a] as f64 - 1.0 - 2.0 * half[a];
            if room >= 0.0 {
                half[a] + fit[a] * room
            } else {
                (shape[a] as f64 - 1.0) / 2.0
            }
        });
        let mut mask = vec![false; n as usize];
        for l in &lobes {
            let c = [0, 1, 2].map(|a| center[a] + l.offset[a] * scale);
            paint_ellipsoid(&mut mask, shape, c, l.radii.map(|r| r * scale));
        }
        let count = mask.iter().filter(|&&b| b).count() as f64;
        let fraction = count / n;
        if (range.0..=range.1).contains(&fraction) {
            return Ok(mask);
        }
        // overshoot shrinks, undershoot grows; both aim at the target volume
        scale *= (target / count.max(1.0)).cbrt();
    }
    Err(Error::InvalidInput(format!(
        "could not realise a lesion fraction in {range:?} for volume {shape:?} after {MAX_ATTEMPTS} attempts"
    )))
}

/// z-scores the nonzero voxels in place; a degenerate spread falls back to a
/// unit divisor so constant images map to zero.
pub fn zscore_nonzero(data: &mut [f64]) {
    let nz: Vec<f64> = data.iter().copied().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        return;
    }
    let mean = nz.iter().sum::<f64>() / nz.len() as f64;
    let var = nz.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nz.len() as f64;
    let sd = var.sqrt();
    let sd = if sd < SIGMA_FLOOR { 1.0 } else { sd };
    for v in data.iter_mut().filter(|v| **v != 0.0) {
        *v = (*v - mean) / sd;
    }
}

/// Generates the sample at `index`; it depends only on `(spec.seed, index)`.
pub fn generate_sample(spec: &GenSpec, index: usize) -> Result<VolumeSample> {
    let id = GenSpec::sample_id(index);
    let mut rng = named_rng(spec.seed, &format!("synthdata.{id}"));
    let shape = spec.volume_shape;
    let mask = generate_lesion(shape, spec.lesion_fraction_range, spec.shape_family, &mut rng)?;

    // smooth background: a few random low-frequency plane waves
    let waves: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let k = [0; 3].map(|_| rng.random_range(-1.0..1.0) * 2.0 * PI / 16.0);
            (k, rng.random_range(0.0..2.0 * PI), rng.random_range(0.2..0.5))
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let lift = spec.intensity_contrast * spec.noise_sigma;
    let mut image = Vec::with_capacity(mask.len());
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let pos = [i as f64, j as f64, k as f64];
                let mut v: f64 = waves
                    .iter()
                    .map(|(kv, phase, amp)| {
                        amp * spec.noise_sigma
                            * (kv[0] * pos[0] + kv[1] * pos[1] + kv[2] * pos[2] + phase).cos()
                    })
                    .sum();
                v += noise.sample(&mut rng);
                if mask[image.len()] {
                    v += lift;
                }
                image.push(v);
            }
        }
    }
    zscore_nonzero(&mut image);
    let label = mask.iter().map(|&b| f64::from(u8::from(b))).collect();
    VolumeSample::new(
        Tensor::new(shape.to_vec(), image)?,
        Tensor::new(shape.to_vec(), label)?,
        spec.spacing,
        id,
    )
}

/// 6-connected components of the foreground, largest first (ties by lowest
/// flat index).
fn components(label: &[bool], shape: [usize; 3]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; label.len()];
    let mut out = Vec::new();
    for start in 0..label.len() {
        if !label[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            comp.push(v);
            for n in neighbours(v, shape).into_iter().flatten() {
                if label[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    out
}

fn neighbours(v: usize, [h, w, d]: [usize; 3]) -> [Option<usize>; 6] {
    let (i, j, k) = (v / (w * d), (v / d) % w, v % d);
    [
        (i > 0).then(|| v - w * d),
        (i + 1 < h).then(|| v + w * d),
        (j > 0).then(|| v - d),
        (j + 1 < w).then(|| v + d),
        (k > 0).then(|| v - 1),
        (k + 1 < d).then(|| v + 1),
    ]
}

fn point(v: usize, [_, w, d]: [usize; 3], label: PointLabel) -> PromptPoint {
    PromptPoint {
        x: v / (w * d),
        y: (v / d) % w,
        z: v % d,
        label,
    }
}

/// Seeded prompt points: foreground points come from the interior of the
/// largest lesion component when it has enough, then the rest of that
/// component, then other components; background points are uniform.
pub fn sample_prompts(
    label: &Tensor,
    n_fg: usize,
    n_bg: usize,
    seed: u64,
    sample_id: &str,
) -> Result<PromptSet> {
    let shape: [usize; 3] = label
        .shape()
        .try_into()
        .map_err(|_| Error::InvalidInput(format!("{sample_id}: label must be 3D")))?;
    let fg: Vec<bool> = label.data().iter().map(|&v| v == 1.0).collect();
    let fg_count = fg.iter().filter(|&&b| b).count();
    if fg_count < n_fg {
        return Err(Error::InvalidInput(format!(
            "{sample_id}: {n_fg} foreground prompts requested but the label has {fg_count} lesion voxels"
        )));
    }
    let bg: Vec<usize> = (0..fg.len()).filter(|&v| !fg[v]).collect();
    if bg.len() < n_bg {
        return Err(Error::InvalidInput(format!(
            "{sample_id}: {n_bg} background prompts requested but only {} background voxels",
            bg.len()
        )));
    }
    let mut rng = named_rng(seed, &format!("prompts.{sample_id}"));
    let comps = components(&fg, shape);
    let mut tiers: Vec<Vec<usize>> = Vec::new();
    if let Some(largest) = comps.first() {
        let (interior, rim): (Vec<usize>, Vec<usize>) = largest.iter().partition(|&&v| {
            neighbours(v, shape)
                .iter()
                .all(|n| n.is_some_and(|n| fg[n]))
        });
        tiers.push(interior);
        tiers.push(rim);
        tiers.push(comps[1..].iter().flatten().copied().collect());
    }
    let mut points = Vec::with_capacity(n_fg + n_bg);
    let mut remaining = n_fg;
    for tier in tiers {
        if remaining == 0 {
            break;
        }
        let take = remaining.min(tier.len());
        for i in sample_indices(&mut rng, tier.len(), take) {
            points.push(point(tier[i], shape, PointLabel::Foreground));
        }
        remaining -= take;
    }
    for i in sample_indices(&mut rng, bg.len(), n_bg) {
        points.push(point(bg[i], shape, PointLabel::Background));
    }
    Ok(PromptSet::new(points, sample_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub dtype: String,
    pub axis_order: String,
    pub spacing: [f64; 3],
    pub sample_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Paths are relative to the manifest's directory.
    pub volume_path: PathBuf,
    pub label_path: PathBuf,
    pub prompt_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub generator_spec: Option<GenSpec>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes `<stem>.json` header and `<stem>.raw` payload for image and label.
pub fn write_sample(sample: &VolumeSample, image_header: &Path, label_header: &Path) -> Result<()> {
    let header = |dtype: &str| VolumeHeader {
        shape: sample.shape(),
        dtype: dtype.into(),
        axis_order: "HWD".into(),
        spacing: sample.spacing,
        sample_id: sample.sample_id.clone(),
    };
    write_json(image_header, &header("float32"))?;
    let bytes: Vec<u8> = sample
        .image
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    let p = raw_path(image_header);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;

    write_json(label_header, &header("uint8"))?;
    let bytes: Vec<u8> = sample.label.data().iter().map(|&v| v as u8).collect();
    let p = raw_path(label_header);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
}

pub fn write_prompts(prompts: &PromptSet, path: &Path) -> Result<()> {
    write_json(path, &prompts.points)
}

pub fn read_prompts(path: &Path, sample_id: &str) -> Result<PromptSet> {
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "{sample_id}: prompt file {} is missing",
            path.display()
        )));
    }
    Ok(PromptSet::new(read_json(path)?, sample_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFormat {
    /// JSON header plus raw little-endian payload.
    RawHeader,
}

impl FromStr for VolumeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" | "raw_header" => Ok(VolumeFormat::RawHeader),
            other => Err(Error::InvalidInput(format!(
                "unsupported volume format {other:?}; only raw_header is available"
            ))),
        }
    }
}

fn read_volume(header_path: &Path) -> Result<(VolumeHeader, Vec<f64>)> {
    let header: VolumeHeader = read_json(header_path)?;
    if header.axis_order != "HWD" {
        return Err(Error::InvalidInput(format!(
            "{}: axis order {:?} is not supported",
            header_path.display(),
            header.axis_order
        )));
    }
    let p = raw_path(header_path);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let n: usize = header.shape.iter().product();
    let data: Vec<f64> = match header.dtype.as_str() {
        "float32" if bytes.len() == 4 * n => bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect(),
        "uint8" if bytes.len() == n => bytes.iter().map(|&b| f64::from(b)).collect(),
        "float32" | "uint8" => {
            return Err(Error::InvalidInput(format!(
                "{}: payload has {} bytes, header shape {:?} disagrees",
                p.display(),
                bytes.len(),
                header.shape
            )))
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported dtype {other:?}",
                header_path.display()
            )))
        }
    };
    Ok((header, data))
}

/// Loads an image/label pair, z-scores the image over its nonzero voxels and
/// checks the label is binary.
pub fn ingest_volume(image_header: &Path, label_header: &Path, format: VolumeFormat) -> Result<VolumeSample> {
    match format {
        VolumeFormat::RawHeader => {}
    }
    let (ih, mut image) = read_volume(image_header)?;
    let (lh, label) = read_volume(label_header)?;
    if ih.shape != lh.shape {
        return Err(Error::ShapeMismatch {
            context: "image vs label file",
            expected: ih.shape.to_vec(),
            actual: lh.shape.to_vec(),
        });
    }
    if let Some(v) = label.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(format!(
            "{}: label value {v} is not binary",
            label_header.display()
        )));
    }
    zscore_nonzero(&mut image);
    VolumeSample::new(
        Tensor::new(ih.shape.to_vec(), image)?,
        Tensor::new(ih.shape.to_vec(), label)?,
        ih.spacing,
        ih.sample_id,
    )
}

/// Generates the whole dataset under `out`, returning the train and test
/// manifests (also written as `train.json` / `test.json`).
pub fn generate_dataset(spec: &GenSpec, out: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let sample = generate_sample(spec, index)?;
        let id = sample.sample_id.clone();
        let entry = ManifestEntry {
            sample_id: id.clone(),
            volume_path: format!("{id}_img.json").into(),
            label_path: format!("{id}_lbl.json").into(),
            prompt_path: format!("{id}_prompts.json").into(),
        };
        write_sample(&sample, &out.join(&entry.volume_path), &out.join(&entry.label_path))?;
        let p = spec.prompts;
        let prompts = sample_prompts(&sample.label, p.n_fg, p.n_bg, p.seed, &id)?;
        write_prompts(&prompts, &out.join(&entry.prompt_path))?;
        entries.push(entry);
    }
    let test = entries.split_off(spec.train_count());
    let manifest = |split, entries| DatasetManifest {
        split,
        entries,
        generator_spec: Some(spec.clone()),
    };
    let (train, test) = (manifest(Split::Train, entries), manifest(Split::Test, test));
    train.save(&out.join("train.json"))?;
    test.save(&out.join("test.json"))?;
    Ok((train, test))
}

/// A loaded sample with its frozen prompts.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample: VolumeSample,
    pub prompts: PromptSet,
}

/// Loads every entry of a manifest, resolving paths against its directory.
pub fn load_examples(manifest_path: &Path) -> Result<(DatasetManifest, Vec<Example>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let examples = manifest
        .entries
        .iter()
        .map(|e| {
            let sample = ingest_volume(
                &root.join(&e.volume_path),
                &root.join(&e.label_path),
                VolumeFormat::RawHeader,
            )?;
            let prompts = read_prompts(&root.join(&e.prompt_path), &e.sample_id)?;
            prompts.validate(sample.shape())?;
            Ok(Example { sample, prompts })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, examples))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn small_spec() -> GenSpec {
        GenSpec {
            volume_shape: [16, 16, 16],
            count: 6,
            seed: 7,
            ..GenSpec::default()
        }
    }

    #[test]
    fn ellipsoid_matches_brute_force() {
        let (shape, c, r) = ([64; 3], [31.5, 30.0, 32.2], [4.0, 5.0, 6.0]);
        let mask = rasterize_ellipsoid(shape, c, r);
        let mut oracle = 0usize;
        for i in 0..64 {
            for j in 0..64 {
                for k in 0..64 {
                    let q = ((i as f64 - c[0]) / r[0]).powi(2)
                        + ((j as f64 - c[1]) / r[1]).powi(2)
                        + ((k as f64 - c[2]) / r[2]).powi(2);
                    oracle += usize::from(q <= 1.0);
                }
            }
        }
        let count = mask.iter().filter(|&&b| b).count();
        assert_eq!(count, oracle);
        let analytic = 4.0 / 3.0 * PI * 120.0;
        assert!((count as f64 - analytic).abs() / analytic < 0.06, "{count}");
    }

    #[test]
    fn fractions_land_in_range() {
        for family in [ShapeFamily::Ellipsoid, ShapeFamily::Lobulated] {
            for (lo, hi) in [(0.005, 0.02), (0.19, 0.2)] {
                for s in 0..10 {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let m = generate_lesion([32; 3], (lo, hi), family, &mut rng).unwrap();
                    let f = m.iter().filter(|&&b| b).count() as f64 / 32768.0;
                    assert!((lo..=hi).contains(&f), "{family:?} {f}");
                }
            }
        }
    }

    #[test]
    fn unreachable_target_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // a 2³ volume cannot realise a fraction strictly between 1/8 and 2/8
        let err = generate_lesion([2; 3], (0.13, 0.14), ShapeFamily::Ellipsoid, &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn single_voxel_lesion_is_the_prompt() {
        let mut label = Tensor::zeros(&[4, 4, 4]);
        label.data_mut()[(1 * 4 + 2) * 4 + 3] = 1.0;
        let p = sample_prompts(&label, 1, 2, 0, "s").unwrap();
        assert_eq!((p.points[0].x, p.points[0].y, p.points[0].z), (1, 2, 3));
        assert!(p.points[1..].iter().all(|q| q.label == PointLabel::Background));
        assert!(sample_prompts(&label, 2, 0, 0, "s").is_err());
    }

    #[test]
    fn prompts_prefer_interior_and_respect_labels() {
        let spec = small_spec();
        let s = generate_sample(&spec, 0).unwrap();
        let a = sample_prompts(&s.label, 3, 3, 5, "x").unwrap();
        assert_eq!(a, sample_prompts(&s.label, 3, 3, 5, "x").unwrap());
        for p in &a.points {
            let v = s.label.data()[(p.x * 16 + p.y) * 16 + p.z];
            assert_eq!(v, if p.label == PointLabel::Foreground { 1.0 } else { 0.0 });
        }
        let one = sample_prompts(&s.label, 1, 0, 5, "x").unwrap().points[0];
        let fg = |x: usize, y: usize, z: usize| s.label.data()[(x * 16 + y) * 16 + z] == 1.0;
        assert!(fg(one.x + 1, one.y, one.z) && fg(one.x - 1, one.y, one.z));
    }

    #[test]
    fn dataset_is_deterministic_and_round_trips() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = small_spec();
        let (train, test) = generate_dataset(&spec, a.path()).unwrap();
        generate_dataset(&spec, b.path()).unwrap();
        assert_eq!((train.entries.len(), test.entries.len()), (5, 1));
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap());
        }
        let (_, ex) = load_examples(&a.path().join("train.json")).unwrap();
        let orig = generate_sample(&spec, 0).unwrap();
        assert_eq!(ex[0].sample.label, orig.label);
        for (x, y) in ex[0].sample.image.data().iter().zip(orig.image.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn ingestion_validates() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = generate_sample(&small_spec(), 1).unwrap();
        s.image.data_mut().fill(4.0);
        let (img, lbl) = (dir.path().join("i.json"), dir.path().join("l.json"));
        write_sample(&s, &img, &lbl).unwrap();
        let back = ingest_volume(&img, &lbl, VolumeFormat::RawHeader).unwrap();
        assert!(back.image.data().iter().all(|&v| v == 0.0));

        let mut raw = fs::read(lbl.with_extension("raw")).unwrap();
        raw[0] = 2;
        fs::write(lbl.with_extension("raw"), raw).unwrap();
        assert!(ingest_volume(&img, &lbl, VolumeFormat::RawHeader).is_err());
        assert!("nifti".parse::<VolumeFormat>().is_err());
    }

    #[test]
    fn missing_prompt_file_names_the_sample() {
        let err = read_prompts(Path::new("/nonexistent/p.json"), "case_9").unwrap_err();
        assert!(err.to_string().contains("case_9"));
    }
}
