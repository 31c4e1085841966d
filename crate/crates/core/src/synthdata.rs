//! Synthetic correlated-attribute image dataset with a known joint label
//! distribution, so correlation metrics can be validated against exact
//! ground truth. Also reads and writes the big-endian IDX container format
//! for an optional real-digit track.
//!
//! Rendered pixel values are snapped to the u8 grid at generation time, so
//! the on-disk container holds the training data losslessly.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngstream::derive_rng;
use crate::Image;

/// Binary attribute set with an explicit joint probability table over all
/// 2^n combinations. Bit `i` of a table index carries attribute `i`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttributeSpec {
    pub names: Vec<String>,
    pub joint: Vec<f64>,
}

impl AttributeSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.names.len();
        if n == 0 || n > 16 {
            return Err(Error::InvalidConfig(format!(
                "attribute count {} outside 1..=16",
                n
            )));
        }
        if self.joint.len() != 1 << n {
            return Err(Error::InvalidConfig(format!(
                "joint table has {} cells, expected {}",
                self.joint.len(),
                1 << n
            )));
        }
        if self.joint.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidConfig("joint entries must be >= 0".into()));
        }
        let total: f64 = self.joint.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "joint table sums to {}, expected 1",
                total
            )));
        }
        Ok(())
    }

    pub fn num_attributes(&self) -> usize {
        self.names.len()
    }

    /// P(attribute i = 1).
    pub fn marginal(&self, i: usize) -> f64 {
        self.joint
            .iter()
            .enumerate()
            .filter(|(cell, _)| cell >> i & 1 == 1)
            .map(|(_, p)| p)
            .sum()
    }

    /// P(attribute i = 1 and attribute j = 1).
    pub fn pair_prob(&self, i: usize, j: usize) -> f64 {
        self.joint
            .iter()
            .enumerate()
            .filter(|(cell, _)| cell >> i & 1 == 1 && cell >> j & 1 == 1)
            .map(|(_, p)| p)
            .sum()
    }

    /// Default 4-attribute layout: shape kind, fill color, stripe and
    /// background, with one strong cross-correlation (shape-color, r = 0.6)
    /// and one weak (stripe-background, r = 0.2). Marginals are all 0.5.
    pub fn default_correlated() -> Self {
        let names = vec![
            "cross_shape".to_string(),
            "cool_fill".to_string(),
            "stripe".to_string(),
            "light_background".to_string(),
        ];
        // Two independent coupled pairs: P(a0 = a1) = 0.8, P(a2 = a3) = 0.6.
        let p01 = |a: usize, b: usize| if a == b { 0.4 } else { 0.1 };
        let p23 = |a: usize, b: usize| if a == b { 0.3 } else { 0.2 };
        let mut joint = vec![0.0; 16];
        for (cell, slot) in joint.iter_mut().enumerate() {
            let bits = [cell & 1, cell >> 1 & 1, cell >> 2 & 1, cell >> 3 & 1];
            *slot = p01(bits[0], bits[1]) * p23(bits[2], bits[3]);
        }
        AttributeSpec { names, joint }
    }
}

/// Draws one attribute vector from the joint table by CDF inversion.
pub fn sample_attributes(spec: &AttributeSpec, rng: &mut impl Rng) -> Result<Vec<bool>> {
    spec.validate()?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = spec.joint.len() - 1;
    for (cell, p) in spec.joint.iter().enumerate() {
        acc += p;
        if u < acc {
            chosen = cell;
            break;
        }
    }
    Ok((0..spec.num_attributes())
        .map(|i| chosen >> i & 1 == 1)
        .collect())
}

/// Exact Pearson correlations implied by the joint table, in closed form for
/// binary variables. Degenerate marginals (p in {0, 1}) yield `None`.
pub fn compute_ground_truth_correlations(spec: &AttributeSpec) -> Result<Vec<Vec<Option<f64>>>> {
    spec.validate()?;
    let n = spec.num_attributes();
    let marginals: Vec<f64> = (0..n).map(|i| spec.marginal(i)).collect();
    let variances: Vec<f64> = marginals.iter().map(|p| p * (1.0 - p)).collect();
    let mut out = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if variances[i] <= 0.0 || variances[j] <= 0.0 {
                continue;
            }
            if i == j {
                out[i][j] = Some(1.0);
                continue;
            }
            let cov = spec.pair_prob(i, j) - marginals[i] * marginals[j];
            out[i][j] = Some(cov / (variances[i] * variances[j]).sqrt());
        }
    }
    Ok(out)
}

fn smoothstep(edge: f64) -> f64 {
    let x = (edge * 0.5 + 0.5).clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Renders one image for an attribute vector. Each attribute controls one
/// visually separable factor; geometry is jittered from the provided stream.
/// Pixels are quantized to the u8 grid and mapped to [-1, 1].
pub fn render_image(attributes: &[bool], resolution: usize, rng: &mut impl Rng) -> Result<Image> {
    if attributes.len() != 4 {
        return Err(Error::InvalidConfig(format!(
            "renderer expects 4 attributes, got {}",
            attributes.len()
        )));
    }
    if !(16..=256).contains(&resolution) {
        return Err(Error::InvalidConfig(format!(
            "unsupported resolution {}",
            resolution
        )));
    }
    let res = resolution as f64;
    let [cross, cool_fill, stripe, light_bg] =
        [attributes[0], attributes[1], attributes[2], attributes[3]];

    let cx = res * (0.5 + rng.gen_range(-0.08..0.08));
    let cy = res * (0.5 + rng.gen_range(-0.08..0.08));
    let size = res * rng.gen_range(0.26..0.34);
    let stripe_row = res * rng.gen_range(0.30..0.70);
    let stripe_half = res * 0.08;
    let tint: [f64; 3] = [
        rng.gen_range(-0.03..0.03),
        rng.gen_range(-0.03..0.03),
        rng.gen_range(-0.03..0.03),
    ];

    let bg: [f64; 3] = if light_bg {
        [0.82, 0.80, 0.74]
    } else {
        [0.13, 0.13, 0.19]
    };
    let fill: [f64; 3] = if cool_fill {
        [0.22, 0.45, 0.85]
    } else {
        [0.86, 0.38, 0.18]
    };

    let mut img = Array3::<f64>::zeros((3, resolution, resolution));
    for y in 0..resolution {
        for x in 0..resolution {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            // Signed distance to the shape boundary, positive inside.
            let d = if cross {
                // Union of a horizontal and a vertical bar.
                let arm = size * 0.34;
                let h = (size - (fx - cx).abs()).min(arm - (fy - cy).abs());
                let v = (arm - (fx - cx).abs()).min(size - (fy - cy).abs());
                h.max(v)
            } else {
                size - ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt()
            };
            let alpha = smoothstep(d / 1.3);
            let mut px = [0.0f64; 3];
            for c in 0..3 {
                px[c] = bg[c] * (1.0 - alpha) + fill[c] * alpha + tint[c];
            }
            if stripe {
                let sd = stripe_half - (fy - stripe_row).abs();
                let sa = 0.55 * smoothstep(sd / 1.3);
                for p in px.iter_mut() {
                    *p = *p * (1.0 - sa) + sa;
                }
            }
            for c in 0..3 {
                let v8 = (px[c].clamp(0.0, 1.0) * 255.0).round() as u8;
                img[[c, y, x]] = v8 as f64 / 127.5 - 1.0;
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
    pub spec: AttributeSpec,
    /// Samples `0..train_end` form the training split, the rest validation.
    pub train_end: usize,
    pub marginals: Vec<f64>,
    pub ground_truth_correlations: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<Vec<bool>>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn train_images(&self) -> &[Image] {
        &self.images[..self.manifest.train_end]
    }

    pub fn train_labels(&self) -> &[Vec<bool>] {
        &self.labels[..self.manifest.train_end]
    }

    pub fn val_images(&self) -> &[Image] {
        &self.images[self.manifest.train_end..]
    }

    pub fn val_labels(&self) -> &[Vec<bool>] {
        &self.labels[self.manifest.train_end..]
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.manifest.spec.names
    }
}

/// Generates `count` labeled images. Per-image streams are derived from the
/// seed and index, so generation is order-independent and reproducible.
pub fn generate_dataset(
    spec: &AttributeSpec,
    count: usize,
    resolution: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidConfig("train_fraction outside [0, 1]".into()));
    }
    use rayon::prelude::*;
    let pairs: Vec<(Vec<bool>, Image)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng: ChaCha8Rng = derive_rng(seed, &format!("sample/{}", i));
            let attrs = sample_attributes(spec, &mut rng)?;
            let img = render_image(&attrs, resolution, &mut rng)?;
            Ok((attrs, img))
        })
        .collect::<Result<_>>()?;
    let (labels, images): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let train_end = ((count as f64) * train_fraction).round() as usize;
    let manifest = DatasetManifest {
        count,
        resolution,
        channels: 3,
        seed,
        spec: spec.clone(),
        train_end: train_end.min(count),
        marginals: (0..spec.num_attributes())
            .map(|i| spec.marginal(i))
            .collect(),
        ground_truth_correlations: compute_ground_truth_correlations(spec)?,
    };
    Ok(Dataset {
        images,
        labels,
        manifest,
    })
}

// ---------------------------------------------------------------------------
// IDX container
// ---------------------------------------------------------------------------

const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
const IDX_MAGIC_IMAGES_3D: u32 = 0x0000_0803;
const IDX_MAGIC_IMAGES_4D: u32 = 0x0000_0804;

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::IdxFormat("truncated header".into()))?;
    Ok(u32::from_be_bytes(buf))
}

fn image_to_u8(img: &Image) -> Vec<u8> {
    img.iter()
        .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn u8_to_image(bytes: &[u8], channels: usize, h: usize, w: usize) -> Image {
    Array3::from_shape_vec(
        (channels, h, w),
        bytes.iter().map(|b| *b as f64 / 127.5 - 1.0).collect(),
    )
    .expect("image shape")
}

/// Writes images as a u8 IDX tensor: 3-dim (count, rows, cols) for single
/// channel, 4-dim (count, channels, rows, cols) otherwise.
pub fn write_idx_images(path: &Path, images: &[Image]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no images to write".into()));
    }
    let (c, h, w) = images[0].dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if c == 1 {
        f.write_all(&IDX_MAGIC_IMAGES_3D.to_be_bytes())?;
        f.write_all(&(images.len() as u32).to_be_bytes())?;
        f.write_all(&(h as u32).to_be_bytes())?;
        f.write_all(&(w as u32).to_be_bytes())?;
    } else {
        f.write_all(&IDX_MAGIC_IMAGES_4D.to_be_bytes())?;
        f.write_all(&(images.len() as u32).to_be_bytes())?;
        f.write_all(&(c as u32).to_be_bytes())?;
        f.write_all(&(h as u32).to_be_bytes())?;
        f.write_all(&(w as u32).to_be_bytes())?;
    }
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", (c, h, w)),
                got: format!("{:?}", img.dim()),
            });
        }
        f.write_all(&image_to_u8(img))?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a u8 IDX image tensor (3- or 4-dimensional).
pub fn read_idx_images(path: &Path) -> Result<Vec<Image>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_u32_be(&mut f)?;
    let with_channel_dim = match magic {
        IDX_MAGIC_IMAGES_3D => false,
        IDX_MAGIC_IMAGES_4D => true,
        other => return Err(Error::IdxFormat(format!("bad image magic 0x{:08x}", other))),
    };
    let count = read_u32_be(&mut f)? as usize;
    let channels = if with_channel_dim {
        read_u32_be(&mut f)? as usize
    } else {
        1
    };
    let h = read_u32_be(&mut f)? as usize;
    let w = read_u32_be(&mut f)? as usize;
    let per = channels * h * w;
    let mut images = Vec::with_capacity(count);
    let mut buf = vec![0u8; per];
    for i in 0..count {
        f.read_exact(&mut buf).map_err(|_| {
            Error::IdxFormat(format!("truncated payload at image {} of {}", i, count))
        })?;
        images.push(u8_to_image(&buf, channels, h, w));
    }
    Ok(images)
}

const IDX_MAGIC_F64_3D: u32 = 0x0000_0E03;
const IDX_MAGIC_F64_4D: u32 = 0x0000_0E04;

/// Writes images as a double-precision IDX tensor (dtype byte 0x0E),
/// preserving values exactly. Used for explanation artifacts.
pub fn write_idx_images_f64(path: &Path, images: &[Image]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no images to write".into()));
    }
    let (c, h, w) = images[0].dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if c == 1 {
        f.write_all(&IDX_MAGIC_F64_3D.to_be_bytes())?;
        f.write_all(&(images.len() as u32).to_be_bytes())?;
    } else {
        f.write_all(&IDX_MAGIC_F64_4D.to_be_bytes())?;
        f.write_all(&(images.len() as u32).to_be_bytes())?;
        f.write_all(&(c as u32).to_be_bytes())?;
    }
    f.write_all(&(h as u32).to_be_bytes())?;
    f.write_all(&(w as u32).to_be_bytes())?;
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", (c, h, w)),
                got: format!("{:?}", img.dim()),
            });
        }
        for v in img.iter() {
            f.write_all(&v.to_be_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_idx_images_f64(path: &Path) -> Result<Vec<Image>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_u32_be(&mut f)?;
    let with_channel_dim = match magic {
        IDX_MAGIC_F64_3D => false,
        IDX_MAGIC_F64_4D => true,
        other => {
            return Err(Error::IdxFormat(format!(
                "bad f64 image magic 0x{:08x}",
                other
            )))
        }
    };
    let count = read_u32_be(&mut f)? as usize;
    let channels = if with_channel_dim {
        read_u32_be(&mut f)? as usize
    } else {
        1
    };
    let h = read_u32_be(&mut f)? as usize;
    let w = read_u32_be(&mut f)? as usize;
    let mut images = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for i in 0..count {
        let mut data = Vec::with_capacity(channels * h * w);
        for _ in 0..channels * h * w {
            f.read_exact(&mut buf).map_err(|_| {
                Error::IdxFormat(format!("truncated f64 payload at image {} of {}", i, count))
            })?;
            data.push(f64::from_be_bytes(buf));
        }
        images.push(Array3::from_shape_vec((channels, h, w), data).expect("image shape"));
    }
    Ok(images)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&IDX_MAGIC_LABELS.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    f.flush()?;
    Ok(())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::IdxFormat(format!("bad label magic 0x{:08x}", magic)));
    }
    let count = read_u32_be(&mut f)? as usize;
    let mut labels = vec![0u8; count];
    f.read_exact(&mut labels)
        .map_err(|_| Error::IdxFormat("truncated label payload".into()))?;
    Ok(labels)
}

/// Predicate mapping a class label byte to a binary attribute.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelPredicate {
    /// Odd class labels are positive.
    Parity,
    /// Positive iff label >= threshold.
    Threshold { threshold: u8 },
    /// Positive iff label == value.
    Equals { value: u8 },
}

impl LabelPredicate {
    pub fn apply(&self, label: u8) -> bool {
        match self {
            LabelPredicate::Parity => label % 2 == 1,
            LabelPredicate::Threshold { threshold } => label >= *threshold,
            LabelPredicate::Equals { value } => label == *value,
        }
    }

    pub fn name(&self) -> String {
        match self {
            LabelPredicate::Parity => "parity".into(),
            LabelPredicate::Threshold { threshold } => format!("ge_{}", threshold),
            LabelPredicate::Equals { value } => format!("eq_{}", value),
        }
    }
}

/// Ingests a canonical IDX image/label pair, deriving binary attributes from
/// the class labels. Empirical statistics stand in for the joint table.
pub fn ingest_idx(
    images_path: &Path,
    labels_path: &Path,
    predicates: &[LabelPredicate],
    train_fraction: f64,
) -> Result<Dataset> {
    if predicates.is_empty() {
        return Err(Error::InvalidConfig("no label predicates".into()));
    }
    let images = read_idx_images(images_path)?;
    let raw_labels = read_idx_labels(labels_path)?;
    if images.len() != raw_labels.len() {
        return Err(Error::IdxFormat(format!(
            "{} images but {} labels",
            images.len(),
            raw_labels.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::EmptyInput("empty idx dataset".into()));
    }
    let labels: Vec<Vec<bool>> = raw_labels
        .iter()
        .map(|l| predicates.iter().map(|p| p.apply(*l)).collect())
        .collect();
    let n = predicates.len();
    // Empirical joint table over the derived attributes.
    let mut joint = vec![0.0; 1 << n];
    for lab in &labels {
        let mut cell = 0usize;
        for (i, v) in lab.iter().enumerate() {
            if *v {
                cell |= 1 << i;
            }
        }
        joint[cell] += 1.0;
    }
    for p in joint.iter_mut() {
        *p /= labels.len() as f64;
    }
    let spec = AttributeSpec {
        names: predicates.iter().map(|p| p.name()).collect(),
        joint,
    };
    let (c, h, w) = images[0].dim();
    if h != w {
        return Err(Error::InvalidDataset(format!(
            "non-square images {}x{}",
            h, w
        )));
    }
    let count = images.len();
    let train_end = ((count as f64) * train_fraction).round() as usize;
    let manifest = DatasetManifest {
        count,
        resolution: h,
        channels: c,
        seed: 0,
        spec: spec.clone(),
        train_end: train_end.min(count),
        marginals: (0..n).map(|i| spec.marginal(i)).collect(),
        ground_truth_correlations: compute_ground_truth_correlations(&spec)?,
    };
    Ok(Dataset {
        images,
        labels,
        manifest,
    })
}

/// Writes a dataset directory: IDX image container, labels CSV and the JSON
/// manifest.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_idx_images(&dir.join("images.idx"), &dataset.images)?;
    let mut csv = String::new();
    csv.push_str("index");
    for name in dataset.attribute_names() {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for (i, lab) in dataset.labels.iter().enumerate() {
        csv.push_str(&i.to_string());
        for v in lab {
            csv.push(',');
            csv.push(if *v { '1' } else { '0' });
        }
        csv.push('\n');
    }
    std::fs::write(dir.join("labels.csv"), csv)?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(dir.join("manifest.json"), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let images = read_idx_images(&dir.join("images.idx"))?;
    let text = std::fs::read_to_string(dir.join("labels.csv"))?;
    let mut labels = Vec::with_capacity(images.len());
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != manifest.spec.num_attributes() + 1 {
            return Err(Error::InvalidDataset(format!(
                "labels.csv line {} has {} fields",
                ln,
                fields.len()
            )));
        }
        labels.push(fields[1..].iter().map(|f| *f == "1").collect());
    }
    if labels.len() != images.len() {
        return Err(Error::InvalidDataset(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    Ok(Dataset {
        images,
        labels,
        manifest,
    })
}
