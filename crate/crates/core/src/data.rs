//! Volume I/O, resampling, sample cropping and labeling, subimage generation
//! for sequence training, and the synthetic spine phantom.
//!
//! Axis convention throughout: [longitudinal, frontal, sagittal] = [z, y, x],
//! matching the `[1, D, H, W]` tensor layout. Annotations are stored in
//! millimeters; voxel coordinates are millimeters divided by the spacing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpineError};
use crate::losses::SampleTarget;
use crate::net::GRID_STRIDE;
use crate::tensor::Tensor;

/// The 26 vertebra names in anatomical order; index = integer label.
pub const LABEL_NAMES: [&str; 26] = [
    "C1", "C2", "C3", "C4", "C5", "C6", "C7", "T1", "T2", "T3", "T4", "T5", "T6", "T7", "T8",
    "T9", "T10", "T11", "T12", "L1", "L2", "L3", "L4", "L5", "S1", "S2",
];

pub fn label_name(index: usize) -> &'static str {
    LABEL_NAMES[index]
}

pub fn label_index(name: &str) -> Option<usize> {
    LABEL_NAMES.iter().position(|&n| n == name)
}

/// A 3D image with voxel spacing in millimeters per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// [1, D, H, W]
    pub intensities: Tensor,
    pub spacing_mm: [f64; 3],
}

impl Volume {
    pub fn new(intensities: Tensor, spacing_mm: [f64; 3]) -> Result<Volume> {
        let s = intensities.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(SpineError::shape("Volume", "[1, D, H, W]", format!("{s:?}")));
        }
        if spacing_mm.iter().any(|&v| v <= 0.0) {
            return Err(SpineError::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing_mm:?}"
            )));
        }
        Ok(Volume {
            intensities,
            spacing_mm,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.intensities.shape();
        [s[1], s[2], s[3]]
    }
}

/// One labeled vertebra centroid, in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub label: usize,
    pub centroid_mm: [f64; 3],
}

/// Per-volume ground truth: unique labels with millimeter centroids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub entries: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 26];
        for e in &self.entries {
            if e.label >= 26 {
                return Err(SpineError::InvalidArgument(format!(
                    "annotation label index {} out of range",
                    e.label
                )));
            }
            if seen[e.label] {
                return Err(SpineError::InvalidArgument(format!(
                    "duplicate annotation label {}",
                    label_name(e.label)
                )));
            }
            seen[e.label] = true;
        }
        Ok(())
    }

    /// (label, centroid in voxel coordinates) under the given spacing.
    pub fn centroid_voxels(&self, spacing_mm: [f64; 3]) -> Vec<(usize, [f64; 3])> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.label,
                    [
                        e.centroid_mm[0] / spacing_mm[0],
                        e.centroid_mm[1] / spacing_mm[1],
                        e.centroid_mm[2] / spacing_mm[2],
                    ],
                )
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct VvolHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFileEntry {
    label: String,
    centroid_mm: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    entries: Vec<AnnotationFileEntry>,
}

/// Sidecar path for a `.vvol` file: `<name>.ann.json`.
pub fn sidecar_path(volume_path: &Path) -> PathBuf {
    volume_path.with_extension("ann.json")
}

/// Writes a volume as a one-line JSON header plus raw little-endian f32
/// payload, and the annotation sidecar when given.
pub fn save_volume(path: &Path, volume: &Volume, annotations: Option<&AnnotationSet>) -> Result<()> {
    let header = VvolHeader {
        dims: volume.dims(),
        spacing_mm: volume.spacing_mm,
        dtype: "f32le".into(),
    };
    let file = File::create(path).map_err(|e| SpineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = serde_json::to_string(&header)?;
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(|e| SpineError::io(path, e))?;
    let mut bytes = Vec::with_capacity(volume.intensities.len() * 4);
    for &v in volume.intensities.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| SpineError::io(path, e))?;
    w.flush().map_err(|e| SpineError::io(path, e))?;

    if let Some(ann) = annotations {
        ann.validate()?;
        let file = AnnotationFile {
            entries: ann
                .entries
                .iter()
                .map(|e| AnnotationFileEntry {
                    label: label_name(e.label).to_string(),
                    centroid_mm: e.centroid_mm,
                })
                .collect(),
        };
        let sp = sidecar_path(path);
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(&sp, json).map_err(|e| SpineError::io(sp, e))?;
    }
    Ok(())
}

/// Reads a `.vvol` volume and its annotation sidecar if present.
pub fn load_volume(path: &Path) -> Result<(Volume, Option<AnnotationSet>)> {
    let file = File::open(path).map_err(|e| SpineError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| SpineError::io(path, e))?;
    let header: VvolHeader = serde_json::from_str(line.trim_end()).map_err(|e| SpineError::BadData {
        path: path.to_path_buf(),
        reason: format!("malformed header: {e}"),
    })?;
    if header.dtype != "f32le" {
        return Err(SpineError::BadData {
            path: path.to_path_buf(),
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let n: usize = header.dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| SpineError::BadData {
        path: path.to_path_buf(),
        reason: format!("payload shorter than {n} f32 values"),
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| SpineError::io(path, e))? != 0 {
        return Err(SpineError::BadData {
            path: path.to_path_buf(),
            reason: "payload longer than header dims".into(),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let tensor = Tensor::from_vec(&[1, header.dims[0], header.dims[1], header.dims[2]], data)?;
    let volume = Volume::new(tensor, header.spacing_mm)?;

    let sp = sidecar_path(path);
    let annotations = if sp.exists() {
        let text = std::fs::read_to_string(&sp).map_err(|e| SpineError::io(&sp, e))?;
        Some(parse_annotations(&text, &sp)?)
    } else {
        None
    };
    Ok((volume, annotations))
}

/// Parses an annotation sidecar, rejecting unknown label names with the
/// position of the offending entry.
pub fn parse_annotations(text: &str, path: &Path) -> Result<AnnotationSet> {
    let parsed: AnnotationFile = serde_json::from_str(text).map_err(|e| SpineError::BadData {
        path: path.to_path_buf(),
        reason: format!("malformed annotation file: {e}"),
    })?;
    let mut entries = Vec::with_capacity(parsed.entries.len());
    for (i, e) in parsed.entries.iter().enumerate() {
        let label = label_index(&e.label).ok_or_else(|| SpineError::BadData {
            path: path.to_path_buf(),
            reason: format!("entry {i}: unknown label name {:?}", e.label),
        })?;
        entries.push(Annotation {
            label,
            centroid_mm: e.centroid_mm,
        });
    }
    let set = AnnotationSet { entries };
    set.validate()?;
    Ok(set)
}

fn round_up_to(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Linear interpolation; exact at t = 0 and for a == b.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Trilinearly resamples a volume to the target spacing and zero-pads each
/// dim up to the next multiple of 16. Annotations pass through unchanged
/// (millimeter coordinates are preserved by resampling).
pub fn resample(
    volume: &Volume,
    annotations: &AnnotationSet,
    target_spacing: [f64; 3],
) -> Result<(Volume, AnnotationSet)> {
    if target_spacing.iter().any(|&v| v <= 0.0) {
        return Err(SpineError::InvalidArgument(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let src_dims = volume.dims();
    let src_sp = volume.spacing_mm;
    let mut out_dims = [0usize; 3];
    let mut padded = [0usize; 3];
    for i in 0..3 {
        let extent_mm = src_dims[i] as f64 * src_sp[i];
        out_dims[i] = ((extent_mm / target_spacing[i]).round() as usize).max(1);
        padded[i] = round_up_to(out_dims[i], GRID_STRIDE);
    }

    let [d, h, w] = src_dims;
    let src = volume.intensities.data();
    let mut out = Tensor::zeros(&[1, padded[0], padded[1], padded[2]]);
    {
        let odata = out.data_mut();
        for z in 0..out_dims[0] {
            let sz = z as f64 * target_spacing[0] / src_sp[0];
            let z0 = (sz.floor() as usize).min(d - 1);
            let z1 = (z0 + 1).min(d - 1);
            let fz = sz - z0 as f64;
            for y in 0..out_dims[1] {
                let sy = y as f64 * target_spacing[1] / src_sp[1];
                let y0 = (sy.floor() as usize).min(h - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fy = sy - y0 as f64;
                for x in 0..out_dims[2] {
                    let sx = x as f64 * target_spacing[2] / src_sp[2];
                    let x0 = (sx.floor() as usize).min(w - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let fx = sx - x0 as f64;

                    let at = |zz: usize, yy: usize, xx: usize| src[(zz * h + yy) * w + xx];
                    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                    let c0 = lerp(c00, c01, fy);
                    let c1 = lerp(c10, c11, fy);
                    odata[(z * padded[1] + y) * padded[2] + x] = lerp(c0, c1, fz);
                }
            }
        }
    }
    Ok((Volume::new(out, target_spacing)?, annotations.clone()))
}

/// One fixed-size labeled crop: the CNN training unit.
#[derive(Debug, Clone)]
pub struct SampleCrop {
    pub tensor: Tensor,
    pub origin_voxel: [usize; 3],
    pub target: SampleTarget,
}

/// Applies the sample-labeling rule to a window: positive iff the box
/// contains at least one centroid; the label is the centroid closest to the
/// window centre (ties to the lower label index); the offset is centroid
/// minus origin.
pub fn window_target(
    annotations: &AnnotationSet,
    spacing_mm: [f64; 3],
    origin: [usize; 3],
    dims: [usize; 3],
) -> SampleTarget {
    let centre = [
        origin[0] as f64 + dims[0] as f64 / 2.0,
        origin[1] as f64 + dims[1] as f64 / 2.0,
        origin[2] as f64 + dims[2] as f64 / 2.0,
    ];
    let mut best: Option<(f64, usize, [f64; 3])> = None;
    for (label, c) in annotations.centroid_voxels(spacing_mm) {
        let inside = (0..3).all(|i| {
            c[i] >= origin[i] as f64 && c[i] < (origin[i] + dims[i]) as f64
        });
        if !inside {
            continue;
        }
        let d2: f64 = (0..3).map(|i| (c[i] - centre[i]) * (c[i] - centre[i])).sum();
        let candidate = (d2, label, c);
        best = match best {
            None => Some(candidate),
            Some(cur) => {
                if d2 < cur.0 || (d2 == cur.0 && label < cur.1) {
                    Some(candidate)
                } else {
                    Some(cur)
                }
            }
        };
    }
    match best {
        None => SampleTarget::background(),
        Some((_, label, c)) => SampleTarget::positive(
            label,
            [
                c[0] - origin[0] as f64,
                c[1] - origin[1] as f64,
                c[2] - origin[2] as f64,
            ],
        ),
    }
}

/// Crops a sample at `origin` and labels it per the window rule.
pub fn crop_sample(
    volume: &Volume,
    annotations: &AnnotationSet,
    origin: [usize; 3],
    dims: [usize; 3],
) -> Result<SampleCrop> {
    let tensor = volume.intensities.crop3d(origin, dims)?;
    let target = window_target(annotations, volume.spacing_mm, origin, dims);
    Ok(SampleCrop {
        tensor,
        origin_voxel: origin,
        target,
    })
}

/// Splittable per-item seed derivation (splitmix64 over the mixed words).
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A non-fatal issue met during sample generation.
#[derive(Debug, Clone)]
pub struct GenerationWarning {
    pub volume_index: usize,
    pub message: String,
}

/// Jitter half-extents of the positive-crop centre around the centroid.
const POSITIVE_JITTER: [usize; 3] = [8, 24, 20];

/// Generates labeled crops: per vertebra instance, `positives_per_vertebra`
/// crops whose centre lies in a jitter box around the centroid, plus
/// `negatives_per_vertebra` centroid-free crops per instance. Deterministic
/// for a given seed.
pub fn generate_cnn_samples(
    volumes: &[(Volume, AnnotationSet)],
    sample_dims: [usize; 3],
    positives_per_vertebra: usize,
    negatives_per_vertebra: usize,
    seed: u64,
) -> (Vec<SampleCrop>, Vec<GenerationWarning>) {
    use rand::Rng;
    use rand::SeedableRng;
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (vi, (volume, annotations)) in volumes.iter().enumerate() {
        let vol_dims = volume.dims();
        if (0..3).any(|i| vol_dims[i] < sample_dims[i]) {
            warnings.push(GenerationWarning {
                volume_index: vi,
                message: format!("volume dims {vol_dims:?} smaller than sample {sample_dims:?}"),
            });
            continue;
        }
        let max_origin = [
            vol_dims[0] - sample_dims[0],
            vol_dims[1] - sample_dims[1],
            vol_dims[2] - sample_dims[2],
        ];
        let centroids = annotations.centroid_voxels(volume.spacing_mm);
        let mut requested_negatives = 0usize;
        for (ki, (label, c)) in centroids.iter().enumerate() {
            requested_negatives += negatives_per_vertebra;
            if positives_per_vertebra == 0 {
                continue;
            }
            // Valid origin interval per axis: crop centre within the jitter
            // box and the crop inside the volume.
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            let mut feasible = true;
            for i in 0..3 {
                let jit = POSITIVE_JITTER[i].min(sample_dims[i] / 2 - 1) as f64;
                let half = sample_dims[i] as f64 / 2.0;
                let min_origin = (c[i] - jit - half).ceil().max(0.0);
                let max_o = (c[i] + jit - half).floor().min(max_origin[i] as f64);
                if max_o < min_origin {
                    feasible = false;
                    break;
                }
                lo[i] = min_origin as usize;
                hi[i] = max_o as usize;
            }
            if !feasible {
                warnings.push(GenerationWarning {
                    volume_index: vi,
                    message: format!(
                        "vertebra {} too close to the boundary for in-bounds crops",
                        label_name(*label)
                    ),
                });
                continue;
            }
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, vi as u64, ki as u64));
            for _ in 0..positives_per_vertebra {
                let origin = [
                    rng.random_range(lo[0]..=hi[0]),
                    rng.random_range(lo[1]..=hi[1]),
                    rng.random_range(lo[2]..=hi[2]),
                ];
                samples.push(crop_sample(volume, annotations, origin, sample_dims).unwrap());
            }
        }
        // Negatives: rejection-sample centroid-free windows.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(
            seed,
            vi as u64,
            0x4e45_4741_5449_5645,
        ));
        let mut produced = 0usize;
        let mut attempts = 0usize;
        let max_attempts = requested_negatives.saturating_mul(200).max(200);
        while produced < requested_negatives && attempts < max_attempts {
            attempts += 1;
            let origin = [
                rng.random_range(0..=max_origin[0]),
                rng.random_range(0..=max_origin[1]),
                rng.random_range(0..=max_origin[2]),
            ];
            let target = window_target(annotations, volume.spacing_mm, origin, sample_dims);
            if target.is_positive() {
                continue;
            }
            samples.push(crop_sample(volume, annotations, origin, sample_dims).unwrap());
            produced += 1;
        }
        if produced < requested_negatives {
            warnings.push(GenerationWarning {
                volume_index: vi,
                message: format!(
                    "only {produced} of {requested_negatives} negative crops found"
                ),
            });
        }
    }
    (samples, warnings)
}

/// Maximum subimage extents for sequence-training data.
pub const MAX_SUBIMAGE_DIMS: [usize; 3] = [96, 256, 256];

/// Cuts random subimages around each vertebra: extents are multiples of 16
/// between the sample dims and [`MAX_SUBIMAGE_DIMS`], clamped to the volume;
/// annotations are kept iff the centroid lies inside and are re-expressed
/// relative to the subimage origin. Count is `per_vertebra` per instance.
pub fn generate_rnn_subimages(
    volumes: &[(Volume, AnnotationSet)],
    sample_dims: [usize; 3],
    per_vertebra: usize,
    seed: u64,
) -> Vec<(Volume, AnnotationSet)> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut out = Vec::new();
    for (vi, (volume, annotations)) in volumes.iter().enumerate() {
        let vol_dims = volume.dims();
        if (0..3).any(|i| vol_dims[i] < sample_dims[i]) {
            continue;
        }
        let centroids = annotations.centroid_voxels(volume.spacing_mm);
        for (ki, (_, c)) in centroids.iter().enumerate() {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(
                seed ^ 0x5355_4249_4d47,
                vi as u64,
                ki as u64,
            ));
            for _ in 0..per_vertebra {
                let mut extent = [0usize; 3];
                let mut origin = [0usize; 3];
                for i in 0..3 {
                    let lo_steps = sample_dims[i] / GRID_STRIDE;
                    let hi_steps = (vol_dims[i].min(MAX_SUBIMAGE_DIMS[i])) / GRID_STRIDE;
                    let steps = rng.random_range(lo_steps..=hi_steps);
                    extent[i] = steps * GRID_STRIDE;
                    // Keep this vertebra inside when possible.
                    let max_origin = vol_dims[i] - extent[i];
                    let min_o = ((c[i].floor() as isize - extent[i] as isize + 1).max(0)) as usize;
                    let max_o = (c[i].floor() as usize).min(max_origin);
                    let (lo_o, hi_o) = if min_o <= max_o {
                        (min_o, max_o)
                    } else {
                        (0, max_origin)
                    };
                    origin[i] = rng.random_range(lo_o..=hi_o);
                }
                let tensor = volume.intensities.crop3d(origin, extent).unwrap();
                let sub_vol = Volume::new(tensor, volume.spacing_mm).unwrap();
                let mut entries = Vec::new();
                for (label, cv) in &centroids {
                    let inside = (0..3)
                        .all(|i| cv[i] >= origin[i] as f64 && cv[i] < (origin[i] + extent[i]) as f64);
                    if inside {
                        entries.push(Annotation {
                            label: *label,
                            centroid_mm: [
                                (cv[0] - origin[0] as f64) * volume.spacing_mm[0],
                                (cv[1] - origin[1] as f64) * volume.spacing_mm[1],
                                (cv[2] - origin[2] as f64) * volume.spacing_mm[2],
                            ],
                        });
                    }
                }
                out.push((sub_vol, AnnotationSet { entries }));
            }
        }
    }
    out
}

/// Parameters of the synthetic spine phantom.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Number of vertebra bodies, 4..=12.
    pub vertebra_count: usize,
    /// Anatomical index of the topmost vertebra (0 = C1).
    pub first_label: usize,
    /// In-plane bow amplitude of the centerline, voxels.
    pub curvature: f64,
    /// Per-level in-plane radius increment, voxels: the size cue that ties
    /// appearance to anatomical level.
    pub size_gradient: f64,
    /// Additive intensity noise amplitude.
    pub noise: f64,
    /// Random scatter of per-instance body radii (level cue blur).
    pub radius_jitter: f64,
    /// Longitudinal centroid spacing, voxels; must be >= 24.
    pub level_spacing: f64,
    /// In-plane dims [H, W] before rounding up to multiples of 16.
    pub in_plane: [usize; 2],
    /// Empty longitudinal margin at both ends, voxels.
    pub longitudinal_margin: usize,
    /// In-plane radius of a level-0 body, voxels.
    pub base_radius: f64,
    pub spacing_mm: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> PhantomSpec {
        PhantomSpec {
            seed: 0,
            vertebra_count: 8,
            first_label: 0,
            curvature: 2.0,
            size_gradient: 0.45,
            noise: 0.04,
            radius_jitter: 0.0,
            level_spacing: 26.0,
            in_plane: [80, 80],
            longitudinal_margin: 48,
            base_radius: 6.0,
            spacing_mm: [1.0, 1.0, 1.0],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(4..=12).contains(&self.vertebra_count) {
            return Err(SpineError::BadConfig(format!(
                "vertebra_count must be in 4..=12, got {}",
                self.vertebra_count
            )));
        }
        if self.first_label + self.vertebra_count > 26 {
            return Err(SpineError::BadConfig(format!(
                "first_label {} + count {} exceeds the 26 vertebra labels",
                self.first_label, self.vertebra_count
            )));
        }
        if self.level_spacing < 24.0 {
            return Err(SpineError::BadConfig(format!(
                "level_spacing must keep centroids >= 24 voxels apart, got {}",
                self.level_spacing
            )));
        }
        if self.spacing_mm.iter().any(|&v| v <= 0.0) {
            return Err(SpineError::BadConfig("phantom spacing must be positive".into()));
        }
        if self.base_radius <= 0.0 || self.noise < 0.0 || self.size_gradient < 0.0 {
            return Err(SpineError::BadConfig("phantom geometry values out of range".into()));
        }
        Ok(())
    }
}

/// A corpus of phantoms: per-volume seeds derived from the base seed,
/// vertebra count and starting level drawn from the given ranges.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub base_seed: u64,
    pub count: usize,
    /// Inclusive [lo, hi].
    pub vertebra_count_range: [usize; 2],
    /// Inclusive [lo, hi]; clamped so labels stay within the 26 names.
    pub first_label_range: [usize; 2],
    /// Geometry template; seed, vertebra_count and first_label are drawn
    /// per volume.
    pub template: PhantomSpec,
}

impl Default for CorpusSpec {
    fn default() -> CorpusSpec {
        CorpusSpec {
            base_seed: 1,
            count: 10,
            vertebra_count_range: [5, 10],
            first_label_range: [0, 8],
            template: PhantomSpec::default(),
        }
    }
}

/// Generates the corpus deterministically; volume i depends only on
/// (base_seed, i) and the template.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<(Volume, AnnotationSet)>> {
    use rand::Rng;
    use rand::SeedableRng;
    if spec.count == 0 {
        return Err(SpineError::BadConfig("corpus count must be positive".into()));
    }
    let [clo, chi] = spec.vertebra_count_range;
    if clo < 4 || chi > 12 || clo > chi {
        return Err(SpineError::BadConfig(format!(
            "vertebra_count_range must lie within 4..=12, got {:?}",
            spec.vertebra_count_range
        )));
    }
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(spec.base_seed, i as u64, 0x434f5250));
        let vertebra_count = rng.random_range(clo..=chi);
        let fl_hi = spec.first_label_range[1].min(26 - vertebra_count);
        let fl_lo = spec.first_label_range[0].min(fl_hi);
        let first_label = rng.random_range(fl_lo..=fl_hi);
        let phantom = PhantomSpec {
            seed: mix_seed(spec.base_seed, i as u64, 0x5048414e),
            vertebra_count,
            first_label,
            ..spec.template.clone()
        };
        out.push(synth_phantom(&phantom)?);
    }
    Ok(out)
}

/// Quantizes to 1/8 voxel so centroid coordinates are exactly representable
/// and survive the mm round trip at unit-like spacings.
fn dyadic(v: f64) -> f64 {
    (v * 8.0).round() / 8.0
}

/// Builds a phantom: smoothed ellipsoidal bodies along a gently curved
/// centerline, radius growing with the anatomical level, distinct endpoint
/// intensities, plus additive noise. Deterministic for a given seed.
pub fn synth_phantom(spec: &PhantomSpec) -> Result<(Volume, AnnotationSet)> {
    use rand::Rng;
    use rand::SeedableRng;
    spec.validate()?;
    let count = spec.vertebra_count;
    let raw_d = 2 * spec.longitudinal_margin + ((count - 1) as f64 * spec.level_spacing).ceil() as usize + 1;
    let d = round_up_to(raw_d, GRID_STRIDE);
    let h = round_up_to(spec.in_plane[0], GRID_STRIDE);
    let w = round_up_to(spec.in_plane[1], GRID_STRIDE);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let z_jitter_amp = ((spec.level_spacing - 24.0) / 2.0).clamp(0.0, 1.5);

    struct Body {
        centre: [f64; 3],
        radius_xy: f64,
        radius_z: f64,
        amplitude: f64,
        /// 0 = interior, +1 = top endpoint (bright ring), -1 = bottom
        /// endpoint (dark band).
        cap: i8,
    }

    let mut bodies = Vec::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    for k in 0..count {
        let level = spec.first_label + k;
        let phase = if count > 1 {
            k as f64 / (count - 1) as f64
        } else {
            0.5
        };
        let z = dyadic(
            spec.longitudinal_margin as f64
                + k as f64 * spec.level_spacing
                + rng.random_range(-1.0..1.0) * z_jitter_amp,
        );
        let y = dyadic(h as f64 / 2.0 + spec.curvature * (std::f64::consts::PI * phase).sin());
        let x = dyadic(w as f64 / 2.0 + 0.5 * spec.curvature * (2.0 * std::f64::consts::PI * phase).sin());
        let j_r = rng.random_range(-1.0..1.0) * spec.radius_jitter;
        let j_a = rng.random_range(-1.0..1.0) * spec.radius_jitter;
        let radius_xy = (spec.base_radius + spec.size_gradient * level as f64 + j_r).max(2.0);
        // Bodies also grow longitudinally down the column, a second level cue.
        let radius_z = (spec.base_radius * 0.8 + 0.3 * spec.size_gradient * level as f64 + 0.3 * j_r)
            .max(2.0);
        // Brightness grows with the level too; unlike the radius it never
        // clips against the window, so it stays readable at every level.
        let amplitude = 0.55 + 0.05 * spec.size_gradient * level as f64 + 0.05 * j_a;
        let cap = if k == 0 {
            1
        } else if k == count - 1 {
            -1
        } else {
            0
        };
        bodies.push(Body {
            centre: [z, y, x],
            radius_xy,
            radius_z,
            amplitude,
            cap,
        });
        entries.push(Annotation {
            label: level,
            centroid_mm: [
                z * spec.spacing_mm[0],
                y * spec.spacing_mm[1],
                x * spec.spacing_mm[2],
            ],
        });
    }

    let mut tensor = Tensor::zeros(&[1, d, h, w]);
    {
        let data = tensor.data_mut();
        for b in &bodies {
            let reach_z = (3.0 * b.radius_z).ceil() as isize;
            let reach_xy = (3.0 * b.radius_xy).ceil() as isize;
            let z_lo = (b.centre[0] as isize - reach_z).max(0) as usize;
            let z_hi = ((b.centre[0] as isize + reach_z) as usize).min(d - 1);
            let y_lo = (b.centre[1] as isize - reach_xy).max(0) as usize;
            let y_hi = ((b.centre[1] as isize + reach_xy) as usize).min(h - 1);
            let x_lo = (b.centre[2] as isize - reach_xy).max(0) as usize;
            let x_hi = ((b.centre[2] as isize + reach_xy) as usize).min(w - 1);
            for z in z_lo..=z_hi {
                let dz = (z as f64 - b.centre[0]) / b.radius_z;
                for y in y_lo..=y_hi {
                    let dy = (y as f64 - b.centre[1]) / b.radius_xy;
                    for x in x_lo..=x_hi {
                        let dx = (x as f64 - b.centre[2]) / b.radius_xy;
                        let q = dz * dz + dy * dy + dx * dx;
                        if q < 9.0 {
                            let mut v = b.amplitude * (-0.5 * q).exp();
                            // Endpoint textures: a bright concentric ring on
                            // the top body, a dark band on the bottom one.
                            if b.cap != 0 {
                                let r = q.sqrt();
                                let shell = (-0.5 * ((r - 1.7) / 0.4).powi(2)).exp();
                                v += if b.cap > 0 { 0.5 * shell } else { -0.3 * shell };
                            }
                            data[(z * h + y) * w + x] += v;
                        }
                    }
                }
            }
        }
        if spec.noise > 0.0 {
            for v in data.iter_mut() {
                *v += rng.random_range(-1.0..1.0) * spec.noise;
            }
        }
        // Pass through f32 so file round trips are lossless.
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }

    let volume = Volume::new(tensor, spec.spacing_mm)?;
    let annotations = AnnotationSet { entries };
    annotations.validate()?;
    Ok((volume, annotations))
}
