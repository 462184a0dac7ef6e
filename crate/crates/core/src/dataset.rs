//! Frame-feature datasets: the synthetic generator and the `CMH1` container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "CMH1" | version u32 | N u32 | M u32 | d u32 | has_labels u8
//! N*M*d f32 (video-major, then frame, then dim)
//! N i32 labels (only when has_labels = 1)
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const FEATURE_MAGIC: &[u8; 4] = b"CMH1";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 1;

/// One video: `M x d` per-frame features and an optional class id.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureSequence {
    pub video_id: u64,
    pub frames: Mat,
    pub label: Option<u32>,
}

impl FrameFeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Mean over frames.
    pub fn mean_feature(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for r in 0..self.num_frames() {
            for (a, v) in acc.iter_mut().zip(self.frames.row(r)) {
                *a += v;
            }
        }
        let m = self.num_frames() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
        acc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub sequences: Vec<FrameFeatureSequence>,
    pub num_frames: usize,
    pub dim: usize,
    pub num_classes: Option<u32>,
    /// Free-form tag such as `train`, `query` or `database`. Not stored in
    /// the container; loaded datasets are tagged by the caller.
    pub split_name: String,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Checks the structural invariants: shared shape, finite values,
    /// unique ids and labels below `num_classes`.
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 || self.dim == 0 {
            return Err(Error::arg("dataset frame count and dim must be positive"));
        }
        let mut ids = std::collections::HashSet::with_capacity(self.len());
        for s in &self.sequences {
            if s.frames.shape() != (self.num_frames, self.dim) {
                return Err(Error::arg(format!(
                    "video {} has shape {:?}, dataset expects ({}, {})",
                    s.video_id,
                    s.frames.shape(),
                    self.num_frames,
                    self.dim
                )));
            }
            if !s.frames.all_finite() {
                return Err(Error::arg(format!("video {} has non-finite frames", s.video_id)));
            }
            if !ids.insert(s.video_id) {
                return Err(Error::arg(format!("duplicate video id {}", s.video_id)));
            }
            if let (Some(nc), Some(l)) = (self.num_classes, s.label) {
                if l >= nc {
                    return Err(Error::arg(format!(
                        "video {} label {l} >= num_classes {nc}",
                        s.video_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// A new dataset holding the sequences at `idx`, ids preserved.
    pub fn subset(&self, idx: &[usize], split_name: &str) -> FeatureDataset {
        FeatureDataset {
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
            num_frames: self.num_frames,
            dim: self.dim,
            num_classes: self.num_classes,
            split_name: split_name.to_string(),
        }
    }

    /// Serializes to the `CMH1` container. Video ids must be `0..N` in
    /// order since the container stores them implicitly.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        for (i, s) in self.sequences.iter().enumerate() {
            if s.video_id != i as u64 {
                return Err(Error::format(
                    "video_id",
                    format!("container stores ids implicitly; video at {i} has id {}", s.video_id),
                ));
            }
        }
        let has_labels = self.sequences.first().is_some_and(|s| s.label.is_some());
        if self.sequences.iter().any(|s| s.label.is_some() != has_labels) {
            return Err(Error::format("has_labels", "labels must be present on all videos or none"));
        }
        let n = u32::try_from(self.len()).map_err(|_| Error::format("N", "too many videos"))?;
        let m = u32::try_from(self.num_frames).map_err(|_| Error::format("M", "too large"))?;
        let d = u32::try_from(self.dim).map_err(|_| Error::format("d", "too large"))?;
        let body = self.len() * self.num_frames * self.dim;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * body + 4 * self.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&m.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        out.push(u8::from(has_labels));
        for s in &self.sequences {
            for &v in s.frames.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        if has_labels {
            for s in &self.sequences {
                let l = s.label.expect("checked above");
                let l = i32::try_from(l).map_err(|_| Error::format("labels", "label exceeds i32"))?;
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a `CMH1` container. Never panics on malformed input.
    pub fn from_bytes(bytes: &[u8], split_name: &str) -> Result<FeatureDataset> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != FEATURE_MAGIC {
            return Err(Error::format("magic", format!("expected \"CMH1\", found {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != FEATURE_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let n = r.u32("N")? as usize;
        let m = r.u32("M")? as usize;
        let d = r.u32("d")? as usize;
        let has_labels = match r.u8("has_labels")? {
            0 => false,
            1 => true,
            other => return Err(Error::format("has_labels", format!("must be 0 or 1, got {other}"))),
        };
        if m == 0 {
            return Err(Error::format("M", "frame count must be positive"));
        }
        if d == 0 {
            return Err(Error::format("d", "feature dim must be positive"));
        }
        let per_video = m
            .checked_mul(d)
            .ok_or_else(|| Error::format("M", "M*d overflows"))?;
        let floats = per_video
            .checked_mul(n)
            .ok_or_else(|| Error::format("N", "N*M*d overflows"))?;
        let expected = floats
            .checked_mul(4)
            .and_then(|b| b.checked_add(if has_labels { n.checked_mul(4)? } else { 0 }))
            .ok_or_else(|| Error::format("N", "body size overflows"))?;
        if r.remaining() != expected {
            return Err(Error::format(
                "body",
                format!("expected {expected} bytes after header, found {}", r.remaining()),
            ));
        }
        let mut sequences = Vec::with_capacity(n);
        for i in 0..n {
            let raw = r.take(4 * per_video, "body")?;
            let mut data = Vec::with_capacity(per_video);
            for chunk in raw.chunks_exact(4) {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                if !v.is_finite() {
                    return Err(Error::format("body", format!("non-finite value in video {i}")));
                }
                data.push(v as f64);
            }
            sequences.push(FrameFeatureSequence {
                video_id: i as u64,
                frames: Mat::from_vec(m, d, data),
                label: None,
            });
        }
        let mut num_classes = None;
        if has_labels {
            let mut max = 0u32;
            for s in &mut sequences {
                let l = r.i32("labels")?;
                let l = u32::try_from(l)
                    .map_err(|_| Error::format("labels", format!("negative label {l}")))?;
                max = max.max(l);
                s.label = Some(l);
            }
            if n > 0 {
                num_classes = Some(max + 1);
            }
        }
        Ok(FeatureDataset {
            sequences,
            num_frames: m,
            dim: d,
            num_classes,
            split_name: split_name.to_string(),
        })
    }
}

/// Bounds-checked little-endian cursor shared by the binary decoders.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                field,
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub(crate) fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn i32(&mut self, field: &'static str) -> Result<i32> {
        let b = self.take(4, field)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self, field: &'static str) -> Result<u64> {
        let b = self.take(8, field)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn f32(&mut self, field: &'static str) -> Result<f32> {
        let b = self.take(4, field)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_dataset(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ds.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a container tagged as the `train` split.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    load_dataset_as(path, "train")
}

pub fn load_dataset_as(path: impl AsRef<Path>, split_name: &str) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureDataset::from_bytes(&bytes, split_name)
}

/// Parameters of the clustered synthetic generator.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub per_class: usize,
    pub num_frames: usize,
    pub dim: usize,
    /// Norm of each class center.
    pub center_scale: f64,
    /// Stddev of the per-video offset shared by all of its frames.
    pub video_noise: f64,
    /// Stddev of each random-walk step of the per-frame noise.
    pub frame_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            num_classes: 10,
            per_class: 100,
            num_frames: 16,
            dim: 32,
            center_scale: 5.0,
            video_noise: 0.5,
            frame_noise: 0.25,
            seed: 7,
        }
    }
}

/// Clustered frame-feature sequences. Class `c` is centered at a random
/// unit direction scaled by `center_scale`; each video adds a shared offset
/// and a zero-mean random walk over its frames. Videos are ordered
/// class-major with ids `0..N`.
pub fn generate_synthetic(p: &SyntheticParams) -> Result<FeatureDataset> {
    if p.num_classes == 0 || p.per_class == 0 {
        return Err(Error::arg("num_classes and per_class must be positive"));
    }
    if p.num_frames < 2 || p.dim < 2 {
        return Err(Error::arg("generator needs M >= 2 and d >= 2"));
    }
    if !(p.center_scale > 0.0 && p.center_scale.is_finite()) {
        return Err(Error::arg("center_scale must be positive"));
    }
    if !(p.video_noise >= 0.0 && p.video_noise.is_finite())
        || !(p.frame_noise >= 0.0 && p.frame_noise.is_finite())
    {
        return Err(Error::arg("noise levels must be non-negative"));
    }
    let num_classes = u32::try_from(p.num_classes).map_err(|_| Error::arg("too many classes"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (m, d) = (p.num_frames, p.dim);

    let centers: Vec<Vec<f64>> = (0..p.num_classes)
        .map(|_| random_direction(&mut rng, d).into_iter().map(|x| x * p.center_scale).collect())
        .collect();

    let video = Normal::new(0.0, p.video_noise).map_err(|e| Error::arg(e.to_string()))?;
    let step = Normal::new(0.0, p.frame_noise).map_err(|e| Error::arg(e.to_string()))?;
    let mut sequences = Vec::with_capacity(p.num_classes * p.per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..p.per_class {
            let offset: Vec<f64> = center.iter().map(|&x| x + video.sample(&mut rng)).collect();
            let mut walk = Mat::zeros(m, d);
            for t in 1..m {
                for j in 0..d {
                    let prev = walk.get(t - 1, j);
                    walk.set(t, j, prev + step.sample(&mut rng));
                }
            }
            let mut frames = Mat::zeros(m, d);
            for j in 0..d {
                let mean = (0..m).map(|t| walk.get(t, j)).sum::<f64>() / m as f64;
                for t in 0..m {
                    // Stored values are exactly representable in f32 so
                    // that a save/load round trip is the identity.
                    let v = (offset[j] + walk.get(t, j) - mean) as f32;
                    frames.set(t, j, v as f64);
                }
            }
            sequences.push(FrameFeatureSequence {
                video_id: sequences.len() as u64,
                frames,
                label: Some(c as u32),
            });
        }
    }
    Ok(FeatureDataset {
        sequences,
        num_frames: m,
        dim: d,
        num_classes: Some(num_classes),
        split_name: "train".to_string(),
    })
}

/// Moves every class center by an independent random direction of length
/// `scale`, producing a domain-shifted copy of a labeled dataset.
pub fn shift_class_centers(ds: &FeatureDataset, scale: f64, seed: u64) -> Result<FeatureDataset> {
    let Some(num_classes) = ds.num_classes else {
        return Err(Error::arg("domain shift needs a labeled dataset"));
    };
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::arg("shift scale must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| random_direction(&mut rng, ds.dim).into_iter().map(|x| x * scale).collect())
        .collect();
    let mut out = ds.clone();
    for seq in &mut out.sequences {
        let shift = &shifts[seq.label.unwrap_or(0) as usize];
        for t in 0..seq.frames.rows() {
            for (v, s) in seq.frames.row_mut(t).iter_mut().zip(shift) {
                *v = (*v + s) as f32 as f64;
            }
        }
    }
    Ok(out)
}

fn random_direction(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `floor(j * T / M)` for `j = 0..M`: `M` evenly spaced indices into a
/// `T`-frame video (repeats when `T < M`).
pub fn uniform_sample_frames(total: usize, count: usize) -> Result<Vec<usize>> {
    if total == 0 || count == 0 {
        return Err(Error::arg("uniform_sample_frames needs T >= 1 and M >= 1"));
    }
    Ok((0..count)
        .map(|j| ((j as u128 * total as u128) / count as u128) as usize)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticParams {
        SyntheticParams {
            num_classes: 3,
            per_class: 4,
            num_frames: 5,
            dim: 6,
            seed,
            ..SyntheticParams::default()
        }
    }

    #[test]
    fn zero_frame_noise_gives_identical_frames() {
        let ds = generate_synthetic(&SyntheticParams {
            num_classes: 1,
            per_class: 1,
            num_frames: 4,
            dim: 8,
            frame_noise: 0.0,
            ..SyntheticParams::default()
        })
        .unwrap();
        let f = &ds.sequences[0].frames;
        for t in 1..4 {
            assert_eq!(f.row(t), f.row(0));
        }
    }

    #[test]
    fn zero_noise_makes_class_members_identical() {
        let ds = generate_synthetic(&SyntheticParams {
            video_noise: 0.0,
            frame_noise: 0.0,
            ..small(3)
        })
        .unwrap();
        for c in 0..3 {
            let first = &ds.sequences[c * 4].frames;
            for j in 1..4 {
                assert_eq!(&ds.sequences[c * 4 + j].frames, first);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_synthetic(&small(11)).unwrap(), generate_synthetic(&small(11)).unwrap());
        assert_ne!(generate_synthetic(&small(11)).unwrap(), generate_synthetic(&small(12)).unwrap());
    }

    #[test]
    fn frames_are_recentred_on_video_offset() {
        let ds = generate_synthetic(&small(5)).unwrap();
        let s = &ds.sequences[0];
        // Random walk is re-centred, so the frame mean is the video offset;
        // with the default center scale it stays near the class center norm.
        let norm = s.mean_feature().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 2.0 && norm < 8.0, "norm {norm}");
    }

    #[test]
    fn invalid_sizes_rejected() {
        for p in [
            SyntheticParams { dim: 1, ..small(1) },
            SyntheticParams { num_frames: 1, ..small(1) },
            SyntheticParams { num_classes: 0, ..small(1) },
            SyntheticParams { frame_noise: -1.0, ..small(1) },
        ] {
            assert!(matches!(generate_synthetic(&p), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn container_round_trip_and_header() {
        let ds = generate_synthetic(&small(2)).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CMH1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 12);
        assert_eq!(bytes.len(), HEADER_LEN + 12 * 5 * 6 * 4 + 12 * 4);
        let back = FeatureDataset::from_bytes(&bytes, "train").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_container_is_format_error() {
        let bytes = generate_synthetic(&small(2)).unwrap().to_bytes().unwrap();
        for cut in [0, 3, 10, HEADER_LEN, bytes.len() - 1] {
            let err = FeatureDataset::from_bytes(&bytes[..cut], "x").unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn zero_m_header_names_field() {
        let mut bytes = generate_synthetic(&small(2)).unwrap().to_bytes().unwrap();
        bytes[12..16].copy_from_slice(&0u32.to_le_bytes());
        match FeatureDataset::from_bytes(&bytes, "x") {
            Err(Error::Format { field, .. }) => assert_eq!(field, "M"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_version_and_labels() {
        let good = generate_synthetic(&small(2)).unwrap().to_bytes().unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(FeatureDataset::from_bytes(&b, "x"), Err(Error::Format { field: "magic", .. })));
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(FeatureDataset::from_bytes(&b, "x"), Err(Error::Format { field: "version", .. })));
        let mut b = good.clone();
        let n = b.len();
        b[n - 4..].copy_from_slice(&(-3i32).to_le_bytes());
        assert!(matches!(FeatureDataset::from_bytes(&b, "x"), Err(Error::Format { field: "labels", .. })));
        let mut b = good;
        b[HEADER_LEN - 1] = 7;
        assert!(matches!(
            FeatureDataset::from_bytes(&b, "x"),
            Err(Error::Format { field: "has_labels", .. })
        ));
    }

    #[test]
    fn huge_header_counts_do_not_allocate() {
        let mut b = Vec::new();
        b.extend_from_slice(b"CMH1");
        for v in [1u32, u32::MAX, u32::MAX, u32::MAX] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(1);
        assert!(FeatureDataset::from_bytes(&b, "x").is_err());
    }

    #[test]
    fn unlabelled_round_trip() {
        let mut ds = generate_synthetic(&small(4)).unwrap();
        ds.num_classes = None;
        ds.sequences.iter_mut().for_each(|s| s.label = None);
        let back = FeatureDataset::from_bytes(&ds.to_bytes().unwrap(), "train").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn non_sequential_ids_cannot_be_saved() {
        let ds = generate_synthetic(&small(4)).unwrap();
        let sub = ds.subset(&[3, 1], "query");
        assert!(matches!(sub.to_bytes(), Err(Error::Format { field: "video_id", .. })));
    }

    #[test]
    fn uniform_sampling_examples() {
        assert_eq!(uniform_sample_frames(25, 25).unwrap(), (0..25).collect::<Vec<_>>());
        assert_eq!(
            uniform_sample_frames(100, 25).unwrap(),
            (0..25).map(|j| 4 * j).collect::<Vec<_>>()
        );
        assert_eq!(uniform_sample_frames(3, 6).unwrap(), vec![0, 0, 1, 1, 2, 2]);
        assert!(uniform_sample_frames(0, 3).is_err());
        assert!(uniform_sample_frames(3, 0).is_err());
    }
}
