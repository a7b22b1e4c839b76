//! Synthetic trajectory bundles and the on-disk bundle format.
//!
//! The generator draws, per subject, a latent start `u0 ~ N(0, I_q)` and
//! evolves it under linear dynamics `du/dt = A u` (random skew-symmetric
//! rotation plus diagonal decay, so real eigenvalue parts are non-positive
//! and trajectories stay bounded). Frames are rendered as weighted sums of
//! smooth random cosine bases plus observation noise, and per-subject traits
//! are a fixed linear readout of `u0`. Ground truth therefore lies inside
//! what the trained models can represent, which is what makes the synthetic
//! benchmark a meaningful end-to-end target.
//!
//! Bundle files carry the magic `FMTJ`, little-endian integers throughout,
//! and a trailing CRC32 over everything that precedes it.

use std::path::Path;

use crate::codec::FrameGroup;
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

/// Subject split label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(&self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Split> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split code {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One subject's frames, split label and optional trait targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub split: Split,
    /// `L` frames of shape `[H, W]`.
    pub frames: Vec<Tensor>,
    /// One value per trait name in the bundle.
    pub traits: Vec<f64>,
}

/// Provenance of a synthetic bundle (not part of the file format; the CLI
/// records it in the run-config snapshot written next to the bundle).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMeta {
    pub seed: u64,
    pub description: String,
}

/// On-disk dataset: subjects x frames with split labels and traits.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub height: usize,
    pub width: usize,
    /// Raw frames per subject.
    pub raw_len: usize,
    /// Groups per subject; 0 when the bundle is ungrouped.
    pub groups: usize,
    /// Frames per group; 0 when the bundle is ungrouped.
    pub group_len: usize,
    pub trait_names: Vec<String>,
    pub subjects: Vec<SubjectRecord>,
    pub meta: Option<GeneratorMeta>,
}

impl TrajectoryBundle {
    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_grouped(&self) -> bool {
        self.groups > 0
    }

    /// Subject indices carrying a given split label.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Groups of a pre-grouped bundle's subject.
    pub fn subject_groups(&self, subject: usize) -> Result<Vec<FrameGroup>> {
        if !self.is_grouped() {
            return Err(Error::Config("bundle is not pre-grouped".into()));
        }
        let rec = &self.subjects[subject];
        Ok((0..self.groups)
            .map(|g| {
                FrameGroup::new(rec.frames[g * self.group_len..(g + 1) * self.group_len].to_vec())
                    .with_ids(subject as u32, g)
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("bundle frame dimensions must be positive".into()));
        }
        if self.is_grouped() {
            if self.group_len == 0 || self.groups * self.group_len != self.raw_len {
                return Err(Error::Config(format!(
                    "grouped bundle shape inconsistent: G={} T={} L={}",
                    self.groups, self.group_len, self.raw_len
                )));
            }
        } else if self.group_len != 0 {
            return Err(Error::Config("ungrouped bundle has nonzero group length".into()));
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if s.frames.len() != self.raw_len {
                return Err(Error::dim(
                    format!("subject {i}"),
                    format!("{} frames", self.raw_len),
                    format!("{}", s.frames.len()),
                ));
            }
            for f in &s.frames {
                if f.shape() != [self.height, self.width] {
                    return Err(Error::dim(
                        format!("subject {i}"),
                        format!("[{}, {}]", self.height, self.width),
                        format!("{:?}", f.shape()),
                    ));
                }
            }
            if s.traits.len() != self.trait_names.len() {
                return Err(Error::dim(
                    format!("subject {i} traits"),
                    format!("{}", self.trait_names.len()),
                    format!("{}", s.traits.len()),
                ));
            }
        }
        Ok(())
    }
}

/// Recipe for a synthetic bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Generator latent dimension `q`.
    pub latent_dim: usize,
    /// Scale of the skew-symmetric (rotation) entries of the dynamics matrix.
    pub rotation_scale: f64,
    /// Diagonal decay rates are drawn uniformly from this range.
    pub decay_min: f64,
    pub decay_max: f64,
    /// Number of 2-D cosine waves summed per spatial basis.
    pub basis_waves: usize,
    /// Observation noise sigma added per pixel.
    pub noise_sigma: f64,
    pub trait_count: usize,
    /// Additive noise sigma on the trait targets.
    pub trait_noise: f64,
    /// Subjects per split (train, val, test).
    pub subjects: (usize, usize, usize),
    /// Raw frames per subject (`L`).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthSpec {
    /// Desk-scale benchmark: 16x16 frames, 80 per subject, 64/8/16 subjects.
    fn default() -> Self {
        SynthSpec {
            latent_dim: 4,
            rotation_scale: 0.05,
            decay_min: 0.001,
            decay_max: 0.004,
            basis_waves: 3,
            noise_sigma: 0.05,
            trait_count: 6,
            trait_noise: 0.02,
            subjects: (64, 8, 16),
            frames: 80,
            height: 16,
            width: 16,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("synthetic spec has zero dimension: {self:?}")));
        }
        if self.decay_min < 0.0 || self.decay_max < self.decay_min {
            // Negative decay would flip an eigenvalue's real part positive
            // and the trajectories become unbounded.
            return Err(Error::Config(format!(
                "decay range [{}, {}] must be non-negative and ordered",
                self.decay_min, self.decay_max
            )));
        }
        if self.noise_sigma < 0.0 || self.trait_noise < 0.0 {
            return Err(Error::Config("noise sigmas must be non-negative".into()));
        }
        if self.basis_waves == 0 {
            return Err(Error::Config("basis_waves must be >= 1".into()));
        }
        let total = self.subjects.0 + self.subjects.1 + self.subjects.2;
        if total == 0 {
            return Err(Error::Config("spec produces zero subjects".into()));
        }
        Ok(())
    }

    pub fn total_subjects(&self) -> usize {
        self.subjects.0 + self.subjects.1 + self.subjects.2
    }
}

/// Dense matrix exponential by scaling-and-squaring with a Taylor series.
/// Sized for the small generator matrices used here.
pub fn matrix_exp(a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::dim("matrix_exp", "square matrix", format!("{:?}", a.shape())));
    }
    let n = a.shape()[0];
    let norm_inf = (0..n)
        .map(|i| (0..n).map(|j| a.at(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm_inf > 0.5 {
        (norm_inf / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings as i32);
    let b: Vec<f64> = a.data().iter().map(|&v| v * scale).collect();

    let matmul = |x: &[f64], y: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for p in 0..n {
                let xv = x[i * n + p];
                if xv == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += xv * y[p * n + j];
                }
            }
        }
        out
    };

    let mut result = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
    }
    let mut term = result.clone();
    for k in 1..=40 {
        term = matmul(&term, &b);
        for t in term.iter_mut() {
            *t /= k as f64;
        }
        let mut max = 0.0f64;
        for (r, &t) in result.iter_mut().zip(&term) {
            *r += t;
            max = max.max(t.abs());
        }
        if max < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result);
    }
    Ok(Tensor::new_unchecked(vec![n, n], result))
}

/// Builds the generator dynamics matrix: skew-symmetric rotation plus
/// diagonal decay (real eigenvalue parts are bounded by the negated decay).
pub fn dynamics_matrix(spec: &SynthSpec, rng: &mut SplitRng) -> Tensor {
    let q = spec.latent_dim;
    let mut a = vec![0.0; q * q];
    for i in 0..q {
        for j in 0..i {
            let v = rng.normal() * spec.rotation_scale;
            a[i * q + j] = v;
            a[j * q + i] = -v;
        }
        a[i * q + i] = -rng.uniform_in(spec.decay_min, spec.decay_max);
    }
    Tensor::new_unchecked(vec![q, q], a)
}

/// Smooth random spatial bases: each is a sum of a few low-frequency 2-D
/// cosines, normalized to unit RMS so spatial correlation stays
/// discriminative.
fn spatial_bases(spec: &SynthSpec, rng: &mut SplitRng) -> Vec<Tensor> {
    let (h, w) = (spec.height, spec.width);
    (0..spec.latent_dim)
        .map(|_| {
            let mut img = vec![0.0; h * w];
            for _ in 0..spec.basis_waves {
                let fx = rng.index(3) as f64 + 1.0;
                let fy = rng.index(3) as f64 + 1.0;
                let amp = rng.normal();
                let phase = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
                for r in 0..h {
                    for c in 0..w {
                        let arg = 2.0 * std::f64::consts::PI
                            * (fy * r as f64 / h as f64 + fx * c as f64 / w as f64)
                            + phase;
                        img[r * w + c] += amp * arg.cos();
                    }
                }
            }
            let rms = (img.iter().map(|v| v * v).sum::<f64>() / (h * w) as f64).sqrt();
            if rms > 0.0 {
                for v in img.iter_mut() {
                    *v /= rms;
                }
            }
            Tensor::new_unchecked(vec![h, w], img)
        })
        .collect()
}

/// Generates a synthetic bundle; bit-reproducible from `(spec, seed)`.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<TrajectoryBundle> {
    spec.validate()?;
    let root = SplitRng::new(seed);

    let a = dynamics_matrix(spec, &mut root.derive(1));
    let step = matrix_exp(&a)?;
    let bases = spatial_bases(spec, &mut root.derive(2));
    let mut trait_rng = root.derive(3);
    let q = spec.latent_dim;
    let trait_matrix: Vec<f64> = (0..spec.trait_count * q)
        .map(|_| trait_rng.uniform_in(-1.0, 1.0))
        .collect();

    let (n_train, n_val, n_test) = spec.subjects;
    let splits: Vec<Split> = std::iter::repeat(Split::Train)
        .take(n_train)
        .chain(std::iter::repeat(Split::Val).take(n_val))
        .chain(std::iter::repeat(Split::Test).take(n_test))
        .collect();

    let (h, w) = (spec.height, spec.width);
    let mut subjects = Vec::with_capacity(splits.len());
    for (i, &split) in splits.iter().enumerate() {
        let mut rng = root.derive(1000 + i as u64);
        let u0 = rng.normal_vec(q);
        let mut u = u0.clone();
        let mut frames = Vec::with_capacity(spec.frames);
        for t in 0..spec.frames {
            if t > 0 {
                u = crate::tensor::matvec_raw(step.data(), q, q, &u);
            }
            let mut img = vec![0.0; h * w];
            for (j, basis) in bases.iter().enumerate() {
                let uj = u[j];
                for (p, &b) in img.iter_mut().zip(basis.data()) {
                    *p += uj * b;
                }
            }
            if spec.noise_sigma > 0.0 {
                for p in img.iter_mut() {
                    *p += spec.noise_sigma * rng.normal();
                }
            }
            frames.push(Tensor::new_unchecked(vec![h, w], img));
        }
        let traits: Vec<f64> = (0..spec.trait_count)
            .map(|m| {
                let linear: f64 = (0..q).map(|j| trait_matrix[m * q + j] * u0[j]).sum();
                linear + spec.trait_noise * rng.normal()
            })
            .collect();
        subjects.push(SubjectRecord {
            split,
            frames,
            traits,
        });
    }

    let bundle = TrajectoryBundle {
        height: h,
        width: w,
        raw_len: spec.frames,
        groups: 0,
        group_len: 0,
        trait_names: (0..spec.trait_count).map(|m| format!("trait_{m}")).collect(),
        subjects,
        meta: Some(GeneratorMeta {
            seed,
            description: format!(
                "linear latent dynamics q={q}, rotation {}, decay [{}, {}], sigma {}",
                spec.rotation_scale, spec.decay_min, spec.decay_max, spec.noise_sigma
            ),
        }),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Reassigns split labels by seeded shuffle; counts are floors of the
/// fractions with the remainder going to the train split.
pub fn make_splits(bundle: &TrajectoryBundle, fractions: (f64, f64, f64), seed: u64) -> Result<TrajectoryBundle> {
    let (ft, fv, fe) = fractions;
    let sum = ft + fv + fe;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
    }
    if ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::Config("split fractions must be non-negative".into()));
    }
    let s = bundle.num_subjects();
    let classes = [ft, fv, fe].iter().filter(|&&f| f > 0.0).count();
    if s < classes {
        return Err(Error::Length {
            context: "make_splits".into(),
            required: classes,
            got: s,
        });
    }

    let n_train = (ft * s as f64).floor() as usize;
    let n_val = (fv * s as f64).floor() as usize;
    let n_test = (fe * s as f64).floor() as usize;
    let n_train = n_train + (s - n_train - n_val - n_test);

    let mut order: Vec<usize> = (0..s).collect();
    SplitRng::new(seed).shuffle(&mut order);

    let mut out = bundle.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.subjects[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

// ---- binary format ----

const MAGIC: &[u8; 4] = b"FMTJ";
const VERSION: u32 = 1;

const fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = crc32_table();

/// CRC32 (IEEE reflected polynomial, as produced by zlib).
pub fn crc32(data: &[u8]) -> u32 {
    let mut c = 0xffff_ffffu32;
    for &b in data {
        c = CRC_TABLE[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    c ^ 0xffff_ffff
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Serializes a bundle to its binary representation.
pub fn bundle_to_bytes(bundle: &TrajectoryBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        bundle.num_subjects(),
        bundle.groups,
        bundle.group_len,
        bundle.raw_len,
        bundle.height,
        bundle.width,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &bundle.subjects {
        out.push(s.split.code());
    }
    out.extend_from_slice(&(bundle.trait_names.len() as u32).to_le_bytes());
    for name in &bundle.trait_names {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for s in &bundle.subjects {
        for f in &s.frames {
            for &v in f.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &t in &s.traits {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes a bundle file.
pub fn write_bundle(bundle: &TrajectoryBundle, path: &Path) -> Result<()> {
    std::fs::write(path, bundle_to_bytes(bundle)?)?;
    Ok(())
}

/// Parses a bundle from bytes; errors carry the failing byte offset.
pub fn bundle_from_bytes(buf: &[u8]) -> Result<TrajectoryBundle> {
    if buf.len() < 4 {
        return Err(Error::Parse {
            offset: 0,
            detail: "file shorter than the magic".into(),
        });
    }
    if &buf[..4] != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad magic {:?}, expected \"FMTJ\"", &buf[..4]),
        });
    }
    if buf.len() < 12 {
        return Err(Error::Parse {
            offset: 4,
            detail: "truncated header".into(),
        });
    }
    let payload_len = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[payload_len..].try_into().expect("4 bytes"));
    let computed = crc32(&buf[..payload_len]);
    if stored != computed {
        return Err(Error::Parse {
            offset: payload_len as u64,
            detail: format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"),
        });
    }

    let mut r = Reader { buf: &buf[..payload_len], pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let s = r.u32("subject count")? as usize;
    let groups = r.u32("group count")? as usize;
    let group_len = r.u32("group length")? as usize;
    let raw_len = r.u32("raw length")? as usize;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;

    let mut splits = Vec::with_capacity(s);
    for b in r.take(s, "split codes")? {
        splits.push(Split::from_code(*b).map_err(|e| Error::Parse {
            offset: r.pos as u64,
            detail: e.to_string(),
        })?);
    }
    let m = r.u32("trait count")? as usize;
    let mut trait_names = Vec::with_capacity(m);
    for _ in 0..m {
        let len = r.u32("trait name length")? as usize;
        let bytes = r.take(len, "trait name")?;
        let name = std::str::from_utf8(bytes)
            .map_err(|e| Error::Parse {
                offset: (r.pos - len) as u64,
                detail: format!("trait name is not UTF-8: {e}"),
            })?
            .to_string();
        trait_names.push(name);
    }

    let frame_len = height * width;
    let mut subjects = Vec::with_capacity(s);
    for &split in &splits {
        let mut frames = Vec::with_capacity(raw_len);
        for _ in 0..raw_len {
            let mut data = Vec::with_capacity(frame_len);
            for _ in 0..frame_len {
                data.push(r.f64("frame value")?);
            }
            frames.push(Tensor::new_unchecked(vec![height, width], data));
        }
        let mut traits = Vec::with_capacity(m);
        for _ in 0..m {
            traits.push(r.f64("trait value")?);
        }
        subjects.push(SubjectRecord {
            split,
            frames,
            traits,
        });
    }
    if r.pos != payload_len {
        return Err(Error::Parse {
            offset: r.pos as u64,
            detail: format!("{} unexpected trailing bytes", payload_len - r.pos),
        });
    }

    let bundle = TrajectoryBundle {
        height,
        width,
        raw_len,
        groups,
        group_len,
        trait_names,
        subjects,
        meta: None,
    };
    bundle.validate().map_err(|e| Error::Parse {
        offset: payload_len as u64,
        detail: format!("inconsistent bundle: {e}"),
    })?;
    Ok(bundle)
}

/// Reads a bundle file.
pub fn read_bundle(path: &Path) -> Result<TrajectoryBundle> {
    bundle_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_exp_of_rotation_is_a_rotation_matrix() {
        let theta = 0.7f64;
        let a = Tensor::from_vec(vec![2, 2], vec![0.0, -theta, theta, 0.0]).unwrap();
        let e = matrix_exp(&a).unwrap();
        assert!((e.at(0, 0) - theta.cos()).abs() < 1e-14);
        assert!((e.at(0, 1) + theta.sin()).abs() < 1e-14);
        assert!((e.at(1, 0) - theta.sin()).abs() < 1e-14);
        assert!((e.at(1, 1) - theta.cos()).abs() < 1e-14);
    }

    #[test]
    fn generator_matches_fine_rk4_integration() {
        // u(t) stepped by matrix exponential vs 1000-step RK4 of du/dt = A u.
        let spec = SynthSpec::default();
        let mut rng = SplitRng::new(10).derive(1);
        let a = dynamics_matrix(&spec, &mut rng);
        let q = spec.latent_dim;
        let step = matrix_exp(&a).unwrap();

        let u0: Vec<f64> = SplitRng::new(77).normal_vec(q);
        let horizon = 10usize;
        let mut exact = u0.clone();
        for _ in 0..horizon {
            exact = crate::tensor::matvec_raw(step.data(), q, q, &exact);
        }

        let deriv = |u: &[f64]| crate::tensor::matvec_raw(a.data(), q, q, u);
        let mut u = u0;
        let steps = 1000;
        let h = horizon as f64 / steps as f64;
        for _ in 0..steps {
            let k1 = deriv(&u);
            let y2: Vec<f64> = u.iter().zip(&k1).map(|(&x, &k)| x + 0.5 * h * k).collect();
            let k2 = deriv(&y2);
            let y3: Vec<f64> = u.iter().zip(&k2).map(|(&x, &k)| x + 0.5 * h * k).collect();
            let k3 = deriv(&y3);
            let y4: Vec<f64> = u.iter().zip(&k3).map(|(&x, &k)| x + h * k).collect();
            let k4 = deriv(&y4);
            for i in 0..q {
                u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        for (e, r) in exact.iter().zip(&u) {
            assert!((e - r).abs() < 1e-8, "exp {e} vs rk4 {r}");
        }
    }

    #[test]
    fn rank_one_noiseless_frames_are_scalar_multiples_of_the_basis() {
        let spec = SynthSpec {
            latent_dim: 1,
            noise_sigma: 0.0,
            subjects: (2, 0, 0),
            frames: 6,
            ..SynthSpec::default()
        };
        let bundle = generate_synthetic(&spec, 5).unwrap();
        let s = &bundle.subjects[0];
        // Every pair of frames is proportional: corr of flattened frames = +-1.
        let f0 = &s.frames[0];
        for f in &s.frames[1..] {
            let r = crate::metrics::spatial_correlation(f0, f).unwrap();
            assert!((r.abs() - 1.0).abs() < 1e-9, "corr {r}");
        }
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let spec = SynthSpec {
            subjects: (3, 1, 1),
            frames: 8,
            height: 4,
            width: 4,
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&spec, 42).unwrap();
        let b = generate_synthetic(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn negative_decay_is_a_spec_error() {
        let spec = SynthSpec {
            decay_min: -0.5,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec, 1), Err(Error::Config(_))));
    }

    fn small_bundle() -> TrajectoryBundle {
        let spec = SynthSpec {
            subjects: (3, 1, 2),
            frames: 4,
            height: 3,
            width: 2,
            trait_count: 2,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec, 9).unwrap()
    }

    #[test]
    fn bundle_round_trips_bit_exactly() {
        let bundle = small_bundle();
        let bytes = bundle_to_bytes(&bundle).unwrap();
        let back = bundle_from_bytes(&bytes).unwrap();
        let mut expect = bundle.clone();
        expect.meta = None; // provenance is carried outside the file format
        assert_eq!(back, expect);
        // write(read(bytes)) reproduces the exact bytes
        assert_eq!(bundle_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_is_a_parse_error_not_a_partial_bundle() {
        let bytes = bundle_to_bytes(&small_bundle()).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = bundle_from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Parse { .. }),
                "cut at {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_are_reported() {
        let mut bytes = bundle_to_bytes(&small_bundle()).unwrap();
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            bundle_from_bytes(&corrupt),
            Err(Error::Parse { offset: 0, .. })
        ));

        // Bump the version and fix the checksum so only the version differs.
        bytes[4] = 9;
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            bundle_from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn corrupted_payload_fails_the_checksum() {
        let mut bytes = bundle_to_bytes(&small_bundle()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let err = bundle_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn paper_ratio_splits_on_500_subjects() {
        let spec = SynthSpec {
            subjects: (500, 0, 0),
            frames: 1,
            height: 2,
            width: 2,
            trait_count: 0,
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        let bundle = generate_synthetic(&spec, 3).unwrap();
        let split = make_splits(&bundle, (0.6, 0.1, 0.3), 11).unwrap();
        assert_eq!(split.split_indices(Split::Train).len(), 300);
        assert_eq!(split.split_indices(Split::Val).len(), 50);
        assert_eq!(split.split_indices(Split::Test).len(), 150);
    }

    #[test]
    fn all_train_fraction_and_determinism() {
        let bundle = small_bundle();
        let all = make_splits(&bundle, (1.0, 0.0, 0.0), 4).unwrap();
        assert_eq!(all.split_indices(Split::Train).len(), bundle.num_subjects());

        let a = make_splits(&bundle, (0.5, 0.25, 0.25), 7).unwrap();
        let b = make_splits(&bundle, (0.5, 0.25, 0.25), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_subjects_for_splits_errors() {
        let spec = SynthSpec {
            subjects: (2, 0, 0),
            frames: 1,
            trait_count: 0,
            ..SynthSpec::default()
        };
        let bundle = generate_synthetic(&spec, 1).unwrap();
        assert!(matches!(
            make_splits(&bundle, (0.4, 0.3, 0.3), 1),
            Err(Error::Length { .. })
        ));
    }
}
