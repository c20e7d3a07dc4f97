//! Feature bundles: synthetic generation and the SSPA-FB file format.
//!
//! SSPA-FB layout (little-endian):
//!
//! ```text
//! "SSPA" | u32 version=1 | u32 C | u32 M | u32 d | u32 n
//! n × [ x0: d f32 | X: M·d f32 | y: C f32 (0 or 1) ]
//! optional: u8 flag (1 = present) | T_ka: C·d f32
//! ```
//!
//! The category manifest lives next to the bundle as `<stem>.manifest.json`.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSPA";
pub const VERSION: u32 = 1;

/// One image: global feature, patch features and its multi-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `1×d`.
    pub x0: Tensor,
    /// `M×d`.
    pub x: Tensor,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub categories: usize,
    pub patches: usize,
    pub dim: usize,
    pub samples: Vec<FeatureBundle>,
    /// Knowledge-aware label embeddings, `C×d`, when the file carries them.
    pub t_ka: Option<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `N×C` label matrix.
    pub fn labels(&self) -> Tensor {
        Tensor::from_fn(self.len(), self.categories, |i, j| self.samples[i].y[j])
    }

    pub fn validate(&self) -> Result<()> {
        let (c, m, d) = (self.categories, self.patches, self.dim);
        for (i, s) in self.samples.iter().enumerate() {
            s.x0.ensure_shape(1, d, "x0")?;
            s.x.ensure_shape(m, d, "X")?;
            if s.y.len() != c {
                return Err(Error::shape(format!("sample {i} has {} labels, expected {c}", s.y.len())));
            }
            if !s.x0.is_finite() || !s.x.is_finite() {
                return Err(Error::NonFinite(format!("non-finite feature in sample {i}")));
            }
            if s.y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Format(format!("sample {i} has a label outside {{0, 1}}")));
            }
        }
        if let Some(t) = &self.t_ka {
            t.ensure_shape(c, d, "T_ka")?;
            if !t.is_finite() {
                return Err(Error::NonFinite("non-finite entry in T_ka".into()));
            }
        }
        Ok(())
    }
}

fn eof_as_format(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

fn write_f32s<W: Write>(w: &mut W, v: &[f64]) -> io::Result<()> {
    for &x in v {
        w.write_f32::<LittleEndian>(x as f32)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut buf).map_err(eof_as_format)?;
    Ok(buf.into_iter().map(f64::from).collect())
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

pub fn write_bundle<W: Write>(w: &mut W, data: &Dataset) -> Result<()> {
    data.validate()?;
    w.write_all(MAGIC)?;
    for (v, what) in [
        (VERSION as usize, "version"),
        (data.categories, "C"),
        (data.patches, "M"),
        (data.dim, "d"),
        (data.len(), "n"),
    ] {
        w.write_u32::<LittleEndian>(dim_u32(v, what)?)?;
    }
    for s in &data.samples {
        write_f32s(w, s.x0.data())?;
        write_f32s(w, s.x.data())?;
        write_f32s(w, &s.y)?;
    }
    if let Some(t) = &data.t_ka {
        w.write_u8(1)?;
        write_f32s(w, t.data())?;
    }
    Ok(())
}

pub fn read_bundle<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_format)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut hdr = [0u32; 5];
    r.read_u32_into::<LittleEndian>(&mut hdr).map_err(eof_as_format)?;
    let [version, c, m, d, n] = hdr.map(|v| v as usize);
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if c == 0 || m == 0 || d == 0 {
        return Err(Error::Format(format!("empty dimensions C={c} M={m} d={d}")));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let x0 = Tensor::from_vec(1, d, read_f32s(r, d)?)?;
        let x = Tensor::from_vec(m, d, read_f32s(r, m * d)?)?;
        let y = read_f32s(r, c)?;
        samples.push(FeatureBundle { x0, x, y });
    }
    let mut flag = [0u8; 1];
    let t_ka = match r.read(&mut flag)? {
        0 => None,
        _ => match flag[0] {
            0 => None,
            1 => Some(Tensor::from_vec(c, d, read_f32s(r, c * d)?)?),
            f => return Err(Error::Format(format!("bad T_ka flag {f}"))),
        },
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = Dataset {
        categories: c,
        patches: m,
        dim: d,
        samples,
        t_ka,
    };
    data.validate()?;
    Ok(data)
}

pub fn save_bundle(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bundle(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<Dataset> {
    read_bundle(&mut BufReader::new(File::open(path)?))
}

/// Category manifest. Unknown keys, such as exporter provenance notes, are
/// ignored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub categories: Vec<String>,
    pub descriptions_file: Option<String>,
}

/// `<dir>/<stem>.manifest.json` for a bundle at `<dir>/<stem>.<ext>`.
pub fn manifest_path(bundle: &Path) -> PathBuf {
    let stem = bundle.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    bundle.with_file_name(format!("{stem}.manifest.json"))
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Loads the knowledge-aware label embeddings of a bundle and its manifest,
/// checking them against the expected `(C, d)` when given.
pub fn load_label_semantics(path: &Path, expected: Option<(usize, usize)>) -> Result<(Tensor, Manifest)> {
    let data = load_bundle(path)?;
    let t_ka = data
        .t_ka
        .ok_or_else(|| Error::Format(format!("{} carries no label embeddings", path.display())))?;
    if let Some((c, d)) = expected {
        t_ka.ensure_shape(c, d, "label embeddings")?;
    }
    let manifest = load_manifest(&manifest_path(path))?;
    if manifest.categories.len() != t_ka.rows() {
        return Err(Error::Format(format!(
            "manifest lists {} categories, bundle has {}",
            manifest.categories.len(),
            t_ka.rows()
        )));
    }
    Ok((t_ka, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub categories: usize,
    pub patches: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Expected fraction of positive labels per category.
    pub label_density: f64,
    /// Noise on object patches around their prototype.
    pub noise_sigma: f64,
    /// Minimum pairwise distance between prototypes.
    pub separation: f64,
    /// Object patches placed per positive label.
    pub patches_per_label: usize,
    pub background_sigma: f64,
    /// Shared mean of the background patches.
    pub background_offset: f64,
    /// Noise of the knowledge-aware embeddings around the prototypes.
    pub ka_noise: f64,
    /// Noise of the category word embeddings around the prototypes.
    pub word_noise: f64,
    /// Multiplies patch features and knowledge-aware embeddings after
    /// sampling; distances above are in unscaled units.
    pub feature_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            categories: 8,
            patches: 16,
            dim: 32,
            n_train: 2000,
            n_test: 500,
            label_density: 0.25,
            noise_sigma: 0.6,
            separation: 4.0,
            patches_per_label: 2,
            background_sigma: 1.0,
            background_offset: 0.5,
            ka_noise: 0.2,
            word_noise: 1.0,
            feature_scale: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 || self.patches == 0 || self.dim == 0 {
            return Err(Error::invalid("categories, patches and dim must be positive"));
        }
        if self.n_train == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        if !(self.label_density > 0.0 && self.label_density <= 1.0) {
            return Err(Error::invalid(format!("label density {} outside (0, 1]", self.label_density)));
        }
        if self.label_density < 1.0 / self.categories as f64 {
            return Err(Error::invalid(format!(
                "label density {} is below 1/C; every sample needs a positive",
                self.label_density
            )));
        }
        if self.patches_per_label == 0 {
            return Err(Error::invalid("patches_per_label must be positive"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("separation", self.separation),
            ("background_sigma", self.background_sigma),
            ("ka_noise", self.ka_noise),
            ("word_noise", self.word_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::invalid("feature_scale must be positive and finite"));
        }
        if !self.background_offset.is_finite() {
            return Err(Error::invalid("background_offset must be finite"));
        }
        Ok(())
    }

    /// Per-category draw probability `q` such that, after forcing one random
    /// category positive on empty draws, `P(y_j = 1)` equals the density:
    /// `q + (1 − q)^C / C = density`.
    pub fn draw_probability(&self) -> f64 {
        let c = self.categories as f64;
        let f = |q: f64| q + (1.0 - q).powf(c) / c - self.label_density;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Knowledge-aware embeddings and category word embeddings of a synthetic
/// label space.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSemantics {
    /// `C×d`.
    pub t_ka: Tensor,
    /// `C×d_tok`.
    pub word_embeddings: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub prototypes: Tensor,
    pub semantics: LabelSemantics,
    pub names: Vec<String>,
}

const NAMES: [&str; 20] = [
    "person", "bicycle", "car", "airplane", "bus", "train", "boat", "bird", "cat", "dog", "horse",
    "sheep", "cow", "bottle", "chair", "couch", "plant", "table", "tv", "keyboard",
];

pub fn category_names(c: usize) -> Vec<String> {
    (0..c)
        .map(|j| NAMES.get(j).map_or_else(|| format!("class_{j}"), |s| s.to_string()))
        .collect()
}

/// Values are kept exactly representable in `f32` so that a file round trip
/// is lossless.
fn f32_exact(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Tensor {
    if sigma == 0.0 {
        return Tensor::zeros(rows, cols);
    }
    let n = Normal::new(0.0, sigma).expect("validated sigma");
    Tensor::from_fn(rows, cols, |_, _| n.sample(rng))
}

const PROTOTYPE_TRIES: usize = 10_000;

fn sample_prototypes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let d = spec.dim;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.categories);
    let mut tries = 0;
    while rows.len() < spec.categories {
        tries += 1;
        if tries > PROTOTYPE_TRIES {
            return Err(Error::invalid(format!(
                "infeasible separation {} for {} prototypes in dimension {d}",
                spec.separation, spec.categories
            )));
        }
        let cand = gaussian(rng, 1, d, 1.0).into_data();
        let ok = rows.iter().all(|r| {
            r.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= spec.separation
        });
        if ok {
            rows.push(cand);
        }
    }
    Ok(f32_exact(Tensor::from_rows(&rows)?))
}

fn sample_bundle(spec: &SyntheticSpec, prototypes: &Tensor, q: f64, index: usize) -> FeatureBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (c, m, d) = (spec.categories, spec.patches, spec.dim);
    let mut y: Vec<f64> = (0..c).map(|_| if rng.random_bool(q) { 1.0 } else { 0.0 }).collect();
    if y.iter().all(|&v| v == 0.0) {
        y[rng.random_range(0..c)] = 1.0;
    }
    let positives: Vec<usize> = (0..c).filter(|&j| y[j] == 1.0).collect();
    // Object patches round-robin over the positives, capped at M.
    let n_obj = (positives.len() * spec.patches_per_label).min(m);
    let mut owner: Vec<Option<usize>> = (0..m)
        .map(|i| (i < n_obj).then(|| positives[i % positives.len()]))
        .collect();
    owner.shuffle(&mut rng);
    let mut x = Tensor::zeros(m, d);
    for (i, o) in owner.iter().enumerate() {
        let (base, sigma) = match o {
            Some(j) => (prototypes.row(*j).to_vec(), spec.noise_sigma),
            None => (vec![spec.background_offset; d], spec.background_sigma),
        };
        let noise = gaussian(&mut rng, 1, d, sigma);
        for (k, v) in x.row_mut(i).iter_mut().enumerate() {
            *v = spec.feature_scale * (base[k] + noise.get(0, k));
        }
    }
    let x = f32_exact(x);
    let x0 = f32_exact(x.column_mean());
    FeatureBundle { x0, x, y }
}

/// Deterministic synthetic multi-label task.
///
/// Object patches sit at their category's prototype plus Gaussian noise;
/// background patches share a common offset. The knowledge-aware
/// embeddings and the category word embeddings are noisy copies of the
/// prototypes, the latter noisier.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let prototypes = sample_prototypes(spec, &mut rng)?;
    let (c, d) = (spec.categories, spec.dim);
    let s = spec.feature_scale;
    let t_ka = f32_exact(prototypes.zip_map(&gaussian(&mut rng, c, d, spec.ka_noise), |a, b| s * (a + b)));
    let word_embeddings =
        f32_exact(prototypes.zip_map(&gaussian(&mut rng, c, d, spec.word_noise), |a, b| a + b));
    let q = spec.draw_probability();
    let total = spec.n_train + spec.n_test;
    let samples = crate::parallel::map_indexed(total, |i| sample_bundle(spec, &prototypes, q, i));
    let mut samples = samples.into_iter();
    let mk = |samples: Vec<FeatureBundle>| Dataset {
        categories: c,
        patches: spec.patches,
        dim: d,
        samples,
        t_ka: Some(t_ka.clone()),
    };
    let train = mk(samples.by_ref().take(spec.n_train).collect());
    let test = mk(samples.collect());
    Ok(SyntheticData {
        train,
        test,
        prototypes,
        semantics: LabelSemantics {
            t_ka,
            word_embeddings,
        },
        names: category_names(c),
    })
}

/// Word embeddings for categories known only by name: a deterministic
/// Gaussian draw per name.
pub fn name_embeddings(names: &[String], dim: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = names
        .iter()
        .map(|n| {
            // FNV-1a
            let h = n.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            gaussian(&mut rng, 1, dim, 1.0).into_data()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(0, dim))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            categories: 3,
            patches: 4,
            dim: 8,
            n_train: 5,
            n_test: 2,
            label_density: 0.4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let data = gen_synthetic(&small_spec()).unwrap().train;
        let mut buf = Vec::new();
        write_bundle(&mut buf, &data).unwrap();
        assert_eq!(buf.len(), 24 + 5 * 4 * (8 + 32 + 3) + 1 + 4 * 24);
        let back = read_bundle(&mut buf.as_slice()).unwrap();
        assert_eq!(back, data);
        let mut again = Vec::new();
        write_bundle(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn missing_label_block_is_tolerated() {
        let mut data = gen_synthetic(&small_spec()).unwrap().test;
        data.t_ka = None;
        let mut buf = Vec::new();
        write_bundle(&mut buf, &data).unwrap();
        assert_eq!(read_bundle(&mut buf.as_slice()).unwrap().t_ka, None);
        buf.push(0);
        assert_eq!(read_bundle(&mut buf.as_slice()).unwrap().t_ka, None);
        buf.push(7);
        assert!(read_bundle(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn malformed_files() {
        let data = gen_synthetic(&small_spec()).unwrap().train;
        let mut buf = Vec::new();
        write_bundle(&mut buf, &data).unwrap();
        let err = read_bundle(&mut &buf[..buf.len() - 3]).unwrap_err();
        assert_eq!(err.to_string(), "malformed file: unexpected end of file");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_bundle(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_bundle(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_bundle(&mut bad.as_slice()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn label_semantics_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let syn = gen_synthetic(&small_spec()).unwrap();
        let path = dir.path().join("train.sspa");
        save_bundle(&path, &syn.train).unwrap();
        let manifest = Manifest {
            categories: syn.names.clone(),
            descriptions_file: None,
        };
        save_manifest(&manifest_path(&path), &manifest).unwrap();
        let (t, m) = load_label_semantics(&path, Some((3, 8))).unwrap();
        assert_eq!(t, syn.semantics.t_ka);
        assert_eq!(m, manifest);
        assert!(load_label_semantics(&path, Some((3, 16))).is_err());
    }

    #[test]
    fn noiseless_patches_equal_prototypes() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            background_sigma: 0.0,
            background_offset: 0.0,
            ..small_spec()
        };
        let syn = gen_synthetic(&spec).unwrap();
        for s in &syn.train.samples {
            for i in 0..spec.patches {
                let row = s.x.row(i);
                if row.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let scaled = |j: usize| -> Vec<f64> {
                    syn.prototypes.row(j).iter().map(|v| (spec.feature_scale * v) as f32 as f64).collect()
                };
                let j = (0..3).find(|&j| scaled(j) == row).expect("patch is a scaled prototype");
                assert_eq!(s.y[j], 1.0);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic(&small_spec()).unwrap();
        let b = gen_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SyntheticSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn label_marginals_match_density() {
        let spec = SyntheticSpec {
            n_train: 10_000,
            n_test: 0,
            ..SyntheticSpec::default()
        };
        let syn = gen_synthetic(&spec).unwrap();
        for s in &syn.train.samples {
            assert!(s.y.contains(&1.0));
        }
        for j in 0..spec.categories {
            let f = syn.train.samples.iter().map(|s| s.y[j]).sum::<f64>() / 10_000.0;
            assert!((f - spec.label_density).abs() < 0.02, "category {j}: {f}");
        }
    }

    #[test]
    fn infeasible_separation() {
        let spec = SyntheticSpec {
            separation: 100.0,
            ..small_spec()
        };
        assert!(gen_synthetic(&spec).is_err());
    }

    #[test]
    fn separation_holds() {
        let spec = SyntheticSpec::default();
        let p = gen_synthetic(&SyntheticSpec { n_train: 1, n_test: 0, ..spec.clone() }).unwrap().prototypes;
        for a in 0..spec.categories {
            for b in 0..a {
                let dist: f64 = p.row(a).iter().zip(p.row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(dist >= spec.separation);
            }
        }
    }
}
