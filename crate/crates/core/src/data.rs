//! Synthetic phantoms, augmentation, PGM I/O, padding and mini-batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::sobel_magnitude;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

pub const MIN_PHANTOM_SIZE: usize = 16;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const MANIFEST_FILE: &str = "manifest.txt";

/// The four stand-in contrasts. The file stem of each is its `name()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    T1,
    T2,
    T1c,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T2, Modality::T1c, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T2 => "t2",
            Modality::T1c => "t1c",
            Modality::Flair => "flair",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }

    /// Parses a comma-separated list like `t1,t1c`.
    pub fn parse_list(s: &str) -> Result<Vec<Modality>> {
        let v: Vec<Modality> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?;
        if v.is_empty() {
            return Err(Error::Usage("empty modality list".into()));
        }
        Ok(v)
    }

    pub fn list_to_string(mods: &[Modality]) -> String {
        mods.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" | "m1" => Ok(Modality::T1),
            "t2" | "m2" => Ok(Modality::T2),
            "t1c" | "m3" => Ok(Modality::T1c),
            "flair" | "m4" => Ok(Modality::Flair),
            _ => Err(Error::Usage(format!("unknown modality `{s}` (expected t1, t2, t1c or flair)"))),
        }
    }
}

/// One subject: four co-registered (1,1,h,w) images in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub id: String,
    images: [Tensor<f64>; 4],
}

impl PhantomSample {
    pub fn new(id: impl Into<String>, images: [Tensor<f64>; 4]) -> Result<Self> {
        let s = images[0].shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Shape(format!("modality images must be (1,1,h,w), got {s}")));
        }
        if images.iter().any(|t| t.shape() != s) {
            return Err(Error::Shape("modalities of one sample differ in size".into()));
        }
        Ok(PhantomSample { id: id.into(), images })
    }

    pub fn get(&self, m: Modality) -> &Tensor<f64> {
        &self.images[m.slot()]
    }

    pub fn height(&self) -> usize {
        self.images[0].shape().h
    }

    pub fn width(&self) -> usize {
        self.images[0].shape().w
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.id == other.id && self.images.iter().zip(&other.images).all(|(a, b)| a.bit_eq(b))
    }
}

fn box_blur3(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |i: isize, j: isize| x[i.clamp(0, h as isize - 1) as usize * w + j.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut s = 0.0;
            for di in -1..=1 {
                for dj in -1..=1 {
                    s += at(i + di, j + dj);
                }
            }
            out[i as usize * w + j as usize] = s / 9.0;
        }
    }
    out
}

/// The deterministic chain from a base field B to the four contrasts.
pub fn modalities_from_base(base: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let t1 = base.to_vec();
    let inverted: Vec<f64> = base.iter().map(|b| 1.0 - b).collect();
    let t2 = box_blur3(&inverted, h, w);
    let edges = sobel_magnitude(base, h, w);
    let emax = edges.iter().cloned().fold(0.0, f64::max);
    let t1c = base
        .iter()
        .zip(&edges)
        .map(|(b, e)| {
            let en = if emax > 0.0 { e / emax } else { 0.0 };
            (b + 0.5 * en).clamp(0.0, 1.0)
        })
        .collect();
    let flair = base.iter().map(|b| b.sqrt()).collect();
    [t1, t2, t1c, flair]
}

/// Blobs plus ellipses, saturated at 1 and min-max normalized.
fn base_field(rng: &mut RngStream, h: usize, w: usize) -> Vec<f64> {
    let (hf, wf) = (h as f64, w as f64);
    let side = hf.min(wf);
    let mut b = vec![0.0; h * w];
    let blobs = rng.range_inclusive(5, 12);
    for _ in 0..blobs {
        let (cy, cx) = (rng.uniform(0.0, hf), rng.uniform(0.0, wf));
        let sigma = rng.uniform(0.05, 0.2) * side;
        let amp = rng.uniform(0.3, 1.0);
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                b[i * w + j] += amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let ellipses = rng.range_inclusive(1, 3);
    for _ in 0..ellipses {
        let (cy, cx) = (rng.uniform(0.2 * hf, 0.8 * hf), rng.uniform(0.2 * wf, 0.8 * wf));
        let (ay, ax) = (rng.uniform(0.1, 0.3) * hf, rng.uniform(0.1, 0.3) * wf);
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let amp = rng.uniform(0.2, 0.6);
        let (s, c) = theta.sin_cos();
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                    b[i * w + j] += amp;
                }
            }
        }
    }
    for v in b.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let lo = b.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in b.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        b.iter_mut().for_each(|v| *v = 0.0);
    }
    b
}

pub fn generate_phantom(seed: u64, h: usize, w: usize) -> Result<PhantomSample> {
    generate_phantom_with_id(format!("seed{seed}"), seed, h, w)
}

pub fn generate_phantom_with_id(id: impl Into<String>, seed: u64, h: usize, w: usize) -> Result<PhantomSample> {
    if h < MIN_PHANTOM_SIZE || w < MIN_PHANTOM_SIZE {
        return Err(Error::Param(format!(
            "phantom size {h}x{w} is below the {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE} minimum"
        )));
    }
    let mut rng = RngStream::derive(seed, &[h as u64, w as u64]);
    let base = base_field(&mut rng, h, w);
    let shape = Shape4::new(1, 1, h, w)?;
    let [a, b, c, d] = modalities_from_base(&base, h, w);
    PhantomSample::new(
        id,
        [
            Tensor::from_vec(shape, a)?,
            Tensor::from_vec(shape, b)?,
            Tensor::from_vec(shape, c)?,
            Tensor::from_vec(shape, d)?,
        ],
    )
}

/// One geometric augmentation, shared by all modalities of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    pub scale: f64,
}

pub const AUGMENT_SCALES: [f64; 3] = [0.9, 1.0, 1.1];

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { hflip: false, vflip: false, quarter_turns: 0, scale: 1.0 };

    pub fn sample(rng: &mut RngStream) -> Self {
        AugmentDraw {
            hflip: rng.bernoulli(0.5),
            vflip: rng.bernoulli(0.5),
            quarter_turns: rng.range_inclusive(0, 3) as u8,
            scale: AUGMENT_SCALES[rng.range_inclusive(0, 2) as usize],
        }
    }

    /// Applies the draw to one plane. Odd quarter turns on non-square planes
    /// are dropped to keep the size; they become the even turn below them.
    pub fn apply_plane(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = x.to_vec();
        if self.hflip {
            out = (0..h * w).map(|k| out[(k / w) * w + (w - 1 - k % w)]).collect();
        }
        if self.vflip {
            out = (0..h * w).map(|k| out[(h - 1 - k / w) * w + k % w]).collect();
        }
        let turns = if h == w { self.quarter_turns % 4 } else { self.quarter_turns & 2 };
        if h != w {
            if turns == 2 {
                out.reverse();
            }
        } else {
            for _ in 0..turns {
                // counter-clockwise: out[i][j] = in[j][n-1-i]
                let prev = out.clone();
                for i in 0..h {
                    for j in 0..w {
                        out[i * w + j] = prev[j * w + (w - 1 - i)];
                    }
                }
            }
        }
        if self.scale != 1.0 {
            out = rescale(&out, h, w, self.scale);
        }
        out
    }
}

/// Bilinear zoom about the image center, zero outside the source.
fn rescale(x: &[f64], h: usize, w: usize, scale: f64) -> Vec<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |i: isize, j: isize| {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x[i as usize * w + j as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let sy = cy + (i as f64 - cy) / scale;
            let sx = cx + (j as f64 - cx) / scale;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            out[i * w + j] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

pub fn augment_with(sample: &PhantomSample, draw: &AugmentDraw) -> Result<PhantomSample> {
    let (h, w) = (sample.height(), sample.width());
    let shape = Shape4::new(1, 1, h, w)?;
    let mut images = sample.images.clone();
    for img in images.iter_mut() {
        *img = Tensor::from_vec(shape, draw.apply_plane(img.data(), h, w))?;
    }
    PhantomSample::new(sample.id.clone(), images)
}

pub fn augment(sample: &PhantomSample, rng: &mut RngStream) -> Result<PhantomSample> {
    augment_with(sample, &AugmentDraw::sample(rng))
}

// ---- PGM -------------------------------------------------------------------

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { offset, msg: msg.into() }
}

/// Decodes a binary P5 graymap with maxval 255 into a (1,1,h,w) tensor in [0,1].
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f64>> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(parse_err(0, "expected P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[k] = text.parse().map_err(|_| parse_err(start, format!("{name} out of range")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(pos, format!("unsupported maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(parse_err(pos, "zero image dimension"));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(pos, "expected whitespace after maxval")),
    }
    let need = h * w;
    if bytes.len() - pos < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: {} of {need} pixel bytes", bytes.len() - pos),
        ));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(Shape4::new(1, 1, h, w)?, data)
}

/// Encodes a (1,1,h,w) tensor; values are clamped to [0,1] then rounded to bytes.
pub fn encode_pgm<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::Shape(format!("pgm export expects (1,1,h,w), got {s}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(t.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn load_pgm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path)?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse { offset, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

pub fn save_pgm<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_pgm(t)?)?;
    Ok(())
}

// ---- padding ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl CropRecord {
    pub fn is_identity(&self) -> bool {
        self.top + self.bottom + self.left + self.right == 0
    }
}

/// Zero-pads height and width up to the next multiple of `factor`,
/// splitting the padding with the smaller half on top/left.
pub fn pad_to_multiple<T: Scalar>(t: &Tensor<T>, factor: usize) -> Result<(Tensor<T>, CropRecord)> {
    if factor == 0 {
        return Err(Error::Param("padding factor must be positive".into()));
    }
    let s = t.shape();
    let ph = s.h.div_ceil(factor) * factor - s.h;
    let pw = s.w.div_ceil(factor) * factor - s.w;
    let rec = CropRecord { top: ph / 2, bottom: ph - ph / 2, left: pw / 2, right: pw - pw / 2 };
    if rec.is_identity() {
        return Ok((t.clone(), rec));
    }
    let os = s.with_hw(s.h + ph, s.w + pw);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..s.h {
                let d = (i + rec.top) * os.w + rec.left;
                dst[d..d + s.w].copy_from_slice(&src[i * s.w..(i + 1) * s.w]);
            }
        }
    }
    Ok((out, rec))
}

pub fn crop_back<T: Scalar>(t: &Tensor<T>, rec: &CropRecord) -> Result<Tensor<T>> {
    if rec.is_identity() {
        return Ok(t.clone());
    }
    let s = t.shape();
    if rec.top + rec.bottom >= s.h || rec.left + rec.right >= s.w {
        return Err(Error::Shape(format!("crop {rec:?} does not fit {s}")));
    }
    let (h, w) = (s.h - rec.top - rec.bottom, s.w - rec.left - rec.right);
    let os = s.with_hw(h, w);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..h {
                let o = (i + rec.top) * s.w + rec.left;
                dst[i * w..(i + 1) * w].copy_from_slice(&src[o..o + w]);
            }
        }
    }
    Ok(out)
}

// ---- datasets --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn file(&self, id: &str, m: Modality) -> PathBuf {
        self.root.join(id).join(format!("{}.pgm", m.name()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(seed) = self.seed {
            s.push_str(&format!("# synnet phantoms seed={seed}\n"));
        }
        for id in &self.ids {
            s.push_str(&format!("{id}\t{}\t{}\n", self.height, self.width));
        }
        s
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let mut ids = Vec::new();
        let mut size = None;
        let mut seed = None;
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("synnet phantoms seed=") {
                    seed = v.trim().parse().ok();
                }
                continue;
            }
            let bad = |msg: &str| Error::Config { line: k + 1, msg: format!("manifest: {msg}") };
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(bad("expected `id<TAB>h<TAB>w`"));
            }
            let h: usize = parts[1].parse().map_err(|_| bad("bad height"))?;
            let w: usize = parts[2].parse().map_err(|_| bad("bad width"))?;
            match size {
                None => size = Some((h, w)),
                Some(s) if s != (h, w) => return Err(bad("all samples must share one size")),
                _ => {}
            }
            ids.push(parts[0].to_string());
        }
        let (height, width) = size.ok_or_else(|| Error::Config { line: 0, msg: "manifest lists no samples".into() })?;
        Ok(DatasetManifest { root: root.to_path_buf(), ids, height, width, seed })
    }
}

/// Per-sample generator seed inside a dataset.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    RngStream::derive(dataset_seed, &[0x5a4d_504c, index as u64]).next_u64()
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Generates `count` phantoms in memory, as `write_dataset` would.
pub fn generate_samples(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<PhantomSample>> {
    (0..count).map(|i| generate_phantom_with_id(sample_id(i), sample_seed(seed, i), h, w)).collect()
}

pub fn write_dataset(root: &Path, count: usize, h: usize, w: usize, seed: u64) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Param("sample count must be positive".into()));
    }
    let samples = generate_samples(count, h, w, seed)?;
    fs::create_dir_all(root)?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        height: h,
        width: w,
        seed: Some(seed),
    };
    for s in &samples {
        fs::create_dir_all(root.join(&s.id))?;
        for m in Modality::ALL {
            save_pgm(&manifest.file(&s.id, m), s.get(m))?;
        }
    }
    fs::write(root.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

/// A dataset fully loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<PhantomSample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
        let manifest = DatasetManifest::parse(root, &text)?;
        let mut samples = Vec::with_capacity(manifest.ids.len());
        for id in &manifest.ids {
            let mut imgs = Vec::with_capacity(4);
            for m in Modality::ALL {
                let t = load_pgm(&manifest.file(id, m))?;
                let s = t.shape();
                if (s.h, s.w) != (manifest.height, manifest.width) {
                    return Err(Error::Shape(format!(
                        "{id}/{m}.pgm is {}x{}, manifest says {}x{}",
                        s.h, s.w, manifest.height, manifest.width
                    )));
                }
                imgs.push(t);
            }
            let images: [Tensor<f64>; 4] = imgs.try_into().expect("four modalities");
            samples.push(PhantomSample::new(id.clone(), images)?);
        }
        Ok(Dataset { manifest, samples })
    }

    pub fn from_samples(samples: Vec<PhantomSample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Usage("empty dataset".into()))?;
        let (h, w) = (first.height(), first.width());
        if samples.iter().any(|s| (s.height(), s.width()) != (h, w)) {
            return Err(Error::Shape("dataset samples differ in size".into()));
        }
        let manifest = DatasetManifest {
            root: PathBuf::new(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            height: h,
            width: w,
            seed: None,
        };
        Ok(Dataset { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `fraction` of ids (at least one) train, the rest test.
    pub fn split(&self, fraction: f64) -> Result<(Vec<PhantomSample>, Vec<PhantomSample>)> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Param(format!("train fraction must be in (0,1], got {fraction}")));
        }
        let n_train = ((self.len() as f64 * fraction).floor() as usize).clamp(1, self.len());
        Ok((self.samples[..n_train].to_vec(), self.samples[n_train..].to_vec()))
    }
}

/// One mini-batch: a (n,1,h,w) tensor per requested modality.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub inputs: Vec<Tensor<f64>>,
    pub targets: Vec<Tensor<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    pub augment: bool,
}

fn stack(samples: &[PhantomSample], m: Modality) -> Result<Tensor<f64>> {
    let parts: Vec<Tensor<f64>> = samples.iter().map(|s| s.get(m).clone()).collect();
    Tensor::stack_batch(&parts)
}

/// Splits `samples` into batches for one epoch. The order is a permutation
/// drawn from `epoch_seed` (or the stored order without shuffling); the last
/// batch keeps the remainder.
pub fn batches(
    samples: &[PhantomSample],
    inputs: &[Modality],
    targets: &[Modality],
    opts: &BatchOptions,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    if opts.batch_size == 0 {
        return Err(Error::Param("batch size must be positive".into()));
    }
    if inputs.is_empty() || targets.is_empty() {
        return Err(Error::Usage("at least one input and one target modality are required".into()));
    }
    let order: Vec<usize> = if opts.shuffle {
        RngStream::derive(epoch_seed, &[0x5045_524d]).permutation(samples.len())
    } else {
        (0..samples.len()).collect()
    };
    let mut out = Vec::new();
    for chunk in order.chunks(opts.batch_size) {
        let picked: Vec<PhantomSample> = chunk
            .iter()
            .map(|&i| {
                if opts.augment {
                    augment(&samples[i], &mut RngStream::derive(epoch_seed, &[0x4155_4730, i as u64]))
                } else {
                    Ok(samples[i].clone())
                }
            })
            .collect::<Result<_>>()?;
        out.push(Batch {
            ids: picked.iter().map(|s| s.id.clone()).collect(),
            inputs: inputs.iter().map(|&m| stack(&picked, m)).collect::<Result<_>>()?,
            targets: targets.iter().map(|&m| stack(&picked, m)).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(h: usize, w: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape4::new(1, 1, h, w).unwrap(), v).unwrap()
    }

    #[test]
    fn phantom_is_deterministic_and_bounded() {
        let a = generate_phantom(3, 24, 20).unwrap();
        let b = generate_phantom(3, 24, 20).unwrap();
        assert!(a.bit_eq(&b));
        let c = generate_phantom(4, 24, 20).unwrap();
        assert!(!a.get(Modality::T1).bit_eq(c.get(Modality::T1)));
        for m in Modality::ALL {
            assert!(a.get(m).data().iter().all(|v| (0.0..=1.0).contains(v)), "{m}");
        }
        assert!(generate_phantom(1, 8, 8).is_err());
        assert!(generate_phantom(1, 16, 15).is_err());
    }

    #[test]
    fn constant_zero_base_gives_all_ones_t2() {
        let [t1, t2, t1c, flair] = modalities_from_base(&vec![0.0; 20], 4, 5);
        assert!(t1.iter().all(|&v| v == 0.0));
        assert!(t2.iter().all(|&v| v == 1.0));
        assert!(t1c.iter().all(|&v| v == 0.0));
        assert!(flair.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hflip_reverses_rows() {
        let d = AugmentDraw { hflip: true, ..AugmentDraw::IDENTITY };
        assert_eq!(d.apply_plane(&[1.0, 2.0, 3.0, 4.0], 2, 2), vec![2.0, 1.0, 4.0, 3.0]);
        let v = AugmentDraw { vflip: true, ..AugmentDraw::IDENTITY };
        assert_eq!(v.apply_plane(&[1.0, 2.0, 3.0, 4.0], 2, 2), vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn quarter_turn_rotates_counter_clockwise() {
        let d = AugmentDraw { quarter_turns: 1, ..AugmentDraw::IDENTITY };
        // [[1,2],[3,4]] -> [[2,4],[1,3]]
        assert_eq!(d.apply_plane(&[1.0, 2.0, 3.0, 4.0], 2, 2), vec![2.0, 4.0, 1.0, 3.0]);
        let four = AugmentDraw { quarter_turns: 2, ..AugmentDraw::IDENTITY };
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let twice = four.apply_plane(&four.apply_plane(&x, 3, 3), 3, 3);
        assert_eq!(twice, x);
        // non-square: half turn is a full reversal, odd turns reduce to even ones
        let y: Vec<f64> = (0..6).map(|v| v as f64).collect();
        assert_eq!(four.apply_plane(&y, 2, 3), vec![5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        let one = AugmentDraw { quarter_turns: 1, ..AugmentDraw::IDENTITY };
        assert_eq!(one.apply_plane(&y, 2, 3), y);
    }

    #[test]
    fn identity_draw_and_double_flip_are_exact() {
        let s = generate_phantom(9, 16, 16).unwrap();
        assert!(augment_with(&s, &AugmentDraw::IDENTITY).unwrap().bit_eq(&s));
        let f = AugmentDraw { hflip: true, vflip: true, ..AugmentDraw::IDENTITY };
        let back = augment_with(&augment_with(&s, &f).unwrap(), &f).unwrap();
        assert!(back.bit_eq(&s));
    }

    #[test]
    fn augmentation_is_shared_across_modalities() {
        // t2 is a pointwise-free function of t1 only through a blur, but flair is pointwise:
        // sqrt(aug(t1)) must equal aug(flair) for any geometry without resampling
        let s = generate_phantom(11, 20, 20).unwrap();
        let d = AugmentDraw { hflip: true, vflip: false, quarter_turns: 3, scale: 1.0 };
        let a = augment_with(&s, &d).unwrap();
        for (t1, fl) in a.get(Modality::T1).data().iter().zip(a.get(Modality::Flair).data()) {
            assert_eq!(t1.sqrt(), *fl);
        }
    }

    #[test]
    fn rescale_stays_in_range_and_zero_pads() {
        let s = generate_phantom(12, 16, 16).unwrap();
        let d = AugmentDraw { scale: 0.9, ..AugmentDraw::IDENTITY };
        let a = augment_with(&s, &d).unwrap();
        let t = a.get(Modality::T2);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // shrinking pulls in zeros at the corner
        assert!(t.at(0, 0, 0, 0) < s.get(Modality::T2).at(0, 0, 0, 0));
    }

    #[test]
    fn pgm_roundtrip_and_endpoints() {
        let t = plane(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]);
        let bytes = encode_pgm(&t).unwrap();
        let back = decode_pgm(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
        assert_eq!(back.data()[2], 1.0);
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[1], 128.0 / 255.0);
    }

    #[test]
    fn pgm_errors_carry_offsets() {
        match decode_pgm(b"P6\n1 1\n255\n\0") {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_pgm(b"P5\n2 2\n255\n\x01\x02") {
            Err(Error::Parse { offset, msg }) => {
                assert_eq!(offset, 13);
                assert!(msg.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_pgm(b"P5\n2 x"), Err(Error::Parse { offset: 5, .. })));
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        let ok = decode_pgm(b"P5\n# comment\n1 1\n255\n\xff").unwrap();
        assert_eq!(ok.data(), &[1.0]);
    }

    #[test]
    fn pad_181_to_184() {
        let t = Tensor::<f64>::filled(1, 1, 181, 181, 1.0).unwrap();
        let (p, rec) = pad_to_multiple(&t, 8).unwrap();
        assert_eq!((p.shape().h, p.shape().w), (184, 184));
        assert_eq!(rec, CropRecord { top: 1, bottom: 2, left: 1, right: 2 });
        assert_eq!(p.at(0, 0, 0, 0), 0.0);
        assert_eq!(p.at(0, 0, 1, 1), 1.0);
        assert_eq!(p.at(0, 0, 182, 182), 0.0);
        assert!(crop_back(&p, &rec).unwrap().bit_eq(&t));
        let m = Tensor::<f64>::filled(1, 1, 16, 24, 0.5).unwrap();
        let (q, r) = pad_to_multiple(&m, 8).unwrap();
        assert!(r.is_identity() && q.bit_eq(&m));
    }

    proptest! {
        #[test]
        fn pad_crop_roundtrip(h in 1usize..40, w in 1usize..40, f in prop::sample::select(vec![1usize, 2, 4, 8]), seed in 0u64..100) {
            let t = Tensor::<f32>::random(Shape4::new(2, 3, h, w).unwrap(), &mut RngStream::new(seed), 1.0).unwrap();
            let (p, rec) = pad_to_multiple(&t, f).unwrap();
            prop_assert_eq!(p.shape().h % f, 0);
            prop_assert_eq!(p.shape().w % f, 0);
            prop_assert!(crop_back(&p, &rec).unwrap().bit_eq(&t));
        }
    }

    #[test]
    fn batch_partition_and_determinism() {
        let samples = generate_samples(10, 16, 16, 5).unwrap();
        let opts = BatchOptions { batch_size: 4, shuffle: true, augment: false };
        let b = batches(&samples, &[Modality::T1], &[Modality::T2], &opts, 77).unwrap();
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b[0].inputs.len(), 1);
        assert_eq!(b[0].targets.len(), 1);
        assert_eq!(b[0].inputs[0].shape().dims(), [4, 1, 16, 16]);
        let again = batches(&samples, &[Modality::T1], &[Modality::T2], &opts, 77).unwrap();
        let ids = |v: &[Batch]| v.iter().flat_map(|b| b.ids.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&b), ids(&again));
        let mut all = ids(&b);
        all.sort();
        assert_eq!(all, samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>());
        let other = batches(&samples, &[Modality::T1], &[Modality::T2], &opts, 78).unwrap();
        assert_ne!(ids(&b), ids(&other));
        let mimo = batches(&samples, &[Modality::T1, Modality::T1c], &[Modality::T2, Modality::Flair], &opts, 1).unwrap();
        assert_eq!((mimo[0].inputs.len(), mimo[0].targets.len()), (2, 2));
        assert!("dwi".parse::<Modality>().is_err());
    }

    #[test]
    fn dataset_write_load_split() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), 5, 16, 20, 3).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let fresh = generate_samples(5, 16, 20, 3).unwrap();
        for (a, b) in ds.samples.iter().zip(&fresh) {
            for md in Modality::ALL {
                for (x, y) in a.get(md).data().iter().zip(b.get(md).data()) {
                    assert!((x - y).abs() <= 1.0 / 510.0 + 1e-12);
                }
            }
        }
        let (tr, te) = ds.split(0.8).unwrap();
        assert_eq!((tr.len(), te.len()), (4, 1));
        assert_eq!(tr[0].id, "s0000");
    }
}
