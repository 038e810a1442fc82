//! Checkpoint files and the plain-text run configuration.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "SYNNETCK" | u32 version | u8 kind | u32 depth | depth × u32 widths
//! | u32 count | count × (u32 name_len, name, u8 dtype, u32 ndim, ndim × u32 dims, scalars)
//! | u32 config_len | config text
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{Modality, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::layers::{DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
use crate::loss::{LossKind, SsimMode};
use crate::model::{build_model, ParamKind, ParamSet, SkipWiring, SynNetModel, Topology, TopologyKind};
use crate::optim::{OptimState, TrainConfig};
use crate::rng::RngStream;
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape4, Tensor};

pub const MAGIC: &[u8; 8] = b"SYNNETCK";
pub const FORMAT_VERSION: u32 = 1;

const VELOCITY_PREFIX: &str = "optim.velocity.";
const ITERATION_KEY: &str = "optim.iteration";
const EPOCH_KEY: &str = "optim.epoch";

/// A tensor of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    Single(Tensor<f32>),
    Double(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::Single(_) => DType::Single,
            AnyTensor::Double(_) => DType::Double,
        }
    }

    pub fn shape(&self) -> Shape4 {
        match self {
            AnyTensor::Single(t) => t.shape(),
            AnyTensor::Double(t) => t.shape(),
        }
    }

    pub fn of<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::Single => AnyTensor::Single(t.cast()),
            DType::Double => AnyTensor::Double(t.cast()),
        }
    }

    /// The tensor in precision `T`; the stored precision must match.
    pub fn expect<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' is stored as {:?}, expected {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(match self {
            AnyTensor::Single(t) => t.cast(),
            AnyTensor::Double(t) => t.cast(),
        })
    }

    fn bit_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (AnyTensor::Single(a), AnyTensor::Single(b)) => a.bit_eq(b),
            (AnyTensor::Double(a), AnyTensor::Double(b)) => a.bit_eq(b),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: TopologyKind,
    pub channels: Vec<usize>,
    pub tensors: Vec<(String, AnyTensor)>,
    pub config_text: String,
}

impl Checkpoint {
    /// Parameters, running statistics and optimizer state of a training run.
    pub fn from_training<T: Scalar>(cfg: &RunConfig, params: &ParamSet<T>, state: &OptimState<T>) -> Self {
        let mut tensors: Vec<(String, AnyTensor)> =
            params.iter().map(|(n, p)| (n.to_string(), AnyTensor::of(&p.tensor))).collect();
        for (n, v) in state.velocity.iter() {
            tensors.push((format!("{VELOCITY_PREFIX}{n}"), AnyTensor::of(&v.tensor)));
        }
        let one = Shape4::new(1, 1, 1, 1).expect("unit shape");
        let counter = |v: u64| AnyTensor::of(&Tensor::<T>::new(one, T::of_f64(v as f64)));
        tensors.push((ITERATION_KEY.into(), counter(state.iteration)));
        tensors.push((EPOCH_KEY.into(), counter(state.epoch)));
        Checkpoint {
            version: FORMAT_VERSION,
            kind: cfg.topology.kind,
            channels: cfg.topology.channels.clone(),
            tensors,
            config_text: cfg.to_text(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Precision of the stored parameters.
    pub fn dtype(&self) -> Option<DType> {
        self.tensors.first().map(|(_, t)| t.dtype())
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let cfg = RunConfig::parse(&self.config_text)?;
        if cfg.topology.kind != self.kind || cfg.topology.channels != self.channels {
            return Err(Error::Checkpoint("topology block disagrees with the embedded config".into()));
        }
        Ok(cfg)
    }

    pub fn params<T: Scalar>(&self) -> Result<ParamSet<T>> {
        let mut p = ParamSet::new();
        for (name, t) in &self.tensors {
            if name.starts_with("optim.") {
                continue;
            }
            let kind = ParamKind::from_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("cannot infer parameter kind of '{name}'")))?;
            p.insert(name.clone(), kind, t.expect(name)?)?;
        }
        Ok(p)
    }

    pub fn optim_state<T: Scalar>(&self, params: &ParamSet<T>, lr: f64, momentum: f64) -> Result<OptimState<T>> {
        let mut state = OptimState::new(params, lr, momentum)?;
        for (name, v) in state.velocity.iter_mut() {
            let key = format!("{VELOCITY_PREFIX}{name}");
            let t = self.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing '{key}'")))?;
            let t = t.expect::<T>(&key)?;
            if t.shape() != v.tensor.shape() {
                return Err(Error::Checkpoint(format!("'{key}' has shape {}", t.shape())));
            }
            v.tensor = t;
        }
        let counter = |key: &str| -> Result<u64> {
            let t = self.get(key).ok_or_else(|| Error::Checkpoint(format!("missing '{key}'")))?;
            let v = t.expect::<T>(key)?.data()[0].as_f64();
            Ok(v as u64)
        };
        state.iteration = counter(ITERATION_KEY)?;
        state.epoch = counter(EPOCH_KEY)?;
        Ok(state)
    }

    /// Model, parameters and config, checked against each other.
    pub fn restore<T: Scalar>(&self) -> Result<(RunConfig, SynNetModel, ParamSet<T>)> {
        let cfg = self.run_config()?;
        let model = cfg.model()?;
        let params = self.params::<T>()?;
        let (_, fresh) = build_model::<T>(cfg.topology.clone(), &mut RngStream::new(0))?;
        if !fresh.same_layout(&params) {
            return Err(Error::Checkpoint("stored parameters do not match the topology".into()));
        }
        Ok((cfg, model, params))
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.kind == other.kind
            && self.channels == other.channels
            && self.config_text == other.config_text
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.kind.code());
        put_u32(&mut out, self.channels.len());
        for &c in &self.channels {
            put_u32(&mut out, c);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            put_u32(&mut out, 4);
            for d in t.shape().dims() {
                put_u32(&mut out, d);
            }
            match t {
                AnyTensor::Single(x) => x.data().iter().for_each(|v| v.write_le(&mut out)),
                AnyTensor::Double(x) => x.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
        }
        let code = r.take(1, "topology kind")?[0];
        let kind = TopologyKind::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown topology kind code {code}")))?;
        let depth = r.u32("topology depth")? as usize;
        if depth > 64 {
            return Err(Error::Checkpoint(format!("implausible depth {depth}")));
        }
        let channels = (0..depth).map(|_| r.u32("channel width").map(|c| c as usize)).collect::<Result<_>>()?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dcode = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(dcode)
                .ok_or_else(|| Error::Checkpoint(format!("'{name}': unknown dtype code {dcode}")))?;
            let ndim = r.u32("ndim")?;
            if ndim != 4 {
                return Err(Error::Checkpoint(format!("'{name}': expected 4 dims, found {ndim}")));
            }
            let mut dims = [0usize; 4];
            for d in dims.iter_mut() {
                *d = r.u32("dims")? as usize;
            }
            let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3])
                .map_err(|e| Error::Checkpoint(format!("'{name}': {e}")))?;
            let bytes = shape
                .len()
                .checked_mul(dtype.byte_width())
                .ok_or_else(|| Error::Checkpoint(format!("'{name}': tensor too large")))?;
            let raw = r.take(bytes, "tensor data")?;
            let t = match dtype {
                DType::Single => AnyTensor::Single(Tensor::from_vec(shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
                DType::Double => AnyTensor::Double(Tensor::from_vec(shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
            };
            tensors.push((name, t));
        }
        let len = r.u32("config length")? as usize;
        let config_text = std::str::from_utf8(r.take(len, "config text")?)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { version, kind, channels, tensors, config_text })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {field} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("four bytes")))
    }
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    fs::write(path, cp.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

// ---- run configuration -----------------------------------------------------

/// Everything a training run needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub topology: Topology,
    pub train: TrainConfig,
    pub precision: DType,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub train_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            topology: Topology::default(),
            train: TrainConfig::default(),
            precision: DType::Single,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

pub fn default_inputs(kind: TopologyKind) -> Vec<Modality> {
    match kind {
        TopologyKind::Siso => vec![Modality::T1],
        _ => vec![Modality::T1, Modality::T1c],
    }
}

pub fn default_outputs(kind: TopologyKind) -> Vec<Modality> {
    match kind {
        TopologyKind::Mimo => vec![Modality::T2, Modality::Flair],
        _ => vec![Modality::T2],
    }
}

const KEYS: &[&str] = &[
    "topology",
    "depth",
    "channels",
    "head_width",
    "miso_index_arm",
    "mimo_skip",
    "input_modalities",
    "output_modalities",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lr",
    "momentum",
    "batch_size",
    "epochs",
    "seed",
    "loss",
    "ssim_mode",
    "ssim_window",
    "edge_beta",
    "tv_eps",
    "precision",
    "bn_eps",
    "bn_momentum",
    "augment",
    "shuffle",
    "train_fraction",
];

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got '{v}'")),
    }
}

fn parse_num<N: std::str::FromStr>(v: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}' as a number"))
}

fn parse_precision(v: &str) -> std::result::Result<DType, String> {
    match v.to_ascii_lowercase().as_str() {
        "single" | "f32" => Ok(DType::Single),
        "double" | "f64" => Ok(DType::Double),
        _ => Err(format!("unknown precision '{v}' (expected single or double)")),
    }
}

fn precision_name(d: DType) -> &'static str {
    match d {
        DType::Single => "single",
        DType::Double => "double",
    }
}

impl RunConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// later keys override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: line_no, msg: format!("expected `key = value`, got '{line}'") })?;
            let k = k.trim().to_ascii_lowercase();
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config { line: line_no, msg: format!("unknown key '{k}'") });
            }
            entries.push((line_no, k, v.trim().to_string()));
        }
        let last = |key: &str| entries.iter().rev().find(|(_, k, _)| k == key);
        let mut cfg = RunConfig::default();
        // topology first, since modality defaults depend on it
        if let Some((line, _, v)) = last("topology") {
            cfg.topology.kind = v.parse().map_err(|msg| Error::Config { line: *line, msg })?;
        }
        cfg.train.inputs = default_inputs(cfg.topology.kind);
        cfg.train.targets = default_outputs(cfg.topology.kind);
        for (line, key, v) in &entries {
            let at = |msg: String| Error::Config { line: *line, msg: format!("{key}: {msg}") };
            let t = &mut cfg.train;
            match key.as_str() {
                "topology" => {}
                "depth" => cfg.topology.depth = parse_num(v).map_err(at)?,
                "channels" => {
                    cfg.topology.channels =
                        v.split(',').map(|c| parse_num(c.trim())).collect::<std::result::Result<_, _>>().map_err(at)?
                }
                "head_width" => cfg.topology.head_width = parse_num(v).map_err(at)?,
                "miso_index_arm" => cfg.topology.miso_index_arm = parse_num(v).map_err(at)?,
                "mimo_skip" => cfg.topology.mimo_skip = v.parse::<SkipWiring>().map_err(at)?,
                "input_modalities" => t.inputs = Modality::parse_list(v).map_err(|e| at(e.to_string()))?,
                "output_modalities" => t.targets = Modality::parse_list(v).map_err(|e| at(e.to_string()))?,
                "lambda1" => t.weights.l2 = parse_num(v).map_err(at)?,
                "lambda2" => t.weights.ssim = parse_num(v).map_err(at)?,
                "lambda3" => t.weights.tv = parse_num(v).map_err(at)?,
                "lambda4" => t.weights.wd = parse_num(v).map_err(at)?,
                "lr" => t.lr = parse_num(v).map_err(at)?,
                "momentum" => t.momentum = parse_num(v).map_err(at)?,
                "batch_size" => t.batch_size = parse_num(v).map_err(at)?,
                "epochs" => t.epochs = parse_num(v).map_err(at)?,
                "seed" => t.seed = parse_num(v).map_err(at)?,
                "loss" => t.loss = v.parse::<LossKind>().map_err(at)?,
                "ssim_mode" => t.ssim.mode = v.parse::<SsimMode>().map_err(at)?,
                "ssim_window" => t.ssim.window = parse_num(v).map_err(at)?,
                "edge_beta" => t.edge_beta = parse_num(v).map_err(at)?,
                "tv_eps" => t.tv_eps = parse_num(v).map_err(at)?,
                "precision" => cfg.precision = parse_precision(v).map_err(at)?,
                "bn_eps" => cfg.bn_eps = parse_num(v).map_err(at)?,
                "bn_momentum" => cfg.bn_momentum = parse_num(v).map_err(at)?,
                "augment" => t.augment = parse_bool(v).map_err(at)?,
                "shuffle" => t.shuffle = parse_bool(v).map_err(at)?,
                "train_fraction" => cfg.train_fraction = parse_num(v).map_err(at)?,
                _ => unreachable!("key list checked above"),
            }
        }
        // depth alone may shorten or lengthen nothing: it has to agree with the widths
        let line_of = |key: &str| last(key).map(|e| e.0).unwrap_or(0);
        if last("depth").is_some() && last("channels").is_none() && cfg.topology.depth != cfg.topology.channels.len() {
            return Err(Error::Config {
                line: line_of("depth"),
                msg: format!("depth {} needs a matching `channels` list", cfg.topology.depth),
            });
        }
        if last("depth").is_none() {
            cfg.topology.depth = cfg.topology.channels.len();
        }
        let check = |r: Result<()>, key: &str| {
            r.map_err(|e| Error::Config { line: line_of(key), msg: e.to_string() })
        };
        check(cfg.topology.validate(), "channels")?;
        check(cfg.train.weights.validate(), "lambda1")?;
        if cfg.train.inputs.len() != cfg.topology.in_arms() {
            return Err(Error::Config {
                line: line_of("input_modalities"),
                msg: format!("{} topology takes {} input modalities", cfg.topology.kind, cfg.topology.in_arms()),
            });
        }
        if cfg.train.targets.len() != cfg.topology.out_arms() {
            return Err(Error::Config {
                line: line_of("output_modalities"),
                msg: format!("{} topology has {} output heads", cfg.topology.kind, cfg.topology.out_arms()),
            });
        }
        check(cfg.train.validate(), "epochs")?;
        check(OptimState::<f64>::new(&ParamSet::new(), cfg.train.lr, cfg.train.momentum).map(|_| ()), "lr")?;
        if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) {
            return Err(Error::Config { line: line_of("train_fraction"), msg: "train_fraction must be in (0,1]".into() });
        }
        if !(cfg.bn_eps > 0.0) || !(0.0..=1.0).contains(&cfg.bn_momentum) {
            return Err(Error::Config { line: line_of("bn_eps"), msg: "bn_eps must be > 0 and bn_momentum in [0,1]".into() });
        }
        if cfg.train.ssim.mode == SsimMode::Local && cfg.train.ssim.window % 2 == 0 {
            return Err(Error::Config { line: line_of("ssim_window"), msg: "ssim_window must be odd".into() });
        }
        Ok(cfg)
    }

    /// Every key, one per line, in a form `parse` reads back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let topo = &self.topology;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("topology", topo.kind.to_string());
        kv("depth", topo.depth.to_string());
        kv("channels", topo.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        kv("head_width", topo.head_width.to_string());
        kv("miso_index_arm", topo.miso_index_arm.to_string());
        kv("mimo_skip", topo.mimo_skip.to_string());
        kv("input_modalities", Modality::list_to_string(&t.inputs));
        kv("output_modalities", Modality::list_to_string(&t.targets));
        kv("lambda1", t.weights.l2.to_string());
        kv("lambda2", t.weights.ssim.to_string());
        kv("lambda3", t.weights.tv.to_string());
        kv("lambda4", t.weights.wd.to_string());
        kv("lr", t.lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("loss", t.loss.to_string());
        kv("ssim_mode", t.ssim.mode.to_string());
        kv("ssim_window", t.ssim.window.to_string());
        kv("edge_beta", t.edge_beta.to_string());
        kv("tv_eps", t.tv_eps.to_string());
        kv("precision", precision_name(self.precision).to_string());
        kv("bn_eps", self.bn_eps.to_string());
        kv("bn_momentum", self.bn_momentum.to_string());
        kv("augment", t.augment.to_string());
        kv("shuffle", t.shuffle.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        s
    }

    pub fn model(&self) -> Result<SynNetModel> {
        let mut m = SynNetModel::new(self.topology.clone())?;
        m.bn_eps = self.bn_eps;
        m.bn_momentum = self.bn_momentum;
        Ok(m)
    }

    /// Freshly initialized parameters, drawn from a stream derived from the run seed.
    pub fn initial_params<T: Scalar>(&self) -> Result<ParamSet<T>> {
        let mut rng = RngStream::derive(self.train.seed, &[0x494e_4954]);
        Ok(build_model::<T>(self.topology.clone(), &mut rng)?.1)
    }
}
