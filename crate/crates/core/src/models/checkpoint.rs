//! Flat binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UQCK"            4-byte magic
//! version: u8       currently 1
//! kind: u8          1 = MLP, 2 = variational regressor, 3 = convolutional classifier
//! count: u32        number of tensors
//! per tensor:
//!   name_len: u16, name: UTF-8 bytes
//!   ndim: u32, dims: ndim × u64
//!   values: prod(dims) × f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::classifier::{Architecture, Classifier, ClassifierConfig, ClassifierVariant, ConvNet};
use super::mlp::{Dense, DropoutPlacement, Mlp};
use super::svi::{SviRegressor, VariationalLayer};
use super::{ModelError, Result};

pub const MAGIC: &[u8; 4] = b"UQCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Mlp = 1,
    SviRegressor = 2,
    Classifier = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub tensors: Vec<Tensor>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => bad("truncated checkpoint"),
        _ => ModelError::Io(e),
    })?;
    Ok(buf)
}

impl Checkpoint {
    fn new(kind: CheckpointKind) -> Self {
        Self {
            kind,
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f64>) {
        self.tensors.push(Tensor {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u64).collect(),
            data,
        });
    }

    fn scalar(&mut self, name: &str, v: f64) {
        self.push(name, &[1], vec![v]);
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, self.kind as u8])?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for d in &t.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic: [u8; 4] = read_exact(r)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let [version, kind] = read_exact::<2>(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let kind = match kind {
            1 => CheckpointKind::Mlp,
            2 => CheckpointKind::SviRegressor,
            3 => CheckpointKind::Classifier,
            k => return Err(bad(format!("unknown model kind {k}"))),
        };
        let count = u32::from_le_bytes(read_exact(r)?);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read_exact(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = u32::from_le_bytes(read_exact(r)?);
            let dims = (0..ndim)
                .map(|_| read_exact(r).map(u64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .filter(|&n| n < (1 << 32))
                .ok_or_else(|| bad(format!("tensor `{name}` is implausibly large")))?;
            let data = (0..n)
                .map(|_| read_exact(r).map(f64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Self { kind, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    fn expect(&self, kind: CheckpointKind) -> Result<Lookup<'_>> {
        if self.kind != kind {
            return Err(bad(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(Lookup(self.tensors.iter().map(|t| (t.name.as_str(), t)).collect()))
    }
}

struct Lookup<'a>(BTreeMap<&'a str, &'a Tensor>);

impl Lookup<'_> {
    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.0.get(name).copied().ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    fn has(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        match self.tensor(name)?.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(bad(format!("`{name}` is not a scalar"))),
        }
    }

    fn dense(&self, prefix: &str) -> Result<Dense> {
        let w = self.tensor(&format!("{prefix}.weight"))?;
        let b = self.tensor(&format!("{prefix}.bias"))?;
        match (w.dims.as_slice(), b.dims.as_slice()) {
            (&[o, i], &[ob]) if o == ob => Ok(Dense {
                inputs: i as usize,
                outputs: o as usize,
                weights: w.data.clone(),
                bias: b.data.clone(),
            }),
            _ => Err(bad(format!("inconsistent shapes for `{prefix}`"))),
        }
    }

    fn f32s(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.tensor(name)?.data.iter().map(|&v| v as f32).collect())
    }
}

fn push_dense(c: &mut Checkpoint, prefix: &str, d: &Dense) {
    c.push(format!("{prefix}.weight"), &[d.outputs, d.inputs], d.weights.clone());
    c.push(format!("{prefix}.bias"), &[d.outputs], d.bias.clone());
}

impl Mlp {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointKind::Mlp);
        for (i, l) in self.layers.iter().enumerate() {
            push_dense(&mut c, &format!("layer{i}"), l);
        }
        c.scalar("dropout", self.dropout);
        c.scalar(
            "placement",
            match self.placement {
                DropoutPlacement::All => 0.0,
                DropoutPlacement::LastLayer => 1.0,
            },
        );
        c.scalar("label_mean", self.label_mean);
        c.scalar("label_std", self.label_std);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let t = c.expect(CheckpointKind::Mlp)?;
        let mut layers = Vec::new();
        while t.has(&format!("layer{}.weight", layers.len())) {
            layers.push(t.dense(&format!("layer{}", layers.len()))?);
        }
        check_chain(&layers)?;
        let placement = if t.scalar("placement")? == 1.0 {
            DropoutPlacement::LastLayer
        } else {
            DropoutPlacement::All
        };
        Ok(Mlp::from_parts(
            layers,
            t.scalar("dropout")?,
            placement,
            t.scalar("label_mean")?,
            t.scalar("label_std")?,
        ))
    }
}

fn check_chain(layers: &[Dense]) -> Result<()> {
    let linked = layers.windows(2).all(|w| w[0].outputs == w[1].inputs);
    if layers.len() < 2 || !linked || layers[layers.len() - 1].outputs != 1 {
        return Err(bad("layer shapes do not form a scalar-output network"));
    }
    Ok(())
}

impl SviRegressor {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointKind::SviRegressor);
        for (i, l) in self.deterministic.iter().enumerate() {
            push_dense(&mut c, &format!("det{i}"), l);
        }
        for (i, v) in self.variational.iter().enumerate() {
            push_dense(&mut c, &format!("var{i}"), &v.mean);
            let d = &v.mean;
            c.push(format!("var{i}.weight_rho"), &[d.outputs, d.inputs], v.rho_weights.clone());
            c.push(format!("var{i}.bias_rho"), &[d.outputs], v.rho_bias.clone());
        }
        c.scalar(
            "prior_sigma",
            self.variational.first().map_or(1.0, |v| v.prior_sigma),
        );
        c.scalar("log_noise_std", self.log_noise_std);
        c.scalar("label_mean", self.label_mean);
        c.scalar("label_std", self.label_std);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let t = c.expect(CheckpointKind::SviRegressor)?;
        let mut deterministic = Vec::new();
        while t.has(&format!("det{}.weight", deterministic.len())) {
            deterministic.push(t.dense(&format!("det{}", deterministic.len()))?);
        }
        let prior_sigma = t.scalar("prior_sigma")?;
        let mut variational = Vec::new();
        while t.has(&format!("var{}.weight", variational.len())) {
            let i = variational.len();
            let mean = t.dense(&format!("var{i}"))?;
            let rho_weights = t.tensor(&format!("var{i}.weight_rho"))?.data.clone();
            let rho_bias = t.tensor(&format!("var{i}.bias_rho"))?.data.clone();
            if rho_weights.len() != mean.weights.len() || rho_bias.len() != mean.bias.len() {
                return Err(bad(format!("posterior scale shape mismatch in var{i}")));
            }
            variational.push(VariationalLayer {
                mean,
                rho_weights,
                rho_bias,
                prior_sigma,
            });
        }
        let all: Vec<Dense> = deterministic
            .iter()
            .cloned()
            .chain(variational.iter().map(|v| v.mean.clone()))
            .collect();
        check_chain(&all)?;
        Ok(SviRegressor {
            deterministic,
            variational,
            log_noise_std: t.scalar("log_noise_std")?,
            label_mean: t.scalar("label_mean")?,
            label_std: t.scalar("label_std")?,
            validation_rmse: None,
        })
    }
}

impl Classifier {
    /// Stores everything needed for prediction; training-only settings are not kept.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointKind::Classifier);
        let a = &self.arch;
        c.push(
            "arch",
            &[7],
            [a.channels, a.height, a.width, a.conv1, a.conv2, a.kernel, a.classes]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        );
        let variant = ClassifierVariant::ALL
            .iter()
            .position(|v| *v == self.config.variant)
            .unwrap_or(0);
        c.scalar("variant", variant as f64);
        c.scalar("dropout", self.config.dropout);
        c.scalar("mc_passes", self.config.mc_passes as f64);
        if let Some(t) = self.temperature {
            c.scalar("temperature", t);
        }
        for (m, net) in self.members.iter().enumerate() {
            for (j, tensor) in net.tensors.iter().enumerate() {
                c.push(format!("member{m}.t{j}"), &[tensor.len()], tensor.iter().map(|&v| v as f64).collect());
            }
        }
        for (j, rho) in self.rho.iter().enumerate() {
            if !rho.is_empty() {
                c.push(format!("rho.t{j}"), &[rho.len()], rho.iter().map(|&v| v as f64).collect());
            }
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let t = c.expect(CheckpointKind::Classifier)?;
        let arch = t.tensor("arch")?;
        let v: Vec<usize> = arch.data.iter().map(|&x| x as usize).collect();
        if v.len() != 7 {
            return Err(bad("arch tensor must hold 7 values"));
        }
        let arch = Architecture::new((v[0], v[1], v[2]), (v[3], v[4]), v[5], v[6])?;
        let variant = *ClassifierVariant::ALL
            .get(t.scalar("variant")? as usize)
            .ok_or_else(|| bad("unknown classifier variant"))?;
        let config = ClassifierConfig {
            variant,
            dropout: t.scalar("dropout")?,
            mc_passes: t.scalar("mc_passes")? as usize,
            conv_channels: (arch.conv1, arch.conv2),
            kernel: arch.kernel,
            ..ClassifierConfig::default()
        };
        let mut members = Vec::new();
        while t.has(&format!("member{}.t0", members.len())) {
            let m = members.len();
            let tensors = (0..6)
                .map(|j| t.f32s(&format!("member{m}.t{j}")))
                .collect::<Result<Vec<_>>>()?;
            members.push(ConvNet::from_tensors(arch, tensors)?);
        }
        let mut classifier = Classifier::from_members(config, members)?;
        for j in 0..6 {
            let name = format!("rho.t{j}");
            if t.has(&name) {
                let rho = t.f32s(&name)?;
                if rho.len() != classifier.members[0].tensors[j].len() {
                    return Err(bad(format!("`{name}` has the wrong length")));
                }
                classifier.rho[j] = rho;
            }
        }
        if t.has("temperature") {
            classifier.temperature = Some(t.scalar("temperature")?);
        }
        Ok(classifier)
    }
}
