//! Versioned little-endian checkpoint container.
//!
//! Layout: magic, format/layout versions, experiment hash, iteration, the
//! network spec, preconditioner stats, the down-density descriptor, the flat
//! `f64` parameter array, and a trailing FNV-1a checksum over everything
//! before it. Encoding is canonical, so save -> load -> save round-trips
//! byte for byte.

use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use pso_core::dist::{uniform_box, Density, DiagGaussian};
use pso_core::surface::{
    Activation, Model, NetworkSpec, OutputTransform, ParamVector, Preconditioner, Topology,
};

use crate::config::fnv1a;

const MAGIC: &[u8; 8] = b"PSOCKPT\0";
const FORMAT_VERSION: u32 = 1;
/// Version of the flat parameter layout (per-layer `[weights, biases]`,
/// dense weights row-major `[out x in]`, block weights `[block x out x in]`).
const LAYOUT_VERSION: u32 = 1;

/// What generated the training data (enough to rebuild test sets).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataDescriptor {
    /// Data came from an external file; no analytic truth available.
    External,
    Columns { dim: u32 },
    TransformedColumns,
}

/// The auxiliary down density, reconstructible from stored parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum DownDescriptor {
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    DiagGaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl DownDescriptor {
    pub fn to_density(&self) -> Result<Box<dyn Density<f64>>> {
        Ok(match self {
            DownDescriptor::UniformBox { lo, hi } => {
                Box::new(uniform_box(lo.clone(), hi.clone())?)
            }
            DownDescriptor::DiagGaussian { mean, std } => {
                Box::new(DiagGaussian::new(mean.clone(), std.clone())?)
            }
        })
    }
}

/// Everything a checkpoint stores.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub experiment_hash: u64,
    pub iteration: u64,
    pub spec: NetworkSpec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Whether the model's height bias is the down log-density.
    pub bias_from_down: bool,
    pub data: DataDescriptor,
    pub down: DownDescriptor,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    /// Rebuilds the callable model (re-attaching the height bias).
    pub fn to_model(&self) -> Result<Model<f64>> {
        let mut precond = Preconditioner::new(self.mean.clone(), self.std.clone())?;
        if self.bias_from_down {
            let down = self.down.to_density()?;
            precond = precond
                .with_height_bias(std::sync::Arc::new(move |x: &[f64]| down.log_pdf(x)));
        }
        let params = ParamVector::from_values(&self.spec, self.theta.clone())?;
        Ok(Model::new(self.spec.clone(), precond, params)?)
    }
}

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 {
            bail!("checkpoint length field {n} exceeds file size");
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut e = Enc { buf: Vec::new() };
    e.buf.extend_from_slice(MAGIC);
    e.u32(FORMAT_VERSION);
    e.u32(LAYOUT_VERSION);
    e.u64(ck.experiment_hash);
    e.u64(ck.iteration);

    // spec
    e.u32(ck.spec.input_dim as u32);
    match ck.spec.topology {
        Topology::FullyConnected { width } => {
            e.u8(0);
            e.u32(width as u32);
            e.u32(0);
        }
        Topology::BlockDiagonal {
            num_blocks,
            block_size,
        } => {
            e.u8(1);
            e.u32(num_blocks as u32);
            e.u32(block_size as u32);
        }
    }
    e.u32(ck.spec.num_layers as u32);
    match ck.spec.activation {
        Activation::Relu => {
            e.u8(0);
            e.f64(0.0);
        }
        Activation::LeakyRelu { slope } => {
            e.u8(1);
            e.f64(slope);
        }
        Activation::Tanh => {
            e.u8(2);
            e.f64(0.0);
        }
    }
    e.u8(ck.spec.shortcuts as u8);
    match ck.spec.output_transform {
        OutputTransform::Identity => {
            e.u8(0);
            e.f64(0.0);
            e.f64(0.0);
        }
        OutputTransform::Bounded { h_min, h_max } => {
            e.u8(1);
            e.f64(h_min);
            e.f64(h_max);
        }
    }

    // preconditioner stats
    e.f64s(&ck.mean);
    e.f64s(&ck.std);
    e.u8(ck.bias_from_down as u8);

    // data descriptor
    match &ck.data {
        DataDescriptor::External => {
            e.u8(0);
            e.u32(0);
        }
        DataDescriptor::Columns { dim } => {
            e.u8(1);
            e.u32(*dim);
        }
        DataDescriptor::TransformedColumns => {
            e.u8(2);
            e.u32(20);
        }
    }

    // down descriptor
    match &ck.down {
        DownDescriptor::UniformBox { lo, hi } => {
            e.u8(1);
            e.f64s(lo);
            e.f64s(hi);
        }
        DownDescriptor::DiagGaussian { mean, std } => {
            e.u8(2);
            e.f64s(mean);
            e.f64s(std);
        }
    }

    // parameters + checksum
    e.f64s(&ck.theta);
    let checksum = fnv1a(&e.buf);
    e.u64(checksum);
    e.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        bail!("not a checkpoint file (bad magic)");
    }
    let body_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let actual = fnv1a(&bytes[..body_len]);
    if stored != actual {
        bail!("checkpoint checksum mismatch: stored {stored:#018x}, computed {actual:#018x}");
    }

    let mut d = Dec {
        buf: &bytes[..body_len],
        pos: 8,
    };
    let format = d.u32()?;
    if format != FORMAT_VERSION {
        bail!("unsupported checkpoint format version {format}");
    }
    let layout = d.u32()?;
    if layout != LAYOUT_VERSION {
        bail!("unsupported parameter layout version {layout}");
    }
    let experiment_hash = d.u64()?;
    let iteration = d.u64()?;

    let input_dim = d.u32()? as usize;
    let topo_tag = d.u8()?;
    let (a, b) = (d.u32()? as usize, d.u32()? as usize);
    let topology = match topo_tag {
        0 => Topology::FullyConnected { width: a },
        1 => Topology::BlockDiagonal {
            num_blocks: a,
            block_size: b,
        },
        t => bail!("unknown topology tag {t}"),
    };
    let num_layers = d.u32()? as usize;
    let act_tag = d.u8()?;
    let slope = d.f64()?;
    let activation = match act_tag {
        0 => Activation::Relu,
        1 => Activation::LeakyRelu { slope },
        2 => Activation::Tanh,
        t => bail!("unknown activation tag {t}"),
    };
    let shortcuts = d.u8()? != 0;
    let tr_tag = d.u8()?;
    let (h_min, h_max) = (d.f64()?, d.f64()?);
    let output_transform = match tr_tag {
        0 => OutputTransform::Identity,
        1 => OutputTransform::Bounded { h_min, h_max },
        t => bail!("unknown output transform tag {t}"),
    };
    let spec = NetworkSpec {
        input_dim,
        topology,
        num_layers,
        activation,
        shortcuts,
        output_transform,
    };

    let mean = d.f64s()?;
    let std = d.f64s()?;
    let bias_from_down = d.u8()? != 0;

    let data_tag = d.u8()?;
    let data_dim = d.u32()?;
    let data = match data_tag {
        0 => DataDescriptor::External,
        1 => DataDescriptor::Columns { dim: data_dim },
        2 => DataDescriptor::TransformedColumns,
        t => bail!("unknown data descriptor tag {t}"),
    };

    let down_tag = d.u8()?;
    let down = match down_tag {
        1 => DownDescriptor::UniformBox {
            lo: d.f64s()?,
            hi: d.f64s()?,
        },
        2 => DownDescriptor::DiagGaussian {
            mean: d.f64s()?,
            std: d.f64s()?,
        },
        t => bail!("unknown down descriptor tag {t}"),
    };

    let theta = d.f64s()?;
    let expected = spec
        .param_len()
        .map_err(|e| anyhow!("checkpoint spec invalid: {e}"))?;
    if theta.len() != expected {
        bail!(
            "checkpoint parameter count {} does not match spec-derived count {expected}",
            theta.len()
        );
    }

    Ok(Checkpoint {
        experiment_hash,
        iteration,
        spec,
        mean,
        std,
        bias_from_down,
        data,
        down,
        theta,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck);
    let mut f = std::fs::File::create(path)
        .with_context(|| format!("creating checkpoint {}", path.display()))?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode(&bytes)
}
