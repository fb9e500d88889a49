//! Trained model bundle and its binary checkpoint format:
//! `"KCGGNET1"`, a little-endian `u64` header length, the JSON header, then
//! every weight tensor as little-endian `f64` in declaration order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Architecture, ScoreNetwork};
use super::schedule::{NoiseSchedule, ScheduleParams};
use super::trajectory::{Normalizer, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"KCGGNET1";

/// Everything needed to sample: network, normalizer, schedule recipe and
/// the trajectory layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub network: ScoreNetwork,
    pub normalizer: Normalizer,
    pub schedule: ScheduleParams,
    pub rows: usize,
    pub dt: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: Architecture,
    normalizer: Normalizer,
    schedule: ScheduleParams,
    condition_vocabulary: Vec<String>,
    rows: usize,
    state_dim: usize,
    dt: f64,
}

impl Model {
    pub fn state_dim(&self) -> usize {
        self.normalizer.state_dim()
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn decode(&self, flat: &[f64]) -> Result<Trajectory> {
        self.normalizer.decode(flat, self.rows, self.dt)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let arch = self.network.architecture();
        let header = Header {
            architecture: arch.clone(),
            normalizer: self.normalizer.clone(),
            schedule: self.schedule,
            condition_vocabulary: arch.condition_vocabulary.clone(),
            rows: self.rows,
            state_dim: self.state_dim(),
            dt: self.dt,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in self.network.parameters() {
            let mut buf = Vec::with_capacity(p.len() * 8);
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let json = read_header(&mut r)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.condition_vocabulary != header.architecture.condition_vocabulary {
            return Err(Error::Format("condition vocabulary disagrees with architecture".into()));
        }
        if header.rows * header.state_dim != header.architecture.input_dim
            || header.normalizer.state_dim() != header.state_dim
        {
            return Err(Error::Format("trajectory layout disagrees with network input".into()));
        }
        let params = header
            .architecture
            .parameter_shapes()
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = read_f64s(&mut r, n)?;
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after weights", rest.len())));
        }
        Ok(Model {
            network: ScoreNetwork::from_parameters(header.architecture, params)?,
            normalizer: header.normalizer,
            schedule: header.schedule,
            rows: header.rows,
            dt: header.dt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }
}

pub(crate) fn read_header<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 64 << 20 {
        return Err(Error::Format(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    Ok(json)
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("file truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
