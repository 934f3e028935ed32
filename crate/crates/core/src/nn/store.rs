use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use super::tape::Gradients;
use super::{NnError, Result, Tensor};

const MAGIC: &[u8; 4] = b"SCNT";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Buffers such as running statistics are stored but never optimized.
    pub trainable: bool,
}

/// Named tensors in insertion order, plus gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParameter(name.to_string()));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter { name: name.to_string(), value, grad, trainable });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    /// Glorot-uniform `rows × cols` weight.
    pub fn add_glorot<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, Tensor::from_raw(rows, cols, data), true)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.parameter_grads() {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    /// Overwrites buffers (running statistics) recorded during a forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, t) in updates {
            self.params[id.0].value = t;
        }
    }

    /// Writes the named-tensor container with `config_json` as a header record.
    pub fn save<W: Write>(&self, config_json: &str, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION])?;
        write_bytes(&mut out, config_json.as_bytes())?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            write_bytes(&mut out, p.name.as_bytes())?;
            out.write_all(&[p.trainable as u8])?;
            out.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a container written by [`ParameterStore::save`]; returns the store and the config record.
    pub fn load<R: Read>(mut input: R) -> Result<(Self, String)> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("not a checkpoint file".into()));
        }
        let mut version = [0u8; 1];
        input.read_exact(&mut version)?;
        if version[0] != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {}", version[0])));
        }
        let config = String::from_utf8(read_bytes(&mut input)?)
            .map_err(|_| NnError::Checkpoint("config record is not UTF-8".into()))?;
        let count = read_u32(&mut input)? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut input)?)
                .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?;
            let mut flag = [0u8; 1];
            input.read_exact(&mut flag)?;
            let rank = read_u32(&mut input)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.add(&name, Tensor::new(shape, data)?, flag[0] != 0)?;
        }
        Ok((store, config))
    }

    /// Copies values of every parameter present in both stores, checking shapes.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for p in &mut self.params {
            let src =
                other.by_name(&p.name).ok_or_else(|| NnError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        if other.len() != self.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

fn write_bytes<W: Write>(out: &mut W, bytes: &[u8]) -> Result<()> {
    out.write_all(&(bytes.len() as u32).to_le_bytes())?;
    out.write_all(bytes)?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(input: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(input)? as usize;
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf)?;
    Ok(buf)
}
