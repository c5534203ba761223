//! Binary model state files.
//!
//! Layout: `LGMN`, format version (u32 LE), tensor count (u32 LE), then per
//! tensor: name length (u32 LE), UTF-8 name, rank (u32 LE), extents (u64 LE
//! each), payload (f32 LE each). A 64-bit FNV-1a hash of every preceding byte
//! closes the file.
//!
//! Parameters are stored as `param.<name>`, Adam moments as `adam.m.<name>`
//! and `adam.v.<name>`, normalization statistics as `itn.<layer>.mean` and
//! `itn.<layer>.var`. Integer and text metadata (`meta.*`) is stored one byte
//! per payload value, which f32 represents exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_dataset, split_meta};
use crate::error::{Error, Result};
use crate::metanet::MetaNet;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::training::{ModelState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"LGMN";
pub const FORMAT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
#[derive(Debug, Clone)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv64 {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

fn bytes_tensor(bytes: &[u8]) -> Tensor {
    Tensor::vector(bytes.iter().map(|&b| f32::from(b)).collect())
}

fn tensor_bytes(t: &Tensor, what: &str) -> std::result::Result<Vec<u8>, String> {
    t.data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(format!("{what}: value {v} is not a byte"))
            }
        })
        .collect()
}

/// Serializes a named tensor table.
pub fn encode_table(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = Fnv64::new();
    h.update(&out);
    out.extend_from_slice(&h.finish().to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a tensor table, verifying magic, version and checksum first.
pub fn decode_table(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    if bytes.len() < 4 + 4 + 4 + 8 {
        return Err(format!("truncated: {} bytes", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("not a model file (bad magic)".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format!("format version {version}, expected {FORMAT_VERSION}"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut h = Fnv64::new();
    h.update(body);
    if h.finish() != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err("checksum mismatch (file truncated or corrupted)".into());
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| format!("tensor name: {e}"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| format!("{name}: extents overflow"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| format!("{name}: size overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(format!("{} trailing bytes after tensor table", body.len() - r.pos));
    }
    Ok(out)
}

fn state_entries(state: &ModelState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let config = serde_json::to_vec(&state.config).expect("config serializes");
    out.push(("meta.config".to_string(), bytes_tensor(&config)));
    let mut counters = state.batch.to_le_bytes().to_vec();
    counters.extend_from_slice(&state.adam.step_count().to_le_bytes());
    out.push(("meta.counters".to_string(), bytes_tensor(&counters)));
    let mut rng = state.rng.get_seed().to_vec();
    rng.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    rng.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.push(("meta.rng".to_string(), bytes_tensor(&rng)));
    out.push((
        "meta.adam".to_string(),
        Tensor::vector(vec![state.adam.beta1, state.adam.beta2, state.adam.eps]),
    ));

    let params = &state.net.params;
    for (name, t) in params.iter() {
        out.push((
            format!("param.{name}"),
            Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid"),
        ));
    }
    let (m, v) = state.adam.moments();
    for ((name, t), (m, v)) in params.iter().zip(m.iter().zip(v)) {
        let shape = t.shape().to_vec();
        out.push((
            format!("adam.m.{name}"),
            Tensor::new(shape.clone(), m.clone()).expect("valid"),
        ));
        out.push((format!("adam.v.{name}"), Tensor::new(shape, v.clone()).expect("valid")));
    }
    if let Some(enc) = &state.net.encoder {
        for (l, layer) in enc.itn.iter().enumerate() {
            out.push((format!("itn.{l}.mean"), Tensor::vector(layer.running_mean.clone())));
            out.push((format!("itn.{l}.var"), Tensor::vector(layer.running_var.clone())));
        }
    }
    out
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    encode_table(&state_entries(state))
}

fn restore(entries: Vec<(String, Tensor)>) -> std::result::Result<ModelState, String> {
    let mut table: BTreeMap<String, Tensor> = entries.into_iter().collect();
    let mut take = |name: &str| table.remove(name).ok_or_else(|| format!("missing tensor `{name}`"));

    let config: TrainConfig = serde_json::from_slice(&tensor_bytes(&take("meta.config")?, "meta.config")?)
        .map_err(|e| format!("meta.config: {e}"))?;
    let counters = tensor_bytes(&take("meta.counters")?, "meta.counters")?;
    let rng_bytes = tensor_bytes(&take("meta.rng")?, "meta.rng")?;
    if counters.len() != 16 || rng_bytes.len() != 32 + 8 + 16 {
        return Err("malformed counter or rng metadata".into());
    }
    let batch = u64::from_le_bytes(counters[..8].try_into().expect("8 bytes"));
    let adam_step = u64::from_le_bytes(counters[8..].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::from_seed(rng_bytes[..32].try_into().expect("32 bytes"));
    rng.set_stream(u64::from_le_bytes(rng_bytes[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(rng_bytes[40..].try_into().expect("16 bytes")));
    let betas = take("meta.adam")?;
    let &[beta1, beta2, eps] = betas.data() else {
        return Err("meta.adam must hold three values".into());
    };

    // Rebuild the architecture, then overwrite every value.
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let net_config = config.metanet_config().map_err(|e| e.to_string())?;
    let mut net = MetaNet::new(net_config, &mut scratch).map_err(|e| e.to_string())?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for id in net.params.ids().collect::<Vec<_>>() {
        let name = net.params.name(id).to_string();
        let stored = take(&format!("param.{name}"))?;
        let m = take(&format!("adam.m.{name}"))?;
        let v = take(&format!("adam.v.{name}"))?;
        let target = net.params.get_mut(id);
        for t in [&stored, &m, &v] {
            if t.shape() != target.shape() {
                return Err(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    target.shape()
                ));
            }
        }
        target.data_mut().copy_from_slice(stored.data());
        first.push(m.into_data());
        second.push(v.into_data());
    }
    if let Some(enc) = &mut net.encoder {
        for (l, layer) in enc.itn.iter_mut().enumerate() {
            let mean = take(&format!("itn.{l}.mean"))?;
            let var = take(&format!("itn.{l}.var"))?;
            if mean.numel() != layer.width() || var.numel() != layer.width() {
                return Err(format!("itn layer {l} statistics have the wrong width"));
            }
            layer.running_mean = mean.into_data();
            layer.running_var = var.into_data();
        }
    }
    if let Some(extra) = table.keys().next() {
        return Err(format!("unexpected tensor `{extra}`"));
    }
    let dataset = generate_dataset(&config.dataset, config.seed).map_err(|e| e.to_string())?;
    let split = split_meta(&dataset, config.seed).map_err(|e| e.to_string())?;
    Ok(ModelState {
        config,
        net,
        adam: Adam::restore(adam_step, first, second, beta1, beta2, eps),
        batch,
        rng,
        dataset,
        split,
    })
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<ModelState, String> {
    restore(decode_table(bytes)?)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}
