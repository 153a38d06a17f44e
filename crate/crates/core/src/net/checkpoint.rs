//! Model checkpoints: `MCF1` magic, a kind byte, the embedded build
//! spec, the alphabet, and f32 parameter blobs with their names.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::Alphabet;

use super::model::{LmModel, LmSpec, Recognizer, RecognizerSpec, TrunkItem};
use super::{NetError, ParamSlices};

const MAGIC: &[u8; 4] = b"MCF1";
const KIND_RECOGNIZER: u8 = 0;
const KIND_LM: u8 = 1;

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_params(out: &mut Vec<u8>, model: &impl ParamSlices) {
    let slices = model.param_slices();
    let names = model.param_names("model");
    out.extend_from_slice(&(slices.len() as u32).to_le_bytes());
    for (slice, name) in slices.iter().zip(names) {
        push_string(out, &name);
        out.extend_from_slice(&(slice.len() as u64).to_le_bytes());
        for &v in slice.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.at + n > self.bytes.len() {
            return Err(NetError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes([s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7]]))
    }

    fn string(&mut self) -> Result<String, NetError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| NetError::Checkpoint("non-UTF-8 string".into()))
    }

    fn f32_into(&mut self, dst: &mut [f64]) -> Result<(), NetError> {
        let raw = self.take(dst.len() * 4)?;
        for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
        Ok(())
    }
}

fn load_params(reader: &mut Reader, model: &mut impl ParamSlices) -> Result<(), NetError> {
    let expected_names = model.param_names("model");
    let count = reader.u32()? as usize;
    let mut slices = model.param_slices_mut();
    if count != slices.len() {
        return Err(NetError::Checkpoint(format!(
            "parameter count {count} does not match model ({})",
            slices.len()
        )));
    }
    for (slice, expected) in slices.iter_mut().zip(expected_names) {
        let name = reader.string()?;
        if name != expected {
            return Err(NetError::Checkpoint(format!(
                "parameter {name} does not match expected {expected}"
            )));
        }
        let len = reader.u64()? as usize;
        if len != slice.len() {
            return Err(NetError::Checkpoint(format!(
                "parameter {name} has {len} values, expected {}",
                slice.len()
            )));
        }
        reader.f32_into(slice)?;
    }
    Ok(())
}

fn encode_trunk(trunk: &[TrunkItem]) -> String {
    trunk
        .iter()
        .map(|item| match item {
            TrunkItem::Conv { channels } => format!("conv:{channels}"),
            TrunkItem::Pool { h, w } => format!("pool:{h}x{w}"),
        })
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn decode_trunk(text: &str) -> Result<Vec<TrunkItem>, NetError> {
    let mut items = Vec::new();
    for part in text.split(',').filter(|p| !p.is_empty()) {
        let (kind, arg) = part
            .split_once(':')
            .ok_or_else(|| NetError::BadSpec(format!("bad trunk item {part:?}")))?;
        match kind {
            "conv" => {
                let channels = arg
                    .parse()
                    .map_err(|_| NetError::BadSpec(format!("bad conv channels {arg:?}")))?;
                items.push(TrunkItem::Conv { channels });
            }
            "pool" => {
                let (h, w) = arg
                    .split_once('x')
                    .ok_or_else(|| NetError::BadSpec(format!("bad pool size {arg:?}")))?;
                let h = h
                    .parse()
                    .map_err(|_| NetError::BadSpec(format!("bad pool height {arg:?}")))?;
                let w = w
                    .parse()
                    .map_err(|_| NetError::BadSpec(format!("bad pool width {arg:?}")))?;
                items.push(TrunkItem::Pool { h, w });
            }
            other => return Err(NetError::BadSpec(format!("unknown trunk item {other:?}"))),
        }
    }
    Ok(items)
}

fn push_alphabet(out: &mut Vec<u8>, alphabet: &Alphabet) {
    out.extend_from_slice(&(alphabet.len() as u32).to_le_bytes());
    for label in alphabet.labels() {
        push_string(out, label);
    }
}

fn read_alphabet(reader: &mut Reader) -> Result<Alphabet, NetError> {
    let n = reader.u32()? as usize;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(reader.string()?);
    }
    Alphabet::new(labels).map_err(|e| NetError::Checkpoint(e.to_string()))
}

/// Saves a recognizer with its alphabet.
pub fn save_recognizer(
    path: &Path,
    model: &Recognizer,
    alphabet: &Alphabet,
) -> Result<(), NetError> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.push(KIND_RECOGNIZER);
    push_alphabet(&mut out, alphabet);
    for value in [
        spec.in_channels,
        spec.in_height,
        spec.classes,
        spec.branch_channels,
        spec.blstm_hidden,
        spec.blstm_layers,
        spec.standardize as usize,
    ] {
        out.extend_from_slice(&(value as u32).to_le_bytes());
    }
    push_string(&mut out, &encode_trunk(&spec.trunk));
    out.extend_from_slice(&(spec.branch_kernels.len() as u32).to_le_bytes());
    for &k in &spec.branch_kernels {
        out.extend_from_slice(&(k as u32).to_le_bytes());
    }
    push_params(&mut out, model);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_recognizer(path: &Path) -> Result<(Recognizer, Alphabet), NetError> {
    let bytes = fs::read(path)?;
    let mut reader = Reader { bytes: &bytes, at: 0 };
    if reader.take(4)? != MAGIC {
        return Err(NetError::Checkpoint("missing MCF1 magic".into()));
    }
    let version = reader.u32()?;
    if version != 1 {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    if reader.u8()? != KIND_RECOGNIZER {
        return Err(NetError::Checkpoint("not a recognizer checkpoint".into()));
    }
    let alphabet = read_alphabet(&mut reader)?;
    let in_channels = reader.u32()? as usize;
    let in_height = reader.u32()? as usize;
    let classes = reader.u32()? as usize;
    let branch_channels = reader.u32()? as usize;
    let blstm_hidden = reader.u32()? as usize;
    let blstm_layers = reader.u32()? as usize;
    let standardize = reader.u32()? != 0;
    let trunk = decode_trunk(&reader.string()?)?;
    let n_branches = reader.u32()? as usize;
    let mut branch_kernels = Vec::with_capacity(n_branches);
    for _ in 0..n_branches {
        branch_kernels.push(reader.u32()? as usize);
    }
    let spec = RecognizerSpec {
        in_channels,
        in_height,
        classes,
        trunk,
        branch_kernels,
        branch_channels,
        blstm_hidden,
        blstm_layers,
        standardize,
    };
    // Parameters are overwritten below; the seed only shapes arrays.
    let mut model = Recognizer::build(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_params(&mut reader, &mut model)?;
    if reader.at != bytes.len() {
        return Err(NetError::Checkpoint("trailing bytes".into()));
    }
    Ok((model, alphabet))
}

/// Saves a sequence model with the alphabet it rescoring runs over.
pub fn save_lm(path: &Path, model: &LmModel, alphabet: &Alphabet) -> Result<(), NetError> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.push(KIND_LM);
    push_alphabet(&mut out, alphabet);
    for value in [
        spec.classes,
        spec.embed,
        spec.hidden,
        spec.layers,
        spec.bidirectional as usize,
    ] {
        out.extend_from_slice(&(value as u32).to_le_bytes());
    }
    push_params(&mut out, model);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_lm(path: &Path) -> Result<(LmModel, Alphabet), NetError> {
    let bytes = fs::read(path)?;
    let mut reader = Reader { bytes: &bytes, at: 0 };
    if reader.take(4)? != MAGIC {
        return Err(NetError::Checkpoint("missing MCF1 magic".into()));
    }
    let version = reader.u32()?;
    if version != 1 {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    if reader.u8()? != KIND_LM {
        return Err(NetError::Checkpoint("not a sequence-model checkpoint".into()));
    }
    let alphabet = read_alphabet(&mut reader)?;
    let classes = reader.u32()? as usize;
    let embed = reader.u32()? as usize;
    let hidden = reader.u32()? as usize;
    let layers = reader.u32()? as usize;
    let bidirectional = reader.u32()? != 0;
    let spec = LmSpec { classes, embed, hidden, layers, bidirectional };
    let mut model = LmModel::build(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_params(&mut reader, &mut model)?;
    if reader.at != bytes.len() {
        return Err(NetError::Checkpoint("trailing bytes".into()));
    }
    Ok((model, alphabet))
}
