//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "RMFIELD\0"
//! version  u32      1
//! count    u32      number of sections
//! section  4-byte tag, u64 payload length, payload
//! ```
//!
//! Sections, in this order:
//!
//! | tag    | payload |
//! |--------|---------|
//! | `CONF` | canonical configuration text, UTF-8 |
//! | `CURS` | u8 stage (0 when finished), u64 next iteration |
//! | `FELD` | u64 n, n × f32 field parameters (grid tables by level, then decoder layers) |
//! | `FRZN` | u8 present, then the same layout as `FELD` when present |
//! | `OPTM` | u64 step, u64 n, n × f32 first moments, n × f32 second moments |
//! | `RNGS` | 32-byte ChaCha8 seed, u64 stream, u64 word position low, u64 word position high |
//! | `META` | `key=value` lines: prompt, negative_prompt |

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roomfield_core::field::RadianceField;
use roomfield_core::pipeline::{Cursor, PipelineState};
use roomfield_core::sds::OptimizerState;
use roomfield_core::view_schedule::Stage;

use crate::config::{self, ConfigFileError, RunConfig};

pub const MAGIC: [u8; 8] = *b"RMFIELD\0";
pub const VERSION: u32 = 1;
const TAGS: [&[u8; 4]; 7] = [
    b"CONF", b"CURS", b"FELD", b"FRZN", b"OPTM", b"RNGS", b"META",
];

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("unexpected section `{found}` where `{expected}` belongs")]
    Section { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint configuration: {0}")]
    Config(#[from] ConfigFileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: PipelineState,
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn encode(config: &RunConfig, state: &PipelineState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(TAGS.len() as u32).to_le_bytes());

    section(&mut out, TAGS[0], config::format(config).as_bytes());

    let mut cursor = Vec::new();
    let (stage, iteration) = match state.cursor {
        Cursor::At { stage, iteration } => (stage.number(), iteration as u64),
        Cursor::Finished => (0, 0),
    };
    cursor.push(stage);
    cursor.extend_from_slice(&iteration.to_le_bytes());
    section(&mut out, TAGS[1], &cursor);

    let mut field = Vec::new();
    put_f32s(&mut field, state.field.params());
    section(&mut out, TAGS[2], &field);

    let mut frozen = Vec::new();
    match &state.frozen {
        Some(f) => {
            frozen.push(1);
            put_f32s(&mut frozen, f.params());
        }
        None => frozen.push(0),
    }
    section(&mut out, TAGS[3], &frozen);

    let mut optim = Vec::new();
    optim.extend_from_slice(&state.optimizer.step.to_le_bytes());
    optim.extend_from_slice(&(state.optimizer.first.len() as u64).to_le_bytes());
    for v in state.optimizer.first.iter().chain(&state.optimizer.second) {
        optim.extend_from_slice(&v.to_le_bytes());
    }
    section(&mut out, TAGS[4], &optim);

    let mut rng = Vec::new();
    rng.extend_from_slice(&state.rng.get_seed());
    rng.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    let word = state.rng.get_word_pos();
    rng.extend_from_slice(&(word as u64).to_le_bytes());
    rng.extend_from_slice(&((word >> 64) as u64).to_le_bytes());
    section(&mut out, TAGS[5], &rng);

    let c = &config.pipeline;
    let meta = format!(
        "prompt={}\nnegative_prompt={}\n",
        c.prompt, c.negative_prompt
    );
    section(&mut out, TAGS[6], meta.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let len = n.checked_mul(4).ok_or(CheckpointError::Truncated)?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn counted_f32s(&mut self) -> Result<Vec<f32>, CheckpointError> {
        let n = self.u64()?;
        self.f32s(usize::try_from(n).map_err(|_| CheckpointError::Truncated)?)
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>, CheckpointError> {
        let found = self.take(4)?;
        if found != tag {
            return Err(CheckpointError::Section {
                expected: String::from_utf8_lossy(tag).into(),
                found: String::from_utf8_lossy(found).into(),
            });
        }
        let len = usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated)?;
        Ok(Reader {
            bytes: self.take(len)?,
        })
    }

    fn finish(&self, what: &str) -> Result<(), CheckpointError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes in {what}",
                self.bytes.len()
            )))
        }
    }
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    if r.u32()? as usize != TAGS.len() {
        return Err(corrupt("wrong section count"));
    }

    let conf = r.section(TAGS[0])?;
    let text =
        std::str::from_utf8(conf.bytes).map_err(|_| corrupt("configuration is not UTF-8"))?;
    let config = config::parse(text)?;
    let pc = &config.pipeline;

    let mut s = r.section(TAGS[1])?;
    let stage = s.u8()?;
    let iteration = s.u64()? as usize;
    s.finish("cursor")?;
    let cursor = match stage {
        0 => Cursor::Finished,
        n => {
            let stage =
                Stage::from_number(n).ok_or_else(|| corrupt(format!("cursor stage {n}")))?;
            if iteration >= pc.stage(stage).iterations {
                return Err(corrupt("cursor iteration beyond the stage budget"));
            }
            Cursor::At { stage, iteration }
        }
    };

    let to_field = |params: Vec<f32>| {
        RadianceField::from_params(pc.field.clone(), params)
            .map_err(|e| corrupt(format!("field parameters: {e}")))
    };
    let mut s = r.section(TAGS[2])?;
    let field = to_field(s.counted_f32s()?)?;
    s.finish("field")?;

    let mut s = r.section(TAGS[3])?;
    let frozen = match s.u8()? {
        0 => None,
        1 => Some(to_field(s.counted_f32s()?)?.freeze_copy()),
        _ => return Err(corrupt("frozen flag")),
    };
    s.finish("frozen field")?;

    let mut s = r.section(TAGS[4])?;
    let step = s.u64()?;
    let n = s.u64()? as usize;
    if n != field.param_count() {
        return Err(corrupt("optimizer size differs from the field"));
    }
    let first = s.f32s(n)?;
    let second = s.f32s(n)?;
    s.finish("optimizer")?;
    let mut optimizer = OptimizerState::new(&field, pc.adam);
    optimizer.step = step;
    optimizer.first = first;
    optimizer.second = second;

    let mut s = r.section(TAGS[5])?;
    let seed: [u8; 32] = s.take(32)?.try_into().unwrap();
    let stream = s.u64()?;
    let word = s.u64()? as u128 | (s.u64()? as u128) << 64;
    s.finish("rng")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word);

    let s = r.section(TAGS[6])?;
    std::str::from_utf8(s.bytes).map_err(|_| corrupt("metadata is not UTF-8"))?;
    r.finish("checkpoint")?;

    Ok(Checkpoint {
        config,
        state: PipelineState {
            field,
            frozen,
            optimizer,
            rng,
            cursor,
        },
    })
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, config: &RunConfig, state: &PipelineState) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(config, state))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&std::fs::read(path)?)
}
