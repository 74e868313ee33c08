//! Sectioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EMBDIFF\0"
//! version  u32
//! count    u32      number of sections
//! section  name_len u16, name (UTF-8), kind u8, payload_len u64, payload
//! ```
//!
//! Kind 0 is UTF-8 text, kind 1 a tensor: `rows u64, cols u64` followed by
//! `rows·cols` f64 values in row-major order. The `config` section holds the
//! training configuration as `key = value` text, `schedule` and `meta` hold
//! the schedule descriptor and the training state, and every parameter
//! tensor is stored as `param/<name>`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::config::KeyValues;
use crate::denoiser::{DenoiserParameters, Model, TrainConfig};
use crate::schedules::{build_schedule, ScheduleKind};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EMBDIFF\0";
pub const VERSION: u32 = 1;

const TEXT: u8 = 0;
const TENSOR: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    /// Optimizer steps taken.
    pub step: usize,
    /// Seeds of the runs this checkpoint descends from, oldest first.
    pub lineage: Vec<u64>,
}

fn section_error(section: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint { section: section.to_string(), reason: reason.into() }
}

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn section(&mut self, name: &str, kind: u8, payload: &[u8]) {
        self.buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(kind);
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
        self.count += 1;
    }

    fn text(&mut self, name: &str, text: &str) {
        self.section(name, TEXT, text.as_bytes());
    }

    fn tensor(&mut self, name: &str, t: &Array2<f64>) {
        let mut payload = Vec::with_capacity(16 + 8 * t.len());
        payload.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        payload.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.section(name, TENSOR, &payload);
    }
}

struct Section<'a> {
    name: String,
    kind: u8,
    payload: &'a [u8],
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(section_error(section, "file is truncated"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, section: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }
}

fn text_of<'a>(sections: &'a [Section<'_>], name: &str) -> Result<&'a str> {
    let s = find(sections, name)?;
    if s.kind != TEXT {
        return Err(section_error(name, "expected a text section"));
    }
    std::str::from_utf8(s.payload).map_err(|_| section_error(name, "text is not valid UTF-8"))
}

fn find<'a, 'b>(sections: &'a [Section<'b>], name: &str) -> Result<&'a Section<'b>> {
    sections.iter().find(|s| s.name == name).ok_or_else(|| section_error(name, "section is missing"))
}

fn tensor_of(sections: &[Section<'_>], name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let s = find(sections, name)?;
    if s.kind != TENSOR {
        return Err(section_error(name, "expected a tensor section"));
    }
    let mut r = Reader { data: s.payload, pos: 0 };
    let (got_r, got_c) = (r.u64(name)? as usize, r.u64(name)? as usize);
    if (got_r, got_c) != (rows, cols) {
        return Err(section_error(
            name,
            format!("shape {got_r}×{got_c} does not match the configuration ({rows}×{cols})"),
        ));
    }
    if s.payload.len() != 16 + 8 * rows * cols {
        return Err(section_error(name, "payload length does not match the shape"));
    }
    let values: Vec<f64> =
        s.payload[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

fn parse_field<T: std::str::FromStr>(kv: &KeyValues, section: &str, key: &str) -> Result<T> {
    kv.get(key)
        .ok_or_else(|| section_error(section, format!("missing key `{key}`")))?
        .parse()
        .map_err(|_| section_error(section, format!("invalid value for `{key}`")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new(), count: 0 };
        w.text("config", &self.config.to_key_values().to_string());
        let spec = self.model.schedule.spec();
        w.text(
            "schedule",
            &format!("kind = {}\nsteps = {}\nfactor = {}\nvp = {}\n", spec.kind, spec.steps, spec.factor, spec.vp),
        );
        let lineage: Vec<String> = self.lineage.iter().map(|s| s.to_string()).collect();
        w.text("meta", &format!("step = {}\nlineage = {}\n", self.step, lineage.join(",")));
        for (name, t) in self.model.params.tensors() {
            w.tensor(&format!("param/{name}"), t);
        }
        let mut out = Vec::with_capacity(w.buf.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&w.count.to_le_bytes());
        out.extend_from_slice(&w.buf);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        if r.take(8, "header")? != MAGIC {
            return Err(section_error("header", "bad magic; not a checkpoint file"));
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let count = r.u32("header")?;
        let mut sections = Vec::with_capacity(count as usize);
        for i in 0..count {
            let label = format!("#{i}");
            let len = r.u16(&label)? as usize;
            let name = std::str::from_utf8(r.take(len, &label)?)
                .map_err(|_| section_error(&label, "name is not valid UTF-8"))?
                .to_string();
            let kind = r.u8_kind(&name)?;
            let plen = r.u64(&name)? as usize;
            let payload = r.take(plen, &name)?;
            sections.push(Section { name, kind, payload });
        }
        if r.pos != data.len() {
            return Err(section_error("trailer", "unexpected bytes after the last section"));
        }

        let kv = KeyValues::parse(text_of(&sections, "config")?).map_err(|e| section_error("config", e.to_string()))?;
        let config = TrainConfig::from_key_values(&kv).map_err(|e| section_error("config", e.to_string()))?;

        let skv =
            KeyValues::parse(text_of(&sections, "schedule")?).map_err(|e| section_error("schedule", e.to_string()))?;
        let kind: ScheduleKind = parse_field(&skv, "schedule", "kind")?;
        let steps: usize = parse_field(&skv, "schedule", "steps")?;
        let factor: f64 = parse_field(&skv, "schedule", "factor")?;
        let vp: bool = parse_field(&skv, "schedule", "vp")?;
        let schedule = build_schedule(kind, steps)
            .and_then(|s| s.rescale(factor, vp))
            .map_err(|e| section_error("schedule", e.to_string()))?;

        let mkv = KeyValues::parse(text_of(&sections, "meta")?).map_err(|e| section_error("meta", e.to_string()))?;
        let step: usize = parse_field(&mkv, "meta", "step")?;
        let lineage = mkv
            .get("lineage")
            .unwrap_or("")
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse().map_err(|_| section_error("meta", "invalid lineage")))
            .collect::<Result<Vec<u64>>>()?;

        let shape = config.shape();
        let mut params = DenoiserParameters::zeros(shape);
        params.embedding = crate::embeddings::EmbeddingTable::from_matrix(
            tensor_of(&sections, "param/embedding", shape.vocab, shape.dim)?,
            config.sigma_e,
        )
        .map_err(|e| section_error("param/embedding", e.to_string()))?;
        for ((name, rows, cols), (_, dst)) in shape.tensor_shapes().into_iter().zip(params.tensors_mut()) {
            if name == "embedding" {
                continue;
            }
            *dst = tensor_of(&sections, &format!("param/{name}"), rows, cols)?;
        }
        Ok(Checkpoint { config, model: Model::new(params, schedule), step, lineage })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

impl Reader<'_> {
    fn u8_kind(&mut self, section: &str) -> Result<u8> {
        let k = self.take(1, section)?[0];
        if k != TEXT && k != TENSOR {
            return Err(section_error(section, format!("unknown section kind {k}")));
        }
        Ok(k)
    }
}

/// Saves `checkpoint` to `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.save(path)
}

/// Loads and validates a checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
