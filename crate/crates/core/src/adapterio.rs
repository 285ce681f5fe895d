//! The `EELA` container, adapter bundles, base checkpoints, corpus files and
//! the per-emotion hot-swap registry.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic     4 bytes  "EELA"
//! version   u16      1
//! kind      4 bytes  "ADPT" | "BASE" | "CORP"
//! scheme    u8       ASCII scheme id, '-' when not an adapter file
//! rank      u16
//! alpha     f32
//! name      u16 byte length, UTF-8
//! records   u32 count, then per record:
//!   path    u16 byte length, UTF-8
//!   kind    u8       0 linear, 1 conv1d, 2 embedding, 3 plain tensor
//!   d_in    u32
//!   d_out   u32
//!   payload f32 row-major
//! crc32     u32 over every preceding byte
//! ```
//!
//! Payload length depends on the file kind:
//!
//! * `ADPT`: `A [r x d_in]` then `B [d_out x r]` with `r = min(rank, d_in, d_out)`
//! * `BASE`: layers store `W [d_out x d_in]` then `b [d_out]`; the embedding
//!   stores `[d_out x d_in]` (vocabulary rows)
//! * `CORP`: a `[d_in x d_out]` tensor (rows x cols)
//!
//! An adapter's name is `"{emotion}@{checksum:08x}"`, where the checksum is the
//! [`ToyModel::base_checksum`] of the model it was trained on.

use std::collections::BTreeMap;
use std::path::Path;

use crate::emodata::{Emotion, EmotionCorpus, Split, Target, Utterance};
use crate::error::{Error, Result};
use crate::lora::effective_rank;
use crate::model::{ModelConfig, ToyModel};
use crate::numkern::{LayerKind, Tensor};
use crate::schemes::{layer_alpha, Scheme};

pub const MAGIC: &[u8; 4] = b"EELA";
pub const VERSION: u16 = 1;

const EMBEDDING_PATH: &str = "text_encoder.embedding";
const KIND_EMBEDDING: u8 = 2;
const KIND_TENSOR: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Adapter,
    Base,
    Corpus,
}

impl FileKind {
    pub fn tag(self) -> &'static [u8; 4] {
        match self {
            FileKind::Adapter => b"ADPT",
            FileKind::Base => b"BASE",
            FileKind::Corpus => b"CORP",
        }
    }

    fn from_tag(tag: &[u8]) -> Result<Self> {
        match tag {
            b"ADPT" => Ok(FileKind::Adapter),
            b"BASE" => Ok(FileKind::Base),
            b"CORP" => Ok(FileKind::Corpus),
            _ => Err(Error::format(format!("unknown kind tag {:?}", String::from_utf8_lossy(tag)))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub path: String,
    pub kind: u8,
    pub d_in: u32,
    pub d_out: u32,
    pub data: Vec<f32>,
}

/// One decoded `EELA` file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: FileKind,
    pub scheme: u8,
    pub rank: u16,
    pub alpha: f32,
    pub name: String,
    pub records: Vec<Record>,
}

fn payload_len(kind: FileKind, rank: u16, rec_kind: u8, d_in: usize, d_out: usize) -> Result<usize> {
    match (kind, rec_kind) {
        (FileKind::Adapter, 0 | 1) => Ok(effective_rank(rank as usize, d_in, d_out) * (d_in + d_out)),
        (FileKind::Base, 0 | 1) => Ok(d_out * d_in + d_out),
        (FileKind::Base, KIND_EMBEDDING) | (FileKind::Corpus, KIND_TENSOR) => Ok(d_in * d_out),
        _ => Err(Error::format(format!("record kind {rec_kind} not allowed in {kind:?} file"))),
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::input(format!("string of {} bytes too long", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(self.kind.tag());
        out.push(self.scheme);
        out.extend_from_slice(&self.rank.to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        push_str(&mut out, &self.name)?;
        let count = u32::try_from(self.records.len()).map_err(|_| Error::input("too many records"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for r in &self.records {
            let expect = payload_len(self.kind, self.rank, r.kind, r.d_in as usize, r.d_out as usize)
                .map_err(|e| Error::input(e.to_string()))?;
            if r.data.len() != expect {
                return Err(Error::shape(format!(
                    "record {} carries {} values, layout needs {expect}",
                    r.path,
                    r.data.len()
                )));
            }
            push_str(&mut out, &r.path)?;
            out.push(r.kind);
            out.extend_from_slice(&r.d_in.to_le_bytes());
            out.extend_from_slice(&r.d_out.to_le_bytes());
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::format("bad magic, not an EELA file"));
        }
        if bytes.len() < 6 {
            return Err(Error::format("truncated header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::format(format!("unsupported version {version}, expected {VERSION}")));
        }
        if bytes.len() < 10 {
            return Err(Error::format("truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::format(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 6 };
        let kind = FileKind::from_tag(r.take(4)?)?;
        let scheme = r.u8()?;
        let rank = r.u16()?;
        let alpha = r.f32()?;
        let name = r.string()?;
        let count = r.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let path = r.string()?;
            let rec_kind = r.u8()?;
            let d_in = r.u32()?;
            let d_out = r.u32()?;
            let n = payload_len(kind, rank, rec_kind, d_in as usize, d_out as usize)?;
            let data = r.f32s(n)?;
            records.push(Record {
                path,
                kind: rec_kind,
                d_in,
                d_out,
                data,
            });
        }
        if r.pos != body.len() {
            return Err(Error::format(format!("{} trailing bytes before CRC", body.len() - r.pos)));
        }
        Ok(Container {
            kind,
            scheme,
            rank,
            alpha,
            name,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    fn expect_kind(self, kind: FileKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::format(format!("expected a {kind:?} file, found {:?}", self.kind)));
        }
        Ok(self)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("string is not UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("record too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterRecord {
    pub path: String,
    pub kind: LayerKind,
    pub d_in_eff: usize,
    pub d_out_eff: usize,
    /// `[r x d_in_eff]`
    pub a: Tensor,
    /// `[d_out_eff x r]`
    pub b: Tensor,
}

/// Per-emotion set of trained low-rank pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBundle {
    pub emotion: Emotion,
    pub scheme: Scheme,
    pub rank: usize,
    pub alpha: f32,
    pub base_checksum: u32,
    pub records: Vec<AdapterRecord>,
}

impl AdapterBundle {
    /// Copies the pairs currently attached to `model`, in path order.
    pub fn from_model(model: &ToyModel, emotion: Emotion, scheme: Scheme, rank: usize, alpha: f32) -> Self {
        let records = model
            .layers()
            .into_iter()
            .filter_map(|(path, layer)| {
                layer.dense.lora().map(|p| AdapterRecord {
                    path,
                    kind: layer.kind,
                    d_in_eff: layer.dense.d_in_eff(),
                    d_out_eff: layer.dense.d_out_eff(),
                    a: p.a.value.clone(),
                    b: p.b.value.clone(),
                })
            })
            .collect();
        Self {
            emotion,
            scheme,
            rank,
            alpha,
            base_checksum: model.base_checksum(),
            records,
        }
    }

    pub fn param_count(&self) -> usize {
        self.records.iter().map(|r| r.a.len() + r.b.len()).sum()
    }

    pub fn name(&self) -> String {
        format!("{}@{:08x}", self.emotion, self.base_checksum)
    }

    pub fn to_container(&self) -> Result<Container> {
        let rank = u16::try_from(self.rank).map_err(|_| Error::input(format!("rank {} too large", self.rank)))?;
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut data = r.a.data().to_vec();
                data.extend_from_slice(r.b.data());
                Record {
                    path: r.path.clone(),
                    kind: r.kind.code(),
                    d_in: r.d_in_eff as u32,
                    d_out: r.d_out_eff as u32,
                    data,
                }
            })
            .collect();
        Ok(Container {
            kind: FileKind::Adapter,
            scheme: self.scheme.id() as u8,
            rank,
            alpha: self.alpha,
            name: self.name(),
            records,
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_kind(FileKind::Adapter)?;
        let scheme = Scheme::from_id(c.scheme as char).map_err(|e| Error::format(e.to_string()))?;
        let (emotion, checksum) = c
            .name
            .split_once('@')
            .ok_or_else(|| Error::format(format!("adapter name {:?} lacks a base checksum", c.name)))?;
        let emotion: Emotion = emotion.parse().map_err(|e: Error| Error::format(e.to_string()))?;
        let base_checksum = u32::from_str_radix(checksum, 16)
            .map_err(|_| Error::format(format!("bad base checksum {checksum:?}")))?;
        let rank = c.rank as usize;
        let records = c
            .records
            .into_iter()
            .map(|r| {
                let kind = LayerKind::from_code(r.kind)
                    .ok_or_else(|| Error::format(format!("bad layer kind {}", r.kind)))?;
                let (d_in, d_out) = (r.d_in as usize, r.d_out as usize);
                let er = effective_rank(rank, d_in, d_out);
                if er == 0 {
                    return Err(Error::format(format!("record {} has zero rank", r.path)));
                }
                let mut data = r.data;
                let b = data.split_off(er * d_in);
                Ok(AdapterRecord {
                    path: r.path,
                    kind,
                    d_in_eff: d_in,
                    d_out_eff: d_out,
                    a: Tensor::new(&[er, d_in], data)?,
                    b: Tensor::new(&[d_out, er], b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            emotion,
            scheme,
            rank,
            alpha: c.alpha,
            base_checksum,
            records,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::decode(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Checks that every record fits `model` and that the model is the base
    /// this bundle was trained on.
    pub fn check_compatible(&self, model: &ToyModel) -> Result<()> {
        let actual = model.base_checksum();
        if actual != self.base_checksum {
            return Err(Error::compat(format!(
                "{} adapter was trained on base {:08x}, model is {actual:08x}",
                self.emotion, self.base_checksum
            )));
        }
        let layers = model.layers();
        for r in &self.records {
            let Some((_, layer)) = layers.iter().find(|(p, _)| *p == r.path) else {
                return Err(Error::compat(format!("unknown layer path {}", r.path)));
            };
            if layer.kind != r.kind
                || layer.dense.d_in_eff() != r.d_in_eff
                || layer.dense.d_out_eff() != r.d_out_eff
            {
                return Err(Error::compat(format!(
                    "record {} is {} [{} x {}], layer is {} [{} x {}]",
                    r.path,
                    r.kind.name(),
                    r.d_out_eff,
                    r.d_in_eff,
                    layer.kind.name(),
                    layer.dense.d_out_eff(),
                    layer.dense.d_in_eff()
                )));
            }
        }
        Ok(())
    }

    /// Attaches every pair to `model`, which must carry no adapters.
    pub fn attach_to(&self, model: &mut ToyModel) -> Result<()> {
        if model.has_adapters() {
            return Err(Error::state("model already carries adapters"));
        }
        self.check_compatible(model)?;
        for r in &self.records {
            let dense = model.layer_mut(&r.path).expect("checked above");
            let alpha = layer_alpha(self.alpha, self.rank, r.a.rows());
            dense.attach_with(r.a.clone(), r.b.clone(), alpha)?;
        }
        Ok(())
    }
}

/// Loaded bundles by emotion and the one currently attached, if any.
#[derive(Clone, Debug, Default)]
pub struct AdapterRegistry {
    bundles: BTreeMap<Emotion, AdapterBundle>,
    attached: Option<Emotion>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the bundle for its emotion.
    pub fn insert(&mut self, bundle: AdapterBundle) {
        self.bundles.insert(bundle.emotion, bundle);
    }

    pub fn load_file(&mut self, path: impl AsRef<Path>) -> Result<Emotion> {
        let b = AdapterBundle::load(path)?;
        let e = b.emotion;
        self.insert(b);
        Ok(e)
    }

    pub fn get(&self, emotion: Emotion) -> Option<&AdapterBundle> {
        self.bundles.get(&emotion)
    }

    pub fn emotions(&self) -> Vec<Emotion> {
        self.bundles.keys().copied().collect()
    }

    pub fn attached(&self) -> Option<Emotion> {
        self.attached
    }
}

/// Makes `model` express `emotion`, or the plain base for `None`.
///
/// The requested bundle is validated before anything is detached, so a
/// failed swap leaves the model as it was.
pub fn swap(model: &mut ToyModel, registry: &mut AdapterRegistry, emotion: Option<Emotion>) -> Result<()> {
    if let Some(e) = emotion {
        let b = registry.get(e).ok_or_else(|| Error::Lookup {
            what: "emotion",
            name: e.to_string(),
        })?;
        b.check_compatible(model)?;
    }
    if model.has_adapters() {
        model.detach_all()?;
    }
    registry.attached = None;
    if let Some(e) = emotion {
        registry.bundles[&e].attach_to(model)?;
        registry.attached = Some(e);
    }
    Ok(())
}

fn config_name(cfg: &ModelConfig, pretrained: bool) -> String {
    format!(
        "vocab={},hidden={},out_dim={},flow_layers={},kernel={},max_duration={},pos_pairs={},pretrained={}",
        cfg.vocab,
        cfg.hidden,
        cfg.out_dim,
        cfg.flow_layers,
        cfg.kernel,
        cfg.max_duration,
        cfg.pos_pairs,
        pretrained as u8
    )
}

fn parse_config_name(name: &str) -> Result<(ModelConfig, bool)> {
    let mut cfg = ModelConfig::default();
    let mut pretrained = false;
    let mut seen = 0;
    for part in name.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad checkpoint field {part:?}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| Error::format(format!("bad value for {k}: {v:?}")))?;
        match k {
            "vocab" => cfg.vocab = v,
            "hidden" => cfg.hidden = v,
            "out_dim" => cfg.out_dim = v,
            "flow_layers" => cfg.flow_layers = v,
            "kernel" => cfg.kernel = v,
            "max_duration" => cfg.max_duration = v,
            "pos_pairs" => cfg.pos_pairs = v,
            "pretrained" => pretrained = v != 0,
            _ => return Err(Error::format(format!("unknown checkpoint field {k}"))),
        }
        seen += 1;
    }
    if seen != 8 {
        return Err(Error::format(format!("checkpoint header has {seen} of 8 fields")));
    }
    Ok((cfg, pretrained))
}

/// Base weights only; attached adapters are not saved.
pub fn base_to_container(model: &ToyModel) -> Container {
    let emb = &model.text_encoder.embedding.value;
    let mut records = vec![Record {
        path: EMBEDDING_PATH.to_string(),
        kind: KIND_EMBEDDING,
        d_in: emb.cols() as u32,
        d_out: emb.rows() as u32,
        data: emb.data().to_vec(),
    }];
    for (path, layer) in model.layers() {
        let mut data = layer.dense.weight.value.data().to_vec();
        data.extend_from_slice(layer.dense.bias.value.data());
        records.push(Record {
            path,
            kind: layer.kind.code(),
            d_in: layer.dense.d_in_eff() as u32,
            d_out: layer.dense.d_out_eff() as u32,
            data,
        });
    }
    Container {
        kind: FileKind::Base,
        scheme: b'-',
        rank: 0,
        alpha: 0.0,
        name: config_name(model.config(), model.is_pretrained()),
        records,
    }
}

pub fn base_from_container(c: Container) -> Result<ToyModel> {
    let c = c.expect_kind(FileKind::Base)?;
    let (cfg, pretrained) = parse_config_name(&c.name)?;
    let mut model = ToyModel::new(cfg, 0).map_err(|e| Error::format(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for r in c.records {
        let (d_in, d_out) = (r.d_in as usize, r.d_out as usize);
        if !seen.insert(r.path.clone()) {
            return Err(Error::format(format!("duplicate record {}", r.path)));
        }
        if r.path == EMBEDDING_PATH {
            let emb = &mut model.text_encoder.embedding.value;
            if r.kind != KIND_EMBEDDING || emb.shape() != [d_out, d_in] {
                return Err(Error::format(format!("embedding record [{d_out} x {d_in}] does not fit")));
            }
            *emb = Tensor::new(&[d_out, d_in], r.data)?;
            continue;
        }
        let dense = model
            .layer_mut(&r.path)
            .ok_or_else(|| Error::format(format!("unknown layer path {}", r.path)))?;
        if dense.d_in_eff() != d_in || dense.d_out_eff() != d_out {
            return Err(Error::format(format!(
                "record {} [{d_out} x {d_in}] does not fit layer [{} x {}]",
                r.path,
                dense.d_out_eff(),
                dense.d_in_eff()
            )));
        }
        let mut w = r.data;
        let b = w.split_off(d_in * d_out);
        let w_shape = dense.weight.value.shape().to_vec();
        dense.weight.value = Tensor::new(&w_shape, w)?;
        dense.bias.value = Tensor::new(&[d_out], b)?;
    }
    let expected = model.layers().len() + 1;
    if seen.len() != expected {
        return Err(Error::format(format!("checkpoint has {} of {expected} records", seen.len())));
    }
    model.set_pretrained(pretrained);
    Ok(model)
}

pub fn save_base(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    base_to_container(model).save(path)
}

pub fn load_base(path: impl AsRef<Path>) -> Result<ToyModel> {
    base_from_container(Container::load(path)?)
}

fn tensor_record(path: String, t: &Tensor) -> Record {
    let cols = if t.shape().len() >= 2 { t.cols() } else { t.len() };
    Record {
        path,
        kind: KIND_TENSOR,
        d_in: (t.len() / cols) as u32,
        d_out: cols as u32,
        data: t.data().to_vec(),
    }
}

fn ints_record(path: String, v: &[usize]) -> Result<Record> {
    let t = Tensor::new(&[1, v.len()], v.iter().map(|&x| x as f32).collect())?;
    Ok(tensor_record(path, &t))
}

/// Named tensors in a `CORP` file.
pub fn tensors_to_container(name: &str, tensors: &[(String, Tensor)]) -> Container {
    Container {
        kind: FileKind::Corpus,
        scheme: b'-',
        rank: 0,
        alpha: 0.0,
        name: name.to_string(),
        records: tensors.iter().map(|(p, t)| tensor_record(p.clone(), t)).collect(),
    }
}

pub fn corpus_to_container(corpus: &EmotionCorpus) -> Result<Container> {
    let mut records = Vec::new();
    for (i, u) in corpus.utterances.iter().enumerate() {
        records.push(ints_record(format!("utt{i}.tokens"), &u.tokens)?);
        records.push(ints_record(format!("utt{i}.split"), &[u.split.code() as usize])?);
        for e in Emotion::ALL {
            let t = u.target(e);
            records.push(ints_record(format!("utt{i}.{e}.frames"), &t.frames)?);
            records.push(tensor_record(format!("utt{i}.{e}.output"), &t.output));
        }
    }
    Ok(Container {
        kind: FileKind::Corpus,
        scheme: b'-',
        rank: 0,
        alpha: 0.0,
        name: format!("corpus@{:08x}", corpus.base_checksum),
        records,
    })
}

fn to_ints(r: &Record) -> Result<Vec<usize>> {
    r.data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::format(format!("record {} holds non-integer {v}", r.path)))
            }
        })
        .collect()
}

pub fn corpus_from_container(c: Container) -> Result<EmotionCorpus> {
    let c = c.expect_kind(FileKind::Corpus)?;
    let base_checksum = c
        .name
        .strip_prefix("corpus@")
        .and_then(|h| u32::from_str_radix(h, 16).ok())
        .ok_or_else(|| Error::format(format!("{:?} is not a corpus file", c.name)))?;
    let per_utt = 2 + 2 * Emotion::ALL.len();
    if c.records.len() % per_utt != 0 {
        return Err(Error::format(format!("{} records is not a whole number of utterances", c.records.len())));
    }
    let mut utterances = Vec::new();
    for (i, chunk) in c.records.chunks(per_utt).enumerate() {
        let expect = |j: usize, path: String| -> Result<&Record> {
            let r = &chunk[j];
            if r.path != path {
                return Err(Error::format(format!("expected record {path}, found {}", r.path)));
            }
            Ok(r)
        };
        let tokens = to_ints(expect(0, format!("utt{i}.tokens"))?)?;
        let split_code = to_ints(expect(1, format!("utt{i}.split"))?)?;
        let split = match split_code.as_slice() {
            [c] => Split::from_code(*c as u8),
            _ => None,
        }
        .ok_or_else(|| Error::format(format!("bad split for utterance {i}")))?;
        let mut targets = Vec::new();
        for (k, e) in Emotion::ALL.into_iter().enumerate() {
            let frames = to_ints(expect(2 + 2 * k, format!("utt{i}.{e}.frames"))?)?;
            let out = expect(3 + 2 * k, format!("utt{i}.{e}.output"))?;
            let output = Tensor::new(&[out.d_in as usize, out.d_out as usize], out.data.clone())?;
            targets.push(Target { frames, output });
        }
        utterances.push(Utterance { tokens, split, targets });
    }
    Ok(EmotionCorpus {
        utterances,
        base_checksum,
    })
}

pub fn save_corpus(corpus: &EmotionCorpus, path: impl AsRef<Path>) -> Result<()> {
    corpus_to_container(corpus)?.save(path)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<EmotionCorpus> {
    corpus_from_container(Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Container {
        Container {
            kind: FileKind::Corpus,
            scheme: b'-',
            rank: 0,
            alpha: 0.0,
            name: "t".into(),
            records: vec![Record {
                path: "x".into(),
                kind: KIND_TENSOR,
                d_in: 1,
                d_out: 2,
                data: vec![1.0, -2.5],
            }],
        }
    }

    #[test]
    fn byte_layout() {
        let bytes = tiny().encode().unwrap();
        assert_eq!(&bytes[..4], b"EELA");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], b"CORP");
        assert_eq!(bytes[10], b'-');
        assert_eq!(&bytes[11..13], &[0, 0]);
        assert_eq!(&bytes[13..17], &0f32.to_le_bytes());
        assert_eq!(&bytes[17..20], &[1, 0, b't']);
        assert_eq!(&bytes[20..24], &[1, 0, 0, 0]);
        assert_eq!(&bytes[24..27], &[1, 0, b'x']);
        assert_eq!(bytes[27], 3);
        assert_eq!(&bytes[28..36], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[36..40], &1f32.to_le_bytes());
        assert_eq!(&bytes[40..44], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 48);
        let crc = crc32fast::hash(&bytes[..44]);
        assert_eq!(&bytes[44..], &crc.to_le_bytes());
    }

    #[test]
    fn decode_errors() {
        let bytes = tiny().encode().unwrap();
        assert_eq!(Container::decode(&bytes).unwrap(), tiny());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::decode(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Container::decode(&bad), Err(Error::Format(m)) if m.contains("version")));
        let mut bad = bytes.clone();
        bad[38] ^= 1;
        assert!(matches!(Container::decode(&bad), Err(Error::Format(m)) if m.contains("CRC")));
        for n in 0..bytes.len() {
            assert!(matches!(Container::decode(&bytes[..n]), Err(Error::Format(_))), "prefix {n}");
        }
    }

    #[test]
    fn config_name_round_trip() {
        let cfg = ModelConfig::default();
        let (back, p) = parse_config_name(&config_name(&cfg, true)).unwrap();
        assert_eq!(back, cfg);
        assert!(p);
    }
}
