//! Binary model files.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "AESN" 0x01
//! vocab count, then per vocab: name, entry count, entries
//! tensor count, then per tensor: name, rank, dims, f64 LE payload
//! ```
//!
//! Strings are length-prefixed UTF-8. The run configuration and the label
//! inventory travel as vocab sections (`config`, `labels`).

use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synextract::{SyntaxVocab, Vocab};

pub const MAGIC: &[u8; 4] = b"AESN";
pub const VERSION: u8 = 0x01;

fn put_u32(out: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Checkpoint(format!("{x} does not fit in u32")))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Checkpoint(format!("bad UTF-8: {e}")))
    }
}

/// Named string lists and tensors, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Contents {
    pub vocabs: Vec<(String, Vec<String>)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Contents {
    pub fn vocab(&self, name: &str) -> Result<&[String]> {
        self.vocabs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(contents: &Contents) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, contents.vocabs.len())?;
    for (name, entries) in &contents.vocabs {
        put_str(&mut out, name)?;
        put_u32(&mut out, entries.len())?;
        for e in entries {
            put_str(&mut out, e)?;
        }
    }
    put_u32(&mut out, contents.tensors.len())?;
    for (name, t) in &contents.tensors {
        put_str(&mut out, name)?;
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Contents> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Checkpoint("not a model file: too short".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("not a model file: bad magic bytes".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let mut vocabs = Vec::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let n = r.u32()?;
        let entries = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        vocabs.push((name, entries));
    }
    let mut tensors = Vec::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the tensor section",
            bytes.len() - r.pos
        )));
    }
    Ok(Contents { vocabs, tensors })
}

fn vocab_entries(v: &Vocab) -> Vec<String> {
    v.entries().to_vec()
}

pub fn contents(model: &Model) -> Contents {
    let mut vocabs = vec![
        (
            "config".to_string(),
            model
                .config
                .model_pairs()
                .into_iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect(),
        ),
        ("labels".to_string(), model.labels.labels().to_vec()),
        ("words".to_string(), vocab_entries(&model.words)),
    ];
    for sv in &model.syntax_vocabs {
        vocabs.push((format!("syntax.{}.keys", sv.ty), vocab_entries(&sv.keys)));
        vocabs.push((format!("syntax.{}.values", sv.ty), vocab_entries(&sv.values)));
    }
    if let Some(v) = &model.static_vocab {
        vocabs.push(("static".to_string(), vocab_entries(v)));
    }
    let tensors = model
        .params
        .iter()
        .map(|(name, t)| (name.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape")))
        .collect();
    Contents { vocabs, tensors }
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    encode(&contents(model))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let c = decode(bytes)?;
    let config = TrainConfig::parse(&c.vocab("config")?.join("\n"))?;
    let labels = LabelSet::from_labels(c.vocab("labels")?.iter().cloned());
    let words = Vocab::from_entries(c.vocab("words")?.to_vec());
    let mut syntax = Vec::new();
    for &ty in &config.syntax {
        syntax.push(SyntaxVocab {
            ty,
            keys: Vocab::from_entries(c.vocab(&format!("syntax.{ty}.keys"))?.to_vec()),
            values: Vocab::from_entries(c.vocab(&format!("syntax.{ty}.values"))?.to_vec()),
        });
    }
    let static_table = match c.vocabs.iter().find(|(n, _)| n == "static") {
        Some((_, entries)) => {
            let t = c
                .tensor("emb.static")
                .ok_or_else(|| Error::Checkpoint("static vocabulary without its table".into()))?;
            Some((Vocab::from_entries(entries.clone()), t.clone()))
        }
        None => None,
    };
    let mut model = Model::build(config, labels, words, syntax, static_table)?;
    if c.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "file has {} tensors, model expects {}",
            c.tensors.len(),
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let t = c
            .tensor(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let target = model.params.get_mut(id);
        if target.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(t.data());
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Contents {
        Contents {
            vocabs: vec![("a".into(), vec!["<unk>".into(), "x y".into(), "ü".into()]), ("b".into(), vec![])],
            tensors: vec![
                ("w".into(), Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("s".into(), Tensor::scalar(0.1)),
            ],
        }
    }

    #[test]
    fn layout_round_trip() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..5], b"AESN\x01");
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(back.tensors[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_damaged_files() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 3, 5, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let e = decode(&v2).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");
        let mut foreign = bytes.clone();
        foreign[..4].copy_from_slice(b"PK\x03\x04");
        assert!(decode(&foreign).unwrap_err().to_string().contains("magic"));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
