//! CoNLL column corpora, BIO/BIOES label schemes and entity span decoding.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub pos: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub labels: Vec<String>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.surface.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Bio,
    Bioes,
    /// Labels outside the B/I/E/S/O alphabet.
    Raw,
}

/// Ordered label inventory; ids are positions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = LabelSet::default();
        for l in labels {
            set.insert(l.into());
        }
        set
    }

    /// Full BIOES inventory over the given entity types: `O` first, then
    /// `B-`, `I-`, `E-`, `S-` per type in sorted type order.
    pub fn bioes_for_types<'a>(types: impl IntoIterator<Item = &'a str>) -> Self {
        let types: BTreeSet<&str> = types.into_iter().collect();
        let mut set = LabelSet::default();
        set.insert(OUTSIDE.to_string());
        for t in types {
            for p in ["B", "I", "E", "S"] {
                set.insert(format!("{p}-{t}"));
            }
        }
        set
    }

    fn insert(&mut self, label: String) {
        if !self.index.contains_key(&label) {
            self.index.insert(label.clone(), self.labels.len());
            self.labels.push(label);
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn encode(&self, labels: &[String]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| self.id(l).ok_or_else(|| Error::UnknownLabel(l.clone())))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.labels[i].clone()).collect()
    }

    /// Entity types mentioned by prefixed labels, sorted.
    pub fn entity_types(&self) -> Vec<String> {
        let set: BTreeSet<String> = self
            .labels
            .iter()
            .filter_map(|l| Tag::parse(l).ok().and_then(|t| t.etype().map(str::to_string)))
            .collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub sentences: Vec<Sentence>,
    pub label_set: LabelSet,
    pub scheme: Scheme,
}

impl LabeledCorpus {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        let label_set = LabelSet::from_labels(
            sentences
                .iter()
                .flat_map(|s| s.labels.iter().cloned())
                .collect::<BTreeSet<_>>(),
        );
        let scheme = detect_scheme(label_set.labels());
        LabeledCorpus {
            sentences,
            label_set,
            scheme,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Rewrites every sentence to BIOES. Returns the number of repaired labels.
    pub fn convert_to_bioes(&mut self) -> Result<usize> {
        if self.scheme == Scheme::Raw {
            return Err(Error::Config(
                "corpus labels are not in a BIO/BIOES scheme".into(),
            ));
        }
        let mut repairs = 0;
        for s in &mut self.sentences {
            let (labels, r) = to_bioes(&s.labels)?;
            s.labels = labels;
            repairs += r;
        }
        let types: Vec<String> = self.label_set.entity_types();
        self.label_set = LabelSet::bioes_for_types(types.iter().map(String::as_str));
        self.scheme = Scheme::Bioes;
        Ok(repairs)
    }
}

/// Which input columns hold what. Column indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnMap {
    pub token_col: usize,
    pub pos_col: Option<usize>,
    pub label_col: Option<usize>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            token_col: 0,
            pos_col: Some(1),
            label_col: Some(2),
        }
    }
}

impl ColumnMap {
    fn required_width(&self) -> usize {
        [Some(self.token_col), self.pos_col, self.label_col]
            .into_iter()
            .flatten()
            .max()
            .unwrap_or(0)
            + 1
    }
}

/// Reads a whitespace-separated, blank-line-delimited column file.
///
/// Missing POS columns yield an empty POS string; a missing label column
/// fills every label with `O`.
pub fn load_conll<R: BufRead>(reader: R, columns: ColumnMap) -> Result<LabeledCorpus> {
    let width = columns.required_width();
    let mut sentences = Vec::new();
    let mut current = Sentence {
        tokens: Vec::new(),
        labels: Vec::new(),
    };

    let flush = |current: &mut Sentence, out: &mut Vec<Sentence>| {
        if !current.tokens.is_empty() {
            out.push(std::mem::replace(
                current,
                Sentence {
                    tokens: Vec::new(),
                    labels: Vec::new(),
                },
            ));
        }
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut current, &mut sentences);
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < width {
            return Err(Error::Format {
                line: lineno + 1,
                msg: format!(
                    "expected at least {width} columns, found {}: `{trimmed}`",
                    fields.len()
                ),
            });
        }
        let index = current.tokens.len();
        current.tokens.push(Token {
            surface: fields[columns.token_col].to_string(),
            pos: columns
                .pos_col
                .map(|c| fields[c].to_string())
                .unwrap_or_default(),
            index,
        });
        current.labels.push(
            columns
                .label_col
                .map(|c| fields[c].to_string())
                .unwrap_or_else(|| OUTSIDE.to_string()),
        );
    }
    flush(&mut current, &mut sentences);

    if sentences.is_empty() {
        return Err(Error::Empty("no sentences in CoNLL input".into()));
    }
    Ok(LabeledCorpus::new(sentences))
}

pub fn load_conll_file(path: &std::path::Path, columns: ColumnMap) -> Result<LabeledCorpus> {
    let file = std::fs::File::open(path)?;
    load_conll(std::io::BufReader::new(file), columns)
}

/// Writes sentences back out as `token pos label [extra...]` rows.
pub fn write_conll<W: std::io::Write>(
    mut out: W,
    sentences: &[Sentence],
    extra: Option<&[Vec<String>]>,
) -> Result<()> {
    for (k, s) in sentences.iter().enumerate() {
        for (i, tok) in s.tokens.iter().enumerate() {
            let pos = if tok.pos.is_empty() { "_" } else { &tok.pos };
            write!(out, "{} {} {}", tok.surface, pos, s.labels[i])?;
            if let Some(extra) = extra {
                write!(out, " {}", extra[k][i])?;
            }
            writeln!(out)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prefix {
    B,
    I,
    E,
    S,
}

/// A parsed label: `O` or `<prefix>-<type>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Entity(Prefix, String),
}

impl Tag {
    pub fn parse(label: &str) -> Result<Tag> {
        if label == OUTSIDE {
            return Ok(Tag::Outside);
        }
        let (p, t) = label
            .split_once('-')
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        let prefix = match p {
            "B" => Prefix::B,
            "I" => Prefix::I,
            "E" => Prefix::E,
            "S" => Prefix::S,
            _ => return Err(Error::UnknownLabel(label.to_string())),
        };
        if t.is_empty() {
            return Err(Error::UnknownLabel(label.to_string()));
        }
        Ok(Tag::Entity(prefix, t.to_string()))
    }

    pub fn etype(&self) -> Option<&str> {
        match self {
            Tag::Outside => None,
            Tag::Entity(_, t) => Some(t),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str(OUTSIDE),
            Tag::Entity(p, t) => {
                let p = match p {
                    Prefix::B => "B",
                    Prefix::I => "I",
                    Prefix::E => "E",
                    Prefix::S => "S",
                };
                write!(f, "{p}-{t}")
            }
        }
    }
}

pub fn detect_scheme(labels: &[String]) -> Scheme {
    let mut bioes = false;
    for l in labels {
        match Tag::parse(l) {
            Ok(Tag::Entity(Prefix::E | Prefix::S, _)) => bioes = true,
            Ok(_) => {}
            Err(_) => return Scheme::Raw,
        }
    }
    if bioes {
        Scheme::Bioes
    } else {
        Scheme::Bio
    }
}

/// Converts a BIO sequence to BIOES.
///
/// An `I-X` that does not continue a `B-X`/`I-X` is promoted to `B-X`; the
/// second return value counts those promotions. `E-`/`S-` input is read as
/// `I-`/`B-`, so the conversion is idempotent.
pub fn to_bioes(labels: &[String]) -> Result<(Vec<String>, usize)> {
    let mut tags = labels
        .iter()
        .map(|l| Tag::parse(l))
        .collect::<Result<Vec<_>>>()?;

    let mut repairs = 0;
    for i in 0..tags.len() {
        let continues = |prev: Option<&Tag>, t: &str| {
            matches!(prev, Some(Tag::Entity(Prefix::B | Prefix::I, pt)) if pt == t)
        };
        let tag = std::mem::replace(&mut tags[i], Tag::Outside);
        tags[i] = match tag {
            Tag::Entity(Prefix::S, t) => Tag::Entity(Prefix::B, t),
            Tag::Entity(Prefix::I | Prefix::E, t) => {
                if continues(i.checked_sub(1).map(|j| &tags[j]), &t) {
                    Tag::Entity(Prefix::I, t)
                } else {
                    repairs += 1;
                    Tag::Entity(Prefix::B, t)
                }
            }
            other => other,
        };
    }

    let out = (0..tags.len())
        .map(|i| {
            let next_continues =
                matches!(tags.get(i + 1), Some(Tag::Entity(Prefix::I, _)));
            match &tags[i] {
                Tag::Outside => OUTSIDE.to_string(),
                Tag::Entity(Prefix::B, t) => {
                    let p = if next_continues { "B" } else { "S" };
                    format!("{p}-{t}")
                }
                Tag::Entity(_, t) => {
                    let p = if next_continues { "I" } else { "E" };
                    format!("{p}-{t}")
                }
            }
        })
        .collect();
    Ok((out, repairs))
}

/// Maps BIOES back to BIO (`E`→`I`, `S`→`B`).
pub fn to_bio(labels: &[String]) -> Result<Vec<String>> {
    labels
        .iter()
        .map(|l| {
            Ok(match Tag::parse(l)? {
                Tag::Outside => OUTSIDE.to_string(),
                Tag::Entity(Prefix::B | Prefix::S, t) => format!("B-{t}"),
                Tag::Entity(Prefix::I | Prefix::E, t) => format!("I-{t}"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntitySpan {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub etype: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: impl Into<String>) -> Self {
        EntitySpan {
            start,
            end,
            etype: etype.into(),
        }
    }
}

/// Extracts the well-formed `B..E` and `S` segments of a BIOES sequence.
///
/// Fragments that never close (dangling `B`, stray `I`/`E`, type changes
/// mid-entity) are dropped. Output is sorted by start.
pub fn decode_spans(labels: &[String]) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, l) in labels.iter().enumerate() {
        match Tag::parse(l)? {
            Tag::Outside => open = None,
            Tag::Entity(Prefix::S, t) => {
                open = None;
                spans.push(EntitySpan::new(i, i, t));
            }
            Tag::Entity(Prefix::B, t) => open = Some((i, t)),
            Tag::Entity(Prefix::I, t) => {
                if !matches!(&open, Some((_, ot)) if *ot == t) {
                    open = None;
                }
            }
            Tag::Entity(Prefix::E, t) => {
                if let Some((start, ot)) = open.take() {
                    if ot == t {
                        spans.push(EntitySpan::new(start, i, t));
                    }
                }
            }
        }
    }
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn loads_single_block() {
        let c = load_conll("Salt NNP B-LOC\nLake NNP I-LOC\n".as_bytes(), ColumnMap::default())
            .unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.sentences[0].len(), 2);
        assert_eq!(c.sentences[0].labels, s(&["B-LOC", "I-LOC"]));
        assert_eq!(c.sentences[0].tokens[1].pos, "NNP");
        assert_eq!(c.scheme, Scheme::Bio);
    }

    #[test]
    fn blank_lines_split_sentences() {
        let text = "-DOCSTART- -X- O\n\na DT O\n\n\nb NN O\nc NN B-X\n";
        let c = load_conll(text.as_bytes(), ColumnMap::default()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sentences[1].tokens[1].index, 1);
    }

    #[test]
    fn ragged_row_names_line() {
        let err = load_conll("a DT O\nb NN\n".as_bytes(), ColumnMap::default()).unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_input_is_error() {
        assert!(load_conll("\n\n".as_bytes(), ColumnMap::default()).is_err());
    }

    #[test]
    fn bioes_examples() {
        assert_eq!(
            to_bioes(&s(&["B-PER", "I-PER", "O"])).unwrap(),
            (s(&["B-PER", "E-PER", "O"]), 0)
        );
        assert_eq!(to_bioes(&s(&["B-LOC"])).unwrap(), (s(&["S-LOC"]), 0));
        assert_eq!(to_bioes(&s(&["O", "I-ORG"])).unwrap(), (s(&["O", "S-ORG"]), 1));
        // type switch inside an entity starts a new one
        assert_eq!(
            to_bioes(&s(&["B-PER", "I-LOC", "I-LOC"])).unwrap(),
            (s(&["S-PER", "B-LOC", "E-LOC"]), 1)
        );
    }

    #[test]
    fn to_bioes_is_idempotent_and_invertible() {
        let bio = s(&["B-A", "I-A", "I-A", "O", "B-B", "B-B", "I-B"]);
        let (bioes, _) = to_bioes(&bio).unwrap();
        assert_eq!(to_bioes(&bioes).unwrap().0, bioes);
        assert_eq!(to_bio(&bioes).unwrap(), bio);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(
            decode_spans(&s(&["B-PER", "E-PER", "O", "S-LOC"])).unwrap(),
            vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(3, 3, "LOC")]
        );
        assert!(decode_spans(&s(&["O", "O"])).unwrap().is_empty());
        assert_eq!(
            decode_spans(&s(&["B-PER", "B-LOC", "E-LOC"])).unwrap(),
            vec![EntitySpan::new(1, 2, "LOC")]
        );
        assert!(decode_spans(&s(&["B-PER", "I-PER"])).unwrap().is_empty());
        assert!(decode_spans(&s(&["B-PER", "E-LOC"])).unwrap().is_empty());
    }

    #[test]
    fn decode_rejects_unknown() {
        assert!(matches!(
            decode_spans(&s(&["X-PER"])),
            Err(Error::UnknownLabel(_))
        ));
        assert!(decode_spans(&s(&["PER"])).is_err());
    }

    #[test]
    fn bioes_label_set_layout() {
        let set = LabelSet::bioes_for_types(["PER", "LOC"]);
        assert_eq!(set.label(0), "O");
        assert_eq!(set.label(1), "B-LOC");
        assert_eq!(set.len(), 9);
        assert_eq!(set.entity_types(), s(&["LOC", "PER"]));
    }

    #[test]
    fn corpus_conversion_builds_full_inventory() {
        let mut c = load_conll("a NN B-X\nb NN O\n".as_bytes(), ColumnMap::default()).unwrap();
        c.convert_to_bioes().unwrap();
        assert_eq!(c.sentences[0].labels, s(&["S-X", "O"]));
        assert_eq!(c.label_set.len(), 5);
        assert_eq!(c.scheme, Scheme::Bioes);
    }
}
