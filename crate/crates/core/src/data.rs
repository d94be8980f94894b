//! Loading a corpus split together with its parse files.
//!
//! Parses sit next to the corpus file by default: `dir/train.conll` pairs
//! with `dir/train.trees` and `dir/train.deps`. Explicit paths override that.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use crate::corpus::{load_conll, ColumnMap, LabeledCorpus, Scheme, Sentence};
use crate::error::{Error, Result};
use crate::synextract::{Annotations, SyntaxType};
use crate::synparse::{read_deps, read_trees};

/// Corpus sentences with aligned annotations.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: LabeledCorpus,
    pub annotations: Vec<Annotations>,
    /// Labels rewritten by the BIO repair rule.
    pub repairs: usize,
    /// Tokens whose POS column disagrees with the tree preterminal.
    pub pos_conflicts: usize,
}

impl Dataset {
    pub fn sentences(&self) -> &[Sentence] {
        &self.corpus.sentences
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }
}

/// `path` with its extension replaced by `ext`.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Picks the column map from the first data row: three or more columns
/// carry labels, two mean `token pos`, one means bare tokens.
pub fn detect_columns(path: &Path) -> Result<ColumnMap> {
    let reader = BufReader::new(File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with("-DOCSTART-") {
            continue;
        }
        let width = t.split_whitespace().count();
        return Ok(match width {
            1 => ColumnMap {
                token_col: 0,
                pos_col: None,
                label_col: None,
            },
            2 => ColumnMap {
                token_col: 0,
                pos_col: Some(1),
                label_col: None,
            },
            _ => ColumnMap {
                token_col: 0,
                pos_col: Some(1),
                label_col: Some(width - 1),
            },
        });
    }
    Err(Error::Empty(format!("{} has no sentences", path.display())))
}

/// Loads a split and the parse files the requested syntax types need.
/// Trees are also read, when present, to fill in missing POS tags.
pub fn load_dataset(
    conll: &Path,
    trees: Option<&Path>,
    deps: Option<&Path>,
    syntax: &[SyntaxType],
) -> Result<Dataset> {
    let columns = detect_columns(conll)?;
    let mut corpus = load_conll(BufReader::new(File::open(conll)?), columns)?;
    let repairs = match corpus.scheme {
        Scheme::Raw => {
            return Err(Error::Config(format!(
                "{}: labels are not in a BIO/BIOES scheme",
                conll.display()
            )))
        }
        _ => corpus.convert_to_bioes()?,
    };
    let n = corpus.len();

    let pos_missing = corpus
        .sentences
        .iter()
        .any(|s| s.tokens.iter().any(|t| t.pos.is_empty() || t.pos == "_"));
    let want_trees = syntax.contains(&SyntaxType::Con) || (syntax.contains(&SyntaxType::Pos) && pos_missing);
    let tree_path = trees.map(Path::to_path_buf).unwrap_or_else(|| sibling(conll, "trees"));
    let tree_list = if want_trees {
        let t = read_trees(BufReader::new(File::open(&tree_path).map_err(|e| {
            Error::Config(format!("cannot open trees {}: {e}", tree_path.display()))
        })?))?;
        Some(t)
    } else {
        None
    };
    let dep_path = deps.map(Path::to_path_buf).unwrap_or_else(|| sibling(conll, "deps"));
    let dep_list = if syntax.contains(&SyntaxType::Dep) {
        Some(read_deps(BufReader::new(File::open(&dep_path).map_err(|e| {
            Error::Config(format!("cannot open dependencies {}: {e}", dep_path.display()))
        })?))?)
    } else {
        None
    };
    for (name, len) in [
        ("trees", tree_list.as_ref().map(Vec::len)),
        ("dependency parses", dep_list.as_ref().map(Vec::len)),
    ] {
        if let Some(len) = len {
            if len != n {
                return Err(Error::Alignment(format!(
                    "{}: {n} sentences but {len} {name}",
                    conll.display()
                )));
            }
        }
    }

    let mut trees = tree_list.map(Vec::into_iter);
    let mut deps = dep_list.map(Vec::into_iter);
    let mut annotations = Vec::with_capacity(n);
    let mut pos_conflicts = 0;
    for (k, s) in corpus.sentences.iter().enumerate() {
        let t = trees.as_mut().and_then(Iterator::next);
        let d = deps.as_mut().and_then(Iterator::next);
        let (ann, c) = Annotations::resolve(s, t, d)
            .map_err(|e| Error::Alignment(format!("{} sentence {}: {e}", conll.display(), k + 1)))?;
        pos_conflicts += c;
        annotations.push(ann);
    }
    Ok(Dataset {
        corpus,
        annotations,
        repairs,
        pos_conflicts,
    })
}
