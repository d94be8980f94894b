//! Turns each token into parallel (context-feature key, syntactic value)
//! lists for the three syntax types, and builds their vocabularies.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::synparse::{base_label, ConstituencyTree, DependencyGraph};

/// Phrase labels at which the constituent search stops.
pub const ACCEPTED_CONSTITUENTS: [&str; 10] = [
    "NP", "VP", "PP", "ADVP", "SBAR", "ADJP", "PRT", "INTJ", "CONJP", "LST",
];

pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SyntaxType {
    Pos,
    Con,
    Dep,
}

impl SyntaxType {
    /// Canonical order used everywhere types are concatenated or stacked.
    pub const ALL: [SyntaxType; 3] = [SyntaxType::Pos, SyntaxType::Con, SyntaxType::Dep];

    pub fn name(self) -> &'static str {
        match self {
            SyntaxType::Pos => "pos",
            SyntaxType::Con => "con",
            SyntaxType::Dep => "dep",
        }
    }
}

impl fmt::Display for SyntaxType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntaxType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pos" => Ok(SyntaxType::Pos),
            "con" | "constituent" => Ok(SyntaxType::Con),
            "dep" | "dependency" => Ok(SyntaxType::Dep),
            other => Err(Error::Config(format!("unknown syntax type `{other}`"))),
        }
    }
}

/// Parses `pos,con,dep` (any subset, any order) into canonical order.
pub fn parse_syntax_list(s: &str) -> Result<Vec<SyntaxType>> {
    let mut out: Vec<SyntaxType> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let t: SyntaxType = part.parse()?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out.sort();
    Ok(out)
}

pub type KeyValues = (Vec<String>, Vec<String>);

fn combine(surface: &str, tag: &str) -> String {
    format!("{surface}_{tag}")
}

/// Keys are the tokens in a `±window` span around `i` (clipped, `i`
/// included); values pair each key with its own POS tag.
pub fn extract_pos(surfaces: &[&str], pos_tags: &[&str], i: usize, window: usize) -> KeyValues {
    let lo = i.saturating_sub(window);
    let hi = (i + window).min(surfaces.len() - 1);
    (lo..=hi)
        .map(|j| (surfaces[j].to_string(), combine(surfaces[j], pos_tags[j])))
        .unzip()
}

/// Walks up from leaf `i` to the first accepted phrase and returns every
/// leaf under it. Falls back to the root when no ancestor is accepted.
pub fn extract_constituent(tree: &ConstituencyTree, i: usize) -> KeyValues {
    let node = tree
        .ancestors(i)
        .find(|&a| ACCEPTED_CONSTITUENTS.contains(&base_label(&tree.node(a).label)))
        .unwrap_or(tree.root());
    let label = base_label(&tree.node(node).label);
    let leaves = tree.leaves();
    tree.leaf_span(node)
        .into_iter()
        .map(|j| {
            let surface = leaves[j].1;
            (surface.to_string(), combine(surface, label))
        })
        .unzip()
}

/// The token itself, its dependents and its governor, in sentence order;
/// each paired with that token's own in-bound relation.
pub fn extract_dependency(graph: &DependencyGraph, surfaces: &[&str], i: usize) -> KeyValues {
    let mut ctx: Vec<usize> = graph.dependents(i).collect();
    ctx.push(i);
    ctx.extend(graph.governor(i));
    ctx.sort_unstable();
    ctx.dedup();
    ctx.into_iter()
        .map(|j| (surfaces[j].to_string(), combine(surfaces[j], &graph.rel[j])))
        .unzip()
}

/// Syntactic annotations aligned with one sentence.
#[derive(Debug, Clone, Default)]
pub struct Annotations {
    pub pos: Vec<String>,
    pub tree: Option<ConstituencyTree>,
    pub deps: Option<DependencyGraph>,
}

impl Annotations {
    /// Aligns parses with the sentence and settles the POS source: the
    /// corpus POS column wins; preterminals fill in when it is empty.
    /// Returns the annotations and the number of POS conflicts seen.
    pub fn resolve(
        sentence: &Sentence,
        tree: Option<ConstituencyTree>,
        deps: Option<DependencyGraph>,
    ) -> Result<(Annotations, usize)> {
        if let Some(t) = &tree {
            t.check_alignment(sentence.surfaces())?;
        }
        if let Some(d) = &deps {
            d.check_alignment(sentence.surfaces())?;
        }
        let leaves = tree.as_ref().map(|t| t.leaves());
        let mut conflicts = 0;
        let pos = sentence
            .tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let pre = leaves.as_ref().map(|l| l[i].2);
                match (tok.pos.as_str(), pre) {
                    ("" | "_", Some(p)) => p.to_string(),
                    (own, Some(p)) => {
                        if own != p {
                            conflicts += 1;
                        }
                        own.to_string()
                    }
                    (own, None) => own.to_string(),
                }
            })
            .collect();
        Ok((Annotations { pos, tree, deps }, conflicts))
    }
}

/// String-level memories of one sentence for one syntax type, per token.
pub type TypeMemory = Vec<KeyValues>;

/// Runs the extractor for `ty` over every token. Fails when the needed
/// annotation is missing.
pub fn extract_sentence(
    sentence: &Sentence,
    ann: &Annotations,
    ty: SyntaxType,
) -> Result<TypeMemory> {
    let surfaces: Vec<&str> = sentence.surfaces().collect();
    let n = surfaces.len();
    match ty {
        SyntaxType::Pos => {
            let tags: Vec<&str> = ann.pos.iter().map(String::as_str).collect();
            if tags.len() != n || tags.iter().any(|t| t.is_empty() || *t == "_") {
                return Err(Error::Alignment(
                    "POS syntax requested but some tokens have no POS tag".into(),
                ));
            }
            Ok((0..n).map(|i| extract_pos(&surfaces, &tags, i, 1)).collect())
        }
        SyntaxType::Con => {
            let tree = ann.tree.as_ref().ok_or_else(|| {
                Error::Alignment("constituent syntax requested but no tree given".into())
            })?;
            Ok((0..n).map(|i| extract_constituent(tree, i)).collect())
        }
        SyntaxType::Dep => {
            let g = ann.deps.as_ref().ok_or_else(|| {
                Error::Alignment("dependency syntax requested but no parse given".into())
            })?;
            Ok((0..n).map(|i| extract_dependency(g, &surfaces, i)).collect())
        }
    }
}

/// Writes `sent\ttok\ttype\tkeys\tvalues` lines.
pub fn dump_memory<W: Write>(
    mut out: W,
    sent: usize,
    ty: SyntaxType,
    memory: &TypeMemory,
) -> std::io::Result<()> {
    for (tok, (keys, values)) in memory.iter().enumerate() {
        writeln!(
            out,
            "{sent}\t{tok}\t{ty}\t{}\t{}",
            keys.join(","),
            values.join(",")
        )?;
    }
    Ok(())
}

/// String→id map with `<unk>` reserved at id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from_entries(Vec::new())
    }
}

impl Vocab {
    /// Builds from entries in id order, skipping a leading `<unk>` if present.
    pub fn from_entries(entries: Vec<String>) -> Self {
        let mut v = Vocab {
            entries: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for e in entries {
            v.insert(e);
        }
        v
    }

    /// Entries reaching `min_count`, in first-seen order.
    pub fn from_counts<'a>(items: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order = Vec::new();
        for it in items {
            let c = counts.entry(it).or_insert(0);
            if *c == 0 {
                order.push(it);
            }
            *c += 1;
        }
        Vocab::from_entries(
            order
                .into_iter()
                .filter(|e| counts[e] >= min_count.max(1))
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn insert(&mut self, entry: String) -> usize {
        if let Some(&id) = self.index.get(&entry) {
            return id;
        }
        let id = self.entries.len();
        self.index.insert(entry.clone(), id);
        self.entries.push(entry);
        id
    }

    pub fn id(&self, s: &str) -> usize {
        self.index.get(s).copied().unwrap_or(0)
    }

    pub fn get(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn entry(&self, id: usize) -> &str {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxVocab {
    pub ty: SyntaxType,
    pub keys: Vocab,
    pub values: Vocab,
}

/// Builds key and value vocabularies for `ty` from training memories.
pub fn build_syntax_vocab(
    ty: SyntaxType,
    memories: &[TypeMemory],
    min_count: usize,
) -> Result<SyntaxVocab> {
    if memories.is_empty() {
        return Err(Error::Empty(format!(
            "cannot build the {ty} vocabulary from an empty training split"
        )));
    }
    let keys = memories
        .iter()
        .flat_map(|m| m.iter().flat_map(|(k, _)| k.iter().map(String::as_str)));
    let values = memories
        .iter()
        .flat_map(|m| m.iter().flat_map(|(_, v)| v.iter().map(String::as_str)));
    Ok(SyntaxVocab {
        ty,
        keys: Vocab::from_counts(keys, min_count),
        values: Vocab::from_counts(values, min_count),
    })
}

/// Id-level memory of one sentence for one type, flattened: entries of
/// token `i` live at `offsets[i]..offsets[i + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMemory {
    pub key_ids: Vec<usize>,
    pub value_ids: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl IdMemory {
    pub fn encode(memory: &TypeMemory, vocab: &SyntaxVocab) -> IdMemory {
        let mut out = IdMemory {
            key_ids: Vec::new(),
            value_ids: Vec::new(),
            offsets: vec![0],
        };
        for (keys, values) in memory {
            debug_assert_eq!(keys.len(), values.len());
            debug_assert!(!keys.is_empty());
            out.key_ids.extend(keys.iter().map(|k| vocab.keys.id(k)));
            out.value_ids.extend(values.iter().map(|v| vocab.values.id(v)));
            out.offsets.push(out.key_ids.len());
        }
        out
    }

    pub fn num_tokens(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn entries(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synparse::{parse_bracketed, read_dependency_block};

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn pos_window_clipping() {
        let w = ["a", "b", "c"];
        let t = ["DT", "NN", "VB"];
        assert_eq!(extract_pos(&w, &t, 0, 1), (s(&["a", "b"]), s(&["a_DT", "b_NN"])));
        assert_eq!(extract_pos(&w, &t, 2, 1).0, s(&["b", "c"]));
        assert_eq!(extract_pos(&["x"], &["FW"], 0, 1), (s(&["x"]), s(&["x_FW"])));
        assert_eq!(extract_pos(&w, &t, 1, 5).0, s(&["a", "b", "c"]));
    }

    #[test]
    fn constituent_fallback_to_root() {
        let t = parse_bracketed("(FRAG (NNP X))").unwrap();
        assert_eq!(extract_constituent(&t, 0), (s(&["X"]), s(&["X_FRAG"])));
        let t = parse_bracketed("(NN dog)").unwrap();
        assert_eq!(extract_constituent(&t, 0), (s(&["dog"]), s(&["dog_NN"])));
    }

    #[test]
    fn constituent_first_accepted_ancestor() {
        let t = parse_bracketed("(S (NP (NN a) (NN b)) (VP (VB c)))").unwrap();
        assert_eq!(extract_constituent(&t, 2), (s(&["c"]), s(&["c_VP"])));
        assert_eq!(extract_constituent(&t, 0).1, s(&["a_NP", "b_NP"]));
        // function tags stripped before matching and in values
        let t = parse_bracketed("(S (NP-SBJ (NN a)) (X (NN b)))").unwrap();
        assert_eq!(extract_constituent(&t, 0).1, s(&["a_NP"]));
        assert_eq!(extract_constituent(&t, 1).1, s(&["a_S", "b_S"]));
    }

    #[test]
    fn dependency_context() {
        let g = read_dependency_block(
            &["1 Salt 3 compound", "2 Lake 3 compound", "3 City 0 root"],
            None,
        )
        .unwrap();
        let w = ["Salt", "Lake", "City"];
        assert_eq!(
            extract_dependency(&g, &w, 2),
            (s(&["Salt", "Lake", "City"]), s(&["Salt_compound", "Lake_compound", "City_root"]))
        );
        let g1 = read_dependency_block(&["1 x 0 root"], None).unwrap();
        assert_eq!(extract_dependency(&g1, &["x"], 0), (s(&["x"]), s(&["x_root"])));
    }

    #[test]
    fn vocab_min_count_and_unk() {
        let m1: TypeMemory = vec![(s(&["Salt"]), s(&["Salt_NNP"]))];
        let m2: TypeMemory = vec![(s(&["Salt", "is"]), s(&["Salt_NNP", "is_VBZ"]))];
        let v = build_syntax_vocab(SyntaxType::Pos, &[m1.clone(), m2.clone()], 1).unwrap();
        assert_eq!(v.values.id("Salt_NNP"), 1);
        assert_eq!(v.values.id("is_VBZ"), 2);
        assert_eq!(v.values.id("dev_only"), 0);
        let v2 = build_syntax_vocab(SyntaxType::Pos, &[m1, m2], 2).unwrap();
        assert_eq!(v2.values.id("is_VBZ"), 0);
        assert_eq!(v2.values.id("Salt_NNP"), 1);
        assert!(build_syntax_vocab(SyntaxType::Pos, &[], 1).is_err());
    }

    #[test]
    fn id_memory_offsets() {
        let m: TypeMemory = vec![
            (s(&["a", "b"]), s(&["a_X", "b_X"])),
            (s(&["b"]), s(&["b_Y"])),
        ];
        let v = build_syntax_vocab(SyntaxType::Con, std::slice::from_ref(&m), 1).unwrap();
        let ids = IdMemory::encode(&m, &v);
        assert_eq!(ids.offsets, vec![0, 2, 3]);
        assert_eq!(ids.key_ids, vec![1, 2, 2]);
        assert_eq!(ids.value_ids, vec![1, 2, 3]);
    }

    #[test]
    fn syntax_list_parsing() {
        assert_eq!(
            parse_syntax_list("dep,pos").unwrap(),
            vec![SyntaxType::Pos, SyntaxType::Dep]
        );
        assert!(parse_syntax_list("pos,xyz").is_err());
        assert!(parse_syntax_list("").unwrap().is_empty());
    }
}
