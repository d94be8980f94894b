//! Readers for bracketed constituency trees and dependency arc tables.

use std::io::BufRead;

use crate::error::{Error, Result};

const ESCAPES: [(&str, &str); 6] = [
    ("-LRB-", "("),
    ("-RRB-", ")"),
    ("-LSB-", "["),
    ("-RSB-", "]"),
    ("-LCB-", "{"),
    ("-RCB-", "}"),
];

fn unescape(s: &str) -> String {
    ESCAPES
        .iter()
        .find(|(e, _)| *e == s)
        .map(|(_, r)| r.to_string())
        .unwrap_or_else(|| s.to_string())
}

fn escape(s: &str) -> String {
    match s {
        "(" => "-LRB-".into(),
        ")" => "-RRB-".into(),
        _ => s.to_string(),
    }
}

/// Strips grammatical-function suffixes: `NP-SBJ` → `NP`, `NP=2` → `NP`.
/// Labels that start with `-` (`-NONE-`) are returned unchanged.
pub fn base_label(label: &str) -> &str {
    if label.starts_with('-') {
        return label;
    }
    match label.find(['-', '=']) {
        Some(pos) if pos > 0 => &label[..pos],
        _ => label,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leaf {
    pub index: usize,
    pub surface: String,
    pub pos: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub label: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Set for preterminal+word nodes.
    pub leaf: Option<Leaf>,
}

/// Arena-backed ordered tree. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstituencyTree {
    nodes: Vec<Node>,
    leaf_nodes: Vec<usize>,
}

#[derive(Debug, PartialEq)]
enum Tok<'a> {
    Open(usize),
    Close(usize),
    Atom(usize, &'a str),
}

fn lex(line: &str) -> Vec<Tok<'_>> {
    let mut toks = Vec::new();
    let mut start = None;
    for (off, ch) in line.char_indices() {
        if ch == '(' || ch == ')' || ch.is_whitespace() {
            if let Some(s) = start.take() {
                toks.push(Tok::Atom(s, &line[s..off]));
            }
            match ch {
                '(' => toks.push(Tok::Open(off)),
                ')' => toks.push(Tok::Close(off)),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(off);
        }
    }
    if let Some(s) = start {
        toks.push(Tok::Atom(s, &line[s..]));
    }
    toks
}

/// Parses one s-expression such as `(S (NP (NNP Salt)) (VBZ is))`.
pub fn parse_bracketed(line: &str) -> Result<ConstituencyTree> {
    let toks = lex(line);
    let mut tree = ConstituencyTree {
        nodes: Vec::new(),
        leaf_nodes: Vec::new(),
    };
    let mut pos = 0;
    let root = parse_node(&toks, &mut pos, &mut tree, None, line.len())?;
    debug_assert_eq!(root, 0);
    if let Some(t) = toks.get(pos) {
        let off = match t {
            Tok::Open(o) | Tok::Close(o) | Tok::Atom(o, _) => *o,
        };
        return Err(Error::Unbalanced {
            offset: off,
            msg: "trailing input after the root node".into(),
        });
    }
    if tree.leaf_nodes.is_empty() {
        return Err(Error::Structure("tree has no leaves".into()));
    }
    Ok(tree)
}

fn parse_node(
    toks: &[Tok<'_>],
    pos: &mut usize,
    tree: &mut ConstituencyTree,
    parent: Option<usize>,
    end: usize,
) -> Result<usize> {
    let open_at = match toks.get(*pos) {
        Some(Tok::Open(o)) => *o,
        Some(Tok::Close(o)) => {
            return Err(Error::Unbalanced {
                offset: *o,
                msg: "unexpected `)`".into(),
            })
        }
        Some(Tok::Atom(o, a)) => {
            return Err(Error::Unbalanced {
                offset: *o,
                msg: format!("expected `(` before `{a}`"),
            })
        }
        None => {
            return Err(Error::Unbalanced {
                offset: end,
                msg: "expected `(`".into(),
            })
        }
    };
    *pos += 1;
    let label = match toks.get(*pos) {
        Some(Tok::Atom(_, a)) => {
            *pos += 1;
            a.to_string()
        }
        // PTB files often wrap trees in an unlabeled outer bracket.
        _ => "ROOT".to_string(),
    };
    let id = tree.nodes.len();
    tree.nodes.push(Node {
        label,
        parent,
        children: Vec::new(),
        leaf: None,
    });

    // Preterminal: (TAG word)
    if let (Some(Tok::Atom(_, word)), Some(Tok::Close(_))) = (toks.get(*pos), toks.get(*pos + 1)) {
        let index = tree.leaf_nodes.len();
        let pos_label = tree.nodes[id].label.clone();
        tree.nodes[id].leaf = Some(Leaf {
            index,
            surface: unescape(word),
            pos: pos_label,
        });
        tree.leaf_nodes.push(id);
        *pos += 2;
        return Ok(id);
    }

    loop {
        match toks.get(*pos) {
            Some(Tok::Close(_)) => {
                *pos += 1;
                break;
            }
            Some(Tok::Open(_)) => {
                let child = parse_node(toks, pos, tree, Some(id), end)?;
                tree.nodes[id].children.push(child);
            }
            Some(Tok::Atom(o, a)) => {
                return Err(Error::Unbalanced {
                    offset: *o,
                    msg: format!("bare token `{a}` inside a phrasal node"),
                })
            }
            None => {
                return Err(Error::Unbalanced {
                    offset: end,
                    msg: format!("node opened at offset {open_at} is never closed"),
                })
            }
        }
    }
    if tree.nodes[id].children.is_empty() {
        return Err(Error::Structure(format!(
            "node `{}` at offset {open_at} has no children",
            tree.nodes[id].label
        )));
    }
    Ok(id)
}

impl ConstituencyTree {
    pub fn root(&self) -> usize {
        0
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_nodes.len()
    }

    /// Leaves in order as (index, surface, preterminal POS).
    pub fn leaves(&self) -> Vec<(usize, &str, &str)> {
        self.leaf_nodes
            .iter()
            .map(|&id| {
                let l = self.nodes[id].leaf.as_ref().expect("leaf node");
                (l.index, l.surface.as_str(), l.pos.as_str())
            })
            .collect()
    }

    pub fn leaf_node(&self, index: usize) -> usize {
        self.leaf_nodes[index]
    }

    /// Leaf indices dominated by `node`, in order.
    pub fn leaf_span(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            let nd = &self.nodes[n];
            if let Some(l) = &nd.leaf {
                out.push(l.index);
            }
            stack.extend(nd.children.iter().rev());
        }
        out
    }

    /// Phrasal ancestors of leaf `index`, nearest first (excludes the preterminal).
    pub fn ancestors(&self, index: usize) -> impl Iterator<Item = usize> + '_ {
        let start = self.nodes[self.leaf_nodes[index]].parent;
        std::iter::successors(start, move |&n| self.nodes[n].parent)
    }

    /// Checks that leaf surfaces equal the given token surfaces.
    pub fn check_alignment<'a>(&self, surfaces: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let surfaces: Vec<&str> = surfaces.into_iter().collect();
        if surfaces.len() != self.num_leaves() {
            return Err(Error::Alignment(format!(
                "tree has {} leaves but sentence has {} tokens",
                self.num_leaves(),
                surfaces.len()
            )));
        }
        for (i, ((_, leaf, _), tok)) in self.leaves().into_iter().zip(&surfaces).enumerate() {
            if leaf != *tok && leaf != unescape(tok) {
                return Err(Error::Alignment(format!(
                    "leaf {i} is `{leaf}` but token is `{tok}`"
                )));
            }
        }
        Ok(())
    }

    /// Canonical single-line serialization.
    pub fn to_bracketed(&self) -> String {
        let mut out = String::new();
        self.write_node(0, &mut out);
        out
    }

    fn write_node(&self, id: usize, out: &mut String) {
        let n = &self.nodes[id];
        out.push('(');
        out.push_str(&n.label);
        if let Some(l) = &n.leaf {
            out.push(' ');
            out.push_str(&escape(&l.surface));
        }
        for &c in &n.children {
            out.push(' ');
            self.write_node(c, out);
        }
        out.push(')');
    }

    /// Replaces the label of a node; used by noise injection.
    pub fn set_label(&mut self, id: usize, label: String) {
        if let Some(l) = &mut self.nodes[id].leaf {
            l.pos = label.clone();
        }
        self.nodes[id].label = label;
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// One `.trees` line per sentence; blank lines are skipped.
pub fn read_trees<R: BufRead>(reader: R) -> Result<Vec<ConstituencyTree>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tree = parse_bracketed(line.trim()).map_err(|e| Error::Format {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(tree);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    /// 1-based head per token; 0 is the artificial root.
    pub head: Vec<usize>,
    pub rel: Vec<String>,
    pub surfaces: Vec<String>,
}

impl DependencyGraph {
    pub fn len(&self) -> usize {
        self.head.len()
    }

    pub fn is_empty(&self) -> bool {
        self.head.is_empty()
    }

    /// 0-based governor of token `i`, or `None` for the root.
    pub fn governor(&self, i: usize) -> Option<usize> {
        match self.head[i] {
            0 => None,
            h => Some(h - 1),
        }
    }

    /// 0-based dependents of token `i` in index order.
    pub fn dependents(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.head
            .iter()
            .enumerate()
            .filter(move |&(_, &h)| h == i + 1)
            .map(|(j, _)| j)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.head.len();
        if n == 0 {
            return Err(Error::Structure("empty dependency block".into()));
        }
        let mut roots = 0;
        for (i, &h) in self.head.iter().enumerate() {
            if h > n {
                return Err(Error::Structure(format!(
                    "token {} has out-of-range head {h} (n = {n})",
                    i + 1
                )));
            }
            if h == i + 1 {
                return Err(Error::Structure(format!("token {} heads itself", i + 1)));
            }
            if h == 0 {
                roots += 1;
            }
        }
        if roots != 1 {
            return Err(Error::Structure(format!(
                "expected exactly one root, found {roots}"
            )));
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(g) = self.governor(cur) {
                cur = g;
                steps += 1;
                if steps > n {
                    return Err(Error::Structure(format!(
                        "cycle reachable from token {}",
                        start + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn check_alignment<'a>(&self, surfaces: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let surfaces: Vec<&str> = surfaces.into_iter().collect();
        if surfaces.len() != self.len() {
            return Err(Error::Alignment(format!(
                "dependency block has {} rows but sentence has {} tokens",
                self.len(),
                surfaces.len()
            )));
        }
        for (i, (a, b)) in self.surfaces.iter().zip(&surfaces).enumerate() {
            if a != b {
                return Err(Error::Alignment(format!(
                    "dependency row {} is `{a}` but token is `{b}`",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn write_block<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for i in 0..self.len() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                i + 1,
                self.surfaces[i],
                self.head[i],
                self.rel[i]
            )?;
        }
        Ok(())
    }
}

/// Parses rows of `index surface head rel`. `expected_len`, when given,
/// must match the row count.
pub fn read_dependency_block<S: AsRef<str>>(
    lines: &[S],
    expected_len: Option<usize>,
) -> Result<DependencyGraph> {
    let mut g = DependencyGraph {
        head: Vec::with_capacity(lines.len()),
        rel: Vec::with_capacity(lines.len()),
        surfaces: Vec::with_capacity(lines.len()),
    };
    for (k, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.as_ref().split_whitespace().collect();
        if fields.len() < 4 {
            return Err(Error::Format {
                line: k + 1,
                msg: format!("expected 4 columns, found {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| Error::Format {
                line: k + 1,
                msg: format!("{what} `{s}` is not a non-negative integer"),
            })
        };
        let idx = parse(fields[0], "index")?;
        if idx != k + 1 {
            return Err(Error::Format {
                line: k + 1,
                msg: format!("expected index {}, found {idx}", k + 1),
            });
        }
        g.surfaces.push(fields[1].to_string());
        g.head.push(parse(fields[2], "head")?);
        g.rel.push(fields[3].to_string());
    }
    if let Some(n) = expected_len {
        if n != g.len() {
            return Err(Error::Alignment(format!(
                "dependency block has {} rows, sentence has {n} tokens",
                g.len()
            )));
        }
    }
    g.validate()?;
    Ok(g)
}

/// Blank-line separated `.deps` blocks.
pub fn read_deps<R: BufRead>(reader: R) -> Result<Vec<DependencyGraph>> {
    let mut out = Vec::new();
    let mut block: Vec<String> = Vec::new();
    let mut block_start = 1;
    let finish = |block: &mut Vec<String>, start: usize, out: &mut Vec<DependencyGraph>| {
        if block.is_empty() {
            return Ok(());
        }
        let g = read_dependency_block(block, None).map_err(|e| match e {
            Error::Format { line, msg } => Error::Format {
                line: start + line - 1,
                msg,
            },
            other => other,
        })?;
        out.push(g);
        block.clear();
        Ok::<(), Error>(())
    };
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            finish(&mut block, block_start, &mut out)?;
            continue;
        }
        if block.is_empty() {
            block_start = lineno + 1;
        }
        block.push(line);
    }
    finish(&mut block, block_start, &mut out)?;
    Ok(out)
}
