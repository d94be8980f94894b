//! Synthetic corpora whose entity types are recoverable from syntax only.
//!
//! Name words are shared by every entity type, so surfaces mark where an
//! entity is but not what it is. The type is planted in three places:
//!
//! | type | POS of its tokens | phrase label | relation of its head |
//! |------|-------------------|--------------|----------------------|
//! | PER  | NNP               | NP           | nsubj                |
//! | LOC  | NNPS              | ADJP         | obl                  |
//! | ORG  | FW                | ADVP         | obj                  |
//! | MISC | CD                | INTJ         | nmod                 |
//!
//! Noise replaces each POS tag, phrase label and relation independently
//! with probability `noise` by a label drawn uniformly from the full
//! inventory of its kind (possibly the same label).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synextract::ACCEPTED_CONSTITUENTS;
use crate::synparse::DependencyGraph;

pub const ENTITY_TYPES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];
const ENTITY_POS: [&str; 4] = ["NNP", "NNPS", "FW", "CD"];
const ENTITY_PHRASE: [&str; 4] = ["NP", "ADJP", "ADVP", "INTJ"];
const ENTITY_REL: [&str; 4] = ["nsubj", "obl", "obj", "nmod"];

const FILLER_POS: [&str; 8] = ["DT", "IN", "JJ", "RB", "NN", "PRP", "CC", "MD"];
const FILLER_REL: [&str; 8] = ["det", "case", "amod", "advmod", "dep", "expl", "cc", "aux"];
const FILLER_PHRASE: [&str; 5] = ["PP", "SBAR", "PRT", "CONJP", "LST"];
const VERB_POS: [&str; 2] = ["VBZ", "VBD"];

fn pos_inventory() -> Vec<&'static str> {
    FILLER_POS.iter().chain(&VERB_POS).chain(&ENTITY_POS).copied().collect()
}

fn rel_inventory() -> Vec<&'static str> {
    FILLER_REL
        .iter()
        .chain(&ENTITY_REL)
        .chain(&["compound", "root"])
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Distinct name words shared by all entity types.
    pub names: usize,
    pub fillers: usize,
    pub verbs: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train: 500,
            dev: 100,
            test: 100,
            names: 40,
            fillers: 60,
            verbs: 10,
            noise: 0.1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1], got {}", self.noise)));
        }
        if self.names == 0 || self.fillers == 0 || self.verbs == 0 {
            return Err(Error::Config("word inventories must be non-empty".into()));
        }
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return Err(Error::Config("every split needs at least one sentence".into()));
        }
        Ok(())
    }
}

/// One generated sentence with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSentence {
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    /// BIO labels.
    pub labels: Vec<String>,
    pub tree: String,
    pub deps: DependencyGraph,
}

/// Pronounceable word from an index; `capital` marks name words.
fn word(mut k: usize, capital: bool) -> String {
    const ONSET: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const VOWEL: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut s = String::new();
    loop {
        s.push_str(ONSET[k % ONSET.len()]);
        k /= ONSET.len();
        s.push_str(VOWEL[k % VOWEL.len()]);
        k /= VOWEL.len();
        if k == 0 {
            break;
        }
        k -= 1;
    }
    if capital {
        let mut c = s.chars();
        let first = c.next().expect("non-empty").to_ascii_uppercase();
        s = std::iter::once(first).chain(c).collect();
        s.push_str("son");
    } else {
        s.push_str("ke");
    }
    s
}

struct Lexicon {
    names: Vec<String>,
    fillers: Vec<(String, usize)>,
    verbs: Vec<(String, &'static str)>,
}

impl Lexicon {
    fn new(spec: &SynthSpec) -> Self {
        Lexicon {
            names: (0..spec.names).map(|k| word(k, true)).collect(),
            fillers: (0..spec.fillers)
                .map(|k| (word(k, false), k % FILLER_POS.len()))
                .collect(),
            verbs: (0..spec.verbs)
                .map(|k| (format!("{}s", word(k + spec.fillers, false)), VERB_POS[k % 2]))
                .collect(),
        }
    }
}

enum Chunk {
    Filler(Vec<usize>),
    Verb(usize),
    Entity(usize, Vec<usize>),
}

fn noisy<'a, R: Rng>(rng: &mut R, rate: f64, label: &'a str, inventory: &[&'a str]) -> &'a str {
    if rng.gen::<f64>() < rate {
        inventory.choose(rng).expect("non-empty inventory")
    } else {
        label
    }
}

fn sentence<R: Rng>(rng: &mut R, lex: &Lexicon, noise: f64) -> SynthSentence {
    let filler_chunk = |rng: &mut R| -> Chunk {
        let len = rng.gen_range(1..=3);
        Chunk::Filler((0..len).map(|_| rng.gen_range(0..lex.fillers.len())).collect())
    };
    let entities = rng.gen_range(1..=3);
    let mut chunks = Vec::new();
    if rng.gen_bool(0.5) {
        chunks.push(filler_chunk(rng));
    }
    for e in 0..entities {
        let ty = rng.gen_range(0..ENTITY_TYPES.len());
        let len = match rng.gen_range(0..10) {
            0..=3 => 1,
            4..=7 => 2,
            _ => 3,
        };
        chunks.push(Chunk::Entity(ty, (0..len).map(|_| rng.gen_range(0..lex.names.len())).collect()));
        if e + 1 < entities || rng.gen_bool(0.5) {
            chunks.push(filler_chunk(rng));
        }
    }
    let at = rng.gen_range(0..=chunks.len());
    chunks.insert(at, Chunk::Verb(rng.gen_range(0..lex.verbs.len())));

    let pos_inv = pos_inventory();
    let rel_inv = rel_inventory();
    let mut tokens = Vec::new();
    let mut pos = Vec::new();
    let mut labels = Vec::new();
    let mut rel: Vec<&str> = Vec::new();
    // heads as chunk-local markers resolved once the verb position is known
    let mut head_of: Vec<Option<usize>> = Vec::new();
    let mut phrases = Vec::new();
    let mut verb_index = 0;
    for chunk in &chunks {
        let start = tokens.len();
        let phrase = match chunk {
            Chunk::Filler(ws) => {
                for &w in ws {
                    let (surface, p) = &lex.fillers[w];
                    tokens.push(surface.clone());
                    pos.push(FILLER_POS[*p]);
                    labels.push("O".to_string());
                    rel.push(FILLER_REL[*p]);
                    head_of.push(None);
                }
                *FILLER_PHRASE.choose(rng).expect("non-empty")
            }
            Chunk::Verb(v) => {
                let (surface, p) = &lex.verbs[*v];
                verb_index = tokens.len();
                tokens.push(surface.clone());
                pos.push(p);
                labels.push("O".to_string());
                rel.push("root");
                head_of.push(None);
                "VP"
            }
            Chunk::Entity(ty, ws) => {
                let last = start + ws.len() - 1;
                for (j, &w) in ws.iter().enumerate() {
                    tokens.push(lex.names[w].clone());
                    pos.push(ENTITY_POS[*ty]);
                    let prefix = if j == 0 { "B" } else { "I" };
                    labels.push(format!("{prefix}-{}", ENTITY_TYPES[*ty]));
                    if start + j == last {
                        rel.push(ENTITY_REL[*ty]);
                        head_of.push(None);
                    } else {
                        rel.push("compound");
                        head_of.push(Some(last));
                    }
                }
                ENTITY_PHRASE[*ty]
            }
        };
        phrases.push((start, tokens.len(), phrase));
    }

    let n = tokens.len();
    let pos: Vec<String> = pos.iter().map(|p| noisy(rng, noise, p, &pos_inv).to_string()).collect();
    let mut tree = String::from("(ROOT (S");
    for &(start, end, phrase) in &phrases {
        let label = noisy(rng, noise, phrase, &ACCEPTED_CONSTITUENTS);
        tree.push_str(&format!(" ({label}"));
        for i in start..end {
            tree.push_str(&format!(" ({} {})", pos[i], tokens[i]));
        }
        tree.push(')');
    }
    tree.push_str("))");
    let head: Vec<usize> = (0..n)
        .map(|i| {
            if i == verb_index {
                0
            } else {
                head_of[i].unwrap_or(verb_index) + 1
            }
        })
        .collect();
    let rel: Vec<String> = rel.iter().map(|r| noisy(rng, noise, r, &rel_inv).to_string()).collect();
    SynthSentence {
        deps: DependencyGraph {
            head,
            rel,
            surfaces: tokens.clone(),
        },
        tokens,
        pos,
        labels,
        tree,
    }
}

/// Train, dev and test sentences drawn from one seeded stream.
pub fn generate(spec: &SynthSpec) -> Result<[Vec<SynthSentence>; 3]> {
    spec.validate()?;
    let lex = Lexicon::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |n: usize| (0..n).map(|_| sentence(&mut rng, &lex, spec.noise)).collect::<Vec<_>>();
    let train = split(spec.train);
    let dev = split(spec.dev);
    let test = split(spec.test);
    Ok([train, dev, test])
}

/// Writes `<name>.conll`, `<name>.trees` and `<name>.deps` into `dir`.
pub fn write_split(dir: &Path, name: &str, sentences: &[SynthSentence]) -> Result<PathBuf> {
    let conll_path = dir.join(format!("{name}.conll"));
    let mut conll = BufWriter::new(File::create(&conll_path)?);
    let mut trees = BufWriter::new(File::create(dir.join(format!("{name}.trees")))?);
    let mut deps = BufWriter::new(File::create(dir.join(format!("{name}.deps")))?);
    for s in sentences {
        for i in 0..s.tokens.len() {
            writeln!(conll, "{} {} {}", s.tokens[i], s.pos[i], s.labels[i])?;
        }
        writeln!(conll)?;
        writeln!(trees, "{}", s.tree)?;
        s.deps.write_block(&mut deps)?;
        writeln!(deps)?;
    }
    conll.flush()?;
    trees.flush()?;
    deps.flush()?;
    Ok(conll_path)
}

/// Paths of the generated `.conll` files; parses sit beside them.
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

pub fn gen_synth(spec: &SynthSpec, dir: &Path) -> Result<SynthPaths> {
    std::fs::create_dir_all(dir)?;
    let [train, dev, test] = generate(spec)?;
    Ok(SynthPaths {
        train: write_split(dir, "train", &train)?,
        dev: write_split(dir, "dev", &dev)?,
        test: write_split(dir, "test", &test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{decode_spans, to_bioes};
    use crate::synparse::parse_bracketed;

    fn spec(noise: f64) -> SynthSpec {
        SynthSpec {
            train: 60,
            dev: 5,
            test: 5,
            noise,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn words_are_distinct() {
        let names: std::collections::HashSet<String> = (0..500).map(|k| word(k, true)).collect();
        assert_eq!(names.len(), 500);
        let lex = Lexicon::new(&SynthSpec::default());
        let mut all: Vec<&str> = lex.names.iter().map(String::as_str).collect();
        all.extend(lex.fillers.iter().map(|(w, _)| w.as_str()));
        all.extend(lex.verbs.iter().map(|(w, _)| w.as_str()));
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn clean_corpus_plants_every_cue() {
        let [train, _, _] = generate(&spec(0.0)).unwrap();
        for s in &train {
            s.deps.validate().unwrap();
            let tree = parse_bracketed(&s.tree).unwrap();
            tree.check_alignment(s.tokens.iter().map(String::as_str)).unwrap();
            let spans = decode_spans(&to_bioes(&s.labels).unwrap().0).unwrap();
            assert!(!spans.is_empty());
            for w in spans.windows(2) {
                assert!(w[1].start > w[0].end + 1, "entities must not touch");
            }
            for sp in spans {
                let t = ENTITY_TYPES.iter().position(|&x| x == sp.etype).unwrap();
                for i in sp.start..=sp.end {
                    assert_eq!(s.pos[i], ENTITY_POS[t]);
                }
                assert_eq!(s.deps.rel[sp.end], ENTITY_REL[t]);
                let leaf = tree.leaf_node(sp.start);
                let phrase = tree.node(tree.node(leaf).parent.unwrap()).label.clone();
                assert_eq!(phrase, ENTITY_PHRASE[t]);
            }
        }
    }

    #[test]
    fn noise_rate_is_respected() {
        let [train, _, _] = generate(&SynthSpec {
            train: 400,
            ..spec(0.3)
        })
        .unwrap();
        let (mut changed, mut total) = (0usize, 0usize);
        for s in &train {
            for sp in decode_spans(&to_bioes(&s.labels).unwrap().0).unwrap() {
                let t = ENTITY_TYPES.iter().position(|&x| x == sp.etype).unwrap();
                for i in sp.start..=sp.end {
                    total += 1;
                    changed += usize::from(s.pos[i] != ENTITY_POS[t]);
                }
            }
        }
        // P(changed) = 0.3 · (1 − 1/|inventory|)
        let expect = 0.3 * (1.0 - 1.0 / pos_inventory().len() as f64);
        let rate = changed as f64 / total as f64;
        assert!((rate - expect).abs() < 0.04, "{rate} vs {expect}");
    }

    #[test]
    fn deterministic_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_synth(&spec(0.1), a.path()).unwrap();
        gen_synth(&spec(0.1), b.path()).unwrap();
        for f in ["train.conll", "dev.trees", "test.deps"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        assert!(generate(&SynthSpec { noise: 1.5, ..spec(0.0) }).is_err());
    }
}
