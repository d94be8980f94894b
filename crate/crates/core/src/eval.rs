//! Entity-level scoring: exact span and type matches, micro-averaged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;

use crate::corpus::{decode_spans, to_bioes, EntitySpan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub gold: usize,
    pub pred: usize,
    pub correct: usize,
}

/// Precision, recall and F1 in percent, rounded to two decimals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl Counts {
    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let p = ratio(self.correct, self.pred);
        let r = ratio(self.correct, self.gold);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Prf {
            precision: round2(p),
            recall: round2(r),
            f1: round2(f),
        }
    }

    fn add(&mut self, o: Counts) {
        self.gold += o.gold;
        self.pred += o.pred;
        self.correct += o.correct;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub per_type: BTreeMap<String, Counts>,
    pub micro: Counts,
    pub tokens: usize,
    pub tokens_correct: usize,
}

impl EvalReport {
    pub fn prf(&self) -> Prf {
        self.micro.prf()
    }

    pub fn f1(&self) -> f64 {
        self.prf().f1
    }

    /// Percent of tokens whose label matches exactly, two decimals.
    pub fn token_accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            round2(100.0 * self.tokens_correct as f64 / self.tokens as f64)
        }
    }

    /// Adds one sentence. Both sequences may be BIO or BIOES.
    pub fn add_sentence(&mut self, gold: &[String], pred: &[String]) -> Result<()> {
        if gold.len() != pred.len() {
            return Err(Error::Alignment(format!(
                "gold has {} labels, prediction {}",
                gold.len(),
                pred.len()
            )));
        }
        let spans = |labels: &[String]| -> Result<Vec<EntitySpan>> { decode_spans(&to_bioes(labels)?.0) };
        let g: BTreeSet<EntitySpan> = spans(gold)?.into_iter().collect();
        let p: BTreeSet<EntitySpan> = spans(pred)?.into_iter().collect();
        let mut by_type: BTreeMap<&str, Counts> = BTreeMap::new();
        for s in &g {
            by_type.entry(&s.etype).or_default().gold += 1;
        }
        for s in &p {
            let c = by_type.entry(&s.etype).or_default();
            c.pred += 1;
            if g.contains(s) {
                c.correct += 1;
            }
        }
        for (t, c) in by_type {
            self.per_type.entry(t.to_string()).or_default().add(c);
            self.micro.add(c);
        }
        self.tokens += gold.len();
        self.tokens_correct += gold.iter().zip(pred).filter(|(a, b)| a == b).count();
        Ok(())
    }

    pub fn score(gold: &[Vec<String>], pred: &[Vec<String>]) -> Result<EvalReport> {
        if gold.len() != pred.len() {
            return Err(Error::Alignment(format!(
                "{} gold sentences, {} predicted",
                gold.len(),
                pred.len()
            )));
        }
        let mut r = EvalReport::default();
        for (g, p) in gold.iter().zip(pred) {
            r.add_sentence(g, p)?;
        }
        Ok(r)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.prf();
        writeln!(
            f,
            "processed {} tokens with {} phrases; found: {} phrases; correct: {}.",
            self.tokens, self.micro.gold, self.micro.pred, self.micro.correct
        )?;
        writeln!(
            f,
            "accuracy: {:6.2}%; precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}",
            self.token_accuracy(),
            m.precision,
            m.recall,
            m.f1
        )?;
        for (t, c) in &self.per_type {
            let p = c.prf();
            writeln!(
                f,
                "{t:>17}: precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}  {}",
                p.precision, p.recall, p.f1, c.pred
            )?;
        }
        Ok(())
    }
}

/// Scores a `token ... gold pred` file (last two columns), the layout
/// conlleval reads.
pub fn score_conll<R: BufRead>(reader: R) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            if !gold.is_empty() {
                report.add_sentence(&gold, &pred)?;
                gold.clear();
                pred.clear();
            }
            continue;
        }
        if fields[0] == "-DOCSTART-" {
            continue;
        }
        if fields.len() < 3 {
            return Err(Error::Format {
                line: i + 1,
                msg: "expected token, gold and predicted columns".into(),
            });
        }
        gold.push(fields[fields.len() - 2].to_string());
        pred.push(fields[fields.len() - 1].to_string());
    }
    if !gold.is_empty() {
        report.add_sentence(&gold, &pred)?;
    }
    Ok(report)
}
