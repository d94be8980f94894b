//! Linear-chain CRF over emission scores with synthetic START/STOP states.
//!
//! The loss is the globally normalized negative log-likelihood
//! `logZ − score(gold)`, with `logZ` from the forward algorithm. Decoding
//! is Viterbi. `brute_*` enumerate every path and exist as test oracles.
//!
//! Transition matrix layout: `(T + 2) × (T + 2)`, row = from, column = to,
//! index `T` is START and `T + 1` is STOP. Entries into START and out of
//! STOP never contribute to any score.

use crate::autodiff::{logsumexp, Graph, Tensor, Var};
use crate::corpus::{LabelSet, Prefix, Tag};
use crate::error::{Error, Result};

/// Penalty used by the optional scheme mask.
pub const MASK_PENALTY: f64 = -1e4;

/// Largest path count the brute-force oracles will enumerate.
pub const BRUTE_LIMIT: f64 = 1e6;

/// Borrowed CRF scoring parameters.
#[derive(Debug, Clone)]
pub struct Crf {
    num_labels: usize,
    /// Effective transitions (parameters plus mask).
    transitions: Vec<f64>,
    bias: Vec<f64>,
}

impl Crf {
    pub fn new(num_labels: usize, transitions: &[f64], bias: &[f64], mask: Option<&[f64]>) -> Result<Crf> {
        let w = num_labels + 2;
        if transitions.len() != w * w || bias.len() != num_labels {
            return Err(Error::Shape {
                op: "crf",
                left: vec![w, w],
                right: vec![transitions.len(), bias.len()],
            });
        }
        let mut t = transitions.to_vec();
        if let Some(m) = mask {
            t.iter_mut().zip(m).for_each(|(a, b)| *a += b);
        }
        Ok(Crf {
            num_labels,
            transitions: t,
            bias: bias.to_vec(),
        })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn start(&self) -> usize {
        self.num_labels
    }

    fn stop(&self) -> usize {
        self.num_labels + 1
    }

    #[inline]
    fn trans(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * (self.num_labels + 2) + to]
    }

    #[inline]
    fn emit(&self, u: &[f64], i: usize, y: usize) -> f64 {
        u[i * self.num_labels + y] + self.bias[y]
    }

    fn check(&self, u: &[f64]) -> Result<usize> {
        if u.is_empty() || !u.len().is_multiple_of(self.num_labels) {
            return Err(Error::Shape {
                op: "crf emissions",
                left: vec![u.len()],
                right: vec![self.num_labels],
            });
        }
        Ok(u.len() / self.num_labels)
    }

    /// Score of one path, accumulated in the same order Viterbi uses.
    pub fn path_score(&self, u: &[f64], path: &[usize]) -> Result<f64> {
        let n = self.check(u)?;
        if path.len() != n {
            return Err(Error::Shape {
                op: "crf path",
                left: vec![n],
                right: vec![path.len()],
            });
        }
        if let Some(&bad) = path.iter().find(|&&y| y >= self.num_labels) {
            return Err(Error::UnknownLabel(format!("label id {bad}")));
        }
        let mut s = self.trans(self.start(), path[0]) + self.emit(u, 0, path[0]);
        for i in 1..n {
            s = s + self.trans(path[i - 1], path[i]) + self.emit(u, i, path[i]);
        }
        Ok(s + self.trans(path[n - 1], self.stop()))
    }

    /// Forward log-potentials `alpha[i][y]`.
    fn forward(&self, u: &[f64], n: usize) -> Vec<f64> {
        let t = self.num_labels;
        let mut alpha = vec![0.0; n * t];
        for y in 0..t {
            alpha[y] = self.trans(self.start(), y) + self.emit(u, 0, y);
        }
        let mut buf = vec![0.0; t];
        for i in 1..n {
            for y in 0..t {
                for (yp, b) in buf.iter_mut().enumerate() {
                    *b = alpha[(i - 1) * t + yp] + self.trans(yp, y);
                }
                alpha[i * t + y] = logsumexp(&buf) + self.emit(u, i, y);
            }
        }
        alpha
    }

    /// Backward log-potentials `beta[i][y]`, including the STOP transition.
    fn backward(&self, u: &[f64], n: usize) -> Vec<f64> {
        let t = self.num_labels;
        let mut beta = vec![0.0; n * t];
        for y in 0..t {
            beta[(n - 1) * t + y] = self.trans(y, self.stop());
        }
        let mut buf = vec![0.0; t];
        for i in (0..n - 1).rev() {
            for y in 0..t {
                for (yn, b) in buf.iter_mut().enumerate() {
                    *b = self.trans(y, yn) + self.emit(u, i + 1, yn) + beta[(i + 1) * t + yn];
                }
                beta[i * t + y] = logsumexp(&buf);
            }
        }
        beta
    }

    fn log_partition_from(&self, alpha: &[f64], n: usize) -> f64 {
        let t = self.num_labels;
        let last: Vec<f64> = (0..t)
            .map(|y| alpha[(n - 1) * t + y] + self.trans(y, self.stop()))
            .collect();
        logsumexp(&last)
    }

    pub fn log_partition(&self, u: &[f64]) -> Result<f64> {
        let n = self.check(u)?;
        Ok(self.log_partition_from(&self.forward(u, n), n))
    }

    pub fn nll(&self, u: &[f64], gold: &[usize]) -> Result<f64> {
        let score = self.path_score(u, gold)?;
        Ok(self.log_partition(u)? - score)
    }

    /// Gradients of `nll` with respect to emissions, transitions (raw
    /// layout) and bias: expected counts minus gold counts.
    pub fn nll_gradients(&self, u: &[f64], gold: &[usize]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let n = self.check(u)?;
        self.path_score(u, gold)?;
        let t = self.num_labels;
        let w = t + 2;
        let alpha = self.forward(u, n);
        let beta = self.backward(u, n);
        let log_z = self.log_partition_from(&alpha, n);

        let mut du = vec![0.0; n * t];
        for i in 0..n {
            for y in 0..t {
                du[i * t + y] = (alpha[i * t + y] + beta[i * t + y] - log_z).exp();
            }
            du[i * t + gold[i]] -= 1.0;
        }
        let mut db = vec![0.0; t];
        for row in du.chunks(t) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }

        let mut dt = vec![0.0; w * w];
        for y in 0..t {
            dt[self.start() * w + y] = (alpha[y] + beta[y] - log_z).exp();
            dt[y * w + self.stop()] =
                (alpha[(n - 1) * t + y] + self.trans(y, self.stop()) - log_z).exp();
        }
        for i in 1..n {
            for yp in 0..t {
                let a = alpha[(i - 1) * t + yp];
                for y in 0..t {
                    let lp = a + self.trans(yp, y) + self.emit(u, i, y) + beta[i * t + y] - log_z;
                    dt[yp * w + y] += lp.exp();
                }
            }
        }
        dt[self.start() * w + gold[0]] -= 1.0;
        dt[gold[n - 1] * w + self.stop()] -= 1.0;
        for i in 1..n {
            dt[gold[i - 1] * w + gold[i]] -= 1.0;
        }
        Ok((du, dt, db))
    }

    /// Highest-scoring path. Ties go to the lowest label id, both for the
    /// final label and at every backpointer.
    pub fn viterbi(&self, u: &[f64]) -> Result<(Vec<usize>, f64)> {
        let n = self.check(u)?;
        let t = self.num_labels;
        let mut delta: Vec<f64> = (0..t)
            .map(|y| self.trans(self.start(), y) + self.emit(u, 0, y))
            .collect();
        let mut back = vec![0usize; n * t];
        for i in 1..n {
            let mut next = vec![0.0; t];
            for y in 0..t {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for (yp, &d) in delta.iter().enumerate() {
                    let s = d + self.trans(yp, y);
                    if s > best_score {
                        best_score = s;
                        best = yp;
                    }
                }
                back[i * t + y] = best;
                next[y] = best_score + self.emit(u, i, y);
            }
            delta = next;
        }
        let mut last = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (y, &d) in delta.iter().enumerate() {
            let s = d + self.trans(y, self.stop());
            if s > best_score {
                best_score = s;
                last = y;
            }
        }
        let mut path = vec![last; n];
        for i in (1..n).rev() {
            path[i - 1] = back[i * t + path[i]];
        }
        Ok((path, best_score))
    }

    fn brute_paths(&self, u: &[f64]) -> Result<(usize, usize)> {
        let n = self.check(u)?;
        let count = (self.num_labels as f64).powi(n as i32);
        if count > BRUTE_LIMIT {
            return Err(Error::TooLarge(count));
        }
        Ok((n, count as usize))
    }

    /// Visits every path; position `n − 1` is the most significant digit,
    /// so paths arrive in reverse-lexicographic order.
    fn for_each_path(&self, n: usize, count: usize, mut f: impl FnMut(&[usize])) {
        let t = self.num_labels;
        let mut path = vec![0usize; n];
        for mut code in 0..count {
            for p in path.iter_mut() {
                *p = code % t;
                code /= t;
            }
            f(&path);
        }
    }

    /// `log Σ exp(score)` over all `T^n` paths.
    pub fn brute_log_partition(&self, u: &[f64]) -> Result<f64> {
        let (n, count) = self.brute_paths(u)?;
        let mut scores = Vec::with_capacity(count);
        self.for_each_path(n, count, |p| scores.push(self.path_score(u, p).expect("valid path")));
        Ok(logsumexp(&scores))
    }

    /// Exhaustive argmax with the same tie rule as [`Crf::viterbi`].
    pub fn brute_best(&self, u: &[f64]) -> Result<(Vec<usize>, f64)> {
        let (n, count) = self.brute_paths(u)?;
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        self.for_each_path(n, count, |p| {
            let s = self.path_score(u, p).expect("valid path");
            if s > best.1 {
                best = (p.to_vec(), s);
            }
        });
        Ok(best)
    }

    /// `Σ_paths exp(score − logZ)`; equals 1 for a consistent `logZ`.
    pub fn brute_total_probability(&self, u: &[f64]) -> Result<f64> {
        let (n, count) = self.brute_paths(u)?;
        let log_z = self.log_partition(u)?;
        let mut total = 0.0;
        self.for_each_path(n, count, |p| {
            total += (self.path_score(u, p).expect("valid path") - log_z).exp()
        });
        Ok(total)
    }
}

/// Adds the CRF negative log-likelihood as a node on `g`.
///
/// `emissions` is `[n, T]`, `transitions` `[T+2, T+2]`, `bias` `[T]`.
pub fn nll_node(
    g: &mut Graph,
    emissions: Var,
    transitions: Var,
    bias: Var,
    gold: &[usize],
    mask: Option<&[f64]>,
) -> Result<Var> {
    let t = g.value(bias).len();
    let mask = mask.map(<[f64]>::to_vec);
    let crf = Crf::new(t, g.value(transitions).data(), g.value(bias).data(), mask.as_deref())?;
    let u = g.value(emissions);
    if u.cols() != t || u.rows() != gold.len() {
        return Err(Error::Shape {
            op: "crf nll",
            left: u.shape().to_vec(),
            right: vec![gold.len(), t],
        });
    }
    let loss = crf.nll(u.data(), gold)?;
    let gold = gold.to_vec();
    let backward = Box::new(move |up: &[f64], inputs: &[&Tensor]| {
        let crf = Crf::new(t, inputs[1].data(), inputs[2].data(), mask.as_deref())
            .expect("shapes checked in forward");
        let (du, dt, db) = crf
            .nll_gradients(inputs[0].data(), &gold)
            .expect("gold checked in forward");
        let s = up[0];
        vec![
            du.into_iter().map(|x| x * s).collect(),
            dt.into_iter().map(|x| x * s).collect(),
            db.into_iter().map(|x| x * s).collect(),
        ]
    });
    Ok(g.custom(&[emissions, transitions, bias], Tensor::scalar(loss), backward))
}

/// `MASK_PENALTY` on transitions a BIOES sequence can never take, zero
/// elsewhere. Layout matches the transition matrix.
pub fn bioes_transition_mask(labels: &LabelSet) -> Result<Vec<f64>> {
    let t = labels.len();
    let w = t + 2;
    let tags = labels
        .labels()
        .iter()
        .map(|l| Tag::parse(l))
        .collect::<Result<Vec<_>>>()?;
    let opens = |tag: &Tag| matches!(tag, Tag::Entity(Prefix::B | Prefix::I, _));
    let can_start = |tag: &Tag| matches!(tag, Tag::Outside | Tag::Entity(Prefix::B | Prefix::S, _));
    let mut mask = vec![0.0; w * w];
    for (a, ta) in tags.iter().enumerate() {
        for (b, tb) in tags.iter().enumerate() {
            let ok = if opens(ta) {
                matches!(tb, Tag::Entity(Prefix::I | Prefix::E, t) if Some(t.as_str()) == ta.etype())
            } else {
                can_start(tb)
            };
            if !ok {
                mask[a * w + b] = MASK_PENALTY;
            }
        }
        if !can_start(ta) {
            mask[t * w + a] = MASK_PENALTY;
        }
        if opens(ta) {
            mask[a * w + t + 1] = MASK_PENALTY;
        }
    }
    Ok(mask)
}
