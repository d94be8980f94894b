//! Adam, the training loop, and model-level evaluation, prediction and
//! inspection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamRegistry};
use crate::config::TrainConfig;
use crate::corpus::{write_conll, LabelSet};
use crate::data::Dataset;
use crate::encoder::load_static_vectors;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Prf};
use crate::model::{Instance, Model};
use crate::synextract::{build_syntax_vocab, extract_sentence, Vocab};

/// Bias-corrected Adam moments, one slot per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

impl AdamState {
    pub fn new(params: &ParamRegistry) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update over every unfrozen parameter, using the gradients
/// stored in the registry. Fails before touching anything if a gradient
/// is not finite.
pub fn adam_step(params: &mut ParamRegistry, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let ids: Vec<_> = params.ids().filter(|&id| !params.is_frozen(id)).collect();
    for &id in &ids {
        let t = params.get(id);
        if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for id in ids {
        let k = id.index();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let (data, grad) = params.data_and_grad(id);
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            data[j] -= cfg.lr * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dev: Prf,
}

pub const LOG_HEADER: &str = "epoch\tloss\tdev_P\tdev_R\tdev_F1";

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.2}\t{:.2}\t{:.2}",
            self.epoch, self.loss, self.dev.precision, self.dev.recall, self.dev.f1
        )
    }
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev F1.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Builds vocabularies from the training split and initializes a model.
pub fn init_model(config: &TrainConfig, train: &Dataset) -> Result<Model> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    let labels = LabelSet::bioes_for_types(
        train
            .corpus
            .label_set
            .entity_types()
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    let words = Vocab::from_counts(
        train.sentences().iter().flat_map(|s| s.surfaces()),
        config.min_count,
    );
    let mut vocabs = Vec::new();
    for &ty in &config.syntax {
        let mems = train
            .sentences()
            .iter()
            .zip(&train.annotations)
            .map(|(s, a)| extract_sentence(s, a, ty))
            .collect::<Result<Vec<_>>>()?;
        vocabs.push(build_syntax_vocab(ty, &mems, config.min_count)?);
    }
    let static_table = match &config.static_vectors {
        Some(p) => Some(load_static_vectors(std::io::BufReader::new(std::fs::File::open(p)?))?),
        None => None,
    };
    Model::build(config.clone(), labels, words, vocabs, static_table)
}

pub fn instances(model: &Model, data: &Dataset) -> Result<Vec<Instance>> {
    data.sentences()
        .iter()
        .zip(&data.annotations)
        .enumerate()
        .map(|(k, (s, a))| {
            model
                .instance(s, a)
                .map_err(|e| Error::Alignment(format!("sentence {}: {e}", k + 1)))
        })
        .collect()
}

/// Decodes every instance and scores against its gold labels.
pub fn evaluate_instances(model: &Model, insts: &[Instance]) -> Result<(EvalReport, Vec<Vec<String>>)> {
    let mut report = EvalReport::default();
    let mut preds = Vec::with_capacity(insts.len());
    for inst in insts {
        let pred = model.labels.decode(&model.decode(inst)?);
        let gold = model.labels.decode(&inst.gold);
        report.add_sentence(&gold, &pred)?;
        preds.push(pred);
    }
    Ok((report, preds))
}

/// Fails when the data carries entity types the model has never seen.
pub fn check_label_compatibility(model: &Model, data: &Dataset) -> Result<()> {
    let known = model.labels.entity_types();
    for t in data.corpus.label_set.entity_types() {
        if !known.contains(&t) {
            return Err(Error::UnknownLabel(format!(
                "entity type {t} is not in the model's label set"
            )));
        }
    }
    Ok(())
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    check_label_compatibility(model, data)?;
    Ok(evaluate_instances(model, &instances(model, data)?)?.0)
}

/// Trains from scratch. Each epoch shuffles with the run seed, averages
/// gradients over batches, then scores the dev split. The returned model
/// holds the parameters of the best dev F1; ties keep the earlier epoch.
pub fn train(config: &TrainConfig, train_set: &Dataset, dev_set: &Dataset) -> Result<TrainOutcome> {
    train_with(config, train_set, dev_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F: FnMut(&EpochLog)>(
    config: &TrainConfig,
    train_set: &Dataset,
    dev_set: &Dataset,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    let mut model = init_model(config, train_set)?;
    check_label_compatibility(&model, dev_set)?;
    let train_insts = instances(&model, train_set)?;
    let dev_insts = instances(&model, dev_set)?;
    let adam = AdamConfig::from(config);
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_insts.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamRegistry)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.params.zero_grad();
            for &k in batch {
                let mut g = Graph::new();
                let loss = model.loss(&mut g, &train_insts[k], Some(&mut rng))?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
                }
                total += value;
                g.backward(loss, &mut model.params)?;
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            adam_step(&mut model.params, &mut state, &adam)?;
        }
        let (report, _) = evaluate_instances(&model, &dev_insts)?;
        let entry = EpochLog {
            epoch,
            loss: total / train_insts.len() as f64,
            dev: report.prf(),
        };
        on_epoch(&entry);
        let f1 = entry.dev.f1;
        log.push(entry);
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, model.params.clone()));
        }
        if config.target_f1.is_some_and(|t| f1 >= t) {
            break;
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => 0,
    };
    model.params.zero_grad();
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
    })
}

/// Writes `token pos pred` rows for every sentence.
pub fn predict<W: Write>(model: &Model, data: &Dataset, out: W) -> Result<()> {
    let insts = instances(model, data)?;
    let mut sentences = data.sentences().to_vec();
    for (s, inst) in sentences.iter_mut().zip(&insts) {
        s.labels = model.labels.decode(&model.decode(inst)?);
    }
    write_conll(out, &sentences, None)
}

/// Inspection record of one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenInspection {
    pub sentence: usize,
    pub token: usize,
    pub surface: String,
    /// Per active type: keys and their memory weights.
    pub memory: Vec<(String, Vec<String>, Vec<f64>)>,
    /// Syntax-attention weights per type, when attention is active.
    pub attention: Option<Vec<f64>>,
    /// `‖r‖₂` of the gate, when the gate is active.
    pub gate_norm: Option<f64>,
}

impl TokenInspection {
    /// `sent tok surface type:key=p,... ... a=type:w,... gate_norm=x`.
    pub fn to_tsv(&self) -> String {
        let mut fields = vec![self.sentence.to_string(), self.token.to_string(), self.surface.clone()];
        for (ty, keys, p) in &self.memory {
            let pairs: Vec<String> = keys.iter().zip(p).map(|(k, w)| format!("{k}={w:.4}")).collect();
            fields.push(format!("{ty}:{}", pairs.join(",")));
        }
        let types: Vec<&str> = self.memory.iter().map(|(t, _, _)| t.as_str()).collect();
        fields.push(match &self.attention {
            Some(a) => format!(
                "a={}",
                types.iter().zip(a).map(|(t, w)| format!("{t}:{w:.4}")).collect::<Vec<_>>().join(",")
            ),
            None => "a=-".into(),
        });
        fields.push(match self.gate_norm {
            Some(r) => format!("gate_norm={r:.4}"),
            None => "gate_norm=-".into(),
        });
        fields.join("\t")
    }
}

/// Memory weights, attention weights and gate norms of every token of one
/// sentence.
pub fn inspect_instance(model: &Model, inst: &Instance, sentence: usize) -> Result<Vec<TokenInspection>> {
    let mut g = Graph::new();
    let f = model.forward::<ChaCha8Rng>(&mut g, inst, None)?;
    let n = inst.surfaces.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut memory = Vec::new();
        for (c, (ty, p)) in f.ensemble.p.iter().enumerate() {
            let range = inst.memories[c].entries(i);
            let weights = g.value(*p).data()[range].to_vec();
            let keys = inst.text[c][i].0.clone();
            memory.push((ty.name().to_string(), keys, weights));
        }
        let attention = f.ensemble.a.map(|a| g.value(a).row(i).to_vec());
        let gate_norm = f
            .ensemble
            .r
            .map(|r| g.value(r).row(i).iter().map(|x| x * x).sum::<f64>().sqrt());
        out.push(TokenInspection {
            sentence,
            token: i,
            surface: inst.surfaces[i].clone(),
            memory,
            attention,
            gate_norm,
        });
    }
    Ok(out)
}

/// Inspection records for `sentence` (or all sentences), optionally
/// restricted to one token.
pub fn inspect(
    model: &Model,
    data: &Dataset,
    sentence: Option<usize>,
    token: Option<usize>,
) -> Result<Vec<TokenInspection>> {
    let range = match sentence {
        Some(k) if k >= data.len() => {
            return Err(Error::Config(format!("sentence {k} out of range (have {})", data.len())))
        }
        Some(k) => k..k + 1,
        None => 0..data.len(),
    };
    let mut out = Vec::new();
    for k in range {
        let inst = model.instance(&data.sentences()[k], &data.annotations[k])?;
        let mut rows = inspect_instance(model, &inst, k)?;
        if let Some(t) = token {
            if t >= rows.len() {
                return Err(Error::Config(format!("token {t} out of range in sentence {k}")));
            }
            rows = vec![rows.swap_remove(t)];
        }
        out.extend(rows);
    }
    Ok(out)
}
