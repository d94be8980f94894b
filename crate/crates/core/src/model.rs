//! The full tagger: embeddings, context encoder, syntax ensemble, output
//! projection and CRF.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamRegistry, Tensor, Var};
use crate::config::TrainConfig;
use crate::corpus::{LabelSet, Sentence};
use crate::crf::{bioes_transition_mask, nll_node, Crf};
use crate::encoder::{EmbeddingBank, Encoder};
use crate::ensemble::{project, Ensemble, EnsembleOutput};
use crate::error::{Error, Result};
use crate::synextract::{extract_sentence, Annotations, IdMemory, SyntaxVocab, TypeMemory, Vocab};

/// One sentence ready for the network.
#[derive(Debug, Clone)]
pub struct Instance {
    pub surfaces: Vec<String>,
    /// String memories per active type, kept for inspection.
    pub text: Vec<TypeMemory>,
    pub memories: Vec<IdMemory>,
    pub gold: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `[n, |T|]` emission scores.
    pub u: Var,
    pub ensemble: EnsembleOutput,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub labels: LabelSet,
    pub words: Vocab,
    pub syntax_vocabs: Vec<SyntaxVocab>,
    pub static_vocab: Option<Vocab>,
    pub params: ParamRegistry,
    pub bank: EmbeddingBank,
    pub encoder: Encoder,
    pub ensemble: Ensemble,
    pub w_o: ParamId,
    pub transitions: ParamId,
    pub crf_bias: ParamId,
    pub mask: Option<Vec<f64>>,
}

impl Model {
    /// Registers and initializes every parameter from `config.seed`.
    /// `syntax_vocabs` must follow `config.syntax`.
    pub fn build(
        config: TrainConfig,
        labels: LabelSet,
        words: Vocab,
        syntax_vocabs: Vec<SyntaxVocab>,
        static_table: Option<(Vocab, Tensor)>,
    ) -> Result<Model> {
        config.validate()?;
        let types: Vec<_> = syntax_vocabs.iter().map(|v| v.ty).collect();
        if types != config.syntax {
            return Err(Error::Config(format!(
                "syntax vocabularies {types:?} do not match configured types {:?}",
                config.syntax
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamRegistry::new();
        let mut bank = EmbeddingBank::default();
        bank.add_random(&mut params, "word", words.clone(), config.emb_dim, &mut rng)?;
        let static_vocab = match static_table {
            Some((vocab, table)) => {
                bank.add_static(&mut params, "static", vocab.clone(), table)?;
                Some(vocab)
            }
            None => None,
        };
        let encoder = Encoder::new(config.encoder.clone(), bank.total_dim(), &mut params, &mut rng)?;
        let d = encoder.hidden();
        let ensemble = Ensemble::new(&mut params, config.fusion, config.gate, &syntax_vocabs, d, &mut rng)?;
        let t = labels.len();
        let w_o = params.register_glorot("out.w", t, ensemble.output_dim(), &mut rng)?;
        let transitions = params.register_zeros("crf.transitions", &[t + 2, t + 2])?;
        let crf_bias = params.register_zeros("crf.bias", &[t])?;
        let mask = if config.crf_mask {
            Some(bioes_transition_mask(&labels)?)
        } else {
            None
        };
        Ok(Model {
            config,
            labels,
            words,
            syntax_vocabs,
            static_vocab,
            params,
            bank,
            encoder,
            ensemble,
            w_o,
            transitions,
            crf_bias,
            mask,
        })
    }

    pub fn instance(&self, sentence: &Sentence, ann: &Annotations) -> Result<Instance> {
        let mut text = Vec::with_capacity(self.syntax_vocabs.len());
        let mut memories = Vec::with_capacity(self.syntax_vocabs.len());
        for v in &self.syntax_vocabs {
            let m = extract_sentence(sentence, ann, v.ty)?;
            memories.push(IdMemory::encode(&m, v));
            text.push(m);
        }
        Ok(Instance {
            surfaces: sentence.surfaces().map(str::to_string).collect(),
            text,
            memories,
            gold: self.labels.encode(&sentence.labels)?,
        })
    }

    /// Emission scores. Dropout is applied only when `dropout` is given.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        inst: &Instance,
        mut dropout: Option<&mut R>,
    ) -> Result<Forward> {
        let rate = self.config.encoder.dropout;
        let surfaces: Vec<&str> = inst.surfaces.iter().map(String::as_str).collect();
        let mut e = self.bank.embed(g, &self.params, &surfaces)?;
        if let Some(r) = dropout.as_deref_mut() {
            e = g.dropout(e, rate, r)?;
        }
        let h = self.encoder.encode(g, &self.params, e, dropout.as_deref_mut())?;
        let mems: Vec<&IdMemory> = inst.memories.iter().collect();
        let ensemble = self.ensemble.forward(g, &self.params, h, &mems)?;
        let mut o = ensemble.o;
        if let Some(r) = dropout {
            o = g.dropout(o, rate, r)?;
        }
        let u = project(g, &self.params, o, self.w_o)?;
        Ok(Forward { u, ensemble })
    }

    /// CRF negative log-likelihood of the gold labels.
    pub fn loss<R: Rng>(&self, g: &mut Graph, inst: &Instance, dropout: Option<&mut R>) -> Result<Var> {
        let f = self.forward(g, inst, dropout)?;
        let trans = g.param(&self.params, self.transitions);
        let bias = g.param(&self.params, self.crf_bias);
        nll_node(g, f.u, trans, bias, &inst.gold, self.mask.as_deref())
    }

    pub fn crf(&self) -> Result<Crf> {
        Crf::new(
            self.labels.len(),
            self.params.get(self.transitions).data(),
            self.params.get(self.crf_bias).data(),
            self.mask.as_deref(),
        )
    }

    /// Viterbi label ids.
    pub fn decode(&self, inst: &Instance) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let f = self.forward::<ChaCha8Rng>(&mut g, inst, None)?;
        Ok(self.crf()?.viterbi(g.value(f.u).data())?.0)
    }
}
