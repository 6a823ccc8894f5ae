//! Training loop with validation-MRR model selection.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::codec::{Codec, TokenSeq, VerbalizedQuery};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, query_rng, Protocol};
use crate::kg::{Direction, KnowledgeGraph, Split};
use crate::model::{apply_seq2seq_dropout, loss_and_gradients, Batch, Example, ModelConfig, Seq2SeqParams};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub lr: f64,
    pub desc_len: usize,
    pub seq2seq_dropout_p: f64,
    pub max_epochs: u64,
    pub eval_every: u64,
    pub beam_width_for_valid: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            batch_size: 32,
            lr: 1e-3,
            desc_len: 10,
            seq2seq_dropout_p: 0.1,
            max_epochs: 10,
            eval_every: 1,
            beam_width_for_valid: 10,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.seq2seq_dropout_p) {
            return bad("seq2seq_dropout_p must lie in [0, 1)");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.beam_width_for_valid == 0 {
            return bad("beam_width_for_valid must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub query: VerbalizedQuery,
    pub answer: TokenSeq,
}

/// Two pairs per train fact, tail query first.
pub fn make_training_pairs(graph: &KnowledgeGraph, codec: &Codec) -> Result<Vec<TrainingPair>> {
    let mut pairs = Vec::with_capacity(2 * graph.train.len());
    for fact in &graph.train {
        for dir in [Direction::Tail, Direction::Head] {
            pairs.push(TrainingPair {
                query: codec.verbalize_query(&fact.query(dir))?,
                answer: codec.verbalize_answer(fact.answer(dir)),
            });
        }
    }
    Ok(pairs)
}

/// Shuffle and dropout rngs of one epoch. They depend only on the seed and
/// the epoch number, so a resumed run draws exactly what an uninterrupted
/// one would.
pub fn epoch_rngs(seed: u64, epoch: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    (query_rng(seed, 2 * epoch), query_rng(seed, 2 * epoch + 1))
}

pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rngs(seed, epoch).0);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Mean batch loss; `None` for the untrained epoch 0.
    pub loss: Option<f64>,
    pub valid_mrr: Option<f64>,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:.6}"));
        format!("{}\t{}\t{}", self.epoch, f(self.loss), f(self.valid_mrr))
    }
}

/// Mutable state of a run between epochs.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub params: Seq2SeqParams,
    pub adam: Adam,
    pub epoch: u64,
    pub best_params: Seq2SeqParams,
    pub best_valid_mrr: f64,
    pub best_epoch: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainRun {
    /// The latest state, resumable.
    pub fn last_checkpoint(&self, config: &ModelConfig, desc_len: usize) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            desc_len,
            params: self.params.clone(),
            train_state: Some(TrainState {
                adam: self.adam.clone(),
                epoch: self.epoch,
                best_valid_mrr: self.best_valid_mrr,
                best_epoch: self.best_epoch,
            }),
        }
    }

    pub fn best_checkpoint(&self, config: &ModelConfig, desc_len: usize) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            desc_len,
            params: self.best_params.clone(),
            train_state: None,
        }
    }
}

pub struct Trainer<'a> {
    pub graph: &'a KnowledgeGraph,
    pub codec: &'a Codec,
    pub config: ModelConfig,
    pub plan: TrainPlan,
    /// Protocol for the periodic valid-split ranking.
    pub valid_protocol: Protocol,
    pairs: Vec<TrainingPair>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        graph: &'a KnowledgeGraph,
        codec: &'a Codec,
        config: ModelConfig,
        plan: TrainPlan,
        valid_protocol: Protocol,
    ) -> Result<Self> {
        config.validate()?;
        plan.validate()?;
        let pairs = make_training_pairs(graph, codec)?;
        Ok(Trainer {
            graph,
            codec,
            config,
            plan,
            valid_protocol,
            pairs,
        })
    }

    pub fn pairs(&self) -> &[TrainingPair] {
        &self.pairs
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.plan.lr,
            ..Default::default()
        }
    }

    pub fn valid_mrr(&self, params: &Seq2SeqParams) -> Result<f64> {
        let eval = evaluate_split(&self.config, params, self.codec, self.graph, Split::Valid, &self.valid_protocol)?;
        Ok(eval.metrics.mrr)
    }

    /// Fresh parameters, evaluated as epoch 0.
    pub fn start(&self) -> Result<TrainRun> {
        let params = Seq2SeqParams::init(&self.config)?;
        let mrr = self.valid_mrr(&params)?;
        Ok(TrainRun {
            adam: Adam::new(self.adam_config(), &params),
            best_params: params.clone(),
            params,
            epoch: 0,
            best_valid_mrr: mrr,
            best_epoch: 0,
            history: vec![EpochRecord {
                epoch: 0,
                loss: None,
                valid_mrr: Some(mrr),
            }],
        })
    }

    /// Continue from a saved last-state checkpoint and the best parameters
    /// recorded so far.
    pub fn resume(&self, last: Checkpoint, best_params: Seq2SeqParams) -> Result<TrainRun> {
        let state = last
            .train_state
            .ok_or_else(|| Error::CheckpointMalformed("no training state to resume from".into()))?;
        if last.config != self.config {
            return Err(Error::InvalidConfig("checkpoint model config differs from the run config".into()));
        }
        Ok(TrainRun {
            params: last.params,
            adam: state.adam,
            epoch: state.epoch,
            best_params,
            best_valid_mrr: state.best_valid_mrr,
            best_epoch: state.best_epoch,
            history: Vec::new(),
        })
    }

    /// One pass over the shuffled pairs; returns the mean batch loss.
    pub fn train_epoch(&self, run: &mut TrainRun) -> Result<f64> {
        let epoch = run.epoch + 1;
        let (mut shuffle_rng, mut drop_rng) = epoch_rngs(self.plan.seed, epoch);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.plan.batch_size) {
            let examples = chunk
                .iter()
                .map(|&i| {
                    let p = &self.pairs[i];
                    let mask = apply_seq2seq_dropout(&p.query, self.plan.seq2seq_dropout_p, &mut drop_rng);
                    Example::new(&p.query, mask, &p.answer)
                })
                .collect();
            let (loss, grads) = loss_and_gradients(&self.config, &run.params, &Batch { examples })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    step: run.adam.step + 1,
                });
            }
            run.adam.step(&mut run.params, &grads.params)?;
            total += loss;
            batches += 1;
        }
        run.epoch = epoch;
        Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
    }

    /// Train, evaluate when due, and update the best checkpoint. Strictly
    /// better valid MRR is required to replace the best.
    pub fn step(&self, run: &mut TrainRun) -> Result<EpochRecord> {
        let loss = self.train_epoch(run)?;
        let due = run.epoch % self.plan.eval_every == 0 || run.epoch == self.plan.max_epochs;
        let valid_mrr = if due {
            let mrr = self.valid_mrr(&run.params)?;
            if mrr > run.best_valid_mrr {
                run.best_valid_mrr = mrr;
                run.best_epoch = run.epoch;
                run.best_params = run.params.clone();
            }
            Some(mrr)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch: run.epoch,
            loss: Some(loss),
            valid_mrr,
        };
        run.history.push(rec.clone());
        Ok(rec)
    }

    /// Run to `plan.max_epochs`, calling `on_epoch` after each record.
    pub fn run_to_end(&self, run: &mut TrainRun, on_epoch: &mut dyn FnMut(&EpochRecord, &TrainRun) -> Result<()>) -> Result<()> {
        while run.epoch < self.plan.max_epochs {
            let rec = self.step(run)?;
            on_epoch(&rec, run)?;
        }
        Ok(())
    }
}

/// Train from scratch and return the finished run.
pub fn train(
    graph: &KnowledgeGraph,
    codec: &Codec,
    config: ModelConfig,
    plan: TrainPlan,
    valid_protocol: Protocol,
) -> Result<TrainRun> {
    let trainer = Trainer::new(graph, codec, config, plan, valid_protocol)?;
    let mut run = trainer.start()?;
    trainer.run_to_end(&mut run, &mut |_, _| Ok(()))?;
    Ok(run)
}
