//! Tabular autoregressive policy with exact log-probabilities and
//! closed-form gradients, plus the record compiler and the two trainers.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::{
    blocks_for_sample, section_loss, stage_at_epoch, CurriculumConfig, LrRegime, LrScheduler,
    Section, SectionLoss, SectionLossError, SectionMask,
};
use crate::metrics::{diagnose_prediction, latent_valid_rate, PredictionRecord};
use crate::plan::{
    parse_plan_bounded, ContextBundle, DatasetRecord, FormatError, Plan, ToolLibrary,
};
use crate::scaffold::{
    compress, parse_cot, tokenize, CompressError, CotParseError, LatentVocab, THOUGHT_CLOSE,
    THOUGHT_OPEN,
};
use crate::scdpo::{
    reward_shift, scdpo_grad, scdpo_loss, LossBreakdown, PairRecord, ScdpoConfig, ScdpoError,
};
use crate::synth::{home_city, mix, st_summary};

pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("token '{0}' is not in the vocabulary")]
    UnknownToken(String),
    #[error(transparent)]
    Section(#[from] SectionLossError),
    #[error(transparent)]
    Scdpo(#[from] ScdpoError),
    #[error("record {id}: {reason}")]
    Compile { id: String, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Sorted token list; index order is lexicographic order, which greedy
/// decoding relies on for tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        set.insert(BOS.to_string());
        set.insert(EOS.to_string());
        let tokens: Vec<String> = set.into_iter().collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<u32>, PolicyError> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| PolicyError::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }
}

/// What the secondary logit table is keyed on, besides the previous token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// Previous token only.
    Bigram,
    /// Adds a table keyed by the two previous tokens.
    Trigram,
    /// Adds a table keyed by the prompt's last token and the previous token.
    PromptConditioned,
}

impl std::str::FromStr for Order {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bigram" => Ok(Order::Bigram),
            "trigram" => Ok(Order::Trigram),
            "prompt_conditioned" | "prompt-conditioned" => Ok(Order::PromptConditioned),
            other => Err(format!("unknown order '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RowKey {
    Bigram(u32),
    Pair(u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub row: RowKey,
    pub col: u32,
}

/// Conditioning for one prediction: the rows whose logits are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Ctx {
    prev: u32,
    pair: Option<(u32, u32)>,
}

/// Sparse gradient (or any row-structured update) over the logit tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyGrad {
    pub rows: BTreeMap<RowKey, Vec<f64>>,
}

impl PolicyGrad {
    pub fn get(&self, key: ParamKey) -> f64 {
        self.rows.get(&key.row).map_or(0.0, |r| r[key.col as usize])
    }

    fn row_mut(&mut self, key: RowKey, v: usize) -> &mut Vec<f64> {
        self.rows.entry(key).or_insert_with(|| vec![0.0; v])
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let (arg, &max) = logits
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (i, x)| {
            if *x > *acc.1 {
                (i, x)
            } else {
                acc
            }
        });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, x)| (x - max).exp())
        .sum();
    let log_z = rest.ln_1p();
    logits.iter().map(|x| (x - max) - log_z).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    order: Order,
    bigram: Vec<f64>,
    pair: BTreeMap<(u32, u32), Vec<f64>>,
}

impl TabularPolicy {
    /// Uniform policy: every logit zero.
    pub fn zeros(vocab: Vocab, order: Order) -> Self {
        let v = vocab.len();
        TabularPolicy {
            vocab,
            order,
            bigram: vec![0.0; v * v],
            pair: BTreeMap::new(),
        }
    }

    /// Seeded random logits in `[-scale, scale]`; for the pair-keyed orders
    /// every secondary row is materialized, so keep `vocab` small.
    pub fn random(vocab: Vocab, order: Order, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.len();
        let mut p = TabularPolicy::zeros(vocab, order);
        for x in &mut p.bigram {
            *x = rng.gen_range(-scale..=scale);
        }
        if order != Order::Bigram {
            for a in 0..v as u32 {
                for b in 0..v as u32 {
                    let row = (0..v).map(|_| rng.gen_range(-scale..=scale)).collect();
                    p.pair.insert((a, b), row);
                }
            }
        }
        p
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn order(&self) -> Order {
        self.order
    }

    pub fn param_keys(&self) -> Vec<ParamKey> {
        let v = self.vocab.len() as u32;
        let rows = (0..v)
            .map(RowKey::Bigram)
            .chain(self.pair.keys().map(|&(a, b)| RowKey::Pair(a, b)));
        rows.flat_map(|row| (0..v).map(move |col| ParamKey { row, col }))
            .collect()
    }

    pub fn get(&self, key: ParamKey) -> f64 {
        let v = self.vocab.len();
        match key.row {
            RowKey::Bigram(p) => self.bigram[p as usize * v + key.col as usize],
            RowKey::Pair(a, b) => self.pair.get(&(a, b)).map_or(0.0, |r| r[key.col as usize]),
        }
    }

    pub fn set(&mut self, key: ParamKey, value: f64) {
        let v = self.vocab.len();
        *self
            .row_mut(key.row, v)
            .get_mut(key.col as usize)
            .expect("column in range") = value;
    }

    fn row_mut(&mut self, row: RowKey, v: usize) -> &mut [f64] {
        match row {
            RowKey::Bigram(p) => &mut self.bigram[p as usize * v..(p as usize + 1) * v],
            RowKey::Pair(a, b) => self.pair.entry((a, b)).or_insert_with(|| vec![0.0; v]),
        }
    }

    /// Adds `scale * update` to the tables.
    pub fn apply(&mut self, update: &PolicyGrad, scale: f64) {
        let v = self.vocab.len();
        for (&row, values) in &update.rows {
            for (x, u) in self.row_mut(row, v).iter_mut().zip(values) {
                *x += scale * u;
            }
        }
    }

    fn logits(&self, ctx: Ctx) -> Vec<f64> {
        let v = self.vocab.len();
        let p = ctx.prev as usize;
        let mut out = self.bigram[p * v..(p + 1) * v].to_vec();
        if let Some(row) = ctx.pair.and_then(|k| self.pair.get(&k)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    /// Conditional next-token distribution in log space.
    fn log_probs(&self, ctx: Ctx) -> Vec<f64> {
        log_softmax(&self.logits(ctx))
    }

    /// Contexts for each position of `seq` following `prompt`. The sequence is
    /// left-padded with `<BOS>` so an empty prompt is allowed.
    fn contexts(&self, prompt: &[u32], seq: &[u32]) -> Vec<Ctx> {
        let bos = self.vocab.id(BOS).expect("vocab always has BOS");
        let cond = prompt.last().copied().unwrap_or(bos);
        let mut full = Vec::with_capacity(prompt.len() + seq.len() + 1);
        full.push(bos);
        full.extend_from_slice(prompt);
        full.extend_from_slice(seq);
        let start = prompt.len() + 1;
        (0..seq.len())
            .map(|i| {
                let k = start + i;
                let prev = full[k - 1];
                let pair = match self.order {
                    Order::Bigram => None,
                    Order::Trigram => (k >= 2).then(|| (full[k - 2], prev)),
                    Order::PromptConditioned => Some((cond, prev)),
                };
                Ctx { prev, pair }
            })
            .collect()
    }

    fn rows_of(ctx: Ctx) -> impl Iterator<Item = RowKey> {
        std::iter::once(RowKey::Bigram(ctx.prev)).chain(ctx.pair.map(|(a, b)| RowKey::Pair(a, b)))
    }

    /// Per-position log-probabilities of `seq` given `prompt`.
    pub fn token_logprobs<S: AsRef<str>>(
        &self,
        prompt: &[S],
        seq: &[S],
    ) -> Result<Vec<f64>, PolicyError> {
        let p = self.vocab.encode(prompt)?;
        let s = self.vocab.encode(seq)?;
        Ok(self
            .contexts(&p, &s)
            .into_iter()
            .zip(&s)
            .map(|(ctx, &y)| self.log_probs(ctx)[y as usize])
            .collect())
    }

    /// Sum of log-probabilities of `seq` given `prompt`.
    pub fn logprob<S: AsRef<str>>(&self, prompt: &[S], seq: &[S]) -> Result<f64, PolicyError> {
        Ok(self.token_logprobs(prompt, seq)?.iter().sum())
    }

    /// Accumulates `Σ_i weights[i] * ∂ log p(seq_i) / ∂ logits` into `grad`
    /// and returns the per-position log-probabilities.
    fn accumulate(
        &self,
        prompt: &[u32],
        seq: &[u32],
        weights: &[f64],
        grad: &mut PolicyGrad,
    ) -> Vec<f64> {
        let v = self.vocab.len();
        let mut lps = Vec::with_capacity(seq.len());
        for ((ctx, &y), &w) in self.contexts(prompt, seq).into_iter().zip(seq).zip(weights) {
            let lp = self.log_probs(ctx);
            lps.push(lp[y as usize]);
            if w == 0.0 {
                continue;
            }
            for row in Self::rows_of(ctx) {
                let g = grad.row_mut(row, v);
                for (gi, l) in g.iter_mut().zip(&lp) {
                    *gi -= w * l.exp();
                }
                g[y as usize] += w;
            }
        }
        lps
    }

    /// Gradient of the summed log-probability of `seq` given `prompt`.
    pub fn logprob_grad<S: AsRef<str>>(
        &self,
        prompt: &[S],
        seq: &[S],
    ) -> Result<(f64, PolicyGrad), PolicyError> {
        let p = self.vocab.encode(prompt)?;
        let s = self.vocab.encode(seq)?;
        let mut grad = PolicyGrad::default();
        let lps = self.accumulate(&p, &s, &vec![1.0; s.len()], &mut grad);
        Ok((lps.iter().sum(), grad))
    }

    /// Section-normalized cross-entropy of a compiled record and its gradient.
    pub fn ce_loss_grad(
        &self,
        record: &CompiledRecord,
    ) -> Result<(SectionLoss, PolicyGrad), PolicyError> {
        let prompt = self.vocab.encode(&record.prompt)?;
        let seq = self.vocab.encode(&record.target_tokens())?;
        let target_mask = &record.section_mask.0[record.prompt.len()..];
        let target_mask = SectionMask(target_mask.to_vec());
        let weights: Vec<f64> = target_mask.weights().iter().map(|w| -w).collect();
        let mut grad = PolicyGrad::default();
        let lps = self.accumulate(&prompt, &seq, &weights, &mut grad);
        let losses: Vec<f64> = lps.iter().map(|l| -l).collect();
        Ok((section_loss(&losses, &target_mask)?, grad))
    }

    pub fn ce_loss(&self, record: &CompiledRecord) -> Result<SectionLoss, PolicyError> {
        let lps = self.token_logprobs(&record.prompt, &record.target_tokens())?;
        let losses: Vec<f64> = lps.iter().map(|l| -l).collect();
        let mask = SectionMask(record.section_mask.0[record.prompt.len()..].to_vec());
        Ok(section_loss(&losses, &mask)?)
    }

    /// One plain gradient-descent step on the section-normalized loss.
    /// Returns the loss before the step.
    pub fn ce_step(
        &mut self,
        record: &CompiledRecord,
        lr: f64,
    ) -> Result<SectionLoss, PolicyError> {
        let (loss, grad) = self.ce_loss_grad(record)?;
        if lr != 0.0 {
            self.apply(&grad, -lr);
        }
        Ok(loss)
    }

    /// Argmax chain; ties go to the lexicographically smallest token.
    pub fn greedy_decode<S: AsRef<str>>(
        &self,
        prompt: &[S],
        max_len: usize,
    ) -> Result<Decoded, PolicyError> {
        let p = self.vocab.encode(prompt)?;
        let eos = self.vocab.id(EOS).expect("vocab always has EOS");
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_len {
            let mut probe = out.clone();
            probe.push(eos);
            let ctx = *self.contexts(&p, &probe).last().expect("nonempty");
            let logits = self.logits(ctx);
            let next = logits
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &x)| {
                    if x > best.1 {
                        (i, x)
                    } else {
                        best
                    }
                })
                .0 as u32;
            out.push(next);
            if next == eos {
                return Ok(Decoded {
                    tokens: out
                        .iter()
                        .map(|&t| self.vocab.token(t).to_string())
                        .collect(),
                    truncated: false,
                });
            }
        }
        Ok(Decoded {
            tokens: out
                .iter()
                .map(|&t| self.vocab.token(t).to_string())
                .collect(),
            truncated: true,
        })
    }

    pub fn to_checkpoint(&self, config_hash: &str, seed: u64) -> Checkpoint {
        let v = self.vocab.len();
        Checkpoint {
            config_hash: config_hash.to_string(),
            seed,
            order: self.order,
            vocab: self.vocab.tokens.clone(),
            bigram: self.bigram.chunks(v).map(<[f64]>::to_vec).collect(),
            pair_rows: self
                .pair
                .iter()
                .map(|(&(a, b), row)| PairRow {
                    first: self.vocab.token(a).to_string(),
                    prev: self.vocab.token(b).to_string(),
                    logits: row.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PolicyError> {
        let vocab = Vocab::new(ck.vocab.iter().cloned());
        if vocab.tokens != ck.vocab {
            return Err(PolicyError::Checkpoint(
                "vocabulary is not sorted and unique".into(),
            ));
        }
        let v = vocab.len();
        if ck.bigram.len() != v || ck.bigram.iter().any(|r| r.len() != v) {
            return Err(PolicyError::Checkpoint(
                "bigram table has wrong shape".into(),
            ));
        }
        let mut p = TabularPolicy::zeros(vocab, ck.order);
        p.bigram = ck.bigram.concat();
        for row in &ck.pair_rows {
            if row.logits.len() != v {
                return Err(PolicyError::Checkpoint("pair row has wrong length".into()));
            }
            let a = p
                .vocab
                .id(&row.first)
                .ok_or_else(|| PolicyError::UnknownToken(row.first.clone()))?;
            let b = p
                .vocab
                .id(&row.prev)
                .ok_or_else(|| PolicyError::UnknownToken(row.prev.clone()))?;
            p.pair.insert((a, b), row.logits.clone());
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub first: String,
    pub prev: String,
    pub logits: Vec<f64>,
}

/// Portable JSON dump of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    #[serde(default)]
    pub seed: u64,
    pub order: Order,
    pub vocab: Vec<String>,
    pub bigram: Vec<Vec<f64>>,
    pub pair_rows: Vec<PairRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<String>,
    pub truncated: bool,
}

impl Decoded {
    /// Splits decoded tokens into the reasoning prefix and the plan text.
    pub fn split(&self) -> (String, String) {
        let body: Vec<&str> = self
            .tokens
            .iter()
            .map(String::as_str)
            .take_while(|t| *t != EOS)
            .collect();
        if body.first() != Some(&THOUGHT_OPEN) {
            return (String::new(), body.concat());
        }
        match body.iter().position(|t| *t == THOUGHT_CLOSE) {
            Some(close) => (body[..=close].join(" "), body[close + 1..].concat()),
            None => (body.join(" "), String::new()),
        }
    }

    pub fn to_prediction(&self, id: &str) -> PredictionRecord {
        let (cot, plan_text) = self.split();
        let plan = serde_json::from_str::<serde_json::Value>(&plan_text)
            .unwrap_or(serde_json::Value::String(plan_text));
        PredictionRecord {
            id: id.to_string(),
            plan,
            cot: Some(cot),
            truncated: self.truncated,
        }
    }
}

/// Prompt tokens for a context. The last token summarizes the
/// spatiotemporal state, so it is what position 0 conditions on.
pub fn render_prompt(ctx: &ContextBundle) -> Vec<String> {
    let mut out = vec![
        format!(
            "user:{}",
            ctx.user.get("segment").map_or("unknown", String::as_str)
        ),
        format!("home:{}", home_city(ctx)),
    ];
    out.extend(ctx.history.iter().map(|h| format!("hist:{h}")));
    out.push(format!("city:{}", ctx.st.city));
    out.push(st_summary(ctx));
    out
}

/// Plan tokens at intent granularity; their concatenation is the canonical JSON.
pub fn plan_pieces(plan: &Plan) -> Vec<String> {
    let mut out: Vec<String> = plan
        .intents
        .iter()
        .enumerate()
        .map(|(i, it)| format!("{}{}", if i == 0 { "[" } else { "," }, it.to_json()))
        .collect();
    out.push(if plan.is_empty() {
        "[]".into()
    } else {
        "]".into()
    });
    out
}

/// Plan pieces followed by the end token.
pub fn response_tokens(plan: &Plan) -> Vec<String> {
    let mut out = plan_pieces(plan);
    out.push(EOS.to_string());
    out
}

/// A training sequence at one curriculum stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledRecord {
    pub id: String,
    pub prompt: Vec<String>,
    pub prefix_tokens: Vec<String>,
    pub json_target: Vec<String>,
    pub stage_b: usize,
    #[serde(rename = "B")]
    pub blocks: usize,
    /// One entry per token of `prompt ++ prefix_tokens ++ json_target`.
    pub section_mask: SectionMask,
}

impl CompiledRecord {
    pub fn target_tokens(&self) -> Vec<String> {
        self.prefix_tokens
            .iter()
            .chain(&self.json_target)
            .cloned()
            .collect()
    }

    pub fn full_tokens(&self) -> Vec<String> {
        self.prompt
            .iter()
            .chain(&self.prefix_tokens)
            .chain(&self.json_target)
            .cloned()
            .collect()
    }
}

fn compile_err(id: &str, e: impl std::fmt::Display) -> PolicyError {
    PolicyError::Compile {
        id: id.to_string(),
        reason: e.to_string(),
    }
}

/// Compiles a record with its first `stage` blocks compressed; `stage` is
/// clamped to the record's block count.
pub fn compile_record(
    record: &DatasetRecord,
    stage: usize,
    latent: &LatentVocab,
) -> Result<CompiledRecord, PolicyError> {
    let plan = parse_plan_bounded(&record.plan_text(), usize::MAX)
        .map_err(|e: FormatError| compile_err(&record.id, e))?;
    let cot = parse_cot(&record.cot).map_err(|e: CotParseError| compile_err(&record.id, e))?;
    let blocks = cot.block_count();
    let stage_b = stage.min(blocks);
    let prefix =
        compress(&cot, stage_b, latent).map_err(|e: CompressError| compile_err(&record.id, e))?;
    let prompt = render_prompt(&record.context);
    let prefix_tokens = tokenize(&prefix.text);
    let json_target = response_tokens(&plan);
    let mut mask = vec![Section::Prompt; prompt.len()];
    mask.extend(std::iter::repeat_n(Section::Cot, prefix_tokens.len()));
    mask.extend(std::iter::repeat_n(Section::Json, json_target.len()));
    Ok(CompiledRecord {
        id: record.id.clone(),
        prompt,
        prefix_tokens,
        json_target,
        stage_b,
        blocks,
        section_mask: SectionMask(mask),
    })
}

/// Compiles at the stage the curriculum assigns to `epoch`.
pub fn compile_for_epoch(
    record: &DatasetRecord,
    epoch: usize,
    cfg: &CurriculumConfig,
    latent: &LatentVocab,
) -> Result<CompiledRecord, PolicyError> {
    let plan_len = parse_plan_bounded(&record.plan_text(), usize::MAX)
        .map_err(|e| compile_err(&record.id, e))?
        .len();
    compile_record(record, stage_at_epoch(epoch, cfg, plan_len), latent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicdOptions {
    pub curriculum: CurriculumConfig,
    pub regime: LrRegime,
    /// Multiplies every scheduled rate; the schedule shape is unchanged.
    pub lr_scale: f64,
    pub order: Order,
    pub latent: LatentVocab,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for PicdOptions {
    fn default() -> Self {
        PicdOptions {
            curriculum: CurriculumConfig::default(),
            regime: LrRegime::Calr,
            lr_scale: 1e6,
            order: Order::PromptConditioned,
            latent: LatentVocab::default(),
            max_decode_len: 96,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub g: usize,
    pub lr_first: f64,
    pub lr_last: f64,
    pub mean_l_cot: f64,
    pub mean_l_json: f64,
    pub fully_latent_targets: usize,
    pub latent_valid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicdReport {
    pub regime: LrRegime,
    pub records: usize,
    pub steps: usize,
    pub t_star: Option<usize>,
    pub epochs: Vec<EpochReport>,
    pub final_latent_valid: Option<f64>,
}

/// Every token a curriculum run over `train` can see, plus held-out prompts.
pub fn curriculum_vocab(
    train: &[DatasetRecord],
    heldout: &[DatasetRecord],
    latent: &LatentVocab,
) -> Result<Vocab, PolicyError> {
    let mut tokens: BTreeSet<String> = latent.all_tokens().into_iter().collect();
    tokens.insert(THOUGHT_OPEN.to_string());
    tokens.insert(THOUGHT_CLOSE.to_string());
    for r in train {
        let full = compile_record(r, usize::MAX, latent)?;
        for stage in 0..=full.blocks {
            tokens.extend(compile_record(r, stage, latent)?.full_tokens());
        }
    }
    for r in heldout {
        tokens.extend(render_prompt(&r.context));
    }
    Ok(Vocab::new(tokens))
}

/// Greedy decodes for `records` as prediction records.
pub fn predict(
    policy: &TabularPolicy,
    records: &[DatasetRecord],
    max_len: usize,
) -> Result<Vec<PredictionRecord>, PolicyError> {
    records
        .iter()
        .map(|r| {
            Ok(policy
                .greedy_decode(&render_prompt(&r.context), max_len)?
                .to_prediction(&r.id))
        })
        .collect()
}

fn heldout_latent_valid(
    policy: &TabularPolicy,
    heldout: &[DatasetRecord],
    library: &ToolLibrary,
    opts: &PicdOptions,
) -> Result<Option<f64>, PolicyError> {
    let preds = predict(policy, heldout, opts.max_decode_len)?;
    let diags: Vec<_> = preds
        .iter()
        .filter_map(|p| diagnose_prediction(p, library, &opts.latent))
        .collect();
    Ok(latent_valid_rate(&diags))
}

/// Curriculum training from a uniform policy: one step per record per
/// epoch, records reshuffled each epoch, targets compressed per the
/// epoch's stage, rates from the chosen regime.
pub fn train_picd(
    train: &[DatasetRecord],
    heldout: &[DatasetRecord],
    library: &ToolLibrary,
    opts: &PicdOptions,
) -> Result<(TabularPolicy, PicdReport), PolicyError> {
    let vocab = curriculum_vocab(train, heldout, &opts.latent)?;
    let mut policy = TabularPolicy::zeros(vocab, opts.order);
    let cfg = &opts.curriculum;
    let spe = train.len().max(1);
    let mut sched = LrScheduler::new(opts.regime, cfg.clone(), spe);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut t = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            opts.seed,
            5,
            epoch as u64,
        )));
        let (mut l_cot, mut l_json) = (0.0, 0.0);
        let (mut lr_first, mut lr_last, mut g) = (0.0, 0.0, 0);
        let mut fully_latent = 0;
        for (k, &i) in order.iter().enumerate() {
            let row = sched.row(t);
            let lr = row.lr * opts.lr_scale;
            if k == 0 {
                lr_first = lr;
            }
            lr_last = lr;
            g = row.g;
            let rec = compile_for_epoch(&train[i], epoch, cfg, &opts.latent)?;
            if rec.stage_b == rec.blocks {
                fully_latent += 1;
            }
            let loss = policy.ce_step(&rec, lr)?;
            l_cot += loss.cot;
            l_json += loss.json;
            t += 1;
        }
        let n = train.len().max(1) as f64;
        epochs.push(EpochReport {
            epoch,
            g,
            lr_first,
            lr_last,
            mean_l_cot: l_cot / n,
            mean_l_json: l_json / n,
            fully_latent_targets: fully_latent,
            latent_valid: heldout_latent_valid(&policy, heldout, library, opts)?,
        });
    }
    let final_latent_valid = epochs.last().and_then(|e| e.latent_valid);
    let report = PicdReport {
        regime: opts.regime,
        records: train.len(),
        steps: t,
        t_star: sched.t_star(),
        epochs,
        final_latent_valid,
    };
    Ok((policy, report))
}

/// Largest block count among `records`; handy for sizing the curriculum.
pub fn max_blocks(records: &[DatasetRecord]) -> usize {
    records
        .iter()
        .filter_map(|r| parse_plan_bounded(&r.plan_text(), usize::MAX).ok())
        .map(|p| blocks_for_sample(p.len()))
        .max()
        .unwrap_or(0)
}

/// Tokenized preference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTokens {
    pub prompt: Vec<String>,
    pub chosen: Vec<String>,
    pub rejected: Vec<String>,
}

impl PairTokens {
    pub fn from_record(p: &PairRecord) -> Self {
        PairTokens {
            prompt: render_prompt(&p.prompt),
            chosen: response_tokens(&p.chosen),
            rejected: response_tokens(&p.rejected),
        }
    }
}

/// Every token a pair corpus uses.
pub fn pair_vocab(pairs: &[PairRecord]) -> Vocab {
    Vocab::new(pairs.iter().flat_map(|p| {
        let t = PairTokens::from_record(p);
        t.prompt.into_iter().chain(t.chosen).chain(t.rejected)
    }))
}

fn seq_logprob(
    policy: &TabularPolicy,
    prompt: &[String],
    seq: &[String],
    cfg: &ScdpoConfig,
) -> Result<f64, PolicyError> {
    let lp = policy.logprob(prompt, seq)?;
    Ok(if cfg.length_normalized {
        lp / seq.len() as f64
    } else {
        lp
    })
}

/// Loss and gradient over the logit table for one pair, against fixed
/// reference log-probabilities of the chosen and rejected responses.
pub fn scdpo_pair_grad(
    policy: &TabularPolicy,
    pair: &PairTokens,
    ref_logps: (f64, f64),
    cfg: &ScdpoConfig,
) -> Result<(LossBreakdown, PolicyGrad), PolicyError> {
    let (lp_c, g_c) = policy.logprob_grad(&pair.prompt, &pair.chosen)?;
    let (lp_r, g_r) = policy.logprob_grad(&pair.prompt, &pair.rejected)?;
    let (nc, nr) = if cfg.length_normalized {
        (pair.chosen.len() as f64, pair.rejected.len() as f64)
    } else {
        (1.0, 1.0)
    };
    let r_plus = reward_shift(lp_c / nc, ref_logps.0, cfg.beta)?;
    let r_minus = reward_shift(lp_r / nr, ref_logps.1, cfg.beta)?;
    let loss = scdpo_loss(r_plus, r_minus, cfg)?;
    let (dp, dm) = scdpo_grad(r_plus, r_minus, cfg)?;
    let mut grad = PolicyGrad::default();
    let v = policy.vocab().len();
    for (g, coef) in [(g_c, dp * cfg.beta / nc), (g_r, dm * cfg.beta / nr)] {
        for (row, values) in g.rows {
            let acc = grad.row_mut(row, v);
            for (a, x) in acc.iter_mut().zip(values) {
                *a += coef * x;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub pairs: usize,
    pub mean_gap: f64,
    pub mean_r_plus: f64,
    pub mean_r_minus: f64,
    pub mean_chosen_logp_delta: f64,
    pub mean_rejected_logp_delta: f64,
    pub in_band_fraction: f64,
    /// Gap at the 0, 10, 50, 90 and 100th percentiles.
    pub gap_quantiles: [f64; 5],
    pub mean_total_loss: f64,
}

/// Reward and log-probability statistics of `policy` against `reference`.
pub fn pair_stats(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[PairTokens],
    cfg: &ScdpoConfig,
) -> Result<PairStats, PolicyError> {
    let n = pairs.len().max(1) as f64;
    let mut gaps = Vec::with_capacity(pairs.len());
    let (mut rp, mut rm, mut dc, mut dr, mut band, mut total) = (0.0, 0.0, 0.0, 0.0, 0usize, 0.0);
    for p in pairs {
        let (pc, pr) = (
            policy.logprob(&p.prompt, &p.chosen)?,
            policy.logprob(&p.prompt, &p.rejected)?,
        );
        let (qc, qr) = (
            reference.logprob(&p.prompt, &p.chosen)?,
            reference.logprob(&p.prompt, &p.rejected)?,
        );
        dc += pc - qc;
        dr += pr - qr;
        let l = scdpo_loss(
            reward_shift(
                seq_logprob(policy, &p.prompt, &p.chosen, cfg)?,
                seq_logprob(reference, &p.prompt, &p.chosen, cfg)?,
                cfg.beta,
            )?,
            reward_shift(
                seq_logprob(policy, &p.prompt, &p.rejected, cfg)?,
                seq_logprob(reference, &p.prompt, &p.rejected, cfg)?,
                cfg.beta,
            )?,
            cfg,
        )?;
        let gap = l.r_plus - l.r_minus;
        rp += l.r_plus;
        rm += l.r_minus;
        total += l.total;
        if (cfg.gamma_low..=cfg.gamma_high).contains(&gap) {
            band += 1;
        }
        gaps.push(gap);
    }
    gaps.sort_by(f64::total_cmp);
    let q = |f: f64| {
        if gaps.is_empty() {
            0.0
        } else {
            gaps[((gaps.len() - 1) as f64 * f).round() as usize]
        }
    };
    Ok(PairStats {
        pairs: pairs.len(),
        mean_gap: gaps.iter().sum::<f64>() / n,
        mean_r_plus: rp / n,
        mean_r_minus: rm / n,
        mean_chosen_logp_delta: dc / n,
        mean_rejected_logp_delta: dr / n,
        in_band_fraction: band as f64 / n,
        gap_quantiles: [q(0.0), q(0.1), q(0.5), q(0.9), q(1.0)],
        mean_total_loss: total / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr: f64,
    pub mean_train_loss: LossBreakdown,
    pub before: PairStats,
    pub after: PairStats,
}

/// Pair visiting order: anchors shuffled by `seed`, the two directions of
/// each anchor kept adjacent.
pub fn pair_order(pairs: &[PairRecord], seed: u64) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_anchor: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        match by_anchor.get(p.anchor_id.as_str()) {
            Some(&g) => groups[g].push(i),
            None => {
                by_anchor.insert(&p.anchor_id, groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    groups.concat()
}

/// Preference alignment against a frozen copy of `init`. Rates warm up
/// linearly over the first `warmup_ratio` of steps, then stay at `lr`.
pub fn train_scdpo(
    init: &TabularPolicy,
    pairs: &[PairRecord],
    cfg: &ScdpoConfig,
    lr: f64,
    seed: u64,
) -> Result<(TabularPolicy, DpoReport), PolicyError> {
    cfg.validate()?;
    let reference = init.clone();
    let mut policy = init.clone();
    let tokens: Vec<PairTokens> = pairs.iter().map(PairTokens::from_record).collect();
    let ref_logps: Vec<(f64, f64)> = tokens
        .iter()
        .map(|p| {
            Ok((
                seq_logprob(&reference, &p.prompt, &p.chosen, cfg)?,
                seq_logprob(&reference, &p.prompt, &p.rejected, cfg)?,
            ))
        })
        .collect::<Result<_, PolicyError>>()?;
    let before = pair_stats(&policy, &reference, &tokens, cfg)?;
    let total_steps = cfg.epochs * pairs.len();
    let warmup = (cfg.warmup_ratio * total_steps as f64).ceil() as usize;
    let mut sum = LossBreakdown::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for i in pair_order(pairs, mix(seed, 6, epoch as u64)) {
            let (loss, grad) = scdpo_pair_grad(&policy, &tokens[i], ref_logps[i], cfg)?;
            let scale = if step < warmup {
                (step + 1) as f64 / warmup as f64
            } else {
                1.0
            };
            policy.apply(&grad, -lr * scale);
            for (a, b) in [
                (&mut sum.r_plus, loss.r_plus),
                (&mut sum.r_minus, loss.r_minus),
                (&mut sum.l_dpo, loss.l_dpo),
                (&mut sum.l_anchor, loss.l_anchor),
                (&mut sum.l_gap_low, loss.l_gap_low),
                (&mut sum.l_gap_high, loss.l_gap_high),
                (&mut sum.l_center, loss.l_center),
                (&mut sum.total, loss.total),
            ] {
                *a += b / total_steps.max(1) as f64;
            }
            step += 1;
        }
    }
    let after = pair_stats(&policy, &reference, &tokens, cfg)?;
    Ok((
        policy,
        DpoReport {
            steps: step,
            warmup_steps: warmup,
            lr,
            mean_train_loss: sum,
            before,
            after,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_dataset, default_templates, SynthConfig};

    fn small_vocab() -> Vocab {
        Vocab::new(["a", "b", "c"])
    }

    #[test]
    fn vocab_is_sorted_with_markers() {
        let v = small_vocab();
        assert_eq!(v.tokens(), ["<BOS>", "<EOS>", "a", "b", "c"]);
        assert_eq!(v.id("b"), Some(3));
        assert!(matches!(v.encode(&["z"]), Err(PolicyError::UnknownToken(t)) if t == "z"));
    }

    #[test]
    fn uniform_logprob() {
        let p = TabularPolicy::zeros(small_vocab(), Order::Bigram);
        let lp = p.logprob(&["a"], &["b", "c", "a"]).unwrap();
        assert!((lp + 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit_approaches_zero() {
        let mut p = TabularPolicy::zeros(small_vocab(), Order::Bigram);
        let a = p.vocab().id("a").unwrap();
        let b = p.vocab().id("b").unwrap();
        let mut last = f64::NEG_INFINITY;
        for logit in [1.0, 5.0, 10.0, 20.0, 40.0] {
            p.set(
                ParamKey {
                    row: RowKey::Bigram(a),
                    col: b,
                },
                logit,
            );
            let lp = p.logprob(&["a"], &["b"]).unwrap();
            assert!(lp < 0.0 && lp > last);
            last = lp;
        }
        assert!(last > -1e-15);
    }

    #[test]
    fn rows_are_stochastic() {
        for order in [Order::Bigram, Order::Trigram, Order::PromptConditioned] {
            let p = TabularPolicy::random(small_vocab(), order, 3.0, 4);
            for a in 0..5 {
                for b in 0..5 {
                    let ctx = Ctx {
                        prev: b,
                        pair: (order != Order::Bigram).then_some((a, b)),
                    };
                    let s: f64 = p.log_probs(ctx).iter().map(|l| l.exp()).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = TabularPolicy::random(small_vocab(), Order::Trigram, 2.0, 9);
        let ck = p.to_checkpoint("abc", 4);
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(TabularPolicy::from_checkpoint(&back).unwrap(), p);
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.seed, 4);
    }

    #[test]
    fn pieces_concatenate_to_canonical_json() {
        let d = build_dataset(
            &SynthConfig {
                n: 20,
                seed: 2,
                corrupt: 0.0,
            },
            &default_templates(),
            &ToolLibrary::default_library(),
        )
        .unwrap();
        for r in &d.train {
            let plan = parse_plan_bounded(&r.plan_text(), 64).unwrap();
            assert_eq!(
                plan_pieces(&plan).concat(),
                crate::plan::serialize_plan(&plan)
            );
        }
    }

    #[test]
    fn compile_stages() {
        let d = build_dataset(
            &SynthConfig {
                n: 20,
                seed: 2,
                corrupt: 0.0,
            },
            &default_templates(),
            &ToolLibrary::default_library(),
        )
        .unwrap();
        let latent = LatentVocab::default();
        let r = &d.train[0];
        let c0 = compile_record(r, 0, &latent).unwrap();
        assert_eq!(c0.stage_b, 0);
        assert!(c0
            .prefix_tokens
            .iter()
            .all(|t| latent.classify(t).is_none()));
        let full = compile_record(r, 99, &latent).unwrap();
        assert_eq!(full.stage_b, full.blocks);
        assert_eq!(full.prefix_tokens.len(), 2 + 3 * full.blocks);
        assert_eq!(full.section_mask.len(), full.full_tokens().len());
        assert_eq!(
            full.section_mask.count(Section::Json),
            full.json_target.len()
        );
        let wire = serde_json::to_value(&full).unwrap();
        assert_eq!(wire["B"], full.blocks);
        assert_eq!(wire["section_mask"][0], "PROMPT");
    }

    #[test]
    fn zero_lr_leaves_policy_unchanged() {
        let d = build_dataset(
            &SynthConfig {
                n: 20,
                seed: 2,
                corrupt: 0.0,
            },
            &default_templates(),
            &ToolLibrary::default_library(),
        )
        .unwrap();
        let rec = compile_record(&d.train[0], 1, &LatentVocab::default()).unwrap();
        let vocab = Vocab::new(rec.full_tokens());
        let mut p = TabularPolicy::random(vocab, Order::Bigram, 1.0, 1);
        let before = p.clone();
        p.ce_step(&rec, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decode_split_and_truncation() {
        let d = Decoded {
            tokens: ["<THOUGHT>", "x", "</THOUGHT>", "[1", ",2", "]", "<EOS>"]
                .map(String::from)
                .to_vec(),
            truncated: false,
        };
        assert_eq!(
            d.split(),
            ("<THOUGHT> x </THOUGHT>".to_string(), "[1,2]".to_string())
        );
        let p = TabularPolicy::zeros(small_vocab(), Order::Bigram);
        let out = p.greedy_decode(&["a"], 4).unwrap();
        // All logits tie, so the smallest token wins every time.
        assert_eq!(out.tokens, vec!["<BOS>"; 4]);
        assert!(out.truncated);
        assert_eq!(out, p.greedy_decode(&["a"], 4).unwrap());
    }
}
