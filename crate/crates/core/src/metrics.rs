//! Offline evaluation: Acc@1, NDCG@k, normalized edit similarity and the
//! latent-valid rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::filter::check_plan_text;
use crate::plan::{parse_plan, DatasetRecord, Intent, Plan, ToolLibrary};
use crate::scaffold::{tokenize, validate_latent_prefix, DiagnosticResult, LatentVocab};

/// Costs of the weighted edit distance between intent sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditCosts {
    pub insert: f64,
    pub delete: f64,
    pub tool_substitution: f64,
    /// Same tool, any parameter differing. Charged once per intent.
    pub param_substitution: f64,
}

impl Default for EditCosts {
    fn default() -> Self {
        EditCosts {
            insert: 1.0,
            delete: 1.0,
            tool_substitution: 1.0,
            param_substitution: 0.3,
        }
    }
}

impl EditCosts {
    pub fn is_valid(&self) -> bool {
        [
            self.insert,
            self.delete,
            self.tool_substitution,
            self.param_substitution,
        ]
        .iter()
        .all(|&c| c > 0.0)
            && self.param_substitution <= self.tool_substitution
    }

    pub fn substitution(&self, a: &Intent, b: &Intent) -> f64 {
        if a == b {
            0.0
        } else if a.tool == b.tool {
            self.param_substitution
        } else {
            self.tool_substitution
        }
    }
}

/// Weighted Levenshtein distance turning `pred` into `truth`.
pub fn edit_distance(pred: &[Intent], truth: &[Intent], costs: &EditCosts) -> f64 {
    let m = truth.len();
    let mut prev: Vec<f64> = (0..=m).map(|j| j as f64 * costs.insert).collect();
    let mut cur = vec![0.0; m + 1];
    for (i, p) in pred.iter().enumerate() {
        cur[0] = (i + 1) as f64 * costs.delete;
        for (j, t) in truth.iter().enumerate() {
            let sub = prev[j] + costs.substitution(p, t);
            let del = prev[j + 1] + costs.delete;
            let ins = cur[j] + costs.insert;
            cur[j + 1] = sub.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Normalized edit similarity, clamped to [0, 1].
pub fn nes(pred: &Plan, truth: &Plan, costs: &EditCosts) -> f64 {
    let denom = pred.len().max(truth.len());
    if denom == 0 {
        return 1.0;
    }
    let d = edit_distance(&pred.intents, &truth.intents, costs);
    (1.0 - d / denom as f64).clamp(0.0, 1.0)
}

/// First-intent accuracy. Tool-level unless `strict`, which also compares params.
pub fn acc_at_1(pred: &Plan, truth: &Plan, strict: bool) -> f64 {
    match (pred.intents.first(), truth.intents.first()) {
        (Some(p), Some(t)) if p.tool == t.tool && (!strict || p.params == t.params) => 1.0,
        _ => 0.0,
    }
}

/// Binary relevance per predicted position: a tool is relevant while an
/// unconsumed copy remains in the truth multiset.
pub fn relevance(pred: &Plan, truth: &Plan) -> Vec<bool> {
    let mut remaining: BTreeMap<&str, usize> = BTreeMap::new();
    for t in truth.tools() {
        *remaining.entry(t).or_default() += 1;
    }
    pred.tools()
        .map(|t| match remaining.get_mut(t) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .collect()
}

fn discount(i: usize) -> f64 {
    1.0 / ((i + 2) as f64).log2()
}

/// NDCG@k with binary relevance; the ideal ranking places `min(k, |truth|)`
/// relevant items first.
pub fn ndcg_at_k(pred: &Plan, truth: &Plan, k: usize) -> f64 {
    let rel = relevance(pred, truth);
    let dcg: f64 = rel
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..k.min(truth.len())).map(discount).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Fraction of valid diagnostics; `None` for an empty list.
pub fn latent_valid_rate(diagnostics: &[DiagnosticResult]) -> Option<f64> {
    if diagnostics.is_empty() {
        return None;
    }
    let valid = diagnostics.iter().filter(|d| d.valid).count();
    Some(valid as f64 / diagnostics.len() as f64)
}

/// One model prediction: the emitted plan and, when available, the emitted
/// reasoning prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub plan: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl PredictionRecord {
    pub fn plan_text(&self) -> String {
        match &self.plan {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

/// Scores reserved for an external judge; never computed here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub flow: Option<f64>,
    pub logic: Option<f64>,
    pub st: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc1: f64,
    pub ndcg3: f64,
    pub nes_mean: f64,
    pub latent_valid: Option<f64>,
    pub filter_pass_rate: f64,
    pub n: usize,
    pub missing_predictions: usize,
    pub judge: JudgeScores,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub costs: EditCosts,
    pub strict_acc: bool,
    pub vocab: LatentVocab,
}

/// Latent diagnostic for one prediction, against the length of its own plan.
pub fn diagnose_prediction(
    pred: &PredictionRecord,
    library: &ToolLibrary,
    vocab: &LatentVocab,
) -> Option<DiagnosticResult> {
    let cot = pred.cot.as_ref()?;
    let plan_len = parse_plan(&pred.plan_text(), library).map_or(0, |p| p.len());
    Some(validate_latent_prefix(&tokenize(cot), plan_len, vocab))
}

/// Scores predictions against truth records matched by id. Predictions that
/// fail to parse count as empty plans; truth records without a prediction
/// score zero.
pub fn evaluate(
    preds: &[PredictionRecord],
    truth: &[DatasetRecord],
    library: &ToolLibrary,
    opts: &EvalOptions,
) -> EvalReport {
    let by_id: BTreeMap<&str, &PredictionRecord> =
        preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let empty = Plan::new(Vec::new());
    let (mut acc, mut ndcg, mut nes_sum, mut passed) = (0.0, 0.0, 0.0, 0usize);
    let mut missing = 0;
    let mut diagnostics = Vec::new();
    let mut n = 0;
    for t in truth {
        let Ok(truth_plan) = parse_plan(&t.plan_text(), library) else {
            continue;
        };
        n += 1;
        let Some(p) = by_id.get(t.id.as_str()) else {
            missing += 1;
            continue;
        };
        let text = p.plan_text();
        let pred_plan = parse_plan(&text, library).unwrap_or_else(|_| empty.clone());
        if check_plan_text(&text, library).pass {
            passed += 1;
        }
        acc += acc_at_1(&pred_plan, &truth_plan, opts.strict_acc);
        ndcg += ndcg_at_k(&pred_plan, &truth_plan, 3);
        nes_sum += nes(&pred_plan, &truth_plan, &opts.costs);
        if let Some(d) = diagnose_prediction(p, library, &opts.vocab) {
            diagnostics.push(d);
        }
    }
    let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    EvalReport {
        acc1: mean(acc),
        ndcg3: mean(ndcg),
        nes_mean: mean(nes_sum),
        latent_valid: latent_valid_rate(&diagnostics),
        filter_pass_rate: mean(passed as f64),
        n,
        missing_predictions: missing,
        judge: JudgeScores::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::ParamValue;
    use crate::scaffold::DiagnosticCode;
    use proptest::prelude::*;

    fn it(tool: &str, p: &str) -> Intent {
        Intent::new(tool).with("p", ParamValue::text(p))
    }

    fn plan(items: &[(&str, &str)]) -> Plan {
        Plan::new(items.iter().map(|(t, p)| it(t, p)).collect())
    }

    #[test]
    fn nes_examples() {
        let c = EditCosts::default();
        let a = plan(&[("A", "1"), ("B", "1")]);
        assert_eq!(nes(&a, &a, &c), 1.0);
        let b = plan(&[("A", "2"), ("B", "1")]);
        assert!((edit_distance(&a.intents, &b.intents, &c) - 0.3).abs() < 1e-12);
        assert!((nes(&a, &b, &c) - 0.85).abs() < 1e-12);
        let empty = Plan::new(vec![]);
        assert_eq!(nes(&empty, &plan(&[("A", "1")]), &c), 0.0);
    }

    #[test]
    fn acc_examples() {
        let t = plan(&[("A", "1"), ("B", "1")]);
        let p = plan(&[("A", "2")]);
        assert_eq!(acc_at_1(&p, &t, false), 1.0);
        assert_eq!(acc_at_1(&p, &t, true), 0.0);
        assert_eq!(acc_at_1(&Plan::new(vec![]), &t, false), 0.0);
        assert_eq!(acc_at_1(&t, &t, true), 1.0);
    }

    #[test]
    fn ndcg_examples() {
        let t = plan(&[("A", "1"), ("B", "1"), ("C", "1")]);
        assert!((ndcg_at_k(&t, &t, 3) - 1.0).abs() < 1e-12);
        let single = plan(&[("C", "1")]);
        let late = plan(&[("X", "1"), ("Y", "1"), ("C", "1")]);
        let expected = (1.0 / 4f64.log2()) / (1.0 / 2f64.log2());
        assert!((ndcg_at_k(&late, &single, 3) - expected).abs() < 1e-12);
        assert!((expected - 0.5).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&plan(&[("X", "1")]), &t, 3), 0.0);
    }

    #[test]
    fn relevance_consumes_multiset() {
        let t = plan(&[("A", "1")]);
        let p = plan(&[("A", "1"), ("A", "2")]);
        assert_eq!(relevance(&p, &t), vec![true, false]);
    }

    #[test]
    fn latent_rate() {
        let ok = DiagnosticResult {
            valid: true,
            code: None,
            step_count: Some(2),
        };
        let bad = DiagnosticResult {
            valid: false,
            code: Some(DiagnosticCode::ResidualTag),
            step_count: None,
        };
        assert_eq!(latent_valid_rate(&[ok, ok]), Some(1.0));
        assert_eq!(latent_valid_rate(&[bad, bad]), Some(0.0));
        assert_eq!(latent_valid_rate(&[ok, bad]), Some(0.5));
        assert_eq!(latent_valid_rate(&[]), None);
    }

    fn arb_plan(max: usize) -> impl Strategy<Value = Plan> {
        let intent =
            (0usize..3, 0usize..2).prop_map(|(t, p)| it(["A", "B", "C"][t], ["1", "2"][p]));
        proptest::collection::vec(intent, 0..=max).prop_map(Plan::new)
    }

    proptest! {
        #[test]
        fn nes_symmetric_and_bounded(a in arb_plan(5), b in arb_plan(5)) {
            let c = EditCosts::default();
            let ab = nes(&a, &b, &c);
            prop_assert!((ab - nes(&b, &a, &c)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }

        #[test]
        fn moving_relevant_item_earlier_never_hurts(p in arb_plan(5), t in arb_plan(4)) {
            let rel = relevance(&p, &t);
            let base = ndcg_at_k(&p, &t, 3);
            for j in 0..p.len() {
                for i in 0..j {
                    if rel[j] && !rel[i] {
                        let mut moved = p.clone();
                        let item = moved.intents.remove(j);
                        moved.intents.insert(i, item);
                        prop_assert!(ndcg_at_k(&moved, &t, 3) + 1e-12 >= base);
                    }
                }
            }
        }
    }
}
