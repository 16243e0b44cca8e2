//! Three-tier rule filter for synthesized samples and model output.
//!
//! Tiers run in order (format, schema, logic) and the first failure wins.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::plan::{parse_plan, DatasetRecord, Plan, ToolLibrary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tier {
    Format,
    Schema,
    Logic,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Format => "FORMAT",
            Tier::Schema => "SCHEMA",
            Tier::Logic => "LOGIC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReasonCode {
    Unparsable,
    UnknownTool,
    MissingParam,
    BadEnum,
    UnresolvedRef,
    Exclusivity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reason {
    pub code: ReasonCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<Reason>,
}

impl FilterVerdict {
    pub fn pass() -> Self {
        FilterVerdict {
            pass: true,
            tier: None,
            reason: None,
        }
    }

    pub fn fail(tier: Tier, code: ReasonCode, message: impl Into<String>) -> Self {
        FilterVerdict {
            pass: false,
            tier: Some(tier),
            reason: Some(Reason {
                code,
                message: message.into(),
            }),
        }
    }

    pub fn code(&self) -> Option<ReasonCode> {
        self.reason.as_ref().map(|r| r.code)
    }
}

/// Format tier on raw text. Returns the parsed plan on success.
pub fn check_format(raw: &str, library: &ToolLibrary) -> (FilterVerdict, Option<Plan>) {
    match parse_plan(raw, library) {
        Ok(plan) => (FilterVerdict::pass(), Some(plan)),
        Err(e) => (
            FilterVerdict::fail(Tier::Format, ReasonCode::Unparsable, e.to_string()),
            None,
        ),
    }
}

pub fn check_schema(plan: &Plan, library: &ToolLibrary) -> FilterVerdict {
    for (k, intent) in plan.intents.iter().enumerate() {
        let Some(spec) = library.get(&intent.tool) else {
            return FilterVerdict::fail(
                Tier::Schema,
                ReasonCode::UnknownTool,
                format!("intent {k}: unknown tool '{}'", intent.tool),
            );
        };
        if let Some(missing) = spec
            .required_params
            .iter()
            .find(|p| intent.param(p).is_none())
        {
            return FilterVerdict::fail(
                Tier::Schema,
                ReasonCode::MissingParam,
                format!("intent {k}: '{}' missing required '{missing}'", spec.name),
            );
        }
        for (param, admissible) in &spec.enum_params {
            if let Some(value) = intent.param(param) {
                let wire = value.to_wire();
                if !admissible.contains(&wire) {
                    return FilterVerdict::fail(
                        Tier::Schema,
                        ReasonCode::BadEnum,
                        format!("intent {k}: '{param}' = '{wire}' not admissible"),
                    );
                }
            }
        }
    }
    FilterVerdict::pass()
}

/// Logic tier: references resolve to earlier producers; exclusivity bounds hold.
///
/// Expects a plan that already passed the schema tier; unknown tools are
/// treated as producing nothing and belonging to no class.
pub fn check_logic(plan: &Plan, library: &ToolLibrary) -> FilterVerdict {
    let mut produced: Vec<&str> = Vec::new();
    for (k, intent) in plan.intents.iter().enumerate() {
        for (param, value) in &intent.params.0 {
            if let Some(label) = value.as_ref_label() {
                if !produced.contains(&label) {
                    return FilterVerdict::fail(
                        Tier::Logic,
                        ReasonCode::UnresolvedRef,
                        format!(
                            "intent {k}: '{param}' references '{label}' with no earlier producer"
                        ),
                    );
                }
            }
        }
        if let Some(spec) = library.get(&intent.tool) {
            produced.extend(spec.produces.iter().map(String::as_str));
        }
    }

    let bounds = library.exclusivity_bounds();
    let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
    for intent in &plan.intents {
        let class = library
            .get(&intent.tool)
            .and_then(|s| s.exclusivity.as_ref())
            .map(|ex| ex.class.as_str());
        if let Some(class) = class {
            let c = counts.entry(class).or_default();
            *c += 1;
            if *c > bounds[class] {
                return FilterVerdict::fail(
                    Tier::Logic,
                    ReasonCode::Exclusivity,
                    format!("more than {} '{class}' intents", bounds[class]),
                );
            }
        }
    }
    FilterVerdict::pass()
}

/// All three tiers on raw plan text.
pub fn check_plan_text(raw: &str, library: &ToolLibrary) -> FilterVerdict {
    let (verdict, plan) = check_format(raw, library);
    let Some(plan) = plan else {
        return verdict;
    };
    let schema = check_schema(&plan, library);
    if !schema.pass {
        return schema;
    }
    check_logic(&plan, library)
}

pub fn check_record(record: &DatasetRecord, library: &ToolLibrary) -> FilterVerdict {
    check_plan_text(&record.plan_text(), library)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedRecord {
    #[serde(flatten)]
    pub record: DatasetRecord,
    pub verdict: FilterVerdict,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<DatasetRecord>,
    pub rejected: Vec<RejectedRecord>,
    pub removal_rate: f64,
}

impl FilterOutcome {
    pub fn rejected_by_tier(&self) -> BTreeMap<Tier, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rejected {
            if let Some(t) = r.verdict.tier {
                *out.entry(t).or_default() += 1;
            }
        }
        out
    }
}

/// Order-preserving partition of `records` into kept and rejected.
pub fn filter_dataset(records: Vec<DatasetRecord>, library: &ToolLibrary) -> FilterOutcome {
    let total = records.len();
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for record in records {
        let verdict = check_record(&record, library);
        if verdict.pass {
            kept.push(record);
        } else {
            rejected.push(RejectedRecord { record, verdict });
        }
    }
    let removal_rate = if total == 0 {
        0.0
    } else {
        rejected.len() as f64 / total as f64
    };
    FilterOutcome {
        kept,
        rejected,
        removal_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{Intent, ParamValue, ToolSpec};
    use proptest::prelude::*;

    fn lib() -> ToolLibrary {
        ToolLibrary::default_library()
    }

    fn ride(dest: &str) -> Intent {
        Intent::new("ride_hail")
            .with("origin", ParamValue::text("airport"))
            .with("dest", ParamValue::text(dest))
    }

    #[test]
    fn format_tier() {
        let (v, _) = check_format("[{\"tool\":", &lib());
        assert_eq!(v.tier, Some(Tier::Format));
        let (v, _) = check_format("[]", &lib());
        assert_eq!(v.tier, Some(Tier::Format));
        let three = Plan::new(vec![
            ride("hotel"),
            Intent::new("scenic_spots").with("city", ParamValue::text("b")),
            Intent::new("weather").with("city", ParamValue::text("b")),
        ]);
        let (v, plan) = check_format(&crate::plan::serialize_plan(&three), &lib());
        assert!(v.pass);
        assert_eq!(plan.unwrap().len(), 3);
    }

    #[test]
    fn schema_tier() {
        let unknown = Plan::new(vec![Intent::new("teleport")]);
        assert_eq!(
            check_schema(&unknown, &lib()).code(),
            Some(ReasonCode::UnknownTool)
        );
        let missing = Plan::new(vec![
            Intent::new("ride_hail").with("origin", ParamValue::text("a"))
        ]);
        assert_eq!(
            check_schema(&missing, &lib()).code(),
            Some(ReasonCode::MissingParam)
        );
        let luxury = Plan::new(vec![ride("hotel").with("class", ParamValue::text("luxury"))]);
        let v = check_schema(&luxury, &lib());
        assert_eq!(
            (v.tier, v.code()),
            (Some(Tier::Schema), Some(ReasonCode::BadEnum))
        );
        let comfort = Plan::new(vec![
            ride("hotel").with("class", ParamValue::text("comfort"))
        ]);
        assert!(check_schema(&comfort, &lib()).pass);
    }

    #[test]
    fn logic_tier() {
        let unresolved = Plan::new(vec![
            Intent::new("hotel_checkin").with("hotel", ParamValue::reference("destination"))
        ]);
        let v = check_logic(&unresolved, &lib());
        assert_eq!(
            (v.tier, v.code()),
            (Some(Tier::Logic), Some(ReasonCode::UnresolvedRef))
        );

        let twice = Plan::new(vec![ride("hotel"), ride("mall")]);
        assert_eq!(
            check_logic(&twice, &lib()).code(),
            Some(ReasonCode::Exclusivity)
        );

        let forward = Plan::new(vec![
            ride("hotel"),
            Intent::new("weather").with("city", ParamValue::text("b")),
            Intent::new("hotel_checkin").with("hotel", ParamValue::reference("destination")),
        ]);
        assert!(check_logic(&forward, &lib()).pass);

        // A reference to a label produced only later does not resolve.
        let backwards = Plan::new(vec![
            Intent::new("hotel_checkin").with("hotel", ParamValue::reference("destination")),
            ride("hotel"),
        ]);
        assert!(!check_logic(&backwards, &lib()).pass);
    }

    #[test]
    fn earliest_tier_wins() {
        // Unknown tool and an unresolved reference: schema is reported.
        let text = r#"[{"params":{"x":"$ref:nothing"},"tool":"teleport"}]"#;
        assert_eq!(check_plan_text(text, &lib()).tier, Some(Tier::Schema));
    }

    fn record(id: &str, plan_text: &str) -> DatasetRecord {
        let mut r = DatasetRecord::new(
            id,
            crate::synth::sample_context_for_tests(),
            String::new(),
            &Plan::new(vec![]),
        );
        r.plan = serde_json::Value::String(plan_text.to_string());
        r
    }

    #[test]
    fn dataset_partition_and_idempotence() {
        let good = crate::plan::serialize_plan(&Plan::new(vec![ride("hotel")]));
        let mut records: Vec<DatasetRecord> =
            (0..7).map(|i| record(&format!("ok{i}"), &good)).collect();
        records.insert(2, record("fmt", "[{"));
        records.insert(5, record("schema", r#"[{"params":{},"tool":"teleport"}]"#));
        records.push(record(
            "logic",
            &crate::plan::serialize_plan(&Plan::new(vec![ride("a"), ride("b")])),
        ));
        let out = filter_dataset(records, &lib());
        assert_eq!(out.removal_rate, 0.3);
        let tiers: Vec<(String, Tier)> = out
            .rejected
            .iter()
            .map(|r| (r.record.id.clone(), r.verdict.tier.unwrap()))
            .collect();
        assert_eq!(
            tiers,
            vec![
                ("fmt".to_string(), Tier::Format),
                ("schema".to_string(), Tier::Schema),
                ("logic".to_string(), Tier::Logic)
            ]
        );
        let ids: Vec<&str> = out.kept.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["ok0", "ok1", "ok2", "ok3", "ok4", "ok5", "ok6"]);
        let again = filter_dataset(out.kept.clone(), &lib());
        assert_eq!(again.removal_rate, 0.0);
        assert_eq!(again.kept, out.kept);
    }

    #[test]
    fn rejected_record_carries_verdict_inline() {
        let r = RejectedRecord {
            record: record("x", "[]"),
            verdict: FilterVerdict::fail(Tier::Format, ReasonCode::Unparsable, "empty"),
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["id"], "x");
        assert_eq!(v["verdict"]["tier"], "FORMAT");
        assert_eq!(v["verdict"]["reason"]["code"], "UNPARSABLE");
    }

    // Brute-force logic oracle over a five-tool library: a plan is accepted
    // iff some assignment of each reference to a strictly earlier position
    // lands on a producer of its label, and no class exceeds its bound when
    // counted over every subset of positions.
    fn oracle_library() -> ToolLibrary {
        ToolLibrary::new(vec![
            ToolSpec::new("p").produces(&["x"]).exclusive("travel", 1),
            ToolSpec::new("q").produces(&["y"]),
            ToolSpec::new("r")
                .produces(&["x", "y"])
                .exclusive("travel", 1),
            ToolSpec::new("s"),
            ToolSpec::new("t").exclusive("meal", 2),
        ])
        .unwrap()
    }

    fn oracle_accepts(plan: &Plan, lib: &ToolLibrary) -> bool {
        let n = plan.len();
        for (k, intent) in plan.intents.iter().enumerate() {
            for value in intent.params.0.values() {
                if let Some(label) = value.as_ref_label() {
                    let resolvable = (0..n).any(|j| {
                        j < k
                            && lib
                                .get(&plan.intents[j].tool)
                                .unwrap()
                                .produces
                                .contains(label)
                    });
                    if !resolvable {
                        return false;
                    }
                }
            }
        }
        for mask in 0u32..(1 << n) {
            let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let classes: Vec<Option<&str>> = members
                .iter()
                .map(|&i| {
                    lib.get(&plan.intents[i].tool)
                        .unwrap()
                        .exclusivity
                        .as_ref()
                        .map(|e| e.class.as_str())
                })
                .collect();
            if let Some(Some(first)) = classes.first() {
                if classes.iter().all(|c| *c == Some(*first)) {
                    let bound = lib.exclusivity_bounds()[first];
                    if members.len() as u32 > bound {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn oracle_intents() -> Vec<Intent> {
        let mut out = Vec::new();
        for tool in ["p", "q", "r", "s", "t"] {
            out.push(Intent::new(tool));
            for label in ["x", "y", "z"] {
                out.push(Intent::new(tool).with("arg", ParamValue::reference(label)));
            }
        }
        out
    }

    #[test]
    fn logic_agrees_with_brute_force_exhaustively() {
        let lib = oracle_library();
        let alphabet = oracle_intents();
        let mut plans: Vec<Vec<Intent>> = vec![vec![]];
        let mut checked = 0;
        for _ in 0..4 {
            plans = plans
                .into_iter()
                .flat_map(|p| {
                    alphabet.iter().map(move |i| {
                        let mut q = p.clone();
                        q.push(i.clone());
                        q
                    })
                })
                .collect();
            for p in &plans {
                let plan = Plan::new(p.clone());
                assert_eq!(
                    check_logic(&plan, &lib).pass,
                    oracle_accepts(&plan, &lib),
                    "{plan:?}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 20 + 400 + 8000 + 160_000);
    }

    fn arb_plan() -> impl Strategy<Value = Plan> {
        proptest::collection::vec(proptest::sample::select(oracle_intents()), 1..=4)
            .prop_map(Plan::new)
    }

    proptest! {
        #[test]
        fn filtering_is_deterministic(plan in arb_plan()) {
            let text = crate::plan::serialize_plan(&plan);
            prop_assert_eq!(check_plan_text(&text, &lib()), check_plan_text(&text, &lib()));
        }
    }
}
