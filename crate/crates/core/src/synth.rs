//! Deterministic teacher simulator: contexts, structured traces, plans and
//! counterfactual anchors from a small scenario template library.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{check_plan_text, Tier};
use crate::plan::{
    is_weekend, serialize_plan, ContextBundle, DatasetRecord, GeoPoint, Intent, ParamValue, Plan,
    PlantedViolation, SpatioTemporalContext, ToolLibrary,
};
use crate::scaffold::{BlockKind, CotBlock, CotParseError, StructuredCot};
use crate::scdpo::{pair_records, CounterfactualAnchor, PairRecord, ScdpoError};

pub const LIBRARY_ID: &str = "default";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("no template matches the context")]
    NoTemplateMatch,
    #[error("perturbation needs at least one dimension")]
    EmptyPerturbation,
    #[error("dataset size {0} is below the minimum of 10")]
    TooSmall(usize),
    #[error("corruption probability {0} outside [0, 1]")]
    BadCorruption(f64),
    #[error("template error: {0}")]
    Template(String),
    #[error("generated trace is malformed: {0}")]
    Cot(#[from] CotParseError),
    #[error("generated record {id} fails the filter: {reason}")]
    Invalid { id: String, reason: String },
    #[error(transparent)]
    Pair(#[from] ScdpoError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct City {
    pub name: &'static str,
    pub lat: (f64, f64),
    pub lon: (f64, f64),
}

impl City {
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lat.0..=self.lat.1).contains(&p.lat) && (self.lon.0..=self.lon.1).contains(&p.lon)
    }

    fn sample(&self, rng: &mut impl Rng) -> GeoPoint {
        let round = |x: f64| (x * 1e5).round() / 1e5;
        GeoPoint {
            lat: round(rng.gen_range(self.lat.0..=self.lat.1)),
            lon: round(rng.gen_range(self.lon.0..=self.lon.1)),
        }
    }
}

pub const CITIES: [City; 4] = [
    City {
        name: "Beijing",
        lat: (39.75, 40.10),
        lon: (116.20, 116.60),
    },
    City {
        name: "Shanghai",
        lat: (31.10, 31.35),
        lon: (121.35, 121.60),
    },
    City {
        name: "Hangzhou",
        lat: (30.18, 30.35),
        lon: (120.05, 120.25),
    },
    City {
        name: "Chengdu",
        lat: (30.55, 30.75),
        lon: (103.95, 104.15),
    },
];

pub fn city(name: &str) -> Option<&'static City> {
    CITIES.iter().find(|c| c.name == name)
}

const SEGMENTS: [&str; 4] = ["commuter", "traveler", "family", "foodie"];
const HISTORY_TOOLS: [&str; 6] = [
    "ride_hail",
    "food_nearby",
    "weather",
    "hotel_checkin",
    "transit_route",
    "coffee_nearby",
];
const HOLIDAY_RATE: f64 = 0.2;
const HOME_RATE: f64 = 0.55;

/// splitmix64 finalizer, used to derive independent per-item seeds.
pub fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_time(rng: &mut impl Rng) -> NaiveDateTime {
    let start = NaiveDate::from_ymd_opt(2026, 1, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time");
    let day = rng.gen_range(0..365);
    let hour = rng.gen_range(0..24);
    let minute = [0, 15, 30, 45][rng.gen_range(0..4)];
    start + Duration::days(day) + Duration::hours(hour) + Duration::minutes(minute)
}

pub fn generate_context(seed: u64) -> ContextBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let home = CITIES.choose(&mut rng).expect("cities nonempty");
    let segment = SEGMENTS.choose(&mut rng).expect("segments nonempty");
    let n_hist = rng.gen_range(1..=3);
    let history = (0..n_hist)
        .map(|_| {
            HISTORY_TOOLS
                .choose(&mut rng)
                .expect("nonempty")
                .to_string()
        })
        .collect();
    let current = if rng.gen_bool(HOME_RATE) {
        home
    } else {
        let others: Vec<&City> = CITIES.iter().filter(|c| c.name != home.name).collect();
        *others.choose(&mut rng).expect("other cities exist")
    };
    let time = random_time(&mut rng);
    let st = SpatioTemporalContext {
        time,
        location: current.sample(&mut rng),
        city: current.name.to_string(),
        is_weekend: is_weekend(&time),
        is_holiday: rng.gen_bool(HOLIDAY_RATE),
    };
    let user = BTreeMap::from([
        ("home_city".to_string(), home.name.to_string()),
        ("segment".to_string(), segment.to_string()),
    ]);
    ContextBundle {
        user,
        history,
        st,
        library: LIBRARY_ID.to_string(),
    }
}

pub fn home_city(ctx: &ContextBundle) -> &str {
    ctx.user.get("home_city").map(String::as_str).unwrap_or("")
}

pub fn is_away(ctx: &ContextBundle) -> bool {
    ctx.st.city != home_city(ctx)
}

pub fn daypart(hour: u32) -> &'static str {
    match hour {
        6..=9 => "morning",
        10..=19 => "day",
        _ => "night",
    }
}

/// One-token digest of the trigger-relevant spatiotemporal state.
pub fn st_summary(ctx: &ContextBundle) -> String {
    format!(
        "st:{}:{}:{}:{}",
        if is_away(ctx) { "away" } else { "home" },
        daypart(ctx.st.time.hour()),
        if ctx.st.is_weekend { "wkend" } else { "wkday" },
        if ctx.st.is_holiday { "hol" } else { "nohol" },
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub away: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holiday: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weekend: Option<bool>,
    /// Half-open hour window `[start, end)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hours: Option<(u32, u32)>,
}

impl Trigger {
    pub fn matches(&self, ctx: &ContextBundle) -> bool {
        let hour = ctx.st.time.hour();
        self.away.is_none_or(|a| a == is_away(ctx))
            && self.holiday.is_none_or(|h| h == ctx.st.is_holiday)
            && self.weekend.is_none_or(|w| w == ctx.st.is_weekend)
            && self.hours.is_none_or(|(s, e)| s <= hour && hour < e)
    }
}

/// One plan step. Parameter rules: `$ref:label` is a reference, `a|b`
/// picks one alternative, `{city}`, `{home_city}` and `{other_city}` are
/// substituted. Step text may also use `{p.<param>}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepTemplate {
    pub tool: String,
    pub params: BTreeMap<String, String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioTemplate {
    pub id: String,
    pub trigger: Trigger,
    pub strategy: String,
    pub steps: Vec<StepTemplate>,
}

pub fn load_templates(json: &str) -> Result<Vec<ScenarioTemplate>, SynthError> {
    let templates: Vec<ScenarioTemplate> =
        serde_json::from_str(json).map_err(|e| SynthError::Template(e.to_string()))?;
    if templates.is_empty() {
        return Err(SynthError::Template("no templates".into()));
    }
    if let Some(t) = templates.iter().find(|t| t.steps.is_empty()) {
        return Err(SynthError::Template(format!(
            "template {} has no steps",
            t.id
        )));
    }
    Ok(templates)
}

pub const DEFAULT_TEMPLATES_JSON: &str = include_str!("../templates/scenarios.json");

pub fn default_templates() -> Vec<ScenarioTemplate> {
    load_templates(DEFAULT_TEMPLATES_JSON).expect("bundled templates are valid")
}

/// The first template, in library order, whose trigger matches.
pub fn match_template<'a>(
    ctx: &ContextBundle,
    templates: &'a [ScenarioTemplate],
) -> Option<&'a ScenarioTemplate> {
    templates.iter().find(|t| t.trigger.matches(ctx))
}

fn context_text(ctx: &ContextBundle) -> String {
    let segment = ctx
        .user
        .get("segment")
        .map(String::as_str)
        .unwrap_or("unknown");
    format!(
        "A {segment} user based in {} is {} in {} on a {} {} at hour {}{} .",
        home_city(ctx),
        if is_away(ctx) { "away" } else { "at home" },
        ctx.st.city,
        if ctx.st.is_weekend {
            "weekend"
        } else {
            "weekday"
        },
        daypart(ctx.st.time.hour()),
        ctx.st.time.hour(),
        if ctx.st.is_holiday {
            " during a holiday"
        } else {
            ""
        },
    )
}

/// Traces and plans for `ctx` from the first matching template.
pub fn simulate_teacher(
    ctx: &ContextBundle,
    templates: &[ScenarioTemplate],
    seed: u64,
) -> Result<(StructuredCot, Plan), SynthError> {
    let template = match_template(ctx, templates).ok_or(SynthError::NoTemplateMatch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others: Vec<&City> = CITIES.iter().filter(|c| c.name != ctx.st.city).collect();
    let other_city = others.choose(&mut rng).map_or("Beijing", |c| c.name);
    let fill = |s: &str| {
        s.replace("{city}", &ctx.st.city)
            .replace("{home_city}", home_city(ctx))
            .replace("{other_city}", other_city)
    };

    let mut intents = Vec::with_capacity(template.steps.len());
    let mut blocks = vec![
        CotBlock::new(BlockKind::Context, context_text(ctx)),
        CotBlock::new(BlockKind::Strategy, fill(&template.strategy)),
    ];
    for (i, step) in template.steps.iter().enumerate() {
        let mut intent = Intent::new(step.tool.clone());
        let mut text = fill(&step.text);
        for (key, rule) in &step.params {
            let value = if let Some(label) = rule.strip_prefix("$ref:") {
                ParamValue::reference(label)
            } else {
                let filled = fill(rule);
                let options: Vec<&str> = filled.split('|').collect();
                ParamValue::text(*options.choose(&mut rng).expect("split is nonempty"))
            };
            text = text.replace(&format!("{{p.{key}}}"), &value.to_wire());
            intent = intent.with(key.clone(), value);
        }
        intents.push(intent);
        blocks.push(CotBlock::new(BlockKind::Step(i + 1), text));
    }
    Ok((StructuredCot::from_blocks(blocks)?, Plan::new(intents)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StDim {
    Time,
    Location,
    City,
    Weekend,
    Holiday,
}

pub const ALL_DIMS: [StDim; 5] = [
    StDim::Time,
    StDim::Location,
    StDim::City,
    StDim::Weekend,
    StDim::Holiday,
];

/// Changes the chosen spatiotemporal fields and keeps derived ones
/// consistent: a new time re-derives the weekend flag, flipping the weekend
/// flag moves the date, and a new city brings a location inside it.
pub fn perturb_context(
    x: &ContextBundle,
    dims: &[StDim],
    seed: u64,
) -> Result<ContextBundle, SynthError> {
    if dims.is_empty() {
        return Err(SynthError::EmptyPerturbation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    let st = &mut out.st;
    if dims.contains(&StDim::Time) {
        let mut t = random_time(&mut rng);
        while t == x.st.time {
            t = random_time(&mut rng);
        }
        st.time = t;
        st.is_weekend = is_weekend(&t);
    }
    if dims.contains(&StDim::Weekend) && st.is_weekend == x.st.is_weekend {
        let flips: Vec<i64> = (1..=6)
            .filter(|d| is_weekend(&(st.time + Duration::days(*d))) != st.is_weekend)
            .collect();
        let d = *flips
            .choose(&mut rng)
            .expect("a week always contains both kinds of day");
        st.time += Duration::days(d);
        st.is_weekend = !st.is_weekend;
    }
    if dims.contains(&StDim::City) {
        let others: Vec<&City> = CITIES.iter().filter(|c| c.name != x.st.city).collect();
        let c = others.choose(&mut rng).expect("other cities exist");
        st.city = c.name.to_string();
        st.location = c.sample(&mut rng);
    }
    if dims.contains(&StDim::Location) {
        let before = st.location;
        while st.location == before || st.location == x.st.location {
            st.location = match city(&st.city) {
                Some(c) => c.sample(&mut rng),
                None => GeoPoint {
                    lat: (before.lat + rng.gen_range(-0.01..0.01)).clamp(-90.0, 90.0),
                    lon: (before.lon + rng.gen_range(-0.01..0.01)).clamp(-180.0, 180.0),
                },
            };
        }
    }
    if dims.contains(&StDim::Holiday) {
        st.is_holiday = !x.st.is_holiday;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    /// Probability that a train record carries a planted violation.
    pub corrupt: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 1000,
            seed: 7,
            corrupt: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
    pub anchors: Vec<CounterfactualAnchor>,
    pub pairs: Vec<PairRecord>,
}

const STREAM_CONTEXT: u64 = 1;
const STREAM_TEACHER: u64 = 2;
const STREAM_ANCHOR: u64 = 3;
const STREAM_CORRUPT: u64 = 4;
const ANCHOR_ATTEMPTS: usize = 32;

fn teacher_record(
    id: String,
    ctx: ContextBundle,
    templates: &[ScenarioTemplate],
    seed: u64,
) -> Result<(DatasetRecord, Plan), SynthError> {
    let (cot, plan) = simulate_teacher(&ctx, templates, seed)?;
    Ok((
        DatasetRecord::new(id, ctx, cot.source().to_string(), &plan),
        plan,
    ))
}

/// A counterfactual partner for `x` whose matching template differs.
fn find_anchor(
    id: String,
    x: &ContextBundle,
    y_x: &Plan,
    templates: &[ScenarioTemplate],
    seed: u64,
) -> Result<Option<CounterfactualAnchor>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = match_template(x, templates).map(|t| t.id.as_str());
    for attempt in 0..ANCHOR_ATTEMPTS {
        let k = rng.gen_range(1..=2);
        let dims: Vec<StDim> = ALL_DIMS.choose_multiple(&mut rng, k).copied().collect();
        let x_prime = perturb_context(x, &dims, rng.gen())?;
        if match_template(&x_prime, templates).map(|t| t.id.as_str()) == base {
            continue;
        }
        let (_, y_xprime) = simulate_teacher(&x_prime, templates, mix(seed, 0, attempt as u64))?;
        if &y_xprime != y_x {
            return Ok(Some(CounterfactualAnchor {
                id,
                x: x.clone(),
                x_prime,
                y_x: y_x.clone(),
                y_xprime,
            }));
        }
    }
    Ok(None)
}

/// Replaces the plan of `record` with one that fails at a chosen tier.
pub fn plant_violation(record: &mut DatasetRecord, plan: &Plan, rng: &mut impl Rng) {
    let tier = [Tier::Format, Tier::Schema, Tier::Logic][rng.gen_range(0..3)];
    let mut intents = plan.intents.clone();
    let (code, value) = match tier {
        Tier::Format => {
            if rng.gen_bool(0.5) {
                let text = serialize_plan(plan);
                let cut = rng.gen_range(1..text.len() - 1);
                (
                    "truncated_json",
                    serde_json::Value::String(text[..cut].to_string()),
                )
            } else {
                ("empty_plan", serde_json::json!([]))
            }
        }
        Tier::Schema => {
            let k = rng.gen_range(0..intents.len());
            let with_enum = ToolLibrary::default_library()
                .get(&intents[k].tool)
                .and_then(|s| s.enum_params.keys().next().cloned());
            let code = match (rng.gen_range(0..3), with_enum) {
                (0, _) => {
                    intents[k].tool = "teleport".into();
                    "unknown_tool"
                }
                (1, Some(param)) => {
                    intents[k].params.0.insert(param, ParamValue::text("bogus"));
                    "bad_enum"
                }
                _ => {
                    let spec = ToolLibrary::default_library();
                    let req = spec
                        .get(&intents[k].tool)
                        .and_then(|s| s.required_params.iter().next().cloned())
                        .expect("every default tool has a required param");
                    intents[k].params.0.remove(&req);
                    "missing_param"
                }
            };
            (
                code,
                serde_json::to_value(Plan::new(intents)).expect("serializable"),
            )
        }
        Tier::Logic => {
            let travel = intents
                .iter()
                .position(|i| i.tool == "ride_hail" || i.tool == "transit_route");
            let code = match travel {
                Some(t) if rng.gen_bool(0.5) => {
                    let dup = intents[t].clone();
                    intents.push(dup);
                    "duplicate_travel"
                }
                _ => {
                    intents.insert(
                        0,
                        Intent::new("hotel_checkin")
                            .with("hotel", ParamValue::reference("destination")),
                    );
                    "unresolved_ref"
                }
            };
            (
                code,
                serde_json::to_value(Plan::new(intents)).expect("serializable"),
            )
        }
    };
    record.plan = value;
    record.planted = Some(PlantedViolation {
        tier,
        code: code.to_string(),
    });
}

/// Train/test records plus bidirectional counterfactual pairs.
///
/// The last `max(10, n / 100)` records are held out. Corruption touches
/// train records only; clean records are checked against the filter.
pub fn build_dataset(
    cfg: &SynthConfig,
    templates: &[ScenarioTemplate],
    library: &ToolLibrary,
) -> Result<Dataset, SynthError> {
    if cfg.n < 10 {
        return Err(SynthError::TooSmall(cfg.n));
    }
    if !(0.0..=1.0).contains(&cfg.corrupt) {
        return Err(SynthError::BadCorruption(cfg.corrupt));
    }
    let n_test = (cfg.n / 100).max(10);
    let n_train = cfg.n - n_test;
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    let mut anchors = Vec::new();
    for i in 0..cfg.n {
        let idx = i as u64;
        let ctx = generate_context(mix(cfg.seed, STREAM_CONTEXT, idx));
        let (mut record, plan) = teacher_record(
            format!("r{i:06}"),
            ctx,
            templates,
            mix(cfg.seed, STREAM_TEACHER, idx),
        )?;
        let verdict = check_plan_text(&record.plan_text(), library);
        if !verdict.pass {
            return Err(SynthError::Invalid {
                id: record.id,
                reason: verdict.reason.map_or_else(String::new, |r| r.message),
            });
        }
        if i >= n_train {
            test.push(record);
            continue;
        }
        if let Some(anchor) = find_anchor(
            format!("a{i:06}"),
            &record.context,
            &plan,
            templates,
            mix(cfg.seed, STREAM_ANCHOR, idx),
        )? {
            anchors.push(anchor);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_CORRUPT, idx));
        if cfg.corrupt > 0.0 && rng.gen_bool(cfg.corrupt) {
            plant_violation(&mut record, &plan, &mut rng);
        }
        train.push(record);
    }
    let pairs = pair_records(&anchors)?;
    Ok(Dataset {
        train,
        test,
        anchors,
        pairs,
    })
}

#[cfg(test)]
pub(crate) fn sample_context_for_tests() -> ContextBundle {
    generate_context(11)
}
