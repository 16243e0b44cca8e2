//! Data model for contexts, tool schemas, intents and plans.
//!
//! Plans travel as JSON arrays of `{"params": {...}, "tool": "..."}` objects.
//! Parameter values are plain strings; a value of the form `$ref:<label>`
//! is a reference to a label produced by an earlier intent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{Datelike, NaiveDateTime, Weekday};
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::filter::Tier;

/// Default upper bound on the number of intents in a plan.
pub const DEFAULT_MAX_PLAN_LEN: usize = 8;

const REF_PREFIX: &str = "$ref:";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("format error at byte {position}: {reason}")]
pub struct FormatError {
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LibraryError {
    #[error("tool library is empty")]
    Empty,
    #[error("tool name must be nonempty")]
    EmptyName,
    #[error("duplicate tool name '{0}'")]
    DuplicateTool(String),
    #[error("tool '{tool}': enum parameter '{param}' is not a declared parameter")]
    UndeclaredEnumParam { tool: String, param: String },
    #[error("tool '{tool}': exclusivity bound must be at least 1")]
    ZeroBound { tool: String },
    #[error("invalid tool library JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ContextError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("context must name a tool library")]
    NoLibrary,
}

/// A parameter value: literal text or a reference to a produced label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamValue {
    Text(String),
    Ref(String),
}

impl ParamValue {
    pub fn text(s: impl Into<String>) -> Self {
        ParamValue::Text(s.into())
    }

    pub fn reference(label: impl Into<String>) -> Self {
        ParamValue::Ref(label.into())
    }

    pub fn as_ref_label(&self) -> Option<&str> {
        match self {
            ParamValue::Ref(label) => Some(label),
            ParamValue::Text(_) => None,
        }
    }

    /// The wire form of the value.
    pub fn to_wire(&self) -> String {
        match self {
            ParamValue::Text(s) => s.clone(),
            ParamValue::Ref(label) => format!("{REF_PREFIX}{label}"),
        }
    }

    pub fn from_wire(s: &str) -> Self {
        match s.strip_prefix(REF_PREFIX) {
            Some(label) => ParamValue::Ref(label.to_string()),
            None => ParamValue::Text(s.to_string()),
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_wire())
    }
}

impl Serialize for ParamValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_wire())
    }
}

impl<'de> Deserialize<'de> for ParamValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(ParamValue::from_wire(&s))
    }
}

/// Parameter map that rejects duplicate keys on deserialization.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Params(pub BTreeMap<String, ParamValue>);

impl<'de> Deserialize<'de> for Params {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ParamsVisitor;

        impl<'de> Visitor<'de> for ParamsVisitor {
            type Value = Params;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object of string parameters")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Params, A::Error> {
                let mut out = BTreeMap::new();
                while let Some((key, value)) = map.next_entry::<String, ParamValue>()? {
                    if out.contains_key(&key) {
                        return Err(de::Error::custom(format!("duplicate parameter '{key}'")));
                    }
                    out.insert(key, value);
                }
                Ok(Params(out))
            }
        }

        deserializer.deserialize_map(ParamsVisitor)
    }
}

/// One parameterized tool invocation.
///
/// Field order matters: it fixes the canonical key order on serialization.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intent {
    #[serde(default)]
    pub params: Params,
    pub tool: String,
}

impl Intent {
    pub fn new(tool: impl Into<String>) -> Self {
        Intent {
            params: Params::default(),
            tool: tool.into(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: ParamValue) -> Self {
        self.params.0.insert(key.into(), value);
        self
    }

    pub fn param(&self, key: &str) -> Option<&ParamValue> {
        self.params.0.get(key)
    }

    /// Canonical single-line JSON of this intent.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("intent serialization is infallible")
    }
}

/// An ordered intent sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Plan {
    pub intents: Vec<Intent>,
}

impl Plan {
    pub fn new(intents: Vec<Intent>) -> Self {
        Plan { intents }
    }

    pub fn len(&self) -> usize {
        self.intents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intents.is_empty()
    }

    pub fn tools(&self) -> impl Iterator<Item = &str> {
        self.intents.iter().map(|i| i.tool.as_str())
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses a plan without checking it against the library schema; only the
/// JSON shape and the plan length bound of `library` are enforced.
pub fn parse_plan(text: &str, library: &ToolLibrary) -> Result<Plan, FormatError> {
    parse_plan_bounded(text, library.max_plan_len())
}

pub fn parse_plan_bounded(text: &str, max_len: usize) -> Result<Plan, FormatError> {
    let plan: Plan = serde_json::from_str(text).map_err(|e| FormatError {
        position: byte_offset(text, e.line(), e.column()),
        reason: e.to_string(),
    })?;
    if plan.is_empty() || plan.len() > max_len {
        return Err(FormatError {
            position: 0,
            reason: format!("plan length {} outside [1, {max_len}]", plan.len()),
        });
    }
    if let Some(i) = plan.intents.iter().position(|i| i.tool.is_empty()) {
        return Err(FormatError {
            position: 0,
            reason: format!("intent {i} has an empty tool name"),
        });
    }
    Ok(plan)
}

/// Canonical form: sorted keys, no insignificant whitespace.
pub fn serialize_plan(plan: &Plan) -> String {
    serde_json::to_string(plan).expect("plan serialization is infallible")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusivity {
    pub class: String,
    pub bound: u32,
}

/// Schema for one tool in the intent library.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub name: String,
    #[serde(default)]
    pub required_params: BTreeSet<String>,
    #[serde(default)]
    pub optional_params: BTreeSet<String>,
    #[serde(default)]
    pub enum_params: BTreeMap<String, BTreeSet<String>>,
    #[serde(default)]
    pub produces: BTreeSet<String>,
    #[serde(default)]
    pub consumes: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusivity: Option<Exclusivity>,
}

impl ToolSpec {
    pub fn new(name: impl Into<String>) -> Self {
        ToolSpec {
            name: name.into(),
            required_params: BTreeSet::new(),
            optional_params: BTreeSet::new(),
            enum_params: BTreeMap::new(),
            produces: BTreeSet::new(),
            consumes: BTreeSet::new(),
            exclusivity: None,
        }
    }

    pub fn required(mut self, params: &[&str]) -> Self {
        self.required_params
            .extend(params.iter().map(|p| p.to_string()));
        self
    }

    pub fn optional(mut self, params: &[&str]) -> Self {
        self.optional_params
            .extend(params.iter().map(|p| p.to_string()));
        self
    }

    pub fn enumerated(mut self, param: &str, values: &[&str]) -> Self {
        self.enum_params.insert(
            param.to_string(),
            values.iter().map(|v| v.to_string()).collect(),
        );
        self
    }

    pub fn produces(mut self, labels: &[&str]) -> Self {
        self.produces.extend(labels.iter().map(|l| l.to_string()));
        self
    }

    pub fn consumes(mut self, labels: &[&str]) -> Self {
        self.consumes.extend(labels.iter().map(|l| l.to_string()));
        self
    }

    pub fn exclusive(mut self, class: &str, bound: u32) -> Self {
        self.exclusivity = Some(Exclusivity {
            class: class.to_string(),
            bound,
        });
        self
    }

    fn validate(&self) -> Result<(), LibraryError> {
        if self.name.is_empty() {
            return Err(LibraryError::EmptyName);
        }
        for param in self.enum_params.keys() {
            if !self.required_params.contains(param) && !self.optional_params.contains(param) {
                return Err(LibraryError::UndeclaredEnumParam {
                    tool: self.name.clone(),
                    param: param.clone(),
                });
            }
        }
        if matches!(&self.exclusivity, Some(ex) if ex.bound == 0) {
            return Err(LibraryError::ZeroBound {
                tool: self.name.clone(),
            });
        }
        Ok(())
    }
}

/// The intent library: a validated set of tool schemas plus the plan length bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolLibrary {
    tools: Vec<ToolSpec>,
    index: BTreeMap<String, usize>,
    max_plan_len: usize,
}

impl ToolLibrary {
    pub fn new(tools: Vec<ToolSpec>) -> Result<Self, LibraryError> {
        if tools.is_empty() {
            return Err(LibraryError::Empty);
        }
        let mut index = BTreeMap::new();
        for (i, tool) in tools.iter().enumerate() {
            tool.validate()?;
            if index.insert(tool.name.clone(), i).is_some() {
                return Err(LibraryError::DuplicateTool(tool.name.clone()));
            }
        }
        Ok(ToolLibrary {
            tools,
            index,
            max_plan_len: DEFAULT_MAX_PLAN_LEN,
        })
    }

    pub fn with_max_plan_len(mut self, max: usize) -> Self {
        self.max_plan_len = max.max(1);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, LibraryError> {
        let tools: Vec<ToolSpec> =
            serde_json::from_str(text).map_err(|e| LibraryError::Json(e.to_string()))?;
        Self::new(tools)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.tools).expect("library serialization is infallible")
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.index.get(name).map(|&i| &self.tools[i])
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.tools
    }

    pub fn max_plan_len(&self) -> usize {
        self.max_plan_len
    }

    /// Effective bound per exclusivity class (the tightest bound declared by any member).
    pub fn exclusivity_bounds(&self) -> BTreeMap<&str, u32> {
        let mut bounds: BTreeMap<&str, u32> = BTreeMap::new();
        for ex in self.tools.iter().filter_map(|t| t.exclusivity.as_ref()) {
            let entry = bounds.entry(ex.class.as_str()).or_insert(ex.bound);
            *entry = (*entry).min(ex.bound);
        }
        bounds
    }

    /// The library the synthesizer plans against.
    pub fn default_library() -> Self {
        let tools = vec![
            ToolSpec::new("ride_hail")
                .required(&["origin", "dest"])
                .optional(&["class"])
                .enumerated("class", &["economy", "comfort"])
                .produces(&["destination"])
                .exclusive("travel", 1),
            ToolSpec::new("transit_route")
                .required(&["dest"])
                .optional(&["mode"])
                .enumerated("mode", &["subway", "bus"])
                .produces(&["destination"])
                .exclusive("travel", 1),
            ToolSpec::new("hotel_checkin")
                .required(&["hotel"])
                .produces(&["hotel"])
                .consumes(&["destination"]),
            ToolSpec::new("food_nearby")
                .required(&["near"])
                .optional(&["cuisine"])
                .enumerated("cuisine", &["local", "fast", "cafe", "fine"])
                .produces(&["restaurant"]),
            ToolSpec::new("reserve_table")
                .required(&["restaurant"])
                .optional(&["party"])
                .enumerated("party", &["solo", "couple", "group"])
                .consumes(&["restaurant"]),
            ToolSpec::new("leisure_nearby")
                .required(&["near"])
                .optional(&["kind"])
                .enumerated("kind", &["park", "mall", "nightlife", "museum"]),
            ToolSpec::new("scenic_spots").required(&["city"]),
            ToolSpec::new("weather")
                .required(&["city"])
                .optional(&["when"])
                .enumerated("when", &["today", "tomorrow"]),
            ToolSpec::new("ticket_booking")
                .required(&["mode", "dest_city"])
                .enumerated("mode", &["train", "flight"])
                .produces(&["departure_hub"]),
            ToolSpec::new("coffee_nearby").required(&["near"]),
        ];
        ToolLibrary::new(tools).expect("default library is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

pub fn is_weekend(time: &NaiveDateTime) -> bool {
    matches!(time.weekday(), Weekday::Sat | Weekday::Sun)
}

/// The spatiotemporal part of a context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalContext {
    pub time: NaiveDateTime,
    pub location: GeoPoint,
    pub city: String,
    pub is_weekend: bool,
    pub is_holiday: bool,
}

impl SpatioTemporalContext {
    pub fn validate(&self) -> Result<(), ContextError> {
        let GeoPoint { lat, lon } = self.location;
        if !(-90.0..=90.0).contains(&lat) {
            return Err(ContextError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(ContextError::Longitude(lon));
        }
        Ok(())
    }
}

/// The full model input: user, history, spatiotemporal state and library id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub user: BTreeMap<String, String>,
    pub history: Vec<String>,
    pub st: SpatioTemporalContext,
    pub library: String,
}

impl ContextBundle {
    pub fn validate(&self) -> Result<(), ContextError> {
        if self.library.is_empty() {
            return Err(ContextError::NoLibrary);
        }
        self.st.validate()
    }
}

/// A violation deliberately planted by the synthesizer, kept for auditing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedViolation {
    pub tier: Tier,
    pub code: String,
}

/// One line of a dataset JSONL file.
///
/// `plan` is kept as raw JSON so that malformed model output (a string that
/// does not parse) can be carried through the filter unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub context: ContextBundle,
    pub cot: String,
    pub plan: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedViolation>,
}

impl DatasetRecord {
    pub fn new(id: impl Into<String>, context: ContextBundle, cot: String, plan: &Plan) -> Self {
        DatasetRecord {
            id: id.into(),
            context,
            cot,
            plan: serde_json::to_value(plan).expect("plan serialization is infallible"),
            planted: None,
        }
    }

    /// The plan as the text a model would have emitted.
    pub fn plan_text(&self) -> String {
        match &self.plan {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lib() -> ToolLibrary {
        ToolLibrary::default_library()
    }

    #[test]
    fn parses_minimal_plan() {
        let text = r#"[{"tool":"ride_hail","params":{"origin":"airport","dest":"hotel"}}]"#;
        let plan = parse_plan(text, &lib()).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan.intents[0].tool, "ride_hail");
        assert_eq!(
            plan.intents[0].param("dest"),
            Some(&ParamValue::text("hotel"))
        );
    }

    #[test]
    fn rejects_object_top_level() {
        let err = parse_plan(r#"{"tool":"x"}"#, &lib()).unwrap_err();
        assert!(err.reason.contains("expected a sequence"), "{}", err.reason);
    }

    #[test]
    fn rejects_empty_and_overlong_plans() {
        assert!(parse_plan("[]", &lib()).is_err());
        let one = r#"{"tool":"weather","params":{"city":"a"}}"#;
        let nine = format!("[{}]", [one; 9].join(","));
        assert!(parse_plan(&nine, &lib()).is_err());
        let eight = format!("[{}]", [one; 8].join(","));
        assert_eq!(parse_plan(&eight, &lib()).unwrap().len(), 8);
    }

    #[test]
    fn syntax_error_reports_position() {
        let text = "[{\"tool\":\"a\",}]";
        let err = parse_plan(text, &lib()).unwrap_err();
        assert!(err.position > 0 && err.position <= text.len());
    }

    #[test]
    fn rejects_duplicate_params_and_unknown_fields() {
        let dup = r#"[{"tool":"a","params":{"k":"1","k":"2"}}]"#;
        assert!(parse_plan(dup, &lib()).is_err());
        let extra = r#"[{"tool":"a","params":{},"note":"x"}]"#;
        assert!(parse_plan(extra, &lib()).is_err());
        let non_string = r#"[{"tool":"a","params":{"k":3}}]"#;
        assert!(parse_plan(non_string, &lib()).is_err());
    }

    #[test]
    fn reference_values_round_trip() {
        let text = r#"[{"params":{"hotel":"$ref:destination"},"tool":"hotel_checkin"}]"#;
        let plan = parse_plan(text, &lib()).unwrap();
        assert_eq!(
            plan.intents[0]
                .param("hotel")
                .and_then(ParamValue::as_ref_label),
            Some("destination")
        );
        assert_eq!(serialize_plan(&plan), text);
    }

    #[test]
    fn serialization_is_canonical() {
        let a = parse_plan(
            r#"[ {"tool":"ride_hail", "params": {"origin":"airport","dest":"hotel"}} ]"#,
            &lib(),
        )
        .unwrap();
        let b = parse_plan(
            r#"[{"params":{"dest":"hotel","origin":"airport"},"tool":"ride_hail"}]"#,
            &lib(),
        )
        .unwrap();
        let s = serialize_plan(&a);
        assert_eq!(s, serialize_plan(&b));
        assert_eq!(
            s,
            r#"[{"params":{"dest":"hotel","origin":"airport"},"tool":"ride_hail"}]"#
        );
        let again = serialize_plan(&parse_plan(&s, &lib()).unwrap());
        assert_eq!(s, again);
    }

    #[test]
    fn library_validation() {
        assert_eq!(ToolLibrary::new(vec![]), Err(LibraryError::Empty));
        let dup = vec![ToolSpec::new("a"), ToolSpec::new("a")];
        assert_eq!(
            ToolLibrary::new(dup),
            Err(LibraryError::DuplicateTool("a".into()))
        );
        let bad_enum = vec![ToolSpec::new("a").enumerated("x", &["1"])];
        assert!(matches!(
            ToolLibrary::new(bad_enum),
            Err(LibraryError::UndeclaredEnumParam { .. })
        ));
        let zero = vec![ToolSpec::new("a").exclusive("travel", 0)];
        assert!(matches!(
            ToolLibrary::new(zero),
            Err(LibraryError::ZeroBound { .. })
        ));
        let lib = ToolLibrary::default_library();
        let round = ToolLibrary::from_json(&lib.to_json_pretty()).unwrap();
        assert_eq!(round, lib);
        assert_eq!(lib.exclusivity_bounds().get("travel"), Some(&1));
    }

    #[test]
    fn context_bounds() {
        let st = SpatioTemporalContext {
            time: NaiveDateTime::parse_from_str("2026-03-14 15:00:00", "%Y-%m-%d %H:%M:%S")
                .unwrap(),
            location: GeoPoint {
                lat: 91.0,
                lon: 0.0,
            },
            city: "x".into(),
            is_weekend: true,
            is_holiday: false,
        };
        assert_eq!(st.validate(), Err(ContextError::Latitude(91.0)));
        assert!(is_weekend(&st.time));
    }

    #[test]
    fn plan_text_passes_raw_strings_through() {
        let mut rec = DatasetRecord::new(
            "r",
            crate::synth::sample_context_for_tests(),
            String::new(),
            &Plan::new(vec![
                Intent::new("weather").with("city", ParamValue::text("a"))
            ]),
        );
        assert_eq!(
            rec.plan_text(),
            r#"[{"params":{"city":"a"},"tool":"weather"}]"#
        );
        rec.plan = serde_json::Value::String("[{\"tool\":".into());
        assert_eq!(rec.plan_text(), "[{\"tool\":");
    }
}
