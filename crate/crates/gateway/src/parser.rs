//! Total parser from model output text to per-class scores.
//!
//! Accepts a JSON object (optionally wrapped in prose or code fences) or
//! tag-structured output such as `<positive-score>0.85</positive-score>`.
//! Failures never abort; they surface as flags on the result.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use opgrain_core::PredictionRecord;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::templates::{PromptTemplate, TemplateName};

pub const FLAG_UNPARSEABLE: &str = "unparseable";
pub const FLAG_MISSING_SCORE: &str = "missing_score";
pub const FLAG_OUT_OF_RANGE: &str = "score_out_of_range";
pub const FLAG_MISSING_CONFIDENCE: &str = "missing_confidence";

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[-+]?\d+(?:\.\d+)?").expect("valid regex"));
static OPEN_TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<([A-Za-z0-9_\-]+)>").expect("valid regex"));

/// How a list of predictions in one response becomes one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleReduction {
    #[default]
    Random,
    Mean,
    Median,
}

impl std::str::FromStr for SampleReduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "random" => Ok(SampleReduction::Random),
            "mean" => Ok(SampleReduction::Mean),
            "median" => Ok(SampleReduction::Median),
            other => Err(format!("unknown reduction {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    /// Normalized scores keyed by class label.
    pub class_scores: BTreeMap<String, f64>,
    pub score_pos: Option<f64>,
    /// Positive-class score as written by the model.
    pub score_pos_text: Option<String>,
    pub score_neg: Option<f64>,
    pub decision: Option<String>,
    pub decision_confidence: Option<f64>,
    /// Confidence from a two-stage second call.
    pub confidence: Option<f64>,
    pub raw: String,
    pub flags: Vec<String>,
}

impl ParsedResponse {
    fn flag(&mut self, flag: &str) {
        if !self.flags.iter().any(|f| f == flag) {
            self.flags.push(flag.to_string());
        }
    }

    /// Copies parsed fields onto `record`, keeping fields it does not carry.
    pub fn apply_to(&self, record: &mut PredictionRecord) {
        record.score_pos = self.score_pos;
        record.score_pos_text = self.score_pos_text.clone();
        record.score_neg = self.score_neg;
        record.decision = self.decision.clone();
        record.decision_confidence = self.decision_confidence;
        record.raw = Some(self.raw.clone());
        for f in &self.flags {
            record.flag(f);
        }
    }
}

/// One numeric value with the text it was read from.
#[derive(Debug, Clone)]
struct Numeral {
    value: f64,
    text: String,
}

#[derive(Debug, Clone)]
enum Field {
    Text(String),
    Numbers(Vec<Numeral>),
}

fn numeral(text: &str) -> Option<Numeral> {
    let t = text.trim().trim_matches('"').trim();
    let (t, percent) = match t.strip_suffix('%') {
        Some(rest) => (rest.trim(), true),
        None => (t, false),
    };
    let value: f64 = t.parse().ok().filter(|v: &f64| v.is_finite())?;
    Some(Numeral {
        value: if percent { value / 100.0 } else { value },
        text: t.to_string(),
    })
}

fn numbers_in(text: &str) -> Vec<Numeral> {
    NUMBER
        .find_iter(text)
        .filter_map(|m| numeral(m.as_str()))
        .collect()
}

fn field_from_json(v: &Value) -> Option<Field> {
    match v {
        Value::Number(n) => n.as_f64().filter(|x| x.is_finite()).map(|value| {
            Field::Numbers(vec![Numeral {
                value,
                text: n.to_string(),
            }])
        }),
        Value::String(s) => Some(Field::Text(s.clone())),
        Value::Array(items) => {
            let nums: Vec<Numeral> = items
                .iter()
                .filter_map(|item| match item {
                    Value::Number(n) => n.as_f64().map(|value| Numeral {
                        value,
                        text: n.to_string(),
                    }),
                    Value::String(s) => numeral(s),
                    _ => None,
                })
                .collect();
            Some(Field::Numbers(nums))
        }
        Value::Bool(_) | Value::Null | Value::Object(_) => None,
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().to_lowercase()
}

fn flatten_json(v: &Value, out: &mut BTreeMap<String, Field>) {
    if let Value::Object(map) = v {
        for (k, val) in map {
            let key = normalize_key(k);
            if let Some(field) = field_from_json(val) {
                out.entry(key).or_insert(field);
            } else if val.is_object() {
                flatten_json(val, out);
            }
        }
    }
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn json_fields(text: &str) -> Option<BTreeMap<String, Field>> {
    let body = strip_fences(text);
    let start = body.find('{')?;
    let end = body.rfind('}')?;
    if end <= start {
        return None;
    }
    let value: Value = serde_json::from_str(&body[start..=end]).ok()?;
    let mut out = BTreeMap::new();
    flatten_json(&value, &mut out);
    (!out.is_empty()).then_some(out)
}

fn tag_fields(text: &str) -> BTreeMap<String, Field> {
    let mut out = BTreeMap::new();
    for cap in OPEN_TAG.captures_iter(text) {
        let whole = cap.get(0).expect("match");
        let name = &cap[1];
        let rest = &text[whole.end()..];
        let close = format!("</{name}>");
        let Some(pos) = rest.find(&close) else { continue };
        let inner = rest[..pos].trim();
        // Nested tags belong to their own entries.
        if OPEN_TAG.is_match(inner) {
            continue;
        }
        out.entry(normalize_key(name)).or_insert_with(|| Field::Text(inner.to_string()));
    }
    out
}

fn lookup<'a>(fields: &'a BTreeMap<String, Field>, keys: &[String]) -> Option<&'a Field> {
    keys.iter().find_map(|k| fields.get(k))
}

fn score_keys(label: &str) -> Vec<String> {
    let l = normalize_key(label);
    vec![format!("{l}-score"), format!("{l}_score"), format!("{l} score"), l]
}

fn field_numbers(field: &Field, list: bool) -> Vec<Numeral> {
    match field {
        Field::Numbers(n) => n.clone(),
        Field::Text(s) => {
            if let Some(n) = numeral(s) {
                return vec![n];
            }
            let found = numbers_in(s);
            // A single embedded numeral is read only when it is unambiguous.
            if list || found.len() == 1 {
                found
            } else {
                Vec::new()
            }
        }
    }
}

fn reduce<R: Rng + ?Sized>(values: Vec<Numeral>, reduction: SampleReduction, rng: &mut R) -> Option<Numeral> {
    if values.is_empty() {
        return None;
    }
    match reduction {
        SampleReduction::Random => {
            let i = rng.random_range(0..values.len());
            values.into_iter().nth(i)
        }
        SampleReduction::Mean => {
            let value = values.iter().map(|n| n.value).sum::<f64>() / values.len() as f64;
            Some(Numeral {
                value,
                text: format!("{value}"),
            })
        }
        SampleReduction::Median => {
            let mut v: Vec<f64> = values.iter().map(|n| n.value).collect();
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            let value = if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 };
            Some(Numeral {
                value,
                text: format!("{value}"),
            })
        }
    }
}

/// Recovers the numeral for `label` as literally written in `text`, so a
/// JSON `0.90` is reported as "0.90" rather than the re-printed "0.9".
fn written_score(text: &str, label: &str, value: f64) -> Option<String> {
    let pattern = format!(
        r#"(?i)["<]{}-score["']?\s*[:>]\s*"?\s*(\d+(?:\.\d+)?)"#,
        regex::escape(label.trim())
    );
    let re = Regex::new(&pattern).ok()?;
    let caps = re.captures(text)?;
    let s = caps.get(1)?.as_str();
    (s.parse::<f64>().ok()? == value).then(|| s.to_string())
}

fn unit_value(n: &Numeral, scale: f64) -> Option<f64> {
    let v = n.value / scale;
    (v.is_finite() && (0.0..=1.0).contains(&v)).then_some(v)
}

/// Parses one response. `rng` drives random reduction of prediction lists.
pub fn parse_response<R: Rng + ?Sized>(
    text: &str,
    template: &PromptTemplate,
    reduction: SampleReduction,
    rng: &mut R,
) -> ParsedResponse {
    let mut out = ParsedResponse {
        raw: text.to_string(),
        ..Default::default()
    };
    let fields = match json_fields(text) {
        Some(f) => f,
        None => tag_fields(text),
    };
    if fields.is_empty() {
        out.flag(FLAG_UNPARSEABLE);
        if !template.is_two_stage() {
            out.flag(FLAG_MISSING_SCORE);
        }
        return out;
    }

    let scale = template.name.scale();
    let list = template.name == TemplateName::MultiplePredictions;
    for label in &template.class_labels {
        let Some(field) = lookup(&fields, &score_keys(label)) else { continue };
        let Some(n) = reduce(field_numbers(field, list), reduction, rng) else { continue };
        match unit_value(&n, scale) {
            Some(v) => {
                out.class_scores.insert(label.clone(), v);
                if Some(label.as_str()) == template.positive_class() {
                    let text_form = match field {
                        Field::Numbers(_) if !list => written_score(text, label, n.value).unwrap_or(n.text),
                        _ => n.text,
                    };
                    out.score_pos_text = Some(text_form);
                }
            }
            None => out.flag(FLAG_OUT_OF_RANGE),
        }
    }
    if let Some(pos) = template.positive_class() {
        out.score_pos = out.class_scores.get(pos).copied();
    }
    if template.class_labels.len() == 2 {
        out.score_neg = out.class_scores.get(&template.class_labels[1]).copied();
    }

    if let Some(Field::Text(d)) = lookup(&fields, &["decision".into()]) {
        let d = d.trim();
        if !d.is_empty() {
            out.decision = Some(d.to_string());
        }
    }
    let unit = |keys: &[String]| -> Option<f64> {
        let field = lookup(&fields, keys)?;
        field_numbers(field, false)
            .first()
            .and_then(|n| unit_value(n, 1.0))
    };
    out.decision_confidence = unit(&["decision-confidence".into(), "decision_confidence".into()]);
    out.confidence = unit(&["confidence".into()]);

    if template.is_two_stage() {
        return out;
    }
    if out.score_pos.is_none() {
        out.flag(FLAG_MISSING_SCORE);
    }
    out
}
