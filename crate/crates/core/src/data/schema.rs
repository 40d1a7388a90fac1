use std::collections::HashSet;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use super::DataError;

/// Raw column type as declared in a schema file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    /// Discretized with [`discretize_numeric`].
    Numeric,
    /// `YYMMDDHH` timestamp, expanded into hour / weekday / weekend fields.
    Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    #[serde(default = "default_kind")]
    pub kind: FieldKind,
}

fn default_kind() -> FieldKind {
    FieldKind::Categorical
}

fn default_label() -> String {
    "label".to_string()
}

fn default_min_count() -> usize {
    2
}

/// Dataset description loaded from a JSON schema file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    #[serde(default = "default_label")]
    pub label: String,
    pub fields: Vec<FieldSpec>,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

impl DatasetSchema {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let schema: DatasetSchema =
            serde_json::from_str(text).map_err(|e| DataError::Config(format!("invalid schema: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.fields.is_empty() {
            return Err(DataError::Config("schema declares no fields".into()));
        }
        if self.min_count == 0 {
            return Err(DataError::Config("min_count must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            if f.name == self.label {
                return Err(DataError::Config(format!("label column `{}` listed as a field", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(DataError::Config(format!("duplicate field `{}`", f.name)));
            }
        }
        Ok(())
    }

    /// Binds the schema to a CSV header. Timestamp fields expand into three
    /// encoded fields named `<name>_hour`, `<name>_weekday`, `<name>_weekend`.
    pub fn resolve(&self, header: &[String]) -> Result<ResolvedSchema, DataError> {
        self.validate()?;
        let column = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))
        };
        let label_column = column(&self.label)?;
        let mut fields = Vec::new();
        for spec in &self.fields {
            let column_index = column(&spec.name)?;
            match spec.kind {
                FieldKind::Categorical | FieldKind::Numeric => fields.push(FieldSchema {
                    name: spec.name.clone(),
                    kind: spec.kind,
                    column_index,
                    part: None,
                }),
                FieldKind::Timestamp => {
                    for part in [TimePart::Hour, TimePart::Weekday, TimePart::Weekend] {
                        fields.push(FieldSchema {
                            name: format!("{}_{}", spec.name, part.suffix()),
                            kind: FieldKind::Timestamp,
                            column_index,
                            part: Some(part),
                        });
                    }
                }
            }
        }
        Ok(ResolvedSchema {
            label_column,
            fields,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimePart {
    Hour,
    Weekday,
    Weekend,
}

impl TimePart {
    fn suffix(self) -> &'static str {
        match self {
            TimePart::Hour => "hour",
            TimePart::Weekday => "weekday",
            TimePart::Weekend => "weekend",
        }
    }
}

/// One encoded field bound to its source column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub name: String,
    pub kind: FieldKind,
    pub column_index: usize,
    pub part: Option<TimePart>,
}

impl FieldSchema {
    /// Token for this field from a raw CSV record. The empty token always
    /// maps to the out-of-vocabulary index.
    pub fn token(&self, record: &csv::StringRecord) -> String {
        let raw = record.get(self.column_index).unwrap_or("").trim();
        match (self.kind, self.part) {
            (FieldKind::Categorical, _) => raw.to_string(),
            (FieldKind::Numeric, _) => discretize_numeric(raw.parse::<f64>().ok().filter(|x| !x.is_nan())),
            (FieldKind::Timestamp, Some(part)) => expand_timestamp(raw)
                .map(|t| t.part(part))
                .unwrap_or_default(),
            (FieldKind::Timestamp, None) => String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedSchema {
    pub label_column: usize,
    pub fields: Vec<FieldSchema>,
}

impl ResolvedSchema {
    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }
}

/// Bucket token of a numeric value: `floor(ln(x)^2)` above 2, `"1"` for any
/// other present value, and the empty (out-of-vocabulary) token if missing.
pub fn discretize_numeric(x: Option<f64>) -> String {
    match x {
        Some(v) if v > 2.0 => {
            let l = v.ln();
            ((l * l).floor() as i64).to_string()
        }
        Some(_) => "1".to_string(),
        None => String::new(),
    }
}

/// Calendar parts of a `YYMMDDHH` timestamp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestampParts {
    pub hour: u32,
    /// 0 = Sunday .. 6 = Saturday
    pub weekday: u32,
    pub weekend: bool,
}

impl TimestampParts {
    pub fn part(&self, part: TimePart) -> String {
        match part {
            TimePart::Hour => format!("{:02}", self.hour),
            TimePart::Weekday => self.weekday.to_string(),
            TimePart::Weekend => u8::from(self.weekend).to_string(),
        }
    }
}

pub fn expand_timestamp(raw: &str) -> Option<TimestampParts> {
    if raw.len() != 8 || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let num = |r: std::ops::Range<usize>| raw[r].parse::<u32>().ok();
    let (yy, mm, dd, hh) = (num(0..2)?, num(2..4)?, num(4..6)?, num(6..8)?);
    if hh > 23 {
        return None;
    }
    let date = NaiveDate::from_ymd_opt(2000 + yy as i32, mm, dd)?;
    let wd = date.weekday();
    Some(TimestampParts {
        hour: hh,
        weekday: wd.num_days_from_sunday(),
        weekend: matches!(wd, Weekday::Sat | Weekday::Sun),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_buckets() {
        assert_eq!(discretize_numeric(Some(2.0)), "1");
        assert_eq!(discretize_numeric(Some(-5.0)), "1");
        assert_eq!(discretize_numeric(Some(10.0)), "5");
        assert_eq!(discretize_numeric(Some(100.0)), "21");
        assert_eq!(discretize_numeric(None), "");
    }

    #[test]
    fn timestamp_expands_into_three_parts() {
        // 2014-10-21 was a Tuesday, 2014-10-25 a Saturday
        let tue = expand_timestamp("14102100").unwrap();
        assert_eq!(tue, TimestampParts { hour: 0, weekday: 2, weekend: false });
        let sat = expand_timestamp("14102517").unwrap();
        assert_eq!(sat.part(TimePart::Hour), "17");
        assert_eq!(sat.part(TimePart::Weekday), "6");
        assert_eq!(sat.part(TimePart::Weekend), "1");
        assert!(expand_timestamp("14102125").is_none());
        assert!(expand_timestamp("1410210").is_none());
    }

    #[test]
    fn timestamp_field_resolves_to_three_fields() {
        let schema = DatasetSchema::from_json(
            r#"{"label":"click","fields":[{"name":"hour","kind":"timestamp"},{"name":"C1"}]}"#,
        )
        .unwrap();
        let header: Vec<String> = ["id", "click", "hour", "C1"].iter().map(|s| s.to_string()).collect();
        let resolved = schema.resolve(&header).unwrap();
        assert_eq!(resolved.label_column, 1);
        assert_eq!(
            resolved.field_names(),
            ["hour_hour", "hour_weekday", "hour_weekend", "C1"]
        );
        let rec = csv::StringRecord::from(vec!["0", "1", "14102517", "1005"]);
        let toks: Vec<String> = resolved.fields.iter().map(|f| f.token(&rec)).collect();
        assert_eq!(toks, ["17", "6", "1", "1005"]);
    }

    #[test]
    fn missing_column_is_reported_by_name() {
        let schema = DatasetSchema::from_json(r#"{"fields":[{"name":"user"}]}"#).unwrap();
        let header = vec!["label".to_string(), "item".to_string()];
        match schema.resolve(&header) {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "user"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_fields_rejected() {
        let err = DatasetSchema::from_json(r#"{"fields":[{"name":"a"},{"name":"a"}]}"#);
        assert!(matches!(err, Err(DataError::Config(_))));
    }
}
