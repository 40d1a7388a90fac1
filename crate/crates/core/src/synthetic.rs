//! Generated datasets with known structure, for tests and smoke runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{DataError, PreparedDataset, SplitSpec};

/// Two categorical fields; the label is 1 exactly when the first field
/// takes the value `a0`. Any model able to weight one token separates it.
pub fn separable(n: usize, seed: u64) -> Result<PreparedDataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.gen_range(0..4);
        let b = rng.gen_range(0..5);
        tokens.push(vec![format!("a{a}"), format!("b{b}")]);
        labels.push(if a == 0 { 1.0 } else { 0.0 });
    }
    PreparedDataset::from_rows(
        vec!["first".into(), "second".into()],
        tokens,
        labels,
        &SplitSpec::new([0.7, 0.2, 0.1], seed)?,
        1,
    )
}

/// Field names and cardinalities shaped like a mobile app-usage log
/// (user, item, time and context fields).
pub const APP_USAGE_FIELDS: [(&str, usize); 10] = [
    ("user", 957),
    ("item", 4082),
    ("daytime", 7),
    ("weekday", 7),
    ("isweekend", 2),
    ("homework", 3),
    ("cost", 2),
    ("weather", 9),
    ("country", 80),
    ("city", 233),
];

/// Raw rows before encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub fields: Vec<String>,
    pub tokens: Vec<Vec<String>>,
    pub labels: Vec<f64>,
}

impl RawTable {
    /// Headered CSV with a `label` column first.
    pub fn to_csv(&self) -> String {
        let mut out = format!("label,{}\n", self.fields.join(","));
        for (row, y) in self.tokens.iter().zip(&self.labels) {
            out.push_str(&format!("{},{}\n", *y as u8, row.join(",")));
        }
        out
    }
}

/// Ten categorical fields with the cardinalities of [`APP_USAGE_FIELDS`],
/// skewed token frequencies, and labels drawn from a hidden logistic model
/// with first-order token effects plus a user-item and an item-context
/// interaction. About one third of the labels are positive.
pub fn app_usage_like(n: usize, seed: u64) -> Result<PreparedDataset, DataError> {
    let raw = app_usage_rows(n, seed);
    PreparedDataset::from_rows(raw.fields, raw.tokens, raw.labels, &SplitSpec::new([0.7, 0.2, 0.1], seed)?, 2)
}

/// The rows behind [`app_usage_like`].
pub fn app_usage_rows(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rank = 4;
    let weights: Vec<Vec<f64>> = APP_USAGE_FIELDS
        .iter()
        .map(|&(_, s)| (0..s).map(|_| 0.8 * normal.sample(&mut rng)).collect())
        .collect();
    let factors: Vec<Vec<Vec<f64>>> = APP_USAGE_FIELDS
        .iter()
        .map(|&(_, s)| {
            (0..s)
                .map(|_| (0..rank).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut tokens = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        // squaring a uniform draw skews the frequencies toward low ids
        let ids: Vec<usize> = APP_USAGE_FIELDS
            .iter()
            .map(|&(_, s)| ((rng.gen::<f64>().powi(2) * s as f64) as usize).min(s - 1))
            .collect();
        let mut z = -1.2;
        for (f, &i) in ids.iter().enumerate() {
            z += weights[f][i];
        }
        z += 1.5 * dot(&factors[0][ids[0]], &factors[1][ids[1]]) / rank as f64;
        z += 1.0 * dot(&factors[1][ids[1]], &factors[2][ids[2]]) / rank as f64;
        let p = 1.0 / (1.0 + (-z).exp());
        labels.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
        tokens.push(ids.iter().enumerate().map(|(f, i)| format!("{}{}", APP_USAGE_FIELDS[f].0, i)).collect());
    }
    RawTable {
        fields: APP_USAGE_FIELDS.iter().map(|(n, _)| n.to_string()).collect(),
        tokens,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_is_deterministic() {
        let a = separable(200, 1).unwrap();
        let b = separable(200, 1).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.manifest.rows, [140, 40, 20]);
    }

    #[test]
    fn app_usage_like_shape() {
        let d = app_usage_like(3000, 4).unwrap();
        assert_eq!(d.field_count(), 10);
        let pos = d.train.labels().iter().sum::<f64>() / d.train.len() as f64;
        assert!(pos > 0.15 && pos < 0.6, "{pos}");
    }

    #[test]
    fn raw_csv_has_header_and_one_line_per_row() {
        let raw = app_usage_rows(50, 1);
        let csv = raw.to_csv();
        assert!(csv.starts_with("label,user,item,"));
        assert_eq!(csv.lines().count(), 51);
    }
}
