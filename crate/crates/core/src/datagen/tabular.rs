//! Tabular feature encoding for the classical baselines.
//!
//! Numeric features are standardized with statistics computed on the source
//! only, so target preprocessing mirrors deployment. Missing numerics map to
//! zero after standardization; categoricals are one-hot encoded with a
//! dedicated missing bucket, and codes unseen at fit time fall into it too.

use std::collections::BTreeMap;

use super::{DataError, Dataset, FeatureKind, FeatureValue};

struct NumericStats {
    mean: f64,
    std: f64,
}

enum ColumnEncoder {
    Numeric(NumericStats),
    // code -> offset within the column's one-hot block; last slot = missing.
    Categorical(BTreeMap<String, usize>),
}

/// Fitted encoder mapping records to fixed-width numeric feature rows.
pub struct TabularEncoder {
    columns: Vec<ColumnEncoder>,
    width: usize,
}

impl TabularEncoder {
    /// Fit on the source dataset.
    pub fn fit(source: &Dataset) -> Result<TabularEncoder, DataError> {
        if source.is_empty() {
            return Err(DataError::Schema(
                "cannot fit tabular encoder on an empty dataset".into(),
            ));
        }
        let mut columns = Vec::with_capacity(source.schema.arity());
        let mut width = 0;
        for (j, f) in source.schema.features.iter().enumerate() {
            match f.kind {
                FeatureKind::Numeric => {
                    let present: Vec<f64> = source
                        .records
                        .iter()
                        .filter_map(|r| r.values[j].as_ref().and_then(FeatureValue::as_number))
                        .collect();
                    let mean = if present.is_empty() {
                        0.0
                    } else {
                        present.iter().sum::<f64>() / present.len() as f64
                    };
                    let var = if present.len() < 2 {
                        0.0
                    } else {
                        present.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                            / present.len() as f64
                    };
                    let std = var.sqrt().max(1e-9);
                    columns.push(ColumnEncoder::Numeric(NumericStats { mean, std }));
                    width += 1;
                }
                FeatureKind::Categorical => {
                    let mut codes = BTreeMap::new();
                    for r in &source.records {
                        if let Some(FeatureValue::Code(c)) = &r.values[j] {
                            let next = codes.len();
                            codes.entry(c.clone()).or_insert(next);
                        }
                    }
                    width += codes.len() + 1; // + missing bucket
                    columns.push(ColumnEncoder::Categorical(codes));
                }
            }
        }
        Ok(TabularEncoder { columns, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Encode every record into a dense row of `width()` values.
    pub fn transform(&self, dataset: &Dataset) -> Vec<Vec<f64>> {
        dataset
            .records
            .iter()
            .map(|r| {
                let mut row = Vec::with_capacity(self.width);
                for (enc, v) in self.columns.iter().zip(&r.values) {
                    match enc {
                        ColumnEncoder::Numeric(stats) => {
                            let x = v
                                .as_ref()
                                .and_then(FeatureValue::as_number)
                                .map(|x| (x - stats.mean) / stats.std)
                                .unwrap_or(0.0);
                            row.push(x);
                        }
                        ColumnEncoder::Categorical(codes) => {
                            let block = codes.len() + 1;
                            let mut one_hot = vec![0.0; block];
                            let slot = match v {
                                Some(FeatureValue::Code(c)) => {
                                    codes.get(c).copied().unwrap_or(block - 1)
                                }
                                _ => block - 1,
                            };
                            one_hot[slot] = 1.0;
                            row.extend(one_hot);
                        }
                    }
                }
                row
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Record, Schema};
    use super::*;

    fn ds() -> Dataset {
        let schema = Schema {
            features: vec![
                super::super::FeatureDescriptor {
                    name: "age".into(),
                    kind: FeatureKind::Numeric,
                    value_labels: None,
                },
                super::super::FeatureDescriptor {
                    name: "job".into(),
                    kind: FeatureKind::Categorical,
                    value_labels: None,
                },
            ],
            label_name: "y".into(),
            positive_label: "1".into(),
        };
        let rows = vec![
            (Some(10.0), Some("a")),
            (Some(20.0), Some("b")),
            (None, None),
            (Some(30.0), Some("a")),
        ];
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, (num, code))| Record {
                record_id: i as u64,
                values: vec![
                    num.map(FeatureValue::Number),
                    code.map(|c| FeatureValue::Code(c.to_string())),
                ],
                label: 0,
                domain_id: "d".into(),
                confounder_proxy: None,
            })
            .collect();
        Dataset {
            schema,
            records,
            domain_id: "d".into(),
        }
    }

    #[test]
    fn standardization_uses_present_values_and_missing_maps_to_zero() {
        let ds = ds();
        let enc = TabularEncoder::fit(&ds).unwrap();
        let rows = enc.transform(&ds);
        // mean of {10,20,30} = 20; row 2 is missing -> 0 after standardization.
        assert!((rows[2][0]).abs() < 1e-12);
        let mean: f64 = [rows[0][0], rows[1][0], rows[3][0]].iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn one_hot_has_missing_bucket_and_unseen_codes_land_there() {
        let train = ds();
        let enc = TabularEncoder::fit(&train).unwrap();
        assert_eq!(enc.width(), 1 + 3); // numeric + {a, b, missing}
        let mut other = train.clone();
        other.records[0].values[1] = Some(FeatureValue::Code("zzz".into()));
        let rows = enc.transform(&other);
        assert_eq!(rows[0][3], 1.0); // missing bucket
        let rows_train = enc.transform(&train);
        assert_eq!(rows_train[2][3], 1.0); // genuinely missing
        assert_eq!(rows_train[0][1], 1.0); // code "a"
    }
}
