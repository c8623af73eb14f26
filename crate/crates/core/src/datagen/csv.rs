//! CSV ingestion and the on-disk dataset cache.
//!
//! CSV dialect: UTF-8, comma separated, first row is the header, double
//! quotes escape commas/newlines, empty cell = missing value.
//!
//! Dataset cache: one file per domain, columnar JSON body behind a versioned
//! header line `TSLAB-DATA v1`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, FeatureKind, FeatureValue, Record, Schema};

const DATA_MAGIC: &str = "TSLAB-DATA v1";

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Split one CSV line into fields, honoring double-quote escaping.
fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut field = String::new();
    let mut in_quotes = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if in_quotes => {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    field.push('"');
                } else {
                    in_quotes = false;
                }
            }
            '"' => in_quotes = true,
            ',' if !in_quotes => {
                fields.push(std::mem::take(&mut field));
            }
            _ => field.push(c),
        }
    }
    fields.push(field);
    fields
}

/// Load a CSV file against a schema. The header must contain every schema
/// feature plus the label column; extra columns are ignored.
pub fn load_csv(path: &Path, schema: &Schema, domain_id: &str) -> Result<Dataset, DataError> {
    schema.validate()?;
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| DataError::Schema("empty file: no header row".into()))?;
    let header = split_csv_line(header_line);

    let mut column_of = Vec::with_capacity(schema.arity());
    for f in &schema.features {
        let pos = header.iter().position(|h| h == &f.name).ok_or_else(|| {
            DataError::Schema(format!("header missing feature column {:?}", f.name))
        })?;
        column_of.push(pos);
    }
    let label_col = header
        .iter()
        .position(|h| h == &schema.label_name)
        .ok_or_else(|| {
            DataError::Schema(format!("header missing label column {:?}", schema.label_name))
        })?;

    let mut records = Vec::new();
    for (row_idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells = split_csv_line(line);
        if cells.len() != header.len() {
            return Err(DataError::Parse {
                row: row_idx,
                message: format!("expected {} cells, found {}", header.len(), cells.len()),
            });
        }
        let mut values = Vec::with_capacity(schema.arity());
        for (f, &col) in schema.features.iter().zip(&column_of) {
            let cell = cells[col].trim();
            if cell.is_empty() {
                values.push(None);
                continue;
            }
            match f.kind {
                FeatureKind::Numeric => {
                    let x: f64 = cell.parse().map_err(|_| DataError::Parse {
                        row: row_idx,
                        message: format!("column {:?}: not a number: {cell:?}", f.name),
                    })?;
                    values.push(Some(FeatureValue::Number(x)));
                }
                FeatureKind::Categorical => {
                    if let Some(labels) = &f.value_labels {
                        if !labels.contains_key(cell) {
                            return Err(DataError::Schema(format!(
                                "row {row_idx}, column {:?}: unknown categorical code {cell:?}",
                                f.name
                            )));
                        }
                    }
                    values.push(Some(FeatureValue::Code(cell.to_string())));
                }
            }
        }
        let label_cell = cells[label_col].trim();
        let label = u8::from(label_cell == schema.positive_label);
        records.push(Record {
            record_id: records.len() as u64,
            values,
            label,
            domain_id: domain_id.to_string(),
            confounder_proxy: None,
        });
    }
    Ok(Dataset {
        schema: schema.clone(),
        records,
        domain_id: domain_id.to_string(),
    })
}

/// Columnar body of the dataset cache file.
#[derive(Serialize, Deserialize)]
struct CacheBody {
    schema: Schema,
    domain_id: String,
    record_ids: Vec<u64>,
    labels: Vec<u8>,
    // One column per feature, aligned with the schema.
    columns: Vec<Vec<Option<FeatureValue>>>,
    proxies: Vec<Option<f64>>,
}

pub fn write_dataset_cache(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let arity = dataset.schema.arity();
    let mut columns: Vec<Vec<Option<FeatureValue>>> = vec![Vec::new(); arity];
    for r in &dataset.records {
        for (j, v) in r.values.iter().enumerate() {
            columns[j].push(v.clone());
        }
    }
    let body = CacheBody {
        schema: dataset.schema.clone(),
        domain_id: dataset.domain_id.clone(),
        record_ids: dataset.records.iter().map(|r| r.record_id).collect(),
        labels: dataset.labels(),
        columns,
        proxies: dataset.records.iter().map(|r| r.confounder_proxy).collect(),
    };
    let json = serde_json::to_string(&body).map_err(|e| DataError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    writeln!(f, "{DATA_MAGIC}").map_err(|e| io_err(&tmp, e))?;
    f.write_all(json.as_bytes()).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_dataset_cache(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let Some((header, body)) = text.split_once('\n') else {
        return Err(DataError::Cache {
            path: path.display().to_string(),
            message: "missing header line".into(),
        });
    };
    if header.trim_end() != DATA_MAGIC {
        return Err(DataError::Cache {
            path: path.display().to_string(),
            message: format!("bad header {header:?}, expected {DATA_MAGIC:?}"),
        });
    }
    let body: CacheBody = serde_json::from_str(body).map_err(|e| DataError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let n = body.record_ids.len();
    if body.labels.len() != n
        || body.proxies.len() != n
        || body.columns.iter().any(|c| c.len() != n)
    {
        return Err(DataError::Cache {
            path: path.display().to_string(),
            message: "column lengths disagree".into(),
        });
    }
    let records = (0..n)
        .map(|i| Record {
            record_id: body.record_ids[i],
            values: body.columns.iter().map(|c| c[i].clone()).collect(),
            label: body.labels[i],
            domain_id: body.domain_id.clone(),
            confounder_proxy: body.proxies[i],
        })
        .collect();
    Ok(Dataset {
        schema: body.schema,
        records,
        domain_id: body.domain_id,
    })
}
