use super::{validate, Setting, SurveyDataset, UnitRecord};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Maps dataset roles onto column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub x: Vec<String>,
    #[serde(default)]
    pub z: Vec<String>,
    pub w: String,
    pub y: String,
    /// Optional in Settings 2 and 3, where every stored row is sampled.
    #[serde(default)]
    pub delta: Option<String>,
    pub r: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            x: vec!["x".into()],
            z: vec!["z".into()],
            w: "w".into(),
            y: "y".into(),
            delta: Some("delta".into()),
            r: "r".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub setting: Setting,
    pub schema: ColumnSchema,
    /// Required for Settings 2 and 3; inferred from the row count in Setting 1.
    pub population_size: Option<usize>,
    pub delimiter: u8,
}

impl LoadOptions {
    pub fn new(setting: Setting, population_size: Option<usize>) -> Self {
        LoadOptions {
            setting,
            schema: ColumnSchema::default(),
            population_size,
            delimiter: b',',
        }
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "NA"
}

fn parse_cell(cell: &str, column: &str, row: usize) -> Result<Option<f64>> {
    let cell = cell.trim();
    if is_missing(cell) {
        return Ok(None);
    }
    cell.parse::<f64>().map(Some).map_err(|_| Error::InvalidRow {
        row,
        message: format!("non-numeric value `{cell}` in column `{column}`"),
    })
}

fn parse_flag(cell: &str, column: &str, row: usize) -> Result<Option<bool>> {
    match parse_cell(cell, column, row)? {
        None => Ok(None),
        Some(v) if v == 0.0 => Ok(Some(false)),
        Some(v) if v == 1.0 => Ok(Some(true)),
        Some(v) => Err(Error::InvalidRow {
            row,
            message: format!("column `{column}` must be 0 or 1, found {v}"),
        }),
    }
}

/// Parses a delimited file into an unchecked dataset in file order.
///
/// Only malformed cells are rejected here; invariant violations are left for
/// [`validate`] to report.
pub fn load_raw(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<SurveyDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidData(format!("cannot read header: {e}")))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column `{name}` not found in {}", path.display())))
    };
    let schema = &opts.schema;
    let x_cols = schema.x.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let z_cols = schema.z.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let w_col = find(&schema.w)?;
    let y_col = find(&schema.y)?;
    let r_col = find(&schema.r)?;
    let delta_col = match &schema.delta {
        Some(c) => Some(find(c)?),
        None if opts.setting == Setting::Setting1 => {
            return Err(Error::Config("Setting 1 requires a delta column".into()))
        }
        None => None,
    };

    let mut units = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::InvalidRow {
            row,
            message: format!("malformed record: {e}"),
        })?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let delta = match delta_col {
            Some(c) => parse_flag(cell(c), &headers[c], row)?.ok_or_else(|| Error::InvalidRow {
                row,
                message: "missing sampling indicator".into(),
            })?,
            None => true,
        };
        let r = match parse_flag(cell(r_col), &schema.r, row)? {
            Some(r) => r,
            None if !delta => false,
            None => {
                return Err(Error::InvalidRow {
                    row,
                    message: "missing response indicator for a sampled unit".into(),
                })
            }
        };
        let read_vec = |cols: &[usize], names: &[String]| -> Result<Option<Vec<f64>>> {
            let vals = cols
                .iter()
                .zip(names)
                .map(|(&c, name)| parse_cell(cell(c), name, row))
                .collect::<Result<Vec<_>>>()?;
            // a partially observed covariate vector counts as absent
            Ok(vals.into_iter().collect::<Option<Vec<f64>>>())
        };
        let x = read_vec(&x_cols, &schema.x)?;
        let z = if z_cols.is_empty() && delta {
            Some(Vec::new())
        } else {
            read_vec(&z_cols, &schema.z)?
        };
        let z = if delta { z } else { None };
        let w = parse_cell(cell(w_col), &schema.w, row)?;
        let y = parse_cell(cell(y_col), &schema.y, row)?;
        units.push(UnitRecord { x, z, w, y, delta, r });
    }

    let population_size = match (opts.setting, opts.population_size) {
        (Setting::Setting1, None) => units.len(),
        (Setting::Setting1, Some(n)) if n == units.len() => n,
        (Setting::Setting1, Some(n)) => {
            return Err(Error::Config(format!(
                "Setting 1 population size {n} does not match the {} rows in the file",
                units.len()
            )))
        }
        (_, Some(n)) => n,
        (s, None) => {
            return Err(Error::Config(format!(
                "{s} requires the population size N to be supplied"
            )))
        }
    };
    if !opts.setting.stores_unsampled() {
        units.retain(|u| u.delta);
    }
    Ok(SurveyDataset::raw(
        units,
        population_size,
        opts.setting,
        schema.x.clone(),
        schema.z.clone(),
    ))
}

/// Loads, validates and canonically orders a dataset.
pub fn load_dataset(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<SurveyDataset> {
    let raw = load_raw(path, opts)?;
    let report = validate(&raw);
    if let Some(v) = report.violations.into_iter().next() {
        return Err(match v.row {
            Some(row) => Error::InvalidRow {
                row,
                message: v.message,
            },
            None => Error::InvalidData(v.message),
        });
    }
    SurveyDataset::new(
        raw.units().to_vec(),
        raw.population_size(),
        raw.setting(),
        raw.x_names().to_vec(),
        raw.z_names().to_vec(),
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "NA".into(),
    }
}

/// Writes the dataset with the given delimiter.
///
/// Column names are the dataset's covariate names plus `w,y,delta,r`. Values
/// use the shortest representation that parses back to the same `f64`.
pub fn save_dataset(data: &SurveyDataset, path: impl AsRef<Path>, delimiter: u8) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))?;
    let io_err = |e: csv::Error| Error::Config(format!("write failed: {e}"));
    let mut header: Vec<String> = data.x_names().to_vec();
    header.extend(data.z_names().iter().cloned());
    header.extend(["w", "y", "delta", "r"].map(String::from));
    writer.write_record(&header).map_err(io_err)?;
    let px = data.x_names().len();
    let pz = data.z_names().len();
    for u in data.units() {
        let mut row = Vec::with_capacity(header.len());
        for j in 0..px {
            row.push(fmt_opt(u.x.as_ref().map(|x| x[j])));
        }
        for j in 0..pz {
            row.push(fmt_opt(u.z.as_ref().map(|z| z[j])));
        }
        row.push(fmt_opt(u.w));
        row.push(fmt_opt(u.y));
        row.push(if u.delta { "1" } else { "0" }.into());
        row.push(if u.r { "1" } else { "0" }.into());
        writer.write_record(&row).map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::Config(format!("write failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn four_row_setting1_counts() {
        let f = write("x,z,w,y,delta,r\n0.5,1,2,3.5,1,1\n0.1,2,4,NA,1,0\n0.2,,,,0,0\n0.3,NA,NA,NA,0,NA\n");
        let ds = load_dataset(f.path(), &LoadOptions::new(Setting::Setting1, None)).unwrap();
        assert_eq!(ds.n_respondents(), 1);
        assert_eq!(ds.n_sampled(), 2);
        assert_eq!(ds.population_size(), 4);
    }

    #[test]
    fn monotone_violation_is_rejected() {
        let f = write("x,z,w,y,delta,r\n0.5,1,2,3.5,1,1\n0.1,,,,0,1\n");
        let err = load_dataset(f.path(), &LoadOptions::new(Setting::Setting1, None)).unwrap_err();
        assert_eq!(
            err,
            Error::InvalidRow {
                row: 2,
                message: "monotone pattern violated at row 2".into()
            }
        );
    }

    #[test]
    fn setting2_keeps_declared_population() {
        let f = write("x,z,w,y,r\n1,1,3,1,1\n2,1,3,,0\n3,1,4,2,1\n");
        let mut opts = LoadOptions::new(Setting::Setting2, Some(10));
        opts.schema.delta = None;
        let ds = load_dataset(f.path(), &opts).unwrap();
        assert_eq!((ds.n_respondents(), ds.n_sampled(), ds.population_size()), (2, 3, 10));
        assert_eq!(ds.units().len(), 3);
    }

    #[test]
    fn setting2_requires_population_size() {
        let f = write("x,z,w,y,delta,r\n1,1,3,1,1,1\n");
        let err = load_dataset(f.path(), &LoadOptions::new(Setting::Setting2, None)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn low_weight_and_text_cells_rejected() {
        let f = write("x,z,w,y,delta,r\n1,1,0.5,1,1,1\n");
        let err = load_dataset(f.path(), &LoadOptions::new(Setting::Setting1, None)).unwrap_err();
        assert!(matches!(err, Error::InvalidRow { row: 1, .. }));
        let f = write("x,z,w,y,delta,r\n1,abc,2,1,1,1\n");
        let err = load_dataset(f.path(), &LoadOptions::new(Setting::Setting1, None)).unwrap_err();
        assert!(matches!(err, Error::InvalidRow { row: 1, ref message } if message.contains("non-numeric")));
    }

    #[test]
    fn outcome_without_response_rejected() {
        let f = write("x,z,w,y,delta,r\n1,1,2,1,1,0\n");
        let err = load_dataset(f.path(), &LoadOptions::new(Setting::Setting1, None)).unwrap_err();
        assert!(matches!(err, Error::InvalidRow { row: 1, .. }));
    }

    #[test]
    fn tab_delimiter() {
        let f = write("x\tz\tw\ty\tdelta\tr\n1\t1\t2\t1\t1\t1\n");
        let mut opts = LoadOptions::new(Setting::Setting1, None);
        opts.delimiter = b'\t';
        let ds = load_dataset(f.path(), &opts).unwrap();
        assert_eq!(ds.n_respondents(), 1);
    }

    #[test]
    fn save_then_load_is_identity() {
        let f = write(
            "x,z,w,y,delta,r\n0.1,0.7,2.25,-1.5,1,1\n0.30000000000000004,1e-7,3,NA,1,0\n-2,,,,0,0\n",
        );
        let opts = LoadOptions::new(Setting::Setting1, None);
        let ds = load_dataset(f.path(), &opts).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_dataset(&ds, out.path(), b',').unwrap();
        let back = load_dataset(out.path(), &opts).unwrap();
        assert_eq!(ds, back);
    }
}
