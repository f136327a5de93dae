use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column roles for CSV ingestion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub response: Option<String>,
    pub cluster: Option<String>,
    #[serde(default)]
    pub time_series: bool,
}

/// A rectangular sample of real observations.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    names: Vec<String>,
    rows: DMatrix<f64>,
    response: Option<usize>,
    cluster_ids: Option<Vec<i64>>,
    is_time_series: bool,
}

impl DataSet {
    pub fn new(names: Vec<String>, rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::Model("data set has no rows".into()));
        }
        if names.len() != rows.ncols() {
            return Err(Error::Model(format!("{} column names for {} columns", names.len(), rows.ncols())));
        }
        Ok(Self {
            names,
            rows,
            response: None,
            cluster_ids: None,
            is_time_series: false,
        })
    }

    pub fn with_response(mut self, column: &str) -> Result<Self> {
        self.response = Some(self.column_index(column)?);
        Ok(self)
    }

    pub fn with_clusters(mut self, ids: Vec<i64>) -> Result<Self> {
        if ids.len() != self.n() {
            return Err(Error::Model(format!("{} cluster ids for {} rows", ids.len(), self.n())));
        }
        self.cluster_ids = Some(ids);
        Ok(self)
    }

    pub fn as_time_series(mut self) -> Self {
        self.is_time_series = true;
        self
    }

    /// Reads a comma-separated file with a header row. The cluster column, if
    /// named, must hold integer labels.
    pub fn from_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let names: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut values = Vec::new();
        let mut n = 0;
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let line = record.position().map_or(i as u64 + 2, |p| p.line());
            if record.len() != names.len() {
                return Err(Error::Parse {
                    location: format!("{}:{line}", path.display()),
                    reason: format!("expected {} fields, found {}", names.len(), record.len()),
                });
            }
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    location: format!("{}:{line} column '{}'", path.display(), names[j]),
                    reason: format!("'{field}' is not a number"),
                })?;
                values.push(v);
            }
            n += 1;
        }
        let rows = DMatrix::from_row_slice(n, names.len(), &values);
        let mut data = DataSet::new(names, rows)?;
        if let Some(r) = &roles.response {
            data = data.with_response(r)?;
        }
        if let Some(c) = &roles.cluster {
            let col = data.column(c)?;
            if col.iter().any(|v| v.fract() != 0.0) {
                return Err(Error::Parse {
                    location: format!("{} column '{c}'", path.display()),
                    reason: "cluster labels must be integers".into(),
                });
            }
            let ids = col.iter().map(|v| *v as i64).collect();
            data = data.with_clusters(ids)?;
        }
        if roles.time_series {
            data = data.as_time_series();
        }
        Ok(data)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for r in 0..self.n() {
            w.write_record(self.rows.row(r).iter().map(|v| format!("{v}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn response(&self) -> Option<usize> {
        self.response
    }

    pub fn cluster_ids(&self) -> Option<&[i64]> {
        self.cluster_ids.as_deref()
    }

    pub fn is_time_series(&self) -> bool {
        self.is_time_series
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("no column named '{name}'")))
    }

    pub fn column(&self, name: &str) -> Result<DVector<f64>> {
        Ok(self.rows.column(self.column_index(name)?).into_owned())
    }

    /// Design matrix from named columns, optionally with a leading intercept.
    pub fn design(&self, columns: &[String], intercept: bool) -> Result<DMatrix<f64>> {
        let idx: Vec<usize> = columns.iter().map(|c| self.column_index(c)).collect::<Result<_>>()?;
        let k = idx.len() + usize::from(intercept);
        Ok(DMatrix::from_fn(self.n(), k, |i, j| {
            if intercept && j == 0 {
                1.0
            } else {
                self.rows[(i, idx[j - usize::from(intercept)])]
            }
        }))
    }

    /// Response column, or an error when none is configured.
    pub fn response_column(&self) -> Result<DVector<f64>> {
        let r = self.response.ok_or_else(|| Error::Config("data set has no response column".into()))?;
        Ok(self.rows.column(r).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn reads_csv_with_roles() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "y,x,g\n1.5,2,1\n0.5,3,1\n2.0,4,2").unwrap();
        let roles = ColumnRoles {
            response: Some("y".into()),
            cluster: Some("g".into()),
            time_series: false,
        };
        let d = DataSet::from_csv(f.path(), &roles).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.response(), Some(0));
        assert_eq!(d.cluster_ids(), Some(&[1, 1, 2][..]));
        let x = d.design(&["x".into()], true).unwrap();
        assert_eq!(x[(2, 0)], 1.0);
        assert_eq!(x[(2, 1)], 4.0);
    }

    #[test]
    fn reports_bad_field_location() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "y,x\n1,2\n3,oops").unwrap();
        let err = DataSet::from_csv(f.path(), &ColumnRoles::default()).unwrap_err();
        match err {
            Error::Parse { location, .. } => assert!(location.contains(":3"), "{location}"),
            e => panic!("unexpected {e}"),
        }
    }
}
