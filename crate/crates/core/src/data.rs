//! Observation datasets: delimited text with columns `id, t, y1..yU, x1..`,
//! one row per participant-timepoint, empty response cells marking missing
//! values. Rows absent from the file become fully missing timepoints.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};

/// A rectangular panel of observations with a missingness mask and optional
/// within-level covariates.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n: usize,
    pub t_len: usize,
    pub u: usize,
    pub x_dim: usize,
    /// Original participant identifiers, sorted ascending; participant index
    /// `i` refers to `ids[i]`.
    pub ids: Vec<i64>,
    values: Vec<f64>,
    mask: Vec<bool>,
    x1: Vec<f64>,
}

impl Dataset {
    pub fn new(
        n: usize,
        t_len: usize,
        u: usize,
        x_dim: usize,
        ids: Vec<i64>,
        values: Vec<f64>,
        mask: Vec<bool>,
        x1: Vec<f64>,
    ) -> Result<Self> {
        if ids.len() != n
            || values.len() != n * t_len * u
            || mask.len() != n * t_len * u
            || x1.len() != n * t_len * x_dim
        {
            return Err(Error::Validation("dataset shape mismatch".into()));
        }
        Ok(Dataset { n, t_len, u, x_dim, ids, values, mask, x1 })
    }

    #[inline]
    fn pos(&self, i: usize, t: usize, r: usize) -> usize {
        (i * self.t_len + t) * self.u + r
    }

    pub fn value(&self, i: usize, t: usize, r: usize) -> f64 {
        self.values[self.pos(i, t, r)]
    }

    pub fn observed(&self, i: usize, t: usize, r: usize) -> bool {
        self.mask[self.pos(i, t, r)]
    }

    pub fn observed_total(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn x1_row(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * self.t_len + t) * self.x_dim;
        &self.x1[start..start + self.x_dim]
    }

    /// Per-participant covariate rows (one per timepoint); empty when the
    /// model has no within covariates.
    pub fn x1_rows(&self, i: usize) -> Vec<Vec<f64>> {
        if self.x_dim == 0 {
            return Vec::new();
        }
        (0..self.t_len).map(|t| self.x1_row(i, t).to_vec()).collect()
    }

    /// Values and mask for one participant, `t_len x u` row-major.
    pub fn participant_block(&self, i: usize) -> (Vec<f64>, Vec<bool>) {
        let start = i * self.t_len * self.u;
        let end = start + self.t_len * self.u;
        (self.values[start..end].to_vec(), self.mask[start..end].to_vec())
    }

    /// Reorder participants; used by permutation-invariance tests.
    pub fn permuted(&self, order: &[usize]) -> Result<Dataset> {
        if order.len() != self.n {
            return Err(Error::Validation("permutation length mismatch".into()));
        }
        let mut values = Vec::with_capacity(self.values.len());
        let mut mask = Vec::with_capacity(self.mask.len());
        let mut x1 = Vec::with_capacity(self.x1.len());
        let mut ids = Vec::with_capacity(self.n);
        for &i in order {
            ids.push(self.ids[i]);
            let start = i * self.t_len * self.u;
            values.extend_from_slice(&self.values[start..start + self.t_len * self.u]);
            mask.extend_from_slice(&self.mask[start..start + self.t_len * self.u]);
            let xs = i * self.t_len * self.x_dim;
            x1.extend_from_slice(&self.x1[xs..xs + self.t_len * self.x_dim]);
        }
        Dataset::new(self.n, self.t_len, self.u, self.x_dim, ids, values, mask, x1)
    }

    pub fn read_csv(path: &Path, u: usize, x_dim: usize) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path)
            .map_err(|e| Error::Io(format!("cannot open data file {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Io(format!("data header: {e}")))?
            .clone();
        let expected = 2 + u + x_dim;
        if headers.len() != expected {
            return Err(Error::Validation(format!(
                "data file has {} columns, expected {} (id, t, y1..y{u}{})",
                headers.len(),
                expected,
                if x_dim > 0 { format!(", x1..x{x_dim}") } else { String::new() }
            )));
        }

        struct Row {
            id: i64,
            t: usize,
            y: Vec<Option<f64>>,
            x: Vec<f64>,
        }
        let mut rows: Vec<Row> = Vec::new();
        let mut ids: BTreeSet<i64> = BTreeSet::new();
        let mut t_max = 0usize;
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Io(format!("data row {}: {e}", line + 2)))?;
            let id: i64 = record[0]
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("row {}: bad id '{}'", line + 2, &record[0])))?;
            let t: usize = record[1]
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("row {}: bad t '{}'", line + 2, &record[1])))?;
            if t == 0 {
                return Err(Error::Validation(format!("row {}: t must be >= 1", line + 2)));
            }
            let mut y = Vec::with_capacity(u);
            for k in 0..u {
                let cell = record[2 + k].trim();
                if cell.is_empty() {
                    y.push(None);
                } else {
                    let v: f64 = cell.parse().map_err(|_| {
                        Error::Validation(format!("row {}: bad y{} '{}'", line + 2, k + 1, cell))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Validation(format!(
                            "row {}: non-finite y{}",
                            line + 2,
                            k + 1
                        )));
                    }
                    y.push(Some(v));
                }
            }
            let mut x = Vec::with_capacity(x_dim);
            for k in 0..x_dim {
                let cell = record[2 + u + k].trim();
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Validation(format!(
                        "row {}: missing covariate x{} (covariate values are required)",
                        line + 2,
                        k + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "row {}: non-finite covariate x{}",
                        line + 2,
                        k + 1
                    )));
                }
                x.push(v);
            }
            ids.insert(id);
            t_max = t_max.max(t);
            rows.push(Row { id, t, y, x });
        }
        if rows.is_empty() {
            return Err(Error::Validation("data file has no rows".into()));
        }
        let ids: Vec<i64> = ids.into_iter().collect();
        let n = ids.len();
        let t_len = t_max;
        let mut values = vec![f64::NAN; n * t_len * u];
        let mut mask = vec![false; n * t_len * u];
        let mut x1 = vec![f64::NAN; n * t_len * x_dim];
        let mut x_seen = vec![false; n * t_len];
        for row in rows {
            let i = ids.binary_search(&row.id).expect("id collected above");
            let t = row.t - 1;
            for (r, cell) in row.y.iter().enumerate() {
                let pos = (i * t_len + t) * u + r;
                if let Some(v) = cell {
                    values[pos] = *v;
                    mask[pos] = true;
                }
            }
            for (k, v) in row.x.iter().enumerate() {
                x1[(i * t_len + t) * x_dim + k] = *v;
            }
            x_seen[i * t_len + t] = true;
        }
        if x_dim > 0 {
            // Absent rows leave covariates undefined; that is a load error
            // because every timepoint needs X1 for compilation.
            if x_seen.iter().any(|s| !s) {
                return Err(Error::Validation(
                    "models with within-level covariates require a data row for every (id, t)".into(),
                ));
            }
        }
        Dataset::new(n, t_len, u, x_dim, ids, values, mask, x1)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::Io(format!("cannot write data file {}: {e}", path.display())))?;
        let mut header = vec!["id".to_string(), "t".to_string()];
        header.extend((1..=self.u).map(|k| format!("y{k}")));
        header.extend((1..=self.x_dim).map(|k| format!("x{k}")));
        writer.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for i in 0..self.n {
            for t in 0..self.t_len {
                let mut record = vec![self.ids[i].to_string(), (t + 1).to_string()];
                for r in 0..self.u {
                    if self.observed(i, t, r) {
                        record.push(format!("{:.17e}", self.value(i, t, r)));
                    } else {
                        record.push(String::new());
                    }
                }
                for k in 0..self.x_dim {
                    record.push(format!("{:.17e}", self.x1_row(i, t)[k]));
                }
                writer.write_record(&record).map_err(|e| Error::Io(e.to_string()))?;
            }
        }
        writer.flush().map_err(|e| Error::Io(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_with_missing() {
        let dir = std::env::temp_dir().join(format!("dsemk-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.csv");
        let ds = Dataset::new(
            2,
            3,
            2,
            0,
            vec![4, 9],
            vec![
                1.0, 2.0, f64::NAN, 4.0, 5.0, 6.0, /* participant 9: */ 0.5, f64::NAN,
                f64::NAN, f64::NAN, 1.5, 2.5,
            ],
            vec![
                true, true, false, true, true, true, true, false, false, false, true, true,
            ],
            Vec::new(),
        )
        .unwrap();
        ds.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, 2, 0).unwrap();
        assert_eq!(back.n, 2);
        assert_eq!(back.t_len, 3);
        assert_eq!(back.ids, vec![4, 9]);
        assert_eq!(back.observed_total(), ds.observed_total());
        for i in 0..2 {
            for t in 0..3 {
                for r in 0..2 {
                    assert_eq!(back.observed(i, t, r), ds.observed(i, t, r));
                    if ds.observed(i, t, r) {
                        assert!((back.value(i, t, r) - ds.value(i, t, r)).abs() < 1e-15);
                    }
                }
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn absent_rows_become_missing_timepoints() {
        let dir = std::env::temp_dir().join(format!("dsemk-data2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sparse.csv");
        std::fs::write(&path, "id,t,y1\n1,1,0.5\n1,3,0.7\n").unwrap();
        let ds = Dataset::read_csv(&path, 1, 0).unwrap();
        assert_eq!(ds.t_len, 3);
        assert!(ds.observed(0, 0, 0));
        assert!(!ds.observed(0, 1, 0));
        assert!(ds.observed(0, 2, 0));
        std::fs::remove_dir_all(&dir).ok();
    }
}
