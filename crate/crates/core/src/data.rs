//! Observed data containers and their CSV layout.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major covariate matrix; one row per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    ncols: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn from_row_major(ncols: usize, data: Vec<f64>) -> Result<Self> {
        if ncols == 0 {
            return Err(Error::InvalidInput(
                "covariate matrix needs at least one column".into(),
            ));
        }
        if !data.len().is_multiple_of(ncols) {
            return Err(Error::InvalidInput(format!(
                "{} values do not fill rows of width {ncols}",
                data.len()
            )));
        }
        Ok(Self { ncols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != ncols {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} columns, expected {ncols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_row_major(ncols, data)
    }

    pub fn nrows(&self) -> usize {
        self.data.len() / self.ncols
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.ncols)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.ncols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            ncols: self.ncols,
            data,
        }
    }

    /// Design matrix with a leading column of ones.
    pub fn design(&self) -> DMatrix<f64> {
        let n = self.nrows();
        DMatrix::from_fn(n, self.ncols + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                self.row(i)[j - 1]
            }
        })
    }
}

/// Check that a slice only holds the codes -1 and +1.
pub fn check_signs(values: &[i8], name: &str) -> Result<()> {
    match values.iter().position(|&v| v != 1 && v != -1) {
        Some(i) => Err(Error::InvalidInput(format!(
            "{name}[{i}] = {} is not coded as -1/+1",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// n records of (outcome, covariates, treatment, instrument), treatment and
/// instrument coded -1/+1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedDataset {
    y: Vec<f64>,
    x: Covariates,
    a: Vec<i8>,
    z: Vec<i8>,
}

impl ObservedDataset {
    pub fn new(y: Vec<f64>, x: Covariates, a: Vec<i8>, z: Vec<i8>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidInput(
                "dataset must hold at least one record".into(),
            ));
        }
        for (len, name) in [(x.nrows(), "x"), (a.len(), "a"), (z.len(), "z")] {
            if len != n {
                return Err(Error::InvalidInput(format!(
                    "{name} has {len} rows, y has {n}"
                )));
            }
        }
        check_signs(&a, "a")?;
        check_signs(&z, "z")?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("y[{i}] is not finite")));
        }
        Ok(Self { y, x, a, z })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &Covariates {
        &self.x
    }

    pub fn a(&self) -> &[i8] {
        &self.a
    }

    pub fn z(&self) -> &[i8] {
        &self.z
    }

    /// Row indices with instrument value `z`.
    pub fn stratum(&self, z: i8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.z[i] == z).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            x: self.x.select_rows(idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            z: idx.iter().map(|&i| self.z[i]).collect(),
        }
    }

    /// Copy of the dataset with a different outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.x.clone(), self.a.clone(), self.z.clone())
    }

    /// Write as `y,x1,...,xp,a,z`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.dim()).map(|j| format!("x{j}")));
        header.push("a".into());
        header.push("z".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = Vec::with_capacity(self.dim() + 3);
            rec.push(self.y[i].to_string());
            rec.extend(self.x.row(i).iter().map(f64::to_string));
            rec.push(self.a[i].to_string());
            rec.push(self.z[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read the layout produced by [`ObservedDataset::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let ncols = header.len();
        if ncols < 4 || &header[0] != "y" || &header[ncols - 2] != "a" || &header[ncols - 1] != "z"
        {
            return Err(Error::InvalidInput(
                "expected header y,x1,...,xp,a,z".into(),
            ));
        }
        let p = ncols - 3;
        let (mut y, mut x, mut a, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec[k].trim().parse::<f64>().map_err(|_| {
                    Error::InvalidInput(format!(
                        "record {}: field {} is not a number",
                        line + 1,
                        k + 1
                    ))
                })
            };
            y.push(num(0)?);
            for k in 1..=p {
                x.push(num(k)?);
            }
            a.push(num(p + 1)? as i8);
            z.push(num(p + 2)? as i8);
        }
        Self::new(y, Covariates::from_row_major(p, x)?, a, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ObservedDataset {
        let x =
            Covariates::from_rows(&[vec![0.5, -1.0], vec![0.25, 2.0], vec![-0.125, 0.0]]).unwrap();
        ObservedDataset::new(vec![1.5, -2.0, 0.1], x, vec![1, -1, 1], vec![-1, -1, 1]).unwrap()
    }

    #[test]
    fn rejects_bad_codes_and_lengths() {
        let x = Covariates::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(ObservedDataset::new(vec![1.0, 2.0], x.clone(), vec![1, 0], vec![1, 1]).is_err());
        assert!(ObservedDataset::new(vec![1.0], x.clone(), vec![1, 1], vec![1, 1]).is_err());
        assert!(ObservedDataset::new(
            vec![],
            Covariates::from_row_major(1, vec![]).unwrap(),
            vec![],
            vec![]
        )
        .is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = tiny();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("y,x1,x2,a,z\n"));
        assert_eq!(ObservedDataset::read_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn design_has_intercept() {
        let d = tiny();
        let m = d.x().design();
        assert_eq!(m.ncols(), 3);
        assert_eq!(m[(1, 0)], 1.0);
        assert_eq!(m[(1, 2)], 2.0);
        assert_eq!(d.stratum(-1), vec![0, 1]);
    }
}
