//! Stereo and continual-learning metrics: EPE, D1-all, the per-task error
//! matrix, FAE, and BWT.

use crate::error::{Error, Result};
use crate::tensor::{Grid, Mask};

/// Mean absolute disparity error over valid pixels.
pub fn epe(pred: &Grid, gt: &Grid, mask: &Mask) -> Result<f64> {
    if pred.h != gt.h || pred.w != gt.w || mask.h != gt.h || mask.w != gt.w {
        return Err(Error::ShapeMismatch("epe inputs".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.data.len() {
        if mask.data[i] {
            sum += (pred.data[i] - gt.data[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Percentage of valid pixels whose error exceeds 3 px and 5% of ground truth.
pub fn d1_all(pred: &Grid, gt: &Grid, mask: &Mask) -> Result<f64> {
    if pred.h != gt.h || pred.w != gt.w || mask.h != gt.h || mask.w != gt.w {
        return Err(Error::ShapeMismatch("d1 inputs".into()));
    }
    let mut bad = 0usize;
    let mut n = 0usize;
    for i in 0..pred.data.len() {
        if mask.data[i] {
            let err = (pred.data[i] - gt.data[i]).abs();
            if err > 3.0 && err > 0.05 * gt.data[i] {
                bad += 1;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(100.0 * bad as f64 / n as f64)
}

/// Lower-triangular error matrix: `rows[t][i]` is the error on task `i`'s
/// test set measured after finishing task `t` (both zero-based, `i <= t`).
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct ErrorMatrix {
    pub epe: Vec<Vec<f64>>,
    pub d1: Vec<Vec<f64>>,
}

impl ErrorMatrix {
    pub fn tasks_done(&self) -> usize {
        self.epe.len()
    }

    pub fn push_row(&mut self, epe_row: Vec<f64>, d1_row: Vec<f64>) -> Result<()> {
        let t = self.epe.len();
        if epe_row.len() != t + 1 || d1_row.len() != t + 1 {
            return Err(Error::InvalidState(format!(
                "error-matrix row {} must have {} entries",
                t,
                t + 1
            )));
        }
        self.epe.push(epe_row);
        self.d1.push(d1_row);
        Ok(())
    }

    fn check_final_row(&self, n: usize) -> Result<()> {
        if n == 0 || self.epe.len() < n || self.epe[n - 1].len() != n {
            return Err(Error::InvalidState(format!(
                "error matrix incomplete for N = {n} (rows {})",
                self.epe.len()
            )));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,model_task,eval_task,value\n");
        for (t, row) in self.epe.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                s.push_str(&format!("epe,{},{},{v:.17}\n", t + 1, i + 1));
            }
        }
        for (t, row) in self.d1.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                s.push_str(&format!("d1,{},{},{v:.17}\n", t + 1, i + 1));
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<ErrorMatrix> {
        let mut m = ErrorMatrix::default();
        let mut cells: Vec<(String, usize, usize, f64)> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Parse(format!("bad error-matrix line: '{line}'")));
            }
            let t: usize = parts[1].parse().map_err(|_| Error::Parse(line.into()))?;
            let i: usize = parts[2].parse().map_err(|_| Error::Parse(line.into()))?;
            let v: f64 = parts[3].parse().map_err(|_| Error::Parse(line.into()))?;
            cells.push((parts[0].to_string(), t, i, v));
        }
        let n = cells.iter().map(|c| c.1).max().unwrap_or(0);
        m.epe = (0..n).map(|t| vec![f64::NAN; t + 1]).collect();
        m.d1 = (0..n).map(|t| vec![f64::NAN; t + 1]).collect();
        for (metric, t, i, v) in cells {
            let row = match metric.as_str() {
                "epe" => &mut m.epe,
                "d1" => &mut m.d1,
                other => return Err(Error::Parse(format!("unknown metric '{other}'"))),
            };
            if t == 0 || i == 0 || i > t || t > n {
                return Err(Error::Parse(format!("bad matrix cell ({t},{i})")));
            }
            row[t - 1][i - 1] = v;
        }
        if m.epe.iter().flatten().chain(m.d1.iter().flatten()).any(|v| v.is_nan()) {
            return Err(Error::Parse("error matrix has missing cells".into()));
        }
        Ok(m)
    }
}

/// Final Average Error: mean of the last row, for both metrics.
pub fn compute_fae(matrix: &ErrorMatrix, n: usize) -> Result<(f64, f64)> {
    matrix.check_final_row(n)?;
    let fae_epe = matrix.epe[n - 1].iter().sum::<f64>() / n as f64;
    let fae_d1 = matrix.d1[n - 1].iter().sum::<f64>() / n as f64;
    Ok((fae_epe, fae_d1))
}

/// Backward Transfer: mean over earlier tasks of (final error - error when the
/// task finished). Positive means forgetting; exactly zero when history is
/// frozen bit-exactly.
pub fn compute_bwt(matrix: &ErrorMatrix, n: usize) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::Domain("BWT needs at least two tasks".into()));
    }
    matrix.check_final_row(n)?;
    let mut be = 0.0;
    let mut bd = 0.0;
    for i in 0..n - 1 {
        be += matrix.epe[n - 1][i] - matrix.epe[i][i];
        bd += matrix.d1[n - 1][i] - matrix.d1[i][i];
    }
    let denom = (n - 1) as f64;
    Ok((be / denom, bd / denom))
}
