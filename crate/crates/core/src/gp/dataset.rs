use std::fmt::Write as _;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};

/// Regression data for a vector-valued GP: inputs `x ∈ R^d` with one target
/// per output dimension, observed under Gaussian noise of variance
/// `noise_variance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    output_dim: usize,
    noise_variance: f64,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(input_dim: usize, output_dim: usize, noise_variance: f64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be at least 1"));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::invalid(
                "noise_variance",
                format!("must be positive, got {noise_variance}"),
            ));
        }
        Ok(Self {
            input_dim,
            output_dim,
            noise_variance,
            inputs: Vec::new(),
            targets: Vec::new(),
        })
    }

    pub fn from_rows(
        input_dim: usize,
        output_dim: usize,
        noise_variance: f64,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut d = Self::new(input_dim, output_dim, noise_variance)?;
        d.extend(&inputs, &targets)?;
        Ok(d)
    }

    pub fn push(&mut self, x: Vec<f64>, y: Vec<f64>) -> Result<()> {
        check_dim(self.input_dim, x.len())?;
        check_dim(self.output_dim, y.len())?;
        self.inputs.push(x);
        self.targets.push(y);
        Ok(())
    }

    pub fn extend(&mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
        check_dim(inputs.len(), targets.len())?;
        for (x, y) in inputs.iter().zip(targets) {
            check_dim(self.input_dim, x.len())?;
            check_dim(self.output_dim, y.len())?;
        }
        self.inputs.extend_from_slice(inputs);
        self.targets.extend_from_slice(targets);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    /// Targets of output dimension `i` as a column vector (`y_{n,i}`).
    pub fn target_column(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.targets.iter().map(|y| y[i]))
    }

    /// CSV with header `x1..xd,y1..yk`, one row per observation.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.input_dim)
            .map(|i| format!("x{i}"))
            .chain((1..=self.output_dim).map(|i| format!("y{i}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let row: Vec<String> = x.iter().chain(y).map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Parses the format written by [`Dataset::to_csv`]. Lines starting with
    /// `#` are ignored.
    pub fn from_csv(text: &str, noise_variance: f64) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines.next().ok_or(Error::Empty("dataset csv"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let input_dim = cols.iter().filter(|c| c.starts_with('x')).count();
        let output_dim = cols.iter().filter(|c| c.starts_with('y')).count();
        if input_dim + output_dim != cols.len() {
            return Err(Error::invalid("csv header", header.to_string()));
        }
        let mut d = Self::new(input_dim, output_dim, noise_variance)?;
        for line in lines {
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid("csv row", format!("{line}: {e}")))?;
            check_dim(cols.len(), vals.len())?;
            d.push(vals[..input_dim].to_vec(), vals[input_dim..].to_vec())?;
        }
        Ok(d)
    }
}
