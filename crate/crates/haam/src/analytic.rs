//! Analytic complex functions and the harmonic scalar fields extracted from
//! their real or imaginary parts.
//!
//! Each basis function is analytic (satisfies the Cauchy-Riemann equations),
//! so both parts are harmonic: their Laplacian vanishes everywhere. A
//! [`HarmonicModel`] is a weighted combination of bases together with a part
//! selector, and stays harmonic by linearity.

use ndarray::Array2;
use num_complex::Complex64;

use crate::coords::CoordGrid;
use crate::error::{HaamError, Result};

/// `cosh`/`sinh` overflow in double precision near `exp(709)`; reject sine
/// evaluations whose imaginary coordinate would get there.
const SINE_IM_LIMIT: f64 = 700.0;

/// A known analytic basis function.
///
/// The sine basis carries no intrinsic coefficients: its frequency, phase and
/// orientation come from the affine transform applied to the coordinate grid.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisFunction {
    /// `f(z) = c0*z^2 + c1*z + c2` with real coefficients.
    QuadraticPolynomial { coefficients: [f64; 3] },
    /// `f(z) = sin(z) = sin(x)*cosh(y) + i*cos(x)*sinh(y)`.
    Sine,
}

impl BasisFunction {
    pub fn quadratic(c0: f64, c1: f64, c2: f64) -> Self {
        BasisFunction::QuadraticPolynomial {
            coefficients: [c0, c1, c2],
        }
    }

    /// Number of learnable coefficients carried by this basis.
    pub fn coefficient_count(&self) -> usize {
        match self {
            BasisFunction::QuadraticPolynomial { .. } => 3,
            BasisFunction::Sine => 0,
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            BasisFunction::QuadraticPolynomial { coefficients } => {
                coefficients.iter().all(|c| c.is_finite())
            }
            BasisFunction::Sine => true,
        }
    }

    /// Evaluate `f(z)`.
    pub fn eval(&self, z: Complex64) -> Result<Complex64> {
        let value = match self {
            BasisFunction::QuadraticPolynomial { coefficients } => {
                (z * z).scale(coefficients[0]) + z.scale(coefficients[1]) + coefficients[2]
            }
            BasisFunction::Sine => {
                if z.im.abs() > SINE_IM_LIMIT {
                    return Err(HaamError::FieldOverflow);
                }
                z.sin()
            }
        };
        if value.re.is_finite() && value.im.is_finite() {
            Ok(value)
        } else {
            Err(HaamError::FieldOverflow)
        }
    }

    /// Evaluate the complex derivative `f'(z)`.
    ///
    /// For an analytic `f = u + iv`, `f' = u_x + i*v_x`, which together with
    /// the Cauchy-Riemann equations yields every first spatial partial of
    /// both parts.
    pub fn derivative(&self, z: Complex64) -> Result<Complex64> {
        let value = match self {
            BasisFunction::QuadraticPolynomial { coefficients } => {
                z.scale(2.0 * coefficients[0]) + coefficients[1]
            }
            BasisFunction::Sine => {
                if z.im.abs() > SINE_IM_LIMIT {
                    return Err(HaamError::FieldOverflow);
                }
                z.cos()
            }
        };
        if value.re.is_finite() && value.im.is_finite() {
            Ok(value)
        } else {
            Err(HaamError::FieldOverflow)
        }
    }

    /// Partial derivative of `f(z)` with respect to coefficient `index`.
    fn coefficient_partial(&self, index: usize, z: Complex64) -> Complex64 {
        match self {
            BasisFunction::QuadraticPolynomial { .. } => match index {
                0 => z * z,
                1 => z,
                2 => Complex64::new(1.0, 0.0),
                _ => panic!("quadratic polynomial has 3 coefficients, index {index}"),
            },
            BasisFunction::Sine => panic!("sine basis has no coefficients"),
        }
    }
}

/// Which harmonic conjugate of `f = u + iv` to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HarmonicPart {
    Real,
    Imaginary,
}

impl HarmonicPart {
    pub fn select(self, value: Complex64) -> f64 {
        match self {
            HarmonicPart::Real => value.re,
            HarmonicPart::Imaginary => value.im,
        }
    }
}

/// A real scalar field sampled over an image grid. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    values: Array2<f64>,
}

impl ScalarField {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HaamError::FieldOverflow);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in self.values.iter() {
            min = min.min(v);
            max = max.max(v);
        }
        (min, max)
    }
}

/// A weighted combination of analytic bases plus a part selector; the
/// learnable parameter set is every basis coefficient and every combination
/// weight.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicModel {
    bases: Vec<BasisFunction>,
    weights: Vec<f64>,
    part: HarmonicPart,
}

impl HarmonicModel {
    pub fn new(
        bases: Vec<BasisFunction>,
        weights: Vec<f64>,
        part: HarmonicPart,
    ) -> Result<Self> {
        if bases.is_empty() {
            return Err(HaamError::InvalidParameter(
                "harmonic model needs at least one basis".into(),
            ));
        }
        if bases.len() != weights.len() {
            return Err(HaamError::InvalidParameter(format!(
                "{} bases but {} weights",
                bases.len(),
                weights.len()
            )));
        }
        if !weights.iter().all(|w| w.is_finite()) || !bases.iter().all(|b| b.is_valid()) {
            return Err(HaamError::InvalidParameter(
                "harmonic model parameters must be finite".into(),
            ));
        }
        Ok(Self {
            bases,
            weights,
            part,
        })
    }

    /// A single weighted basis.
    pub fn single(basis: BasisFunction, weight: f64, part: HarmonicPart) -> Self {
        Self::new(vec![basis], vec![weight], part).expect("single basis is valid")
    }

    pub fn bases(&self) -> &[BasisFunction] {
        &self.bases
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn part(&self) -> HarmonicPart {
        self.part
    }

    /// Total learnable parameter count: all coefficients plus all weights.
    pub fn param_count(&self) -> usize {
        self.bases
            .iter()
            .map(|b| b.coefficient_count() + 1)
            .sum()
    }

    /// Flat parameter vector. Per basis, in order: its coefficients, then its
    /// combination weight. [`Self::set_params`] and
    /// [`Self::parameter_gradients`] use the same layout.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (basis, &w) in self.bases.iter().zip(&self.weights) {
            if let BasisFunction::QuadraticPolynomial { coefficients } = basis {
                out.extend_from_slice(coefficients);
            }
            out.push(w);
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(HaamError::InvalidParameter(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut cursor = 0;
        for (basis, weight) in self.bases.iter_mut().zip(self.weights.iter_mut()) {
            if let BasisFunction::QuadraticPolynomial { coefficients } = basis {
                coefficients.copy_from_slice(&values[cursor..cursor + 3]);
                cursor += 3;
            }
            *weight = values[cursor];
            cursor += 1;
        }
        Ok(())
    }

    fn combined(&self, z: Complex64) -> Result<Complex64> {
        let mut acc = Complex64::new(0.0, 0.0);
        for (basis, &w) in self.bases.iter().zip(&self.weights) {
            acc += basis.eval(z)?.scale(w);
        }
        Ok(acc)
    }

    /// Sample the selected harmonic part over the grid:
    /// `h(x, y) = sum_k w_k * part(f_k(x + yi))`.
    pub fn evaluate(&self, grid: &CoordGrid) -> Result<ScalarField> {
        let (h, w) = grid.shape();
        let mut values = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                values[[i, j]] = self.part.select(self.combined(grid.point(i, j))?);
            }
        }
        ScalarField::new(values)
    }

    /// Spatial gradient `(dh/dx, dh/dy)` of the field over the grid, from the
    /// derivative function: for the real part `(Re f', -Im f')`, for the
    /// imaginary part `(Im f', Re f')`.
    pub fn spatial_gradient(&self, grid: &CoordGrid) -> Result<(ScalarField, ScalarField)> {
        let (h, w) = grid.shape();
        let mut dx = Array2::zeros((h, w));
        let mut dy = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let z = grid.point(i, j);
                let mut fp = Complex64::new(0.0, 0.0);
                for (basis, &wt) in self.bases.iter().zip(&self.weights) {
                    fp += basis.derivative(z)?.scale(wt);
                }
                match self.part {
                    HarmonicPart::Real => {
                        dx[[i, j]] = fp.re;
                        dy[[i, j]] = -fp.im;
                    }
                    HarmonicPart::Imaginary => {
                        dx[[i, j]] = fp.im;
                        dy[[i, j]] = fp.re;
                    }
                }
            }
        }
        Ok((ScalarField::new(dx)?, ScalarField::new(dy)?))
    }

    /// Per-parameter derivative fields `dh/dp`, aligned with
    /// [`Self::params`]: for a coefficient `c` of basis `k`,
    /// `dh/dc = w_k * part(df_k/dc)`; for a weight, `dh/dw_k = part(f_k)`.
    pub fn parameter_gradients(&self, grid: &CoordGrid) -> Result<Vec<ScalarField>> {
        let (h, w) = grid.shape();
        let mut fields: Vec<Array2<f64>> = (0..self.param_count())
            .map(|_| Array2::zeros((h, w)))
            .collect();
        for i in 0..h {
            for j in 0..w {
                let z = grid.point(i, j);
                let mut cursor = 0;
                for (basis, &wt) in self.bases.iter().zip(&self.weights) {
                    for c in 0..basis.coefficient_count() {
                        let partial = basis.coefficient_partial(c, z);
                        fields[cursor][[i, j]] = self.part.select(partial.scale(wt));
                        cursor += 1;
                    }
                    fields[cursor][[i, j]] = self.part.select(basis.eval(z)?);
                    cursor += 1;
                }
            }
        }
        fields.into_iter().map(ScalarField::new).collect()
    }
}

/// Cauchy-Riemann residual `|u_x - v_y| + |u_y + v_x|` at `z`, with all four
/// partials taken by central finite differences of the given step. Tends to
/// zero as the step shrinks exactly when the basis is analytic at `z`.
pub fn cauchy_riemann_residual(basis: &BasisFunction, z: Complex64, step: f64) -> Result<f64> {
    if step <= 0.0 {
        return Err(HaamError::InvalidParameter(
            "finite-difference step must be positive".into(),
        ));
    }
    let dx = Complex64::new(step, 0.0);
    let dy = Complex64::new(0.0, step);
    let fxp = basis.eval(z + dx)?;
    let fxm = basis.eval(z - dx)?;
    let fyp = basis.eval(z + dy)?;
    let fym = basis.eval(z - dy)?;

    let u_x = (fxp.re - fxm.re) / (2.0 * step);
    let v_x = (fxp.im - fxm.im) / (2.0 * step);
    let u_y = (fyp.re - fym.re) / (2.0 * step);
    let v_y = (fyp.im - fym.im) / (2.0 * step);

    Ok((u_x - v_y).abs() + (u_y + v_x).abs())
}

/// Maximum interior 5-point discrete-Laplacian magnitude of a sampled field,
/// normalized by the squared grid spacing.
///
/// For a field sampled from a harmonic function on a uniform grid this is the
/// pure truncation term and shrinks as `O(spacing^2)`.
pub fn discrete_laplacian_residual(field: &ScalarField, spacing: f64) -> f64 {
    let (h, w) = field.shape();
    assert!(h >= 3 && w >= 3, "need a grid with interior points");
    let v = field.values();
    let mut worst: f64 = 0.0;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let lap = v[[i - 1, j]] + v[[i + 1, j]] + v[[i, j - 1]] + v[[i, j + 1]]
                - 4.0 * v[[i, j]];
            worst = worst.max(lap.abs());
        }
    }
    worst / (spacing * spacing)
}
