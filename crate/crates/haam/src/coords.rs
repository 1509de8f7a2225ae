//! Normalized image coordinate grids and the learnable affine transform
//! (rotation, scaling, translation) applied to them.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{HaamError, Result};

/// Lower clamp for the scale factors. The feasible interval is open at zero;
/// projection closes it here so transforms stay numerically sane.
pub const SCALE_MIN: f64 = 1e-3;
/// Upper bound for the scale factors.
pub const SCALE_MAX: f64 = 10.0;

/// Per-pixel coordinates over the complex plane, `z = x + yi`.
///
/// A freshly normalized grid spans the zero-centered unit square: both axes
/// run over `[-1, 1]`. Applying an affine transform moves the points around,
/// so transformed grids are not restricted to that square.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    xs: Array2<f64>,
    ys: Array2<f64>,
}

impl CoordGrid {
    /// Build the normalized grid for an `height x width` image: pixel
    /// `(row i, col j)` maps to `x = 2j/(W-1) - 1`, `y = 2i/(H-1) - 1`, so
    /// corners land exactly on `(+-1, +-1)`.
    pub fn normalized(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(HaamError::InvalidDimension(format!(
                "coordinate grid needs height and width >= 2, got {height}x{width}"
            )));
        }
        let xs = Array2::from_shape_fn((height, width), |(_, j)| {
            2.0 * j as f64 / (width - 1) as f64 - 1.0
        });
        let ys = Array2::from_shape_fn((height, width), |(i, _)| {
            2.0 * i as f64 / (height - 1) as f64 - 1.0
        });
        Ok(Self { xs, ys })
    }

    /// Build a grid from explicit coordinate arrays.
    pub fn from_parts(xs: Array2<f64>, ys: Array2<f64>) -> Result<Self> {
        if xs.dim() != ys.dim() {
            return Err(HaamError::ShapeMismatch(format!(
                "coordinate arrays disagree: {:?} vs {:?}",
                xs.dim(),
                ys.dim()
            )));
        }
        if xs.iter().any(|v| !v.is_finite()) || ys.iter().any(|v| !v.is_finite()) {
            return Err(HaamError::InvalidParameter(
                "coordinate grid contains non-finite values".into(),
            ));
        }
        Ok(Self { xs, ys })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.xs.dim()
    }

    pub fn xs(&self) -> &Array2<f64> {
        &self.xs
    }

    pub fn ys(&self) -> &Array2<f64> {
        &self.ys
    }

    /// The complex coordinate of pixel `(row, col)`.
    pub fn point(&self, row: usize, col: usize) -> Complex64 {
        Complex64::new(self.xs[[row, col]], self.ys[[row, col]])
    }
}

/// Learnable coordinate-space transform parameters.
///
/// `rotation_cos` is the cosine of the rotation angle in `[-1, 1]`; since the
/// sine is reconstructed as `+sqrt(1 - r^2)`, only angles in `[0, pi]` are
/// representable. Scales live in `(0, 10]` (projection clamps to
/// `[SCALE_MIN, SCALE_MAX]`) and translations in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_cos: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    pub translate_x: f64,
    pub translate_y: f64,
}

/// Number of scalar parameters in an [`AffineParams`] set.
pub const AFFINE_PARAM_COUNT: usize = 5;

impl AffineParams {
    /// The identity transform: no rotation, unit scales, no translation.
    pub fn identity() -> Self {
        Self {
            rotation_cos: 1.0,
            scale_x: 1.0,
            scale_y: 1.0,
            translate_x: 0.0,
            translate_y: 0.0,
        }
    }

    pub fn is_feasible(&self) -> bool {
        (-1.0..=1.0).contains(&self.rotation_cos)
            && (SCALE_MIN..=SCALE_MAX).contains(&self.scale_x)
            && (SCALE_MIN..=SCALE_MAX).contains(&self.scale_y)
            && (-1.0..=1.0).contains(&self.translate_x)
            && (-1.0..=1.0).contains(&self.translate_y)
    }

    /// Clamp every parameter into its feasible range. Idempotent.
    pub fn project(&self) -> Self {
        Self {
            rotation_cos: self.rotation_cos.clamp(-1.0, 1.0),
            scale_x: self.scale_x.clamp(SCALE_MIN, SCALE_MAX),
            scale_y: self.scale_y.clamp(SCALE_MIN, SCALE_MAX),
            translate_x: self.translate_x.clamp(-1.0, 1.0),
            translate_y: self.translate_y.clamp(-1.0, 1.0),
        }
    }

    /// Flat parameter vector in the fixed order
    /// `[rotation_cos, scale_x, scale_y, translate_x, translate_y]`.
    pub fn params(&self) -> [f64; AFFINE_PARAM_COUNT] {
        [
            self.rotation_cos,
            self.scale_x,
            self.scale_y,
            self.translate_x,
            self.translate_y,
        ]
    }

    pub fn set_params(&mut self, values: &[f64; AFFINE_PARAM_COUNT]) {
        self.rotation_cos = values[0];
        self.scale_x = values[1];
        self.scale_y = values[2];
        self.translate_x = values[3];
        self.translate_y = values[4];
    }

    fn sin_of_rotation(&self) -> f64 {
        (1.0 - self.rotation_cos * self.rotation_cos).max(0.0).sqrt()
    }

    /// Apply rotation, then scaling, then translation to every grid point:
    ///
    /// ```text
    /// [x'; y']  = [[r, -sqrt(1-r^2)], [sqrt(1-r^2), r]] [x; y]
    /// x''       = x' * s_x            y''  = y' * s_y
    /// x'''      = x'' - t_x * s_x     y''' = y'' - t_y * s_y
    /// ```
    pub fn apply(&self, grid: &CoordGrid) -> CoordGrid {
        let r = self.rotation_cos;
        let q = self.sin_of_rotation();
        let (h, w) = grid.shape();
        let mut xs = Array2::zeros((h, w));
        let mut ys = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let x = grid.xs[[i, j]];
                let y = grid.ys[[i, j]];
                let xr = r * x - q * y;
                let yr = q * x + r * y;
                xs[[i, j]] = xr * self.scale_x - self.translate_x * self.scale_x;
                ys[[i, j]] = yr * self.scale_y - self.translate_y * self.scale_y;
            }
        }
        CoordGrid { xs, ys }
    }

    /// Analytic derivatives of the transformed coordinates with respect to
    /// each parameter, evaluated over `grid` (the untransformed input grid).
    ///
    /// At `|rotation_cos| = 1` the derivative of `sqrt(1-r^2)` is unbounded;
    /// the convention here drops that term (treats it as zero) so updates
    /// stay finite and projection handles the boundary.
    pub fn gradients(&self, grid: &CoordGrid) -> AffineGrads {
        let r = self.rotation_cos;
        let q = self.sin_of_rotation();
        // dq/dr = -r / q, zeroed at the q = 0 boundary.
        let dq_dr = if q > 0.0 { -r / q } else { 0.0 };
        let (h, w) = grid.shape();

        let mut d_rot = CoordDeriv::zeros(h, w);
        let mut d_sx = CoordDeriv::zeros(h, w);
        let mut d_sy = CoordDeriv::zeros(h, w);
        let mut d_tx = CoordDeriv::zeros(h, w);
        let mut d_ty = CoordDeriv::zeros(h, w);

        for i in 0..h {
            for j in 0..w {
                let x = grid.xs[[i, j]];
                let y = grid.ys[[i, j]];
                let xr = r * x - q * y;
                let yr = q * x + r * y;

                d_rot.dx[[i, j]] = self.scale_x * (x - y * dq_dr);
                d_rot.dy[[i, j]] = self.scale_y * (x * dq_dr + y);

                d_sx.dx[[i, j]] = xr - self.translate_x;
                d_sy.dy[[i, j]] = yr - self.translate_y;

                d_tx.dx[[i, j]] = -self.scale_x;
                d_ty.dy[[i, j]] = -self.scale_y;
            }
        }

        AffineGrads {
            rotation_cos: d_rot,
            scale_x: d_sx,
            scale_y: d_sy,
            translate_x: d_tx,
            translate_y: d_ty,
        }
    }
}

/// Derivative of the transformed coordinates with respect to one parameter:
/// `dx[i,j] = d x'''/d p`, `dy[i,j] = d y'''/d p`.
#[derive(Debug, Clone)]
pub struct CoordDeriv {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
}

impl CoordDeriv {
    fn zeros(h: usize, w: usize) -> Self {
        Self {
            dx: Array2::zeros((h, w)),
            dy: Array2::zeros((h, w)),
        }
    }
}

/// Coordinate derivatives for all five affine parameters.
#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub rotation_cos: CoordDeriv,
    pub scale_x: CoordDeriv,
    pub scale_y: CoordDeriv,
    pub translate_x: CoordDeriv,
    pub translate_y: CoordDeriv,
}

impl AffineGrads {
    /// Derivative fields in the order of [`AffineParams::params`].
    pub fn by_index(&self, index: usize) -> &CoordDeriv {
        match index {
            0 => &self.rotation_cos,
            1 => &self.scale_x,
            2 => &self.scale_y,
            3 => &self.translate_x,
            4 => &self.translate_y,
            _ => panic!("affine parameter index {index} out of range"),
        }
    }
}
