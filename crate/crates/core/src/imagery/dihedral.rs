use ndarray::{Array3, ArrayView3, Axis};
use rand::Rng;

use super::chip::Chip;
use crate::error::{Error, Result};

/// An element of the symmetry group of the square.
///
/// `code = rotation + 4 * flip`: the image is first mirrored left-right when
/// `flip` is set, then rotated `rotation` quarter turns counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DihedralTransform(u8);

/// 2x2 integer matrices acting on (x, y) with y pointing up.
type Mat = [[i8; 2]; 2];

const ROT: Mat = [[0, -1], [1, 0]];
const FLIP: Mat = [[-1, 0], [0, 1]];
const ID: Mat = [[1, 0], [0, 1]];

fn mul(a: Mat, b: Mat) -> Mat {
    let mut m = [[0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    m
}

impl DihedralTransform {
    pub const IDENTITY: DihedralTransform = DihedralTransform(0);
    pub const ROT90: DihedralTransform = DihedralTransform(1);
    pub const FLIP: DihedralTransform = DihedralTransform(4);

    pub fn new(code: u8) -> Result<Self> {
        if code < 8 {
            Ok(DihedralTransform(code))
        } else {
            Err(Error::InvalidArgument(format!("dihedral code {code} not in 0..8")))
        }
    }

    pub fn all() -> impl Iterator<Item = DihedralTransform> {
        (0..8).map(DihedralTransform)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        DihedralTransform(rng.random_range(0..8))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn rotation(self) -> u8 {
        self.0 % 4
    }

    pub fn flips(self) -> bool {
        self.0 >= 4
    }

    fn matrix(self) -> Mat {
        let mut m = if self.flips() { FLIP } else { ID };
        for _ in 0..self.rotation() {
            m = mul(ROT, m);
        }
        m
    }

    fn from_matrix(m: Mat) -> Self {
        Self::all()
            .find(|t| t.matrix() == m)
            .expect("dihedral group is closed")
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: DihedralTransform) -> Self {
        Self::from_matrix(mul(self.matrix(), other.matrix()))
    }

    pub fn inverse(self) -> Self {
        Self::all()
            .find(|t| self.compose(*t) == Self::IDENTITY)
            .expect("every group element has an inverse")
    }

    /// Permutes the pixels of a `(row, col, band)` array.
    pub fn apply_array<T: Clone>(self, img: ArrayView3<'_, T>) -> Array3<T> {
        let mut view = img;
        if self.flips() {
            view.invert_axis(Axis(1));
        }
        for _ in 0..self.rotation() {
            // counter-clockwise quarter turn: transpose, then reverse rows
            view.swap_axes(0, 1);
            view.invert_axis(Axis(0));
        }
        view.as_standard_layout().into_owned()
    }
}

/// Applies a label-preserving symmetry to both raw and model pixels.
pub fn apply_dihedral(chip: &Chip, t: DihedralTransform) -> Chip {
    Chip {
        tile_id: chip.tile_id.clone(),
        pixels_raw: t.apply_array(chip.pixels_raw.view()),
        pixels_model: chip.pixels_model.as_ref().map(|m| t.apply_array(m.view())),
        acquisition_year: chip.acquisition_year,
    }
}
