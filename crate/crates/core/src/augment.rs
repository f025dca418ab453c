//! The eight flip/rotation transforms used for training augmentation and
//! the test-time self-ensemble.
//!
//! A transform applies left-right flip, then up-down flip, then a single
//! counter-clockwise 90° rotation, each optionally. That composition order
//! and the rotation direction are fixed conventions.

use rand::Rng;

use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeometricTransform {
    pub flip_lr: bool,
    pub flip_ud: bool,
    pub rot90: bool,
}

impl GeometricTransform {
    pub const IDENTITY: Self = GeometricTransform {
        flip_lr: false,
        flip_ud: false,
        rot90: false,
    };

    /// All 8 transforms: the four flip combinations and their rotations.
    pub fn all() -> [GeometricTransform; 8] {
        let mut out = [GeometricTransform::IDENTITY; 8];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = GeometricTransform {
                flip_lr: i & 1 != 0,
                flip_ud: i & 2 != 0,
                rot90: i & 4 != 0,
            };
        }
        out
    }
}

/// Each of the three mappings is applied independently with probability 1/2.
pub fn sample_augmentation(rng: &mut impl Rng) -> GeometricTransform {
    GeometricTransform {
        flip_lr: rng.gen::<bool>(),
        flip_ud: rng.gen::<bool>(),
        rot90: rng.gen::<bool>(),
    }
}

pub fn flip_lr<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let Shape { n, c, h, w } = t.shape;
    let mut out = Tensor::zeros(t.shape);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, y, w - 1 - x);
                }
            }
        }
    }
    out
}

pub fn flip_ud<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let Shape { n, c, h, w } = t.shape;
    let mut out = Tensor::zeros(t.shape);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src = t.idx(ni, ci, h - 1 - y, 0);
                let dst = out.idx(ni, ci, y, 0);
                out.data[dst..dst + w].copy_from_slice(&t.data[src..src + w]);
            }
        }
    }
    out
}

/// Counter-clockwise 90°: out(y, x) = in(x, H_out - 1 - y) with swapped dims.
pub fn rot90_ccw<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let Shape { n, c, h, w } = t.shape;
    let mut out = Tensor::zeros(Shape::new(n, c, w, h));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..w {
                for x in 0..h {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, x, w - 1 - y);
                }
            }
        }
    }
    out
}

pub fn rot90_cw<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let Shape { n, c, h, w } = t.shape;
    let mut out = Tensor::zeros(Shape::new(n, c, w, h));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..w {
                for x in 0..h {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, h - 1 - x, y);
                }
            }
        }
    }
    out
}

pub fn apply_geometric<S: Scalar>(t: GeometricTransform, image: &Tensor<S>) -> Tensor<S> {
    let mut out = image.clone();
    if t.flip_lr {
        out = flip_lr(&out);
    }
    if t.flip_ud {
        out = flip_ud(&out);
    }
    if t.rot90 {
        out = rot90_ccw(&out);
    }
    out
}

/// Closed-form inverse: undo the rotation, then the flips.
pub fn invert_geometric<S: Scalar>(t: GeometricTransform, image: &Tensor<S>) -> Tensor<S> {
    let mut out = image.clone();
    if t.rot90 {
        out = rot90_cw(&out);
    }
    if t.flip_ud {
        out = flip_ud(&out);
    }
    if t.flip_lr {
        out = flip_lr(&out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn pattern_2x3() -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, 2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()
    }

    #[test]
    fn flip_lr_is_involution() {
        let x = pattern_2x3();
        assert_eq!(flip_lr(&flip_lr(&x)).data, x.data);
        assert_eq!(flip_lr(&x).data, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn both_flips_equal_rot180() {
        let x = pattern_2x3();
        let both = flip_ud(&flip_lr(&x));
        let r180 = rot90_ccw(&rot90_ccw(&x));
        assert_eq!(both.data, r180.data);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let x = pattern_2x3();
        let mut y = x.clone();
        for _ in 0..4 {
            y = rot90_ccw(&y);
        }
        assert_eq!(y.data, x.data);
        assert_eq!(rot90_cw(&rot90_ccw(&x)).data, x.data);
    }

    #[test]
    fn apply_then_invert_all_eight() {
        let x = pattern_2x3();
        for t in GeometricTransform::all() {
            let back = invert_geometric(t, &apply_geometric(t, &x));
            assert_eq!(back.data, x.data, "{t:?}");
            assert_eq!(back.shape, x.shape);
        }
    }

    #[test]
    fn sampled_flags_are_reproducible_and_balanced() {
        let mut a = SeededRng::new(123).stream("augment");
        let mut b = SeededRng::new(123).stream("augment");
        for _ in 0..50 {
            assert_eq!(sample_augmentation(&mut a), sample_augmentation(&mut b));
        }
        let mut rng = SeededRng::new(0).stream("augment");
        let draws = 10_000;
        let mut counts = [0u32; 3];
        for _ in 0..draws {
            let t = sample_augmentation(&mut rng);
            counts[0] += t.flip_lr as u32;
            counts[1] += t.flip_ud as u32;
            counts[2] += t.rot90 as u32;
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            // binomial 99% band around 0.5 for n=10k is well inside [0.48, 0.52]
            assert!((0.48..=0.52).contains(&freq), "frequency {freq}");
        }
    }
}
