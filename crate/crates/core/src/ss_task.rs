//! Rotation pretext task and the class × rotation joint label space.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Number of rotations in the pretext task (0°, 90°, 180°, 270°).
pub const ROTATIONS: usize = 4;

/// The `N × M` grid of (class, transform) pairs, indexed class-major:
/// `k = n·M + m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointLabelSpace {
    classes: usize,
    transforms: usize,
}

impl JointLabelSpace {
    pub fn new(classes: usize, transforms: usize) -> Result<Self> {
        if classes == 0 || transforms == 0 {
            return Err(Error::invalid("joint label space", format!("N={classes}, M={transforms}")));
        }
        Ok(JointLabelSpace { classes, transforms })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn transforms(&self) -> usize {
        self.transforms
    }

    /// `K = N·M`.
    pub fn size(&self) -> usize {
        self.classes * self.transforms
    }

    pub fn encode(&self, class: usize, transform: usize) -> Result<usize> {
        if class >= self.classes || transform >= self.transforms {
            return Err(Error::invalid(
                "joint label",
                format!("({class}, {transform}) outside {}x{}", self.classes, self.transforms),
            ));
        }
        Ok(class * self.transforms + transform)
    }

    pub fn decode(&self, joint: usize) -> Result<(usize, usize)> {
        if joint >= self.size() {
            return Err(Error::invalid("joint label", format!("{joint} >= {}", self.size())));
        }
        Ok((joint / self.transforms, joint % self.transforms))
    }
}

/// A number of successive 90° clockwise turns, modulo 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RotationId(u8);

impl RotationId {
    pub const IDENTITY: RotationId = RotationId(0);

    pub fn new(quarter_turns: usize) -> Result<Self> {
        if quarter_turns >= ROTATIONS {
            return Err(Error::invalid("rotation", format!("{quarter_turns} is not in 0..4")));
        }
        Ok(RotationId(quarter_turns as u8))
    }

    pub fn quarter_turns(self) -> usize {
        self.0 as usize
    }

    pub fn then(self, other: RotationId) -> RotationId {
        RotationId((self.0 + other.0) % ROTATIONS as u8)
    }

    pub fn inverse(self) -> RotationId {
        RotationId((ROTATIONS as u8 - self.0) % ROTATIONS as u8)
    }
}

/// Rotate a `C×H×W` image clockwise by `rotation`. One quarter turn maps
/// `out(r, c) = in(H−1−c, r)`; odd turns need a square image.
pub fn rotate<T: Copy>(image: &[T], shape: [usize; 3], rotation: RotationId) -> Result<Vec<T>> {
    let [ch, h, w] = shape;
    if image.len() != ch * h * w {
        return Err(Error::shape("rotate", format!("{} elements for shape {shape:?}", image.len())));
    }
    let turns = rotation.quarter_turns();
    if turns % 2 == 1 && h != w {
        return Err(Error::invalid("rotate", format!("odd rotation of non-square {h}x{w} image")));
    }
    let plane = h * w;
    let mut out = image.to_vec();
    for c in 0..ch {
        let src = &image[c * plane..(c + 1) * plane];
        let dst = &mut out[c * plane..(c + 1) * plane];
        for r in 0..h {
            for col in 0..w {
                let (sr, sc) = match turns {
                    0 => (r, col),
                    1 => (h - 1 - col, r),
                    2 => (h - 1 - r, w - 1 - col),
                    _ => (col, w - 1 - r),
                };
                dst[r * w + col] = src[sr * w + sc];
            }
        }
    }
    Ok(out)
}

/// One-hot distribution over the joint space with the mass at `n·M + m`.
pub fn joint_one_hot(class: usize, transform: usize, space: &JointLabelSpace) -> Result<Vec<f64>> {
    let k = space.encode(class, transform)?;
    let mut v = vec![0.0; space.size()];
    v[k] = 1.0;
    Ok(v)
}

/// Output of [`expand_batch`]: `M·B` images in transform-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedBatch<T> {
    pub images: Vec<T>,
    pub classes: Vec<usize>,
    pub rotations: Vec<RotationId>,
    pub joint_labels: Vec<usize>,
    pub batch: usize,
}

/// For each transform `j` in turn, every image of the batch rotated by `j`
/// and labelled `(class, j)`; within a block the input order is kept.
pub fn expand_batch<T: Copy>(
    images: &[T],
    classes: &[usize],
    shape: [usize; 3],
    space: &JointLabelSpace,
) -> Result<ExpandedBatch<T>> {
    let item = shape.iter().product::<usize>();
    let batch = classes.len();
    if images.len() != batch * item {
        return Err(Error::shape("expand_batch", format!("{} values for {batch} images", images.len())));
    }
    let m = space.transforms();
    if m > ROTATIONS {
        return Err(Error::invalid("expand_batch", format!("{m} transforms but only {ROTATIONS} rotations")));
    }
    let mut out = ExpandedBatch {
        images: Vec::with_capacity(m * images.len()),
        classes: Vec::with_capacity(m * batch),
        rotations: Vec::with_capacity(m * batch),
        joint_labels: Vec::with_capacity(m * batch),
        batch,
    };
    for j in 0..m {
        let rotation = RotationId::new(j)?;
        for (img, &class) in images.chunks_exact(item).zip(classes) {
            out.images.extend(rotate(img, shape, rotation)?);
            out.classes.push(class);
            out.rotations.push(rotation);
            out.joint_labels.push(space.encode(class, j)?);
        }
    }
    Ok(out)
}
