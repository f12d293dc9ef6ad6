//! Reference-image preparation and mask handling.
//!
//! The reference object is cut out by its segmentation mask, stretched to
//! the user-mask bounding box (bilinear for the image, nearest for the
//! mask), translated to the box position and zero-padded to the main-image
//! size. Aspect ratio is not preserved: the object fills the box exactly.
//!
//! Mask downsampling is kind-dependent: user masks round outward (a target
//! cell is set when any covered source pixel is set) so boxes never lose
//! patches at coarse resolutions; segmentation masks use a 0.5 area
//! threshold.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    User,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskResolution {
    Pixel,
    Latent,
}

/// Binary mask with its semantic kind and resolution tag.
#[derive(Debug, Clone)]
pub struct Mask {
    data: Array2<u8>,
    pub kind: MaskKind,
    pub resolution: MaskResolution,
}

impl Mask {
    pub fn new(data: Array2<u8>, kind: MaskKind, resolution: MaskResolution) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::contract("mask values must be 0 or 1"));
        }
        Ok(Mask {
            data,
            kind,
            resolution,
        })
    }

    pub fn zeros(dim: (usize, usize), kind: MaskKind, resolution: MaskResolution) -> Self {
        Mask {
            data: Array2::zeros(dim),
            kind,
            resolution,
        }
    }

    pub fn ones(dim: (usize, usize), kind: MaskKind, resolution: MaskResolution) -> Self {
        Mask {
            data: Array2::from_elem(dim, 1),
            kind,
            resolution,
        }
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.count_ones() == 0
    }

    /// Tight bounding box `(top, left, height, width)`, None when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (h, w) = self.data.dim();
        let mut top = h;
        let mut bottom = 0;
        let mut left = w;
        let mut right = 0;
        for ((r, c), &v) in self.data.indexed_iter() {
            if v == 1 {
                top = top.min(r);
                bottom = bottom.max(r);
                left = left.min(c);
                right = right.max(c);
            }
        }
        if top == h {
            None
        } else {
            Some((top, left, bottom - top + 1, right - left + 1))
        }
    }

    /// Elementwise containment `self <= other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.dim() == other.data.dim()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| a <= b)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(|v| v as f64)
    }
}

/// Reference image placed into the main-image frame.
#[derive(Debug, Clone)]
pub struct PlacedReference {
    /// `(3, H, W)` image, zero outside the placed segmentation mask.
    pub image: Array3<f64>,
    /// Object silhouette in the main-image frame.
    pub seg_mask: Mask,
    /// `(top, left, height, width)` of the user-mask bounding box.
    pub placement_box: (usize, usize, usize, usize),
}

/// Bilinear resize of a `(c, h, w)` image. Same-size input is returned
/// unchanged so placement without resizing is exact.
pub fn resize_bilinear(src: &Array3<f64>, target: (usize, usize)) -> Array3<f64> {
    let (c, sh, sw) = src.dim();
    let (th, tw) = target;
    if (sh, sw) == (th, tw) {
        return src.clone();
    }
    let scale_h = sh as f64 / th as f64;
    let scale_w = sw as f64 / tw as f64;
    Array3::from_shape_fn((c, th, tw), |(ch, y, x)| {
        let fy = ((y as f64 + 0.5) * scale_h - 0.5).clamp(0.0, (sh - 1) as f64);
        let fx = ((x as f64 + 0.5) * scale_w - 0.5).clamp(0.0, (sw - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        src[[ch, y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + src[[ch, y0, x1]] * (1.0 - dy) * dx
            + src[[ch, y1, x0]] * dy * (1.0 - dx)
            + src[[ch, y1, x1]] * dy * dx
    })
}

/// Nearest-neighbor resize of a binary array.
pub fn resize_nearest(src: &Array2<u8>, target: (usize, usize)) -> Array2<u8> {
    let (sh, sw) = src.dim();
    let (th, tw) = target;
    if (sh, sw) == (th, tw) {
        return src.clone();
    }
    let scale_h = sh as f64 / th as f64;
    let scale_w = sw as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let sy = (((y as f64 + 0.5) * scale_h) as usize).min(sh - 1);
        let sx = (((x as f64 + 0.5) * scale_w) as usize).min(sw - 1);
        src[[sy, sx]]
    })
}

/// Cuts the object out of the reference, stretches it to the user-mask box,
/// repositions it there and zero-pads to the main-image size.
///
/// The placed silhouette must stay inside the user mask; a violation is a
/// contract error (non-rectangular user masks can reject objects whose
/// silhouette escapes them).
pub fn place_reference(
    ref_image: &Array3<f64>,
    ref_seg_mask: &Mask,
    user_mask: &Mask,
) -> Result<PlacedReference> {
    let (c, rh, rw) = ref_image.dim();
    if ref_seg_mask.dim() != (rh, rw) {
        return Err(Error::input(format!(
            "segmentation mask {:?} does not match reference image {}x{}",
            ref_seg_mask.dim(),
            rh,
            rw
        )));
    }
    let Some((seg_top, seg_left, seg_h, seg_w)) = ref_seg_mask.bounding_box() else {
        return Err(Error::input("segmentation mask is empty"));
    };
    let Some((top, left, box_h, box_w)) = user_mask.bounding_box() else {
        return Err(Error::input("user mask is empty"));
    };
    let (mh, mw) = user_mask.dim();

    // Crop to the object's own bounding box.
    let mut crop = Array3::zeros((c, seg_h, seg_w));
    let mut crop_mask = Array2::zeros((seg_h, seg_w));
    for y in 0..seg_h {
        for x in 0..seg_w {
            crop_mask[[y, x]] = ref_seg_mask.data()[[seg_top + y, seg_left + x]];
            for ch in 0..c {
                crop[[ch, y, x]] = ref_image[[ch, seg_top + y, seg_left + x]];
            }
        }
    }

    let resized = resize_bilinear(&crop, (box_h, box_w));
    let resized_mask = resize_nearest(&crop_mask, (box_h, box_w));

    let mut image = Array3::zeros((c, mh, mw));
    let mut seg = Array2::zeros((mh, mw));
    for y in 0..box_h {
        for x in 0..box_w {
            if resized_mask[[y, x]] == 1 {
                seg[[top + y, left + x]] = 1;
                for ch in 0..c {
                    image[[ch, top + y, left + x]] = resized[[ch, y, x]];
                }
            }
        }
    }
    let seg_mask = Mask::new(seg, MaskKind::Segmentation, user_mask.resolution)?;
    if !seg_mask.is_subset_of(user_mask) {
        return Err(Error::contract(
            "placed segmentation mask is not contained in the user mask",
        ));
    }
    Ok(PlacedReference {
        image,
        seg_mask,
        placement_box: (top, left, box_h, box_w),
    })
}

/// Downsamples a mask to a coarser resolution (see module docs for the
/// kind-dependent rules). The result is tagged as latent resolution.
pub fn downsample_mask(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    let (sh, sw) = mask.dim();
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > sh || tw > sw {
        return Err(Error::input(format!(
            "target {th}x{tw} must be non-zero and no larger than source {sh}x{sw}"
        )));
    }
    let mut out = Array2::zeros((th, tw));
    for y in 0..th {
        for x in 0..tw {
            let r0 = y * sh / th;
            let r1 = (((y + 1) * sh).div_ceil(th)).max(r0 + 1);
            let c0 = x * sw / tw;
            let c1 = (((x + 1) * sw).div_ceil(tw)).max(c0 + 1);
            let mut count = 0usize;
            let mut total = 0usize;
            for r in r0..r1.min(sh) {
                for c in c0..c1.min(sw) {
                    total += 1;
                    count += mask.data()[[r, c]] as usize;
                }
            }
            out[[y, x]] = match mask.kind {
                MaskKind::User => u8::from(count > 0),
                MaskKind::Segmentation => u8::from(2 * count >= total),
            };
        }
    }
    Mask::new(out, mask.kind, MaskResolution::Latent)
}
