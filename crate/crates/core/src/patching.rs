//! Patch pixels, placement rectangles and the paste operator
//! `v (+) delta = (1 - p) * v + p * delta`.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{EdpaError, Result};
use crate::tensor::{write_file, Tensor};

/// `H x W x C` pixel grid with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(tensor: Tensor) -> Result<Self> {
        check_pixels(&tensor, "image")?;
        Ok(Self(tensor))
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new(Tensor::from_fn(&[height, width, channels], f))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        let (_, w, ch) = self.dims();
        self.0.data()[(y * w + x) * ch + c]
    }
}

fn check_pixels(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 3 {
        return Err(EdpaError::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{what} must be H x W x C"),
        });
    }
    if let Some((k, v)) = t.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(EdpaError::Config(format!(
            "{what} value {v} at flat index {k} outside [0, 1]"
        )));
    }
    Ok(())
}

/// The optimised adversarial patch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvPatch {
    pixels: Tensor,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PatchSidecar {
    provenance: String,
    height: usize,
    width: usize,
    channels: usize,
}

impl AdvPatch {
    pub fn new(pixels: Tensor, provenance: impl Into<String>) -> Result<Self> {
        check_pixels(&pixels, "patch")?;
        Ok(Self {
            pixels,
            provenance: provenance.into(),
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the `EDT1` tensor plus a `<path>.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.pixels.save(path)?;
        let (h, w, c) = self.dims();
        let side = PatchSidecar {
            provenance: self.provenance.clone(),
            height: h,
            width: w,
            channels: c,
        };
        let json = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
        write_file(&Self::sidecar_path(path), &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pixels = Tensor::load(path)?;
        let side_path = Self::sidecar_path(path);
        let provenance = match std::fs::read(&side_path) {
            Ok(bytes) => {
                let side: PatchSidecar = serde_json::from_slice(&bytes)
                    .map_err(|e| EdpaError::format(side_path.display().to_string(), e.to_string()))?;
                if [side.height, side.width, side.channels] != pixels.shape() {
                    return Err(EdpaError::format(
                        side_path.display().to_string(),
                        format!(
                            "sidecar dims {}x{}x{} disagree with tensor {:?}",
                            side.height,
                            side.width,
                            side.channels,
                            pixels.shape()
                        ),
                    ));
                }
                side.provenance
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(EdpaError::io(side_path, e)),
        };
        Self::new(pixels, provenance)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let (h, w, c) = self.dims();
        crate::pixmap::encode_rgb(h, w, c, self.pixels.data())
    }
}

/// Axis-aligned rectangle where the patch lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementMask {
    pub origin: (usize, usize),
    pub dims: (usize, usize),
    pub image_dims: (usize, usize),
}

impl PlacementMask {
    pub fn new(origin: (usize, usize), dims: (usize, usize), image_dims: (usize, usize)) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 {
            return Err(EdpaError::InvalidShape {
                shape: vec![dims.0, dims.1],
                reason: "patch rectangle must be at least 1x1".into(),
            });
        }
        if origin.0 + dims.0 > image_dims.0 || origin.1 + dims.1 > image_dims.1 {
            return Err(EdpaError::OutOfBounds {
                what: "patch rectangle",
                inner: vec![origin.0, origin.1, dims.0, dims.1],
                outer: vec![image_dims.0, image_dims.1],
            });
        }
        Ok(Self {
            origin,
            dims,
            image_dims,
        })
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.origin.0 && y < self.origin.0 + self.dims.0 && x >= self.origin.1 && x < self.origin.1 + self.dims.1
    }

    /// Indices (row-major over the block grid) of `block x block` cells the
    /// rectangle touches.
    pub fn touched_blocks(&self, block: usize) -> Vec<usize> {
        let per_row = self.image_dims.1 / block;
        let (y0, x0) = (self.origin.0 / block, self.origin.1 / block);
        let y1 = (self.origin.0 + self.dims.0 - 1) / block;
        let x1 = (self.origin.1 + self.dims.1 - 1) / block;
        (y0..=y1)
            .flat_map(|by| (x0..=x1).map(move |bx| by * per_row + bx))
            .collect()
    }
}

/// I.i.d. `U[0, 1)` pixels.
pub fn init_patch<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, c: usize) -> AdvPatch {
    let t = Tensor::from_fn(&[h, w, c], |_| rng.gen::<f64>());
    AdvPatch {
        pixels: t,
        provenance: "uniform init".into(),
    }
}

/// `N(0, 1)` pixels clipped to `[0, 1]`; the random-noise baseline.
pub fn gaussian_patch<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, c: usize) -> AdvPatch {
    let t = Tensor::from_fn(&[h, w, c], |_| {
        let z: f64 = StandardNormal.sample(rng);
        z.clamp(0.0, 1.0)
    });
    AdvPatch {
        pixels: t,
        provenance: "gaussian baseline".into(),
    }
}

/// Top-left corner drawn uniformly over every position that keeps the patch
/// inside the image.
pub fn random_position<R: Rng + ?Sized>(
    rng: &mut R,
    image_dims: (usize, usize),
    patch_dims: (usize, usize),
) -> Result<PlacementMask> {
    if patch_dims.0 > image_dims.0 || patch_dims.1 > image_dims.1 {
        return Err(EdpaError::OutOfBounds {
            what: "patch",
            inner: vec![patch_dims.0, patch_dims.1],
            outer: vec![image_dims.0, image_dims.1],
        });
    }
    let y = rng.gen_range(0..=image_dims.0 - patch_dims.0);
    let x = rng.gen_range(0..=image_dims.1 - patch_dims.1);
    PlacementMask::new((y, x), patch_dims, image_dims)
}

fn check_fit(image: &Tensor, patch: &Tensor, mask: &PlacementMask) -> Result<()> {
    let (is, ps) = (image.shape(), patch.shape());
    if (is[0], is[1]) != mask.image_dims || (ps[0], ps[1]) != mask.dims || is[2] != ps[2] {
        return Err(EdpaError::ShapeMismatch {
            op: "apply_patch",
            lhs: is.to_vec(),
            rhs: ps.to_vec(),
        });
    }
    Ok(())
}

/// Pastes `patch` into `image` at `mask`. Pixels inside the rectangle come
/// from the patch, everything else from the image, with no blending.
pub fn apply_patch(image: &Image, patch: &AdvPatch, mask: &PlacementMask) -> Result<Image> {
    check_fit(image.tensor(), patch.pixels(), mask)?;
    PlacementMask::new(mask.origin, mask.dims, mask.image_dims)?;
    let (_, w, c) = image.dims();
    let mut out = image.tensor().clone();
    let row = mask.dims.1 * c;
    for y in 0..mask.dims.0 {
        let dst = ((mask.origin.0 + y) * w + mask.origin.1) * c;
        out.data_mut()[dst..dst + row].copy_from_slice(&patch.pixels().data()[y * row..(y + 1) * row]);
    }
    Ok(Image(out))
}

/// Graph form of [`apply_patch`]; gradients flow into `patch`.
pub fn apply_patch_graph(g: &mut Graph, image: Var, patch: Var, mask: &PlacementMask) -> Result<Var> {
    check_fit(g.value(image), g.value(patch), mask)?;
    g.paste(image, patch, mask.origin)
}
