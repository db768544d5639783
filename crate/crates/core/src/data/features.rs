//! Binary region-feature store.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  "ICMUFEAT"          8 bytes
//! version u32                 = 1
//! count   u64, k u32, d_v u32
//! count × { image_id u64, k·d_v f32 RoI values, k·7 f32 location values }
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::encoding::{VisualRegion, LOCATION_DIM};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

pub const FEATURE_MAGIC: &[u8; 8] = b"ICMUFEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    /// `k × d_v`, row per region.
    pub roi: Vec<f32>,
    /// `k × 7`.
    pub location: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    regions_per_image: usize,
    visual_dim: usize,
    images: BTreeMap<u64, ImageFeatures>,
}

impl FeatureStore {
    pub fn new(regions_per_image: usize, visual_dim: usize) -> Self {
        Self {
            regions_per_image,
            visual_dim,
            images: BTreeMap::new(),
        }
    }

    pub fn regions_per_image(&self) -> usize {
        self.regions_per_image
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn insert(&mut self, image_id: u64, features: ImageFeatures) -> Result<()> {
        let k = self.regions_per_image;
        if features.roi.len() != k * self.visual_dim || features.location.len() != k * LOCATION_DIM {
            return Err(invalid(format!(
                "image {image_id}: feature sizes {}/{} do not match k={k}, d_v={}",
                features.roi.len(),
                features.location.len(),
                self.visual_dim
            )));
        }
        if features.roi.iter().chain(&features.location).any(|v| !v.is_finite()) {
            return Err(invalid(format!("image {image_id}: non-finite feature value")));
        }
        if self.images.insert(image_id, features).is_some() {
            return Err(invalid(format!("image {image_id} stored twice")));
        }
        Ok(())
    }

    pub fn get(&self, image_id: u64) -> Option<&ImageFeatures> {
        self.images.get(&image_id)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.images.keys().copied()
    }

    /// Checks the store against the model's expected region count and feature width.
    pub fn check_dims(&self, regions_per_image: usize, visual_dim: usize) -> Result<()> {
        if self.regions_per_image != regions_per_image || self.visual_dim != visual_dim {
            return Err(invalid(format!(
                "feature store has k={}, d_v={}; model expects k={regions_per_image}, d_v={visual_dim}",
                self.regions_per_image, self.visual_dim
            )));
        }
        Ok(())
    }

    /// Widens one image's stored features into model regions.
    pub fn regions<T: Scalar>(&self, image_id: u64) -> Option<Result<Vec<VisualRegion<T>>>> {
        let f = self.images.get(&image_id)?;
        let dv = self.visual_dim;
        Some(
            (0..self.regions_per_image)
                .map(|r| {
                    let roi = f.roi[r * dv..(r + 1) * dv].iter().map(|&v| T::lit(f64::from(v))).collect();
                    let mut loc = [T::zero(); LOCATION_DIM];
                    for (dst, &src) in loc.iter_mut().zip(&f.location[r * LOCATION_DIM..(r + 1) * LOCATION_DIM]) {
                        *dst = T::lit(f64::from(src));
                    }
                    VisualRegion::new(roi, loc)
                })
                .collect(),
        )
    }

    pub fn region_map<T: Scalar>(&self) -> Result<HashMap<u64, Arc<Vec<VisualRegion<T>>>>> {
        self.images
            .keys()
            .map(|&id| {
                let regions = self.regions(id).expect("id from store")?;
                Ok((id, Arc::new(regions)))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.regions_per_image;
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.len() * (8 + 4 * k * (self.visual_dim + LOCATION_DIM)));
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.images.len() as u64).to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(self.visual_dim as u32).to_le_bytes());
        for (&id, f) in &self.images {
            out.extend_from_slice(&id.to_le_bytes());
            for v in f.roi.iter().chain(&f.location) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|message| Error::Format {
            path: path.to_owned(),
            message,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("truncated header: {} bytes", bytes.len()));
        }
        if &bytes[..8] != FEATURE_MAGIC {
            return Err("bad magic".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(8);
        if version != FEATURE_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = usize::try_from(u64_at(12)).map_err(|_| "count overflow")?;
        let k = u32_at(20) as usize;
        let dv = u32_at(24) as usize;
        let floats = k * (dv + LOCATION_DIM);
        let stride = 8 + 4 * floats;
        let expected = count
            .checked_mul(stride)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or("size overflow")?;
        if bytes.len() < expected {
            return Err(format!(
                "truncated: header promises {count} images ({expected} bytes), file has {}",
                bytes.len()
            ));
        }
        if bytes.len() > expected {
            return Err(format!("{} trailing bytes after {count} images", bytes.len() - expected));
        }
        let mut store = Self::new(k, dv);
        for i in 0..count {
            let base = HEADER_LEN + i * stride;
            let id = u64_at(base);
            let vals: Vec<f32> = bytes[base + 8..base + stride]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let (roi, location) = vals.split_at(k * dv);
            store
                .insert(
                    id,
                    ImageFeatures {
                        roi: roi.to_vec(),
                        location: location.to_vec(),
                    },
                )
                .map_err(|e| e.to_string())?;
        }
        Ok(store)
    }
}
