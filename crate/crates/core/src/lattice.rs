//! Dense multi-channel cubic lattice with a per-site occupancy mask.
//!
//! Data is stored channel-major: element `(c, site)` lives at
//! `c * sites + site`, with `site = x + side * (y + side * z)`.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTensor {
    side: usize,
    channels: usize,
    data: Vec<f64>,
    mask: Arc<[bool]>,
}

impl DiffusionTensor {
    pub fn zeros(side: usize, channels: usize, mask: Arc<[bool]>) -> Result<Self> {
        Self::from_data(side, channels, vec![0.0; channels * side.pow(3)], mask)
    }

    /// Builds a tensor from raw data; values at mask-0 sites are zeroed.
    pub fn from_data(
        side: usize,
        channels: usize,
        data: Vec<f64>,
        mask: Arc<[bool]>,
    ) -> Result<Self> {
        let sites = side.pow(3);
        if mask.len() != sites {
            return Err(Error::Dimension {
                expected: sites,
                actual: mask.len(),
            });
        }
        if data.len() != sites * channels {
            return Err(Error::Dimension {
                expected: sites * channels,
                actual: data.len(),
            });
        }
        let mut t = Self {
            side,
            channels,
            data,
            mask,
        };
        t.apply_mask();
        Ok(t)
    }

    /// A tensor with every site active.
    pub fn full_mask(side: usize) -> Arc<[bool]> {
        vec![true; side.pow(3)].into()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sites(&self) -> usize {
        self.side.pow(3)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn mask(&self) -> &Arc<[bool]> {
        &self.mask
    }

    pub fn active_sites(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// True when element `i` (channel-major) sits on an active site.
    #[inline]
    pub fn element_active(&self, i: usize) -> bool {
        self.mask[i % self.sites()]
    }

    #[inline]
    pub fn index(&self, channel: usize, site: usize) -> usize {
        channel * self.sites() + site
    }

    #[inline]
    pub fn site_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.side * (y + self.side * z)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.sites();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.sites();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn apply_mask(&mut self) {
        let n = self.sites();
        for (i, v) in self.data.iter_mut().enumerate() {
            if !self.mask[i % n] {
                *v = 0.0;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same shape and mask, new data (masked on construction).
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_data(self.side, self.channels, data, self.mask.clone())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.side == other.side && self.channels == other.channels
    }

    pub(crate) fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: self.len(),
                actual: other.len(),
            })
        }
    }
}
