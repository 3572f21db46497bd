use super::{GridState, TetGrid};
use crate::error::{Error, Result};
use crate::lattice::DiffusionTensor;

/// Number of data channels: three deformation components and the SDF.
pub const DATA_CHANNELS: usize = 4;
pub const SDF_CHANNEL: usize = 3;

/// The grid state laid out on a `(2R+1)^3` cubic lattice.
///
/// Corner `(i,j,k)` sits at site `(2i,2j,2k)` and the center of cell
/// `(i,j,k)` at `(2i+1,2j+1,2k+1)`. Deformation channels are divided by
/// the grid's deformation bound so they lie in `[-1, 1]`; infilled sites
/// hold zeros and carry mask 0.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicEmbedding {
    tensor: DiffusionTensor,
    max_deformation: f64,
    normalized: bool,
}

impl CubicEmbedding {
    pub fn tensor(&self) -> &DiffusionTensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> DiffusionTensor {
        self.tensor
    }

    pub fn side(&self) -> usize {
        self.tensor.side()
    }

    pub fn mask(&self) -> &[bool] {
        self.tensor.mask()
    }

    /// The mask as a fifth channel of 0/1 values.
    pub fn mask_channel(&self) -> Vec<f64> {
        self.tensor.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Wraps a lattice tensor produced elsewhere (e.g. by a sampler).
    /// Mask-0 sites are ignored on extraction.
    pub fn from_tensor(tensor: DiffusionTensor, grid: &TetGrid) -> Result<Self> {
        if tensor.side() != grid.lattice_side() {
            return Err(Error::Dimension {
                expected: grid.lattice_side(),
                actual: tensor.side(),
            });
        }
        if tensor.channels() != DATA_CHANNELS {
            return Err(Error::Dimension {
                expected: DATA_CHANNELS,
                actual: tensor.channels(),
            });
        }
        Ok(Self {
            tensor,
            max_deformation: grid.max_deformation(),
            normalized: false,
        })
    }
}

impl TetGrid {
    pub fn embed(&self, state: &GridState) -> Result<CubicEmbedding> {
        self.check_state(state)?;
        let side = self.lattice_side();
        let mut tensor = DiffusionTensor::zeros(side, DATA_CHANNELS, self.site_mask().clone())?;
        let m = self.max_deformation();
        let sites = tensor.sites();
        let data = tensor.data_mut();
        for (v, (d, &s)) in state.deformation().iter().zip(state.sdf()).enumerate() {
            let site = self.vertex_site(v);
            for c in 0..3 {
                data[c * sites + site] = d[c] as f64 / m;
            }
            data[SDF_CHANNEL * sites + site] = s as f64;
        }
        Ok(CubicEmbedding {
            tensor,
            max_deformation: m,
            normalized: state.is_normalized(),
        })
    }

    /// Inverse of [`TetGrid::embed`]; values at mask-0 sites are ignored.
    pub fn extract(&self, emb: &CubicEmbedding) -> Result<GridState> {
        let t = &emb.tensor;
        if t.side() != self.lattice_side() {
            return Err(Error::Dimension {
                expected: self.lattice_side(),
                actual: t.side(),
            });
        }
        if t.channels() != DATA_CHANNELS {
            return Err(Error::Dimension {
                expected: DATA_CHANNELS,
                actual: t.channels(),
            });
        }
        let sites = t.sites();
        let data = t.data();
        let m = emb.max_deformation;
        let n = self.num_vertices();
        let mut deformation = Vec::with_capacity(n);
        let mut sdf = Vec::with_capacity(n);
        for v in 0..n {
            let site = self.vertex_site(v);
            deformation.push([0, 1, 2].map(|c| (data[c * sites + site] * m) as f32));
            sdf.push(data[SDF_CHANNEL * sites + site] as f32);
        }
        if emb.normalized {
            GridState::normalized(deformation, sdf)
        } else {
            GridState::new(deformation, sdf)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn r2_lattice_counts() {
        let g = TetGrid::bcc(2, 1.0).unwrap();
        let e = g.embed(&GridState::zeros(g.num_vertices())).unwrap();
        assert_eq!(e.side(), 5);
        assert_eq!(e.mask().len(), 125);
        assert_eq!(e.mask().iter().filter(|&&m| m).count(), 35);
        assert!(e.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_parity_rule() {
        let g = TetGrid::bcc(4, 1.0).unwrap();
        let side = g.lattice_side();
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    let s = x + side * (y + side * z);
                    let all_even = x % 2 == 0 && y % 2 == 0 && z % 2 == 0;
                    let all_odd = x % 2 == 1 && y % 2 == 1 && z % 2 == 1;
                    assert_eq!(g.site_mask()[s], all_even || all_odd);
                }
            }
        }
    }

    #[test]
    fn corner_and_center_sites() {
        let g = TetGrid::bcc(3, 1.0).unwrap();
        let side = g.lattice_side();
        // corner (1,2,0) and center of cell (2,0,1)
        assert_eq!(g.vertex_site(1 + 4 * 2), 2 + side * 4);
        let c = 64 + 2 + 3 * (0 + 3 * 1);
        assert_eq!(g.vertex_site(c), 5 + side * (1 + side * 3));
    }

    #[test]
    fn deformation_at_bound_maps_to_one() {
        let g = TetGrid::bcc(2, 1.0).unwrap();
        let mut s = GridState::zeros(g.num_vertices());
        s.deformation_mut()[7] = [g.max_deformation() as f32, 0.0, 0.0];
        let e = g.embed(&s).unwrap();
        let site = g.vertex_site(7);
        let v = e.tensor().data()[site];
        assert!((v - 1.0).abs() < 1e-7);
    }

    #[test]
    fn garbage_at_unmasked_sites_is_ignored() {
        let g = TetGrid::bcc(3, 1.0).unwrap();
        let mut s = GridState::zeros(g.num_vertices());
        for (i, v) in s.sdf_mut().iter_mut().enumerate() {
            *v = i as f32 * 0.1 - 3.0;
        }
        let clean = g.embed(&s).unwrap();
        let mut raw = clean.tensor().data().to_vec();
        for (i, v) in raw.iter_mut().enumerate() {
            if !clean.mask()[i % clean.tensor().sites()] {
                *v = 1e6 + i as f64;
            }
        }
        // bypass masking on construction to simulate a corrupted buffer
        let mut dirty = clean.clone();
        dirty.tensor.data_mut().copy_from_slice(&raw);
        assert_eq!(g.extract(&dirty).unwrap(), g.extract(&clean).unwrap());
    }

    #[test]
    fn wrong_lattice_size_fails() {
        let g2 = TetGrid::bcc(2, 1.0).unwrap();
        let g3 = TetGrid::bcc(3, 1.0).unwrap();
        let e = g2.embed(&GridState::zeros(g2.num_vertices())).unwrap();
        assert!(matches!(g3.extract(&e), Err(Error::Dimension { .. })));
        assert!(matches!(
            g3.embed(&GridState::zeros(g2.num_vertices())),
            Err(Error::Dimension { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn embed_extract_is_bit_exact(
            r in 2usize..6,
            seed in any::<u64>(),
            normalized in any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let g = TetGrid::bcc(r, 1.0).unwrap();
            let m = g.max_deformation() as f32;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = g.num_vertices();
            let def: Vec<[f32; 3]> = (0..n)
                .map(|_| [0; 3].map(|_| rng.random_range(-m..=m)))
                .collect();
            let s = if normalized {
                let sdf = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                GridState::normalized(def, sdf).unwrap()
            } else {
                let sdf = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
                GridState::new(def, sdf).unwrap()
            };
            let back = g.extract(&g.embed(&s).unwrap()).unwrap();
            prop_assert_eq!(back.is_normalized(), s.is_normalized());
            for (a, b) in s.deformation().iter().zip(back.deformation()) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            for (x, y) in s.sdf().iter().zip(back.sdf()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
