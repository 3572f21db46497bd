use crate::error::{Error, Result};

/// Per-vertex grid attributes: a deformation vector and an SDF value.
///
/// A normalized state carries SDF values of exactly `-1` or `+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridState {
    deformation: Vec<[f32; 3]>,
    sdf: Vec<f32>,
    normalized: bool,
}

impl GridState {
    pub fn zeros(num_vertices: usize) -> Self {
        Self {
            deformation: vec![[0.0; 3]; num_vertices],
            sdf: vec![0.0; num_vertices],
            normalized: false,
        }
    }

    /// A raw (un-normalized) state.
    pub fn new(deformation: Vec<[f32; 3]>, sdf: Vec<f32>) -> Result<Self> {
        if deformation.len() != sdf.len() {
            return Err(Error::Dimension {
                expected: deformation.len(),
                actual: sdf.len(),
            });
        }
        Ok(Self {
            deformation,
            sdf,
            normalized: false,
        })
    }

    /// A normalized state; every SDF value must be exactly `±1`.
    pub fn normalized(deformation: Vec<[f32; 3]>, sdf: Vec<f32>) -> Result<Self> {
        let mut s = Self::new(deformation, sdf)?;
        if let Some(bad) = s.sdf.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(Error::State(format!(
                "normalized state requires SDF values of ±1, found {bad}"
            )));
        }
        s.normalized = true;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.sdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sdf.is_empty()
    }

    pub fn deformation(&self) -> &[[f32; 3]] {
        &self.deformation
    }

    pub fn deformation_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.deformation
    }

    pub fn sdf(&self) -> &[f32] {
        &self.sdf
    }

    /// Mutable SDF access drops the normalized flag.
    pub fn sdf_mut(&mut self) -> &mut [f32] {
        self.normalized = false;
        &mut self.sdf
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Rounds every SDF value to its sign; zero maps to `+1`.
    pub fn normalize_signs(mut self) -> Self {
        for s in &mut self.sdf {
            *s = if *s >= 0.0 { 1.0 } else { -1.0 };
        }
        self.normalized = true;
        self
    }

    pub fn clip_in_place(&mut self, max_deformation: f64) {
        let m = max_deformation as f32;
        for d in &mut self.deformation {
            for c in d.iter_mut() {
                *c = c.clamp(-m, m);
            }
        }
    }
}

/// Clamps every deformation component to `[-max_deformation, max_deformation]`.
///
/// Only call this between optimizer updates, never inside a gradient
/// evaluation.
pub fn clip_deformations(mut state: GridState, max_deformation: f64) -> GridState {
    state.clip_in_place(max_deformation);
    state
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleDirection {
    /// World units to the unit range used by the diffusion process.
    ToDiffusion,
    FromDiffusion,
}

/// Converts deformations between world units and diffusion units.
pub fn scale_state(
    state: &GridState,
    direction: ScaleDirection,
    max_deformation: f64,
) -> Result<GridState> {
    if !(max_deformation > 0.0) {
        return Err(Error::Parameter(format!(
            "max deformation must be positive, got {max_deformation}"
        )));
    }
    let mut out = state.clone();
    match direction {
        ScaleDirection::ToDiffusion => {
            if !state.normalized {
                return Err(Error::State(
                    "diffusion scaling requires a normalized SDF".into(),
                ));
            }
            for d in &mut out.deformation {
                *d = d.map(|c| (c as f64 / max_deformation) as f32);
            }
        }
        ScaleDirection::FromDiffusion => {
            for d in &mut out.deformation {
                *d = d.map(|c| (c as f64 * max_deformation) as f32);
            }
            out.clip_in_place(max_deformation);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping() {
        let s = GridState::new(vec![[2.0, -0.25, 0.0]], vec![1.0]).unwrap();
        let c = clip_deformations(s, 0.5);
        assert_eq!(c.deformation()[0], [0.5, -0.25, 0.0]);
        let z = GridState::zeros(4);
        assert_eq!(clip_deformations(z.clone(), 0.1), z);
    }

    #[test]
    fn normalized_rejects_non_unit_sdf() {
        assert!(GridState::normalized(vec![[0.0; 3]], vec![0.5]).is_err());
        assert!(GridState::normalized(vec![[0.0; 3]; 2], vec![1.0, -1.0]).is_ok());
    }

    #[test]
    fn scaling_half_bound() {
        let s = GridState::normalized(vec![[0.1, 0.0, -0.2]], vec![1.0]).unwrap();
        let d = scale_state(&s, ScaleDirection::ToDiffusion, 0.2).unwrap();
        assert_eq!(d.deformation()[0], [0.5, 0.0, -1.0]);
    }

    #[test]
    fn scaling_raw_state_fails() {
        let s = GridState::new(vec![[0.0; 3]], vec![0.3]).unwrap();
        assert!(matches!(
            scale_state(&s, ScaleDirection::ToDiffusion, 0.2),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn scaling_round_trip_within_one_ulp() {
        let m = 0.1875_f64 * 0.77;
        let vals: Vec<[f32; 3]> = (0..200)
            .map(|i| {
                let x = (i as f32 * 0.37).sin() * m as f32;
                [x, -x * 0.5, x * 0.25]
            })
            .collect();
        let s = GridState::normalized(vals, vec![1.0; 200]).unwrap();
        let there = scale_state(&s, ScaleDirection::ToDiffusion, m).unwrap();
        let back = scale_state(&there, ScaleDirection::FromDiffusion, m).unwrap();
        for (a, b) in s.deformation().iter().zip(back.deformation()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x.to_bits() as i64 - y.to_bits() as i64).abs() <= 1);
            }
        }
    }

    #[test]
    fn normalize_signs_maps_zero_to_plus() {
        let s = GridState::new(vec![[0.0; 3]; 3], vec![0.0, -1e-4, 0.3])
            .unwrap()
            .normalize_signs();
        assert_eq!(s.sdf(), &[1.0, -1.0, 1.0]);
        assert!(s.is_normalized());
    }
}
