use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use super::finalize;
use crate::error::{Error, Result};
use crate::lattice::DiffusionTensor;
use crate::tetgrid::{write_tetg, TetGrid};

pub const TRAJECTORY_INDEX: &str = "trajectory.txt";

/// Receives the clipped x̂₀ prediction after each reverse step `t`.
pub trait TrajectoryObserver {
    fn observe(&mut self, t: usize, x0_hat: &DiffusionTensor) -> Result<()>;
}

/// Keeps predictions in memory.
#[derive(Default)]
pub struct TrajectoryRecorder {
    pub steps: Vec<(usize, DiffusionTensor)>,
}

impl TrajectoryObserver for TrajectoryRecorder {
    fn observe(&mut self, t: usize, x0_hat: &DiffusionTensor) -> Result<()> {
        self.steps.push((t, x0_hat.clone()));
        Ok(())
    }
}

/// Writes the finalized prediction at selected steps as
/// `step_<t>.tetg` plus an index of `t<TAB>file` lines.
pub struct TrajectoryDump<'a> {
    dir: PathBuf,
    grid: &'a TetGrid,
    /// Steps to keep; all steps when `None`.
    keep: Option<Vec<usize>>,
    index: String,
}

impl<'a> TrajectoryDump<'a> {
    pub fn new(dir: impl Into<PathBuf>, grid: &'a TetGrid, keep: Option<Vec<usize>>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        Ok(Self {
            dir,
            grid,
            keep,
            index: String::new(),
        })
    }
}

impl TrajectoryObserver for TrajectoryDump<'_> {
    fn observe(&mut self, t: usize, x0_hat: &DiffusionTensor) -> Result<()> {
        if self.keep.as_ref().is_some_and(|k| !k.contains(&t)) {
            return Ok(());
        }
        let name = format!("step_{t:04}.tetg");
        write_tetg(self.dir.join(&name), self.grid.resolution(), &finalize(x0_hat, self.grid)?)?;
        let _ = writeln!(self.index, "{t}\t{name}");
        let path = self.dir.join(TRAJECTORY_INDEX);
        fs::write(&path, &self.index).map_err(|e| Error::file(&path, e))
    }
}
