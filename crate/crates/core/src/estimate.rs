//! Per-frame localization results shared by both localizers.

use std::io::Write;

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::Result;
use crate::scalar::Real;
use crate::stft::SpectraFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct DoaEstimate<T: Real> {
    pub frame_index: usize,
    pub grid_index: usize,
    pub direction: Vector3<T>,
    /// `Y_q` for the PHAT methods, `P_q` for MUSIC.
    pub amplitude: T,
    /// Whether the correlation state had absorbed enough frames.
    pub warmed_up: bool,
}

/// A streaming localizer: one call per STFT frame, in order.
pub trait Localizer<T: Real> {
    /// Short method tag used in reports.
    fn name(&self) -> &str;

    /// Absorb `frame` and localize. `Ok(None)` means no estimate was possible
    /// (an all-silent frame), which is distinct from a low-amplitude estimate.
    fn process(&mut self, frame: &SpectraFrame<T>) -> Result<Option<DoaEstimate<T>>>;

    /// Forget the running correlation state.
    fn reset(&mut self);
}

#[derive(Serialize)]
struct Row {
    frame: usize,
    q: usize,
    x: f64,
    y: f64,
    z: f64,
    amplitude: f64,
    warmed_up: bool,
}

impl<T: Real> DoaEstimate<T> {
    fn row(&self) -> Row {
        Row {
            frame: self.frame_index,
            q: self.grid_index,
            x: self.direction.x.as_f64(),
            y: self.direction.y.as_f64(),
            z: self.direction.z.as_f64(),
            amplitude: self.amplitude.as_f64(),
            warmed_up: self.warmed_up,
        }
    }
}

pub fn write_estimates_csv<T: Real, W: Write>(estimates: &[DoaEstimate<T>], mut out: W) -> Result<()> {
    writeln!(out, "frame,q,x,y,z,amplitude,warmed_up")?;
    for e in estimates {
        let r = e.row();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.frame, r.q, r.x, r.y, r.z, r.amplitude, r.warmed_up
        )?;
    }
    Ok(())
}

/// One JSON object per line.
pub fn write_estimates_jsonl<T: Real, W: Write>(estimates: &[DoaEstimate<T>], mut out: W) -> Result<()> {
    for e in estimates {
        serde_json::to_writer(&mut out, &e.row())?;
        writeln!(out)?;
    }
    Ok(())
}
