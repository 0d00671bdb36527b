use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::StepReport;
use crate::error::Result;

pub const HEADER: &str = "step,phase,mask_ratio,sigma_mean,loss_total,loss_dsm,loss_mae,grad_norm,lr,wallclock_s";

/// Appends one CSV row per step.
pub struct MetricsWriter {
    out: BufWriter<File>,
    record_wallclock: bool,
}

impl MetricsWriter {
    /// Starting at step 0 creates a fresh file. Otherwise rows at or past
    /// `start_step` (left over from an interrupted run) are dropped first.
    pub fn open(path: &Path, start_step: u64, record_wallclock: bool) -> Result<Self> {
        let mut kept = format!("{HEADER}\n");
        if start_step > 0 && path.exists() {
            for line in fs::read_to_string(path)?.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s < start_step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        fs::write(path, kept)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
            record_wallclock,
        })
    }

    pub fn write(&mut self, r: &StepReport, elapsed_s: f64) -> Result<()> {
        let wall = if self.record_wallclock { elapsed_s } else { 0.0 };
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{:.3}",
            r.step, r.phase, r.mask_ratio, r.sigma_mean, r.loss.total, r.loss.dsm, r.loss.mae, r.grad_norm, r.lr, wall
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: u8,
    pub mask_ratio: f64,
    pub sigma_mean: f64,
    pub loss_total: f64,
    pub loss_dsm: f64,
    pub loss_mae: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wallclock_s: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let bad = |line: &str| crate::error::Error::Config(format!("malformed metrics row {line:?}"));
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(line));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| bad(line))?,
                phase: f[1].parse().map_err(|_| bad(line))?,
                mask_ratio: num(2)?,
                sigma_mean: num(3)?,
                loss_total: num(4)?,
                loss_dsm: num(5)?,
                loss_mae: num(6)?,
                grad_norm: num(7)?,
                lr: num(8)?,
                wallclock_s: num(9)?,
            })
        })
        .collect()
}
