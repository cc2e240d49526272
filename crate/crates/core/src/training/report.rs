use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::History;
use crate::error::Result;

pub const HISTORY_HEADER: &str = "step,loss,lr,eval_loss,eval_accuracy";

/// One line per step; eval columns are empty between evaluations.
pub fn write_history_csv(path: &Path, hist: &History) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{HISTORY_HEADER}")?;
    let mut evals = hist.evals.iter().peekable();
    for (i, (loss, lr)) in hist.losses.iter().zip(&hist.lrs).enumerate() {
        let step = i + 1;
        let (el, ea) = match evals.next_if(|e| e.step == step) {
            Some(e) => (e.loss.to_string(), e.accuracy.map_or(String::new(), |a| a.to_string())),
            None => (String::new(), String::new()),
        };
        writeln!(w, "{step},{loss},{lr},{el},{ea}")?;
    }
    w.flush()?;
    Ok(())
}
