use std::io::Write;

use super::probes::ProbeReport;
use crate::error::{Error, Result};

/// One CSV table of every stored median, in input order. Nothing is recomputed.
pub fn aggregate<W: Write>(reports: &[(String, ProbeReport)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["source", "probe", "seeds", "key", "value"]).map_err(fmt)?;
    for (source, r) in reports {
        for (k, v) in &r.medians {
            w.write_record([source.as_str(), &r.probe, &r.seeds.len().to_string(), k, &format!("{v:?}")]).map_err(fmt)?;
        }
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}
