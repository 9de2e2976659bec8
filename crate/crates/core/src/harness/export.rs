use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{forward_full, ModelParams, D_MODEL};
use crate::synth::SampleRecord;

/// One CSV row per record: `h0..h63, y_tf, y_cmp, source_q` (empty
/// `source_q` for uncompressed images), preceded by a header row.
pub fn write_features_csv(params: &ModelParams, records: &[SampleRecord]) -> Result<String> {
    let mut s = String::new();
    for i in 0..D_MODEL {
        write!(s, "h{i},").expect("string write");
    }
    s.push_str("y_tf,y_cmp,source_q\n");
    for chunk in records.chunks(256) {
        let out = forward_full(params, chunk.iter().map(|r| &r.image))?;
        for (o, r) in out.iter().zip(chunk) {
            for v in &o.h_h {
                write!(s, "{v},").expect("string write");
            }
            let q = r.source_q.map(|q| q.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{q}", u8::from(r.fake), u8::from(r.compressed)).expect("string write");
        }
    }
    Ok(s)
}

pub fn export_features(params: &ModelParams, records: &[SampleRecord], out: &Path) -> Result<()> {
    let text = write_features_csv(params, records)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(out, text).map_err(|e| Error::io(out, e))
}
