use std::path::Path;

use super::{AdSlot, Dataset, Focus, Impression, Provenance};
use crate::error::{Error, Result};

const FIXED: [&str; 4] = ["slot", "focus", "label", "true_ctr"];

/// 17 significant digits, enough for an exact `f64` round trip.
fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn save_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..d.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for imp in d.impressions() {
        let mut rec = vec![
            imp.slot.name().to_string(),
            imp.focus.as_str().to_string(),
            imp.label.to_string(),
            fmt_real(imp.true_ctr),
        ];
        rec.extend(imp.features.iter().map(|&v| fmt_real(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < FIXED.len() || names[..FIXED.len()] != FIXED {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must start with {}", FIXED.join(",")),
        });
    }
    let feature_dim = names.len() - FIXED.len();
    for (i, n) in names[FIXED.len()..].iter().enumerate() {
        if *n != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column f{i}, found `{n}`"),
            });
        }
    }

    let mut impressions = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let perr = |msg: String| Error::Parse { line, msg };
        let slot: AdSlot = rec[0].parse().map_err(|e: Error| perr(e.to_string()))?;
        let focus: Focus = rec[1].parse().map_err(|e: Error| perr(e.to_string()))?;
        let label = match &rec[2] {
            "0" => 0,
            "1" => 1,
            other => return Err(perr(format!("label must be 0 or 1, got `{other}`"))),
        };
        let real = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| perr(format!("`{s}` is not a real number")))
        };
        let true_ctr = real(&rec[3])?;
        let features = rec.iter().skip(FIXED.len()).map(real).collect::<Result<Vec<_>>>()?;
        impressions.push(Impression {
            features,
            slot,
            focus,
            label,
            true_ctr,
        });
    }
    Dataset::new(impressions, feature_dim, Provenance::File(path.to_path_buf()))
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            line,
            msg: format!("row has {len} fields, header has {expected_len}"),
        },
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}
