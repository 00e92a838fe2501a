use std::collections::BTreeMap;
use std::io::{Read, Write};

use log::warn;

use super::manifest::{ColumnRef, DatasetId, DatasetManifest, RatePolicy};
use super::{synthetic, RawStreams, Stream};
use crate::error::{Error, Result};
use crate::signal::Sample;

/// Rows out of order by at most this many sample periods are re-sorted.
const DISORDER_TOLERANCE_PERIODS: f64 = 2.0;

struct Resolved {
    timestamp: usize,
    xyz: [usize; 3],
    user: usize,
    device: Option<usize>,
    label: Option<usize>,
}

fn resolve(col: &ColumnRef, header: Option<&csv::StringRecord>, what: &str) -> Result<usize> {
    match col {
        ColumnRef::Index(i) => match header {
            Some(h) if *i >= h.len() => {
                Err(Error::UnresolvedColumn(format!("{what} (position {i})")))
            }
            _ => Ok(*i),
        },
        ColumnRef::Name(name) => header
            .and_then(|h| h.iter().position(|c| c.trim() == name))
            .ok_or_else(|| Error::UnresolvedColumn(format!("{what} ({name:?})"))),
    }
}

struct Row {
    line: usize,
    t: f64,
    xyz: [f64; 3],
    user: String,
    device: String,
    label: Option<usize>,
}

/// Parses one delimited file. Returns valid rows in file order and the
/// number of malformed rows skipped.
fn parse_rows<R: Read>(reader: R, source: &str, m: &DatasetManifest) -> Result<(Vec<Row>, usize)> {
    let cols = m
        .columns
        .as_ref()
        .ok_or_else(|| Error::Config("manifest has no column mapping".into()))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(m.delimiter as u8)
        .has_headers(m.has_header)
        .flexible(true)
        .from_reader(reader);
    let header = if m.has_header {
        Some(rdr.headers()?.clone())
    } else {
        None
    };
    let r = Resolved {
        timestamp: resolve(&cols.timestamp, header.as_ref(), "timestamp")?,
        xyz: [
            resolve(&cols.x, header.as_ref(), "x")?,
            resolve(&cols.y, header.as_ref(), "y")?,
            resolve(&cols.z, header.as_ref(), "z")?,
        ],
        user: resolve(&cols.user, header.as_ref(), "user")?,
        device: cols
            .device
            .as_ref()
            .map(|c| resolve(c, header.as_ref(), "device"))
            .transpose()?,
        label: cols
            .label
            .as_ref()
            .map(|c| resolve(c, header.as_ref(), "label"))
            .transpose()?,
    };
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1 + usize::from(m.has_header);
        let Ok(rec) = rec else {
            skipped += 1;
            continue;
        };
        let num = |idx: usize| {
            rec.get(idx)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
        };
        let parsed = (|| {
            let t = num(r.timestamp)? * cols.timestamp_scale;
            let xyz = [num(r.xyz[0])?, num(r.xyz[1])?, num(r.xyz[2])?];
            let user = rec.get(r.user)?.trim().to_string();
            let device = match r.device {
                Some(d) => rec.get(d)?.trim().to_string(),
                None => "device".to_string(),
            };
            let label = match r.label {
                Some(l) => m.class_of(rec.get(l)?.trim()),
                None => None,
            };
            Some(Row {
                line,
                t,
                xyz,
                user,
                device,
                label,
            })
        })();
        match parsed {
            Some(row) if !row.user.is_empty() => rows.push(row),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("{source}: skipped {skipped} malformed rows");
    }
    Ok((rows, skipped))
}

fn median_step(ts: &[f64]) -> Option<f64> {
    let mut d: Vec<f64> = ts
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .filter(|v| *v > 0.0)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

fn stream_rate(m: &DatasetManifest, device: &str, ts: &[f64]) -> Result<f64> {
    match m.rates.as_ref().unwrap_or(&RatePolicy::Infer) {
        RatePolicy::Fixed { hz } => Ok(*hz),
        RatePolicy::PerDevice { devices } => devices.get(device).copied().ok_or_else(|| {
            Error::Data(format!("no sampling rate configured for device {device:?}"))
        }),
        RatePolicy::Infer => median_step(ts)
            .map(|s| 1.0 / s)
            .ok_or_else(|| Error::Data(format!("cannot infer sampling rate of device {device:?}"))),
    }
}

/// Parses rows from an in-memory or file reader into streams.
pub fn parse_csv<R: Read>(reader: R, source: &str, m: &DatasetManifest) -> Result<RawStreams> {
    let (rows, skipped) = parse_rows(reader, source, m)?;
    assemble(vec![(source.to_string(), rows)], skipped, m)
}

fn assemble(
    sources: Vec<(String, Vec<Row>)>,
    skipped: usize,
    m: &DatasetManifest,
) -> Result<RawStreams> {
    let mut groups: BTreeMap<(String, String), (String, Vec<Row>)> = BTreeMap::new();
    let mut total = 0;
    for (source, rows) in sources {
        total += rows.len();
        for row in rows {
            groups
                .entry((row.user.clone(), row.device.clone()))
                .or_insert_with(|| (source.clone(), Vec::new()))
                .1
                .push(row);
        }
    }
    if total == 0 {
        return Err(Error::NoValidRows(
            m.sources
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", "),
        ));
    }
    let mut streams = Vec::with_capacity(groups.len());
    for ((user, device), (source, mut rows)) in groups {
        let ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
        let rate = stream_rate(m, &device, &ts)?;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::Data(format!(
                "invalid sampling rate {rate} for device {device:?}"
            )));
        }
        let tolerance = DISORDER_TOLERANCE_PERIODS / rate;
        let mut latest = f64::NEG_INFINITY;
        for r in &rows {
            if r.t < latest - tolerance - 1e-12 {
                return Err(Error::TimestampDisorder {
                    source_name: source.clone(),
                    row: r.line,
                });
            }
            latest = latest.max(r.t);
        }
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        streams.push(Stream {
            user_id: user,
            device_id: device,
            rate_hz: rate,
            samples: rows
                .into_iter()
                .map(|r| Sample {
                    t: r.t,
                    xyz: r.xyz,
                    label: r.label,
                })
                .collect(),
        });
    }
    Ok(RawStreams {
        classes: m.classes.clone(),
        streams,
        skipped_rows: skipped,
    })
}

/// Reads every source of a manifest (or generates the synthetic corpus).
pub fn ingest(m: &DatasetManifest) -> Result<RawStreams> {
    m.validate()?;
    if m.dataset_id == DatasetId::Synthetic {
        let cfg = m.synthetic.as_ref().expect("validated");
        let mut corpus = synthetic::generate(cfg);
        corpus.classes = m.classes.clone();
        return Ok(corpus);
    }
    let mut parsed = Vec::new();
    let mut skipped = 0;
    for src in &m.sources {
        let path = if src.is_absolute() {
            src.clone()
        } else {
            m.base_dir.join(src)
        };
        let file = std::fs::File::open(&path)?;
        let (rows, s) = parse_rows(
            std::io::BufReader::new(file),
            &path.display().to_string(),
            m,
        )?;
        skipped += s;
        parsed.push((path.display().to_string(), rows));
    }
    assemble(parsed, skipped, m)
}

/// Writes streams as `timestamp,x,y,z,user,device,label` rows with a header.
pub fn write_csv<W: Write>(corpus: &RawStreams, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "x", "y", "z", "user", "device", "label"])?;
    for s in &corpus.streams {
        for smp in &s.samples {
            let label = smp.label.map(|l| corpus.classes[l].as_str()).unwrap_or("");
            w.write_record([
                smp.t.to_string(),
                smp.xyz[0].to_string(),
                smp.xyz[1].to_string(),
                smp.xyz[2].to_string(),
                s.user_id.clone(),
                s.device_id.clone(),
                label.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::ColumnMap;
    use std::path::PathBuf;

    fn manifest(rates: RatePolicy) -> DatasetManifest {
        DatasetManifest {
            dataset_id: DatasetId::SmartfallNotch,
            classes: vec!["fall".into(), "not-fall".into()],
            window_seconds: 2.0,
            target_hz: 31.25,
            sources: vec![PathBuf::from("mem.csv")],
            delimiter: ',',
            has_header: true,
            columns: Some(ColumnMap {
                timestamp: ColumnRef::Name("ms".into()),
                x: ColumnRef::Name("x".into()),
                y: ColumnRef::Name("y".into()),
                z: ColumnRef::Name("z".into()),
                user: ColumnRef::Name("user".into()),
                device: None,
                label: Some(ColumnRef::Name("outcome".into())),
                timestamp_scale: 1e-3,
            }),
            rates: Some(rates),
            labels: [
                ("1".to_string(), "fall".to_string()),
                ("0".to_string(), "not-fall".to_string()),
            ]
            .into(),
            synthetic: None,
            base_dir: PathBuf::new(),
        }
    }

    fn csv_text(n: usize, bad_row: Option<usize>) -> String {
        let mut s = String::from("ms,x,y,z,user,outcome\n");
        for i in 0..n {
            if Some(i) == bad_row {
                s.push_str("oops,1,2\n");
            } else {
                s.push_str(&format!("{},{},0.5,-1,u7,{}\n", i as f64 * 32.0, i, i % 2));
            }
        }
        s
    }

    #[test]
    fn one_malformed_row_is_skipped() {
        let m = manifest(RatePolicy::Fixed { hz: 31.25 });
        let c = parse_csv(csv_text(101, Some(40)).as_bytes(), "mem", &m).unwrap();
        assert_eq!(c.skipped_rows, 1);
        assert_eq!(c.streams[0].samples.len(), 100);
        assert_eq!(c.streams[0].samples[1].label, Some(0));
        assert_eq!(c.streams[0].samples[0].label, Some(1));
        assert!((c.streams[0].samples[1].t - 0.032).abs() < 1e-12);
    }

    #[test]
    fn rate_inferred_from_timestamps() {
        let m = manifest(RatePolicy::Infer);
        let c = parse_csv(csv_text(50, None).as_bytes(), "mem", &m).unwrap();
        assert!((c.streams[0].rate_hz - 31.25).abs() < 1e-9);
    }

    #[test]
    fn unknown_column_is_an_error() {
        let mut m = manifest(RatePolicy::Fixed { hz: 31.25 });
        m.columns.as_mut().unwrap().x = ColumnRef::Name("accel_x".into());
        assert!(matches!(
            parse_csv(csv_text(5, None).as_bytes(), "mem", &m),
            Err(Error::UnresolvedColumn(_))
        ));
    }

    #[test]
    fn no_valid_rows_is_an_error() {
        let m = manifest(RatePolicy::Fixed { hz: 31.25 });
        assert!(matches!(
            parse_csv("ms,x,y,z,user,outcome\nbad,row\n".as_bytes(), "mem", &m),
            Err(Error::NoValidRows(_))
        ));
    }

    #[test]
    fn small_disorder_sorted_large_disorder_rejected() {
        let m = manifest(RatePolicy::Fixed { hz: 31.25 });
        let slight =
            "ms,x,y,z,user,outcome\n0,0,0,0,a,1\n64,2,0,0,a,1\n32,1,0,0,a,1\n96,3,0,0,a,1\n";
        let c = parse_csv(slight.as_bytes(), "mem", &m).unwrap();
        let xs: Vec<f64> = c.streams[0].samples.iter().map(|s| s.xyz[0]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0]);
        let bad = "ms,x,y,z,user,outcome\n0,0,0,0,a,1\n320,2,0,0,a,1\n32,1,0,0,a,1\n";
        assert!(matches!(
            parse_csv(bad.as_bytes(), "mem", &m),
            Err(Error::TimestampDisorder { row: 4, .. })
        ));
    }
}
