//! Segment files (CSV and JSONL), model persistence and atomic writes.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::predict_at_warp;
use crate::inference::ModelState;
use crate::segment::Segment;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "ndjson" => Ok(Format::Jsonl),
            other => Err(Error::InvalidArgument(format!(
                "unknown segment format {other:?} (csv or jsonl)"
            ))),
        }
    }
}

impl Format {
    /// Guess from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSegment {
    id: String,
    t: Vec<f64>,
    y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

pub fn load_segments(path: impl AsRef<Path>, format: Format) -> Result<Vec<Segment>> {
    let file = fs::File::open(path.as_ref())?;
    read_segments(BufReader::new(file), format)
}

pub fn read_segments<R: Read>(reader: R, format: Format) -> Result<Vec<Segment>> {
    match format {
        Format::Csv => read_csv(reader),
        Format::Jsonl => read_jsonl(BufReader::new(reader)),
    }
}

struct Pending {
    id: String,
    t: Vec<f64>,
    y: Vec<f64>,
    label: Option<String>,
}

impl Pending {
    fn finish(self) -> Result<Segment> {
        Segment::new(self.id, self.t, self.y, self.label)
    }
}

fn parse_num(field: &str, line: usize, name: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|e| Error::Parse {
        line,
        reason: format!("column {name}: {e} ({field:?})"),
    })
}

fn read_csv<R: Read>(reader: R) -> Result<Vec<Segment>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (id_c, t_c, y_c) = match (col("segment_id"), col("t"), col("y")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::Parse {
                line: 1,
                reason: "header must contain segment_id, t and y".into(),
            })
        }
    };
    let label_c = col("label");
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut cur: Option<Pending> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let get = |c: usize, name: &str| {
            rec.get(c).ok_or_else(|| Error::Parse {
                line,
                reason: format!("missing column {name}"),
            })
        };
        let id = get(id_c, "segment_id")?.to_string();
        let t = parse_num(get(t_c, "t")?, line, "t")?;
        let y = parse_num(get(y_c, "y")?, line, "y")?;
        let label = label_c
            .and_then(|c| rec.get(c))
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        if cur.as_ref().is_none_or(|p| p.id != id) {
            if let Some(p) = cur.take() {
                out.push(p.finish()?);
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Parse {
                    line,
                    reason: format!("rows of segment {id:?} are not contiguous"),
                });
            }
            cur = Some(Pending {
                id,
                t: Vec::new(),
                y: Vec::new(),
                label: label.clone(),
            });
        }
        let p = cur.as_mut().expect("segment open");
        if p.label != label {
            return Err(Error::Parse {
                line,
                reason: format!("segment {:?} has inconsistent labels", p.id),
            });
        }
        p.t.push(t);
        p.y.push(y);
    }
    if let Some(p) = cur {
        out.push(p.finish()?);
    }
    Ok(out)
}

fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let js: JsonSegment = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(Segment::new(js.id, js.t, js.y, js.label)?);
    }
    Ok(out)
}

/// Incremental reader for streaming input; JSONL yields a segment per line,
/// CSV yields a segment once its id changes.
pub fn segment_stream<R: Read + 'static>(
    reader: R,
    format: Format,
) -> Result<Box<dyn Iterator<Item = Result<Segment>>>> {
    match format {
        Format::Jsonl => {
            let lines = BufReader::new(reader).lines().enumerate();
            Ok(Box::new(lines.filter_map(|(i, l)| {
                match l {
                    Err(e) => Some(Err(e.into())),
                    Ok(l) if l.trim().is_empty() => None,
                    Ok(l) => Some(
                        serde_json::from_str::<JsonSegment>(&l)
                            .map_err(|e| Error::Parse {
                                line: i + 1,
                                reason: e.to_string(),
                            })
                            .and_then(|js| Segment::new(js.id, js.t, js.y, js.label)),
                    ),
                }
            })))
        }
        Format::Csv => Ok(Box::new(read_csv(reader)?.into_iter().map(Ok))),
    }
}

pub fn write_segments<W: Write>(mut w: W, segments: &[Segment], format: Format) -> Result<()> {
    match format {
        Format::Csv => {
            let labelled = segments.iter().any(|s| s.label.is_some());
            let mut wtr = csv::Writer::from_writer(w);
            if labelled {
                wtr.write_record(["segment_id", "t", "y", "label"])?;
            } else {
                wtr.write_record(["segment_id", "t", "y"])?;
            }
            for s in segments {
                for (t, y) in s.t.iter().zip(&s.y) {
                    let (t, y) = (format!("{t:?}"), format!("{y:?}"));
                    if labelled {
                        wtr.write_record([s.id.as_str(), &t, &y, s.label.as_deref().unwrap_or("")])?;
                    } else {
                        wtr.write_record([s.id.as_str(), &t, &y])?;
                    }
                }
            }
            wtr.flush()?;
        }
        Format::Jsonl => {
            for s in segments {
                let js = JsonSegment {
                    id: s.id.clone(),
                    t: s.t.clone(),
                    y: s.y.clone(),
                    label: s.label.clone(),
                };
                serde_json::to_writer(&mut w, &js)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn save_segments(path: impl AsRef<Path>, segments: &[Segment], format: Format) -> Result<()> {
    let mut buf = Vec::new();
    write_segments(&mut buf, segments, format)?;
    atomic_write(path, &buf)
}

/// Write to a temporary sibling and rename it over the target.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn model_to_json(model: &ModelState) -> Result<String> {
    model.validate()?;
    Ok(serde_json::to_string_pretty(model)?)
}

pub fn model_from_json(s: &str) -> Result<ModelState> {
    let value: serde_json::Value = serde_json::from_str(s)?;
    match value.get("version").and_then(|v| v.as_str()) {
        Some(v) if v == crate::inference::state::MODEL_VERSION => {}
        Some(v) => return Err(Error::ModelFile(format!("unsupported model version {v:?}"))),
        None => return Err(Error::ModelFile("missing version tag".into())),
    }
    let model: ModelState =
        serde_json::from_value(value).map_err(|e| Error::ModelFile(format!("schema violation: {e}")))?;
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelState) -> Result<()> {
    atomic_write(path, model_to_json(model)?.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState> {
    model_from_json(&fs::read_to_string(path)?)
}

/// Per-cluster mean and 95% band of the current morphology on a uniform
/// grid of `points` times (relative to segment start), as CSV with columns
/// `cluster,t,mean,lower,upper`.
pub fn plot_data_csv(model: &ModelState, points: usize) -> Result<String> {
    if points < 2 {
        return Err(Error::InvalidArgument("plot data needs at least two points".into()));
    }
    let mut out = String::from("cluster,t,mean,lower,upper\n");
    for (k, c) in model.clusters.iter().enumerate() {
        let (lo, hi) = c.inducing.span();
        let grid: Vec<f64> = (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect();
        let b = predict_at_warp(&c.current_x(&model.config)?, &grid)?;
        for ((t, m), sd) in grid.iter().zip(b.mean.iter()).zip(b.std_dev()) {
            let half = 1.959963984540054 * sd;
            out.push_str(&format!("{k},{t:?},{m:?},{:?},{:?}\n", m - half, m + half));
        }
    }
    Ok(out)
}

/// `iteration,elbo` rows, one per recorded bound value.
pub fn elbo_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("iteration,elbo\n");
    for (i, v) in trace.iter().enumerate() {
        out.push_str(&format!("{},{v:?}\n", i + 1));
    }
    out
}
