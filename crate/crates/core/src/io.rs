//! Parsers, exporters and file persistence.
//!
//! Every parser rescales its trace so the larger bounding-box side is 1 and
//! records the original scale in [`TraceMeta::raw_scale`]. Writes go to a
//! temporary file in the destination directory and are renamed into place.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Bounds, Vec2};
use crate::reconstruct::{RawTrace, TraceMeta};
use crate::rmdn::ModelCheckpoint;
use crate::slm::{ActionPlan, Trajectory, TrajectorySample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceFormat {
    #[serde(rename = "gml")]
    Gml,
    #[serde(rename = "points-json")]
    PointsJson,
    #[serde(rename = "points-csv")]
    PointsCsv,
    /// An already reconstructed [`ActionPlan`].
    #[serde(rename = "plan-json")]
    PlanJson,
}

impl TraceFormat {
    /// Guess from a file extension: `.gml`/`.xml`, `.csv`, otherwise JSON
    /// points.
    pub fn from_path(path: &Path) -> TraceFormat {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("gml" | "xml") => TraceFormat::Gml,
            Some("csv") => TraceFormat::PointsCsv,
            _ => TraceFormat::PointsJson,
        }
    }
}

fn normalise_extent(trace: &mut RawTrace) {
    let extent = trace.extent();
    if extent > 0.0 && extent.is_finite() {
        for p in &mut trace.points {
            *p = *p * (1.0 / extent);
        }
        trace.meta.raw_scale = Some(extent);
    }
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(name))
        .map(|c| c.text().unwrap_or("").trim())
}

fn number(text: &str, location: impl FnOnce() -> String) -> Result<f64> {
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumeric {
            location: location(),
            value: text.to_string(),
        }),
    }
}

/// Reads a Graffiti Markup Language document. Each `<stroke>` becomes a drawn
/// segment; `<t>` values are kept in the metadata only. When the
/// environment's `<up>` vector points along +y the y axis is flipped so
/// traces use the y-down canvas convention.
pub fn parse_gml(bytes: &[u8]) -> Result<RawTrace> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::MalformedXml(e.to_string()))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::MalformedXml(e.to_string()))?;
    let up_y = doc
        .descendants()
        .find(|n| n.has_tag_name("up"))
        .and_then(|up| child_text(up, "y"))
        .and_then(|y| y.parse::<f64>().ok());
    let flip = up_y.is_some_and(|y| y > 0.0);

    let mut trace = RawTrace::default();
    let mut times = Vec::new();
    let mut all_timed = true;
    for (s, stroke) in doc.descendants().filter(|n| n.has_tag_name("stroke")).enumerate() {
        let start = trace.points.len();
        for (k, pt) in stroke.children().filter(|n| n.has_tag_name("pt")).enumerate() {
            let loc = |axis: &str| format!("stroke {s}, pt {k}, <{axis}>");
            let read = |axis: &str| -> Result<f64> {
                let t = child_text(pt, axis).ok_or_else(|| Error::Parse {
                    location: format!("stroke {s}, pt {k}"),
                    message: format!("missing <{axis}>"),
                })?;
                number(t, || loc(axis))
            };
            let x = read("x")?;
            let y = read("y")?;
            match child_text(pt, "t") {
                Some(t) => times.push(number(t, || loc("t"))?),
                None => all_timed = false,
            }
            trace.points.push(Vec2::new(x, if flip { -y } else { y }));
        }
        if start > 0 && trace.points.len() > start {
            trace.pen_up_breaks.push(start);
        }
    }
    if trace.points.is_empty() {
        return Err(Error::NoPoints);
    }
    trace.meta = TraceMeta {
        raw_scale: None,
        y_flipped: flip,
        timestamps: (all_timed && !times.is_empty()).then_some(times),
    };
    normalise_extent(&mut trace);
    Ok(trace)
}

fn pen_value(v: &serde_json::Value, location: impl Fn() -> String) -> Result<bool> {
    match v {
        serde_json::Value::Bool(b) => Ok(*b),
        serde_json::Value::Number(n) if n.as_f64() == Some(0.0) => Ok(false),
        serde_json::Value::Number(n) if n.as_f64() == Some(1.0) => Ok(true),
        other => Err(Error::Parse {
            location: location(),
            message: format!("pen_up must be a boolean or 0/1, got {other}"),
        }),
    }
}

fn push_point(trace: &mut RawTrace, x: f64, y: f64, pen_up: bool) {
    if pen_up && !trace.points.is_empty() {
        trace.pen_up_breaks.push(trace.points.len());
    }
    trace.points.push(Vec2::new(x, y));
}

/// Reads a point list: a JSON array of `[x, y]` or `[x, y, pen_up]` rows,
/// or CSV with an `x,y[,pen_up]` header. A set pen-up flag starts a new
/// drawn segment at that point.
pub fn parse_points(bytes: &[u8], format: TraceFormat) -> Result<RawTrace> {
    let mut trace = match format {
        TraceFormat::PointsJson => parse_points_json(bytes)?,
        TraceFormat::PointsCsv => parse_points_csv(bytes)?,
        TraceFormat::Gml => return parse_gml(bytes),
        TraceFormat::PlanJson => {
            return Err(Error::InvalidArgument("plans are not point lists".into()));
        }
    };
    if trace.points.is_empty() {
        return Err(Error::NoPoints);
    }
    normalise_extent(&mut trace);
    Ok(trace)
}

fn parse_points_json(bytes: &[u8]) -> Result<RawTrace> {
    let rows: Vec<serde_json::Value> = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut trace = RawTrace::default();
    let mut width = None;
    for (i, row) in rows.iter().enumerate() {
        let loc = || format!("row {i}");
        let cells = row.as_array().ok_or_else(|| Error::Parse {
            location: loc(),
            message: "expected an array".into(),
        })?;
        if !(2..=3).contains(&cells.len()) || width.is_some_and(|w| w != cells.len()) {
            return Err(Error::Parse {
                location: loc(),
                message: format!("ragged row of {} values", cells.len()),
            });
        }
        width = Some(cells.len());
        let coord = |c: usize| -> Result<f64> {
            match cells[c].as_f64() {
                Some(v) if v.is_finite() => Ok(v),
                _ => Err(Error::NonNumeric {
                    location: format!("row {i}, column {c}"),
                    value: cells[c].to_string(),
                }),
            }
        };
        let (x, y) = (coord(0)?, coord(1)?);
        let pen = match cells.get(2) {
            Some(v) => pen_value(v, loc)?,
            None => false,
        };
        push_point(&mut trace, x, y, pen);
    }
    Ok(trace)
}

fn parse_points_csv(bytes: &[u8]) -> Result<RawTrace> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            location: "header".into(),
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (xi, yi) = match (col("x"), col("y")) {
        (Some(x), Some(y)) => (x, y),
        _ => {
            return Err(Error::Parse {
                location: "header".into(),
                message: "expected columns x and y".into(),
            })
        }
    };
    let pi = col("pen_up");
    let mut trace = RawTrace::default();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            location: format!("line {line}"),
            message: e.to_string(),
        })?;
        let cell = |c: usize, name: &str| -> Result<f64> {
            let text = record.get(c).unwrap_or("");
            number(text, || format!("line {line}, column {name}"))
        };
        let (x, y) = (cell(xi, "x")?, cell(yi, "y")?);
        let pen = match pi.map(|c| record.get(c).unwrap_or("")) {
            None | Some("" | "0" | "false") => false,
            Some("1" | "true") => true,
            Some(other) => {
                return Err(Error::Parse {
                    location: format!("line {line}, column pen_up"),
                    message: format!("pen_up must be 0/1 or true/false, got {other:?}"),
                })
            }
        };
        push_point(&mut trace, x, y, pen);
    }
    Ok(trace)
}

/// Reads a trace (or plan) file in the given format.
pub fn read_trace(path: &Path, format: TraceFormat) -> Result<RawTrace> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        TraceFormat::Gml => parse_gml(&bytes),
        _ => parse_points(&bytes, format),
    }
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

/// SVG 1.1 drawing: one path per drawn span of the trajectory and, when a
/// plan is given, a red marker at every virtual target. The view box is the
/// bounding box of everything drawn plus a 5% margin.
pub fn export_svg(traj: &Trajectory, plan: Option<&ActionPlan>) -> Vec<u8> {
    let mut points: Vec<Vec2> = traj.positions();
    if let Some(p) = plan {
        points.extend(p.positions());
    }
    let bounds = Bounds::of(points.iter().copied()).unwrap_or(Bounds {
        min: Vec2::new(0.0, 0.0),
        max: Vec2::new(1.0, 1.0),
    });
    let side = bounds.extent().max(1e-9);
    let margin = 0.05 * side;
    let (x0, y0) = (bounds.min.x - margin, bounds.min.y - margin);
    let (w, h) = (bounds.width() + 2.0 * margin, bounds.height() + 2.0 * margin);
    let stroke = 0.005 * side;

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="{} {} {} {}">"#,
        fmt_num(x0),
        fmt_num(y0),
        fmt_num(w.max(1e-9)),
        fmt_num(h.max(1e-9))
    );
    let _ = writeln!(
        out,
        r#"<g id="trajectory" fill="none" stroke="black" stroke-width="{}" stroke-linecap="round" stroke-linejoin="round">"#,
        fmt_num(stroke)
    );
    for span in drawn_spans(&traj.samples) {
        if span.len() < 2 {
            continue;
        }
        let mut d = String::new();
        for (i, s) in span.iter().enumerate() {
            let _ = write!(
                d,
                "{}{},{}",
                if i == 0 { "M" } else { " L" },
                fmt_num(s.position.x),
                fmt_num(s.position.y)
            );
        }
        let _ = writeln!(out, r#"<path d="{d}"/>"#);
    }
    let _ = writeln!(out, "</g>");
    if let Some(p) = plan {
        let _ = writeln!(out, r#"<g id="targets" fill="red">"#);
        for t in &p.targets {
            let _ = writeln!(
                out,
                r#"<circle cx="{}" cy="{}" r="{}"/>"#,
                fmt_num(t.position.x),
                fmt_num(t.position.y),
                fmt_num(3.0 * stroke)
            );
        }
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    out.into_bytes()
}

/// Maximal runs of drawn samples.
fn drawn_spans(samples: &[TrajectorySample]) -> Vec<&[TrajectorySample]> {
    samples
        .split(|s| !s.drawn)
        .filter(|s| !s.is_empty())
        .collect()
}

/// CSV with columns `t,x,y,speed,drawn`. Numbers use the shortest
/// representation that parses back to the same value.
pub fn export_trajectory_csv(traj: &Trajectory) -> Vec<u8> {
    let mut out = String::from("t,x,y,speed,drawn\n");
    for s in &traj.samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.t,
            s.position.x,
            s.position.y,
            s.speed,
            u8::from(s.drawn)
        );
    }
    out.into_bytes()
}

/// Inverse of [`export_trajectory_csv`].
pub fn parse_trajectory_csv(bytes: &[u8]) -> Result<Vec<TrajectorySample>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            location: format!("line {line}"),
            message: e.to_string(),
        })?;
        if record.len() != 5 {
            return Err(Error::Parse {
                location: format!("line {line}"),
                message: format!("expected 5 columns, got {}", record.len()),
            });
        }
        let v = |c: usize| number(&record[c], || format!("line {line}, column {c}"));
        out.push(TrajectorySample {
            t: v(0)?,
            position: Vec2::new(v(1)?, v(2)?),
            speed: v(3)?,
            drawn: &record[4] == "1",
        });
    }
    Ok(out)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })
}

/// Reads a plan file and validates it.
pub fn read_plan(path: &Path) -> Result<ActionPlan> {
    let plan: ActionPlan = read_json(path)?;
    plan.validate()?;
    Ok(plan)
}

pub const MANIFEST_VERSION: u32 = 1;

/// What to do with pen lifts inside a trace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenUpPolicy {
    /// Keep lifts as segment breaks.
    #[default]
    Keep,
    /// Treat the trace as one continuous segment.
    Join,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub format: TraceFormat,
    #[serde(default)]
    pub style_label: String,
    #[serde(default)]
    pub pen_up_policy: PenUpPolicy,
}

/// A list of training traces. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

/// One manifest entry, loaded.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetItem {
    Trace { label: String, trace: RawTrace },
    Plan { label: String, plan: ActionPlan },
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported manifest version {} (supported: {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument("manifest has no entries".into()));
        }
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert(&e.path) {
                return Err(Error::Parse {
                    location: format!("entry {i}"),
                    message: format!("duplicate path {}", e.path.display()),
                });
            }
        }
        let labels: HashSet<&str> = self.entries.iter().map(|e| e.style_label.as_str()).collect();
        if labels.len() > 1 {
            if let Some(i) = self.entries.iter().position(|e| e.style_label.is_empty()) {
                return Err(Error::Parse {
                    location: format!("entry {i}"),
                    message: "style labels are required when a manifest mixes styles".into(),
                });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    /// Reads every entry, resolving relative paths against `base`.
    pub fn read_items(&self, base: &Path) -> Result<Vec<DatasetItem>> {
        self.entries
            .iter()
            .map(|e| {
                let path = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
                let label = e.style_label.clone();
                if e.format == TraceFormat::PlanJson {
                    return Ok(DatasetItem::Plan {
                        label,
                        plan: read_plan(&path)?,
                    });
                }
                let mut trace = read_trace(&path, e.format)?;
                if e.pen_up_policy == PenUpPolicy::Join {
                    trace.pen_up_breaks.clear();
                }
                Ok(DatasetItem::Trace { label, trace })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gml_points_and_breaks() {
        let doc = br#"<gml><tag><drawing>
            <stroke><pt><x>0</x><y>0</y><t>0</t></pt><pt><x>1</x><y>0</y><t>0.1</t></pt></stroke>
            <stroke><pt><x>1</x><y>1</y><t>0.2</t></pt></stroke>
        </drawing></tag></gml>"#;
        let t = parse_gml(doc).unwrap();
        assert_eq!(t.points.len(), 3);
        assert_eq!(t.pen_up_breaks, vec![2]);
        assert_eq!(t.meta.timestamps, Some(vec![0.0, 0.1, 0.2]));
        assert_eq!(t.meta.raw_scale, Some(1.0));
    }

    #[test]
    fn gml_flips_y_up_documents() {
        let doc = br#"<gml><tag><header><environment><up><x>0</x><y>1</y><z>0</z></up></environment></header>
            <drawing><stroke><pt><x>0</x><y>2</y></pt><pt><x>2</x><y>4</y></pt></stroke></drawing></tag></gml>"#;
        let t = parse_gml(doc).unwrap();
        assert!(t.meta.y_flipped);
        assert_eq!(t.points[1], Vec2::new(1.0, -2.0));
        assert_eq!(t.meta.raw_scale, Some(2.0));
    }

    #[test]
    fn gml_errors_are_distinct() {
        assert!(matches!(parse_gml(b"<gml><tag>"), Err(Error::MalformedXml(_))));
        assert!(matches!(parse_gml(b"<gml><tag><drawing/></tag></gml>"), Err(Error::NoPoints)));
        let bad = b"<gml><tag><drawing><stroke><pt><x>a</x><y>0</y></pt></stroke></drawing></tag></gml>";
        match parse_gml(bad) {
            Err(Error::NonNumeric { location, value }) => {
                assert_eq!(value, "a");
                assert!(location.contains("stroke 0, pt 0"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn svg_markers_and_paths() {
        let samples = |drawn: &[bool]| Trajectory {
            samples: drawn
                .iter()
                .enumerate()
                .map(|(i, &d)| TrajectorySample {
                    t: i as f64,
                    position: Vec2::new(i as f64, 0.5 * i as f64),
                    speed: 1.0,
                    drawn: d,
                })
                .collect(),
            dt: 1.0,
        };
        let svg = String::from_utf8(export_svg(&samples(&[true, true]), None)).unwrap();
        assert_eq!(svg.matches("<path").count(), 1);
        assert_eq!(svg.matches(" L").count(), 1);
        let svg = String::from_utf8(export_svg(&samples(&[true, true, false, true, true, true]), None)).unwrap();
        assert_eq!(svg.matches("<path").count(), 2);
    }
}
