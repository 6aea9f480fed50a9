//! JSON Lines frame files, one frame per line:
//!
//! ```text
//! {"frame_id": 0, "points": [[x,y,z,r], ...], "boxes": [{"cls": 0, "x": .., "y": .., "z": .., "l": .., "w": .., "h": .., "theta": ..}, ...]}
//! ```

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Frame, GtBox, Point};
use crate::error::{Error, Result};
use crate::geometry::Box7;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    cls: usize,
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    theta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    frame_id: u64,
    points: Vec<[f64; 4]>,
    boxes: Vec<BoxRecord>,
}

impl From<&Frame> for FrameRecord {
    fn from(f: &Frame) -> Self {
        FrameRecord {
            frame_id: f.frame_id,
            points: f.points.iter().map(|p| [p.x, p.y, p.z, p.r]).collect(),
            boxes: f
                .gts
                .iter()
                .map(|g| BoxRecord {
                    cls: g.class_id,
                    x: g.bbox.x,
                    y: g.bbox.y,
                    z: g.bbox.z,
                    l: g.bbox.l,
                    w: g.bbox.w,
                    h: g.bbox.h,
                    theta: g.bbox.theta,
                })
                .collect(),
        }
    }
}

/// Best-effort name of the field a serde error refers to.
fn field_of(err: &serde_json::Error, line: &str) -> String {
    let msg = err.to_string();
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    // Fall back to the last key before the error column.
    let col = err.column().saturating_sub(1).min(line.len());
    let prefix = &line[..col];
    let mut key = "line".to_string();
    let mut rest = prefix;
    while let Some(end) = rest.rfind("\":") {
        if let Some(start) = rest[..end].rfind('"') {
            key = rest[start + 1..end].to_string();
            break;
        }
        rest = &rest[..end];
    }
    key
}

/// Parses frames from JSON Lines text. `origin` is used in error messages.
/// Blank lines are skipped.
pub fn parse_frames(text: &str, origin: &Path) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            field: field_of(&e, line),
            reason: e.to_string(),
        })?;
        let mut points = Vec::with_capacity(rec.points.len());
        for p in &rec.points {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: lineno,
                    field: "points".into(),
                    reason: "non-finite coordinate".into(),
                });
            }
            points.push(Point {
                x: p[0],
                y: p[1],
                z: p[2],
                r: p[3],
            });
        }
        let gts = rec
            .boxes
            .iter()
            .map(|b| GtBox {
                class_id: b.cls,
                bbox: Box7 {
                    x: b.x,
                    y: b.y,
                    z: b.z,
                    l: b.l,
                    w: b.w,
                    h: b.h,
                    theta: b.theta,
                },
            })
            .collect::<Vec<_>>();
        for (index, g) in gts.iter().enumerate() {
            if let Some(field) = g.bbox.invalid_field() {
                return Err(Error::InvalidBox {
                    frame_id: rec.frame_id,
                    index,
                    field: field.to_string(),
                });
            }
        }
        frames.push(Frame {
            frame_id: rec.frame_id,
            points,
            gts,
        });
    }
    Ok(frames)
}

pub fn load_frames(path: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        text.push_str(&line);
        text.push('\n');
    }
    parse_frames(&text, path)
}

/// Writes frames as JSON Lines; an empty slice produces an empty output.
pub fn write_frames<W: Write>(frames: &[Frame], out: &mut W) -> std::io::Result<()> {
    for f in frames {
        let rec = FrameRecord::from(f);
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_frames(frames: &[Frame], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_frames(frames, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
