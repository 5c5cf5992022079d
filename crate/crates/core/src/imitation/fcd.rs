//! Floating-car-data XML: the `fcd-export` subset written by SUMO.
//!
//! ```xml
//! <fcd-export>
//!   <timestep time="0.00">
//!     <vehicle id="v0" x="5.0" y="1.5" speed="10.0" angle="90.0" lane="e1_0"/>
//!   </timestep>
//! </fcd-export>
//! ```
//!
//! Unknown attributes are skipped, unknown elements are an error.

use std::collections::HashSet;
use std::fmt::Write;

use roxmltree::{Document, Node};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub vehicle_id: String,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub angle: f64,
    pub lane: Option<String>,
}

impl Snapshot {
    pub fn distance_to(&self, other: &Snapshot) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestep {
    pub time: f64,
    pub snapshots: Vec<Snapshot>,
}

struct Ctx<'a, 'input> {
    doc: &'a Document<'input>,
}

impl Ctx<'_, '_> {
    fn error_at(&self, pos: usize, token: &str, message: impl Into<String>) -> Error {
        let p = self.doc.text_pos_at(pos);
        Error::Parse {
            line: p.row,
            column: p.col,
            token: token.to_string(),
            message: message.into(),
        }
    }

    fn attr<'n>(&self, node: Node<'n, '_>, name: &str) -> Result<&'n str> {
        node.attribute(name).ok_or_else(|| {
            self.error_at(
                node.range().start,
                node.tag_name().name(),
                format!("missing required attribute `{name}`"),
            )
        })
    }

    fn value_pos(node: Node, name: &str) -> usize {
        node.attributes()
            .find(|a| a.name() == name)
            .map_or(node.range().start, |a| a.range_value().start)
    }

    fn number(&self, node: Node, name: &str) -> Result<f64> {
        let raw = self.attr(node, name)?;
        let pos = Self::value_pos(node, name);
        match raw.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.error_at(
                pos,
                raw,
                format!("attribute `{name}` is not a finite number"),
            )),
        }
    }

    /// Text nodes may only hold whitespace; comments are fine.
    fn check_child(&self, child: Node, parent: &str) -> Result<bool> {
        if child.is_element() {
            return Ok(true);
        }
        if child.is_text() {
            let text = child.text().unwrap_or("");
            if !text.trim().is_empty() {
                return Err(self.error_at(
                    child.range().start + (text.len() - text.trim_start().len()),
                    text.trim(),
                    format!("unexpected text inside <{parent}>"),
                ));
            }
        }
        Ok(false)
    }
}

pub fn parse_fcd(xml: &str) -> Result<Vec<Timestep>> {
    let doc = Document::parse(xml).map_err(|e| {
        let p = e.pos();
        Error::Parse {
            line: p.row,
            column: p.col,
            token: token_at(xml, p.row, p.col),
            message: e.to_string(),
        }
    })?;
    let ctx = Ctx { doc: &doc };
    let root = doc.root_element();
    if root.tag_name().name() != "fcd-export" {
        return Err(ctx.error_at(
            root.range().start,
            root.tag_name().name(),
            "root element must be <fcd-export>",
        ));
    }

    let mut out: Vec<Timestep> = Vec::new();
    for ts in root.children() {
        if !ctx.check_child(ts, "fcd-export")? {
            continue;
        }
        if ts.tag_name().name() != "timestep" {
            return Err(ctx.error_at(ts.range().start, ts.tag_name().name(), "unknown element"));
        }
        let time = ctx.number(ts, "time")?;
        if let Some(prev) = out.last() {
            if time <= prev.time {
                return Err(ctx.error_at(
                    ts.range().start,
                    ts.attribute("time").unwrap_or(""),
                    format!("time {time} does not increase (previous {})", prev.time),
                ));
            }
        }
        let mut seen = HashSet::new();
        let mut snapshots = Vec::new();
        for v in ts.children() {
            if !ctx.check_child(v, "timestep")? {
                continue;
            }
            if v.tag_name().name() != "vehicle" {
                return Err(ctx.error_at(v.range().start, v.tag_name().name(), "unknown element"));
            }
            let id = ctx.attr(v, "id")?;
            if !seen.insert(id) {
                return Err(ctx.error_at(
                    v.range().start,
                    id,
                    format!("duplicate vehicle id `{id}` at time {time}"),
                ));
            }
            let speed = ctx.number(v, "speed")?;
            if speed < 0.0 {
                return Err(ctx.error_at(
                    Ctx::value_pos(v, "speed"),
                    v.attribute("speed").unwrap_or_default(),
                    "negative speed",
                ));
            }
            snapshots.push(Snapshot {
                vehicle_id: id.to_string(),
                x: ctx.number(v, "x")?,
                y: ctx.number(v, "y")?,
                speed,
                angle: ctx.number(v, "angle")?.rem_euclid(360.0),
                lane: v.attribute("lane").map(str::to_string),
            });
        }
        out.push(Timestep { time, snapshots });
    }
    Ok(out)
}

fn token_at(text: &str, row: u32, col: u32) -> String {
    text.lines()
        .nth(row.saturating_sub(1) as usize)
        .map(|line| {
            line.chars()
                .skip(col.saturating_sub(1) as usize)
                .take_while(|c| !c.is_whitespace())
                .take(24)
                .collect()
        })
        .unwrap_or_default()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Serialise timesteps back into the same grammar. Numbers use the shortest
/// representation that parses back to the identical `f64`.
pub fn write_fcd(timesteps: &[Timestep]) -> String {
    let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<fcd-export>\n");
    for ts in timesteps {
        let _ = writeln!(s, "  <timestep time=\"{}\">", ts.time);
        for v in &ts.snapshots {
            let _ = write!(
                s,
                "    <vehicle id=\"{}\" x=\"{}\" y=\"{}\" speed=\"{}\" angle=\"{}\"",
                escape(&v.vehicle_id),
                v.x,
                v.y,
                v.speed,
                v.angle
            );
            if let Some(lane) = &v.lane {
                let _ = write!(s, " lane=\"{}\"", escape(lane));
            }
            s.push_str("/>\n");
        }
        s.push_str("  </timestep>\n");
    }
    s.push_str("</fcd-export>\n");
    s
}
