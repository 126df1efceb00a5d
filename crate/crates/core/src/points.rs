//! Labeled point sets and their `x,y` CSV format.
//!
//! Coordinates are pixel indices: `x` is the column, `y` the row, origin at
//! the top-left corner.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const HEADER: &str = "x,y";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }

    pub fn dist2(self, other: Point) -> u64 {
        let dx = i64::from(self.x) - i64::from(other.x);
        let dy = i64::from(self.y) - i64::from(other.y);
        (dx * dx + dy * dy) as u64
    }

    /// Row-major ordering key: `y` first, then `x`.
    pub fn row_major(self) -> (u32, u32) {
        (self.y, self.x)
    }
}

impl From<(u32, u32)> for Point {
    fn from((x, y): (u32, u32)) -> Self {
        Self { x, y }
    }
}

/// Ordered collection of distinct points with a free-text source label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PointSet {
    points: Vec<Point>,
    label: String,
}

impl PointSet {
    pub fn new(points: Vec<Point>, label: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if !seen.insert(*p) {
                return Err(Error::Validation(format!(
                    "duplicate point ({}, {})",
                    p.x, p.y
                )));
            }
        }
        Ok(Self {
            points,
            label: label.into(),
        })
    }

    pub fn empty(label: impl Into<String>) -> Self {
        Self {
            points: Vec::new(),
            label: label.into(),
        }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Point> + '_ {
        self.points.iter().copied()
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        match self
            .points
            .iter()
            .find(|p| p.x as usize >= width || p.y as usize >= height)
        {
            Some(p) => Err(Error::Validation(format!(
                "point ({}, {}) outside {width}x{height} raster",
                p.x, p.y
            ))),
            None => Ok(()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(8 * (self.points.len() + 1));
        out.push_str(HEADER);
        out.push('\n');
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p.x, p.y);
        }
        out
    }

    pub fn parse_csv(text: &str, label: impl Into<String>) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let mut lines = body.split('\n').enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((_, other)) => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header {HEADER:?}, found {other:?}"),
                })
            }
            None => unreachable!("split yields at least one item"),
        }
        let mut points = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty line".into(),
                });
            }
            let p = parse_row(line).map_err(|message| Error::Parse {
                line: line_no,
                message,
            })?;
            if !seen.insert(p) {
                return Err(Error::Validation(format!(
                    "line {line_no}: duplicate point ({}, {})",
                    p.x, p.y
                )));
            }
            points.push(p);
        }
        Ok(Self {
            points,
            label: label.into(),
        })
    }
}

fn parse_row(line: &str) -> std::result::Result<Point, String> {
    let (x, y) = line
        .split_once(',')
        .ok_or_else(|| format!("expected two comma-separated integers, found {line:?}"))?;
    let field = |s: &str, name: &str| {
        s.parse::<u32>()
            .map_err(|e| format!("bad {name} value {s:?}: {e}"))
    };
    Ok(Point::new(field(x, "x")?, field(y, "y")?))
}

/// Reads a point CSV. The set is labeled with the file stem.
pub fn load_points(path: impl AsRef<Path>) -> Result<PointSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PointSet::parse_csv(&text, label)
}

pub fn save_points(points: &PointSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, points.to_csv()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_in_file_order() {
        let ps = PointSet::parse_csv("x,y\n3,4\n10,2", "r").unwrap();
        assert_eq!(ps.points(), &[Point::new(3, 4), Point::new(10, 2)]);
        let ps = PointSet::parse_csv("x,y\n3,4\n10,2\n", "r").unwrap();
        assert_eq!(ps.len(), 2);
    }

    #[test]
    fn header_only_is_empty() {
        assert!(PointSet::parse_csv("x,y\n", "r").unwrap().is_empty());
        assert!(PointSet::parse_csv("x,y", "r").unwrap().is_empty());
    }

    #[test]
    fn duplicate_rejected() {
        let err = PointSet::parse_csv("x,y\n3,4\n3,4\n", "r").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err:?}");
        assert!(PointSet::new(vec![Point::new(1, 1), Point::new(1, 1)], "r").is_err());
    }

    #[test]
    fn malformed_row_reports_line() {
        match PointSet::parse_csv("x,y\n1,2\n3;4\n", "r") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match PointSet::parse_csv("x,y\n-1,2\n", "r") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            PointSet::parse_csv("y,x\n", "r"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            PointSet::parse_csv("x,y\n1,2\n\n3,4\n", "r"),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn file_round_trip_keeps_order_and_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rater_a.csv");
        let ps = PointSet::new(
            vec![Point::new(9, 0), Point::new(0, 9), Point::new(4, 4)],
            "x",
        )
        .unwrap();
        save_points(&ps, &path).unwrap();
        let back = load_points(&path).unwrap();
        assert_eq!(back.points(), ps.points());
        assert_eq!(back.label(), "rater_a");

        let empty = PointSet::empty("e");
        save_points(&empty, &path).unwrap();
        assert!(load_points(&path).unwrap().is_empty());
    }

    #[test]
    fn bounds_check() {
        let ps = PointSet::new(vec![Point::new(4, 2)], "r").unwrap();
        assert!(ps.check_bounds(5, 3).is_ok());
        assert!(ps.check_bounds(4, 3).is_err());
        assert!(ps.check_bounds(5, 2).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip(raw in proptest::collection::hash_set((0u32..5000, 0u32..5000), 0..50)) {
            let pts: Vec<Point> = raw.into_iter().map(Point::from).collect();
            let ps = PointSet::new(pts, "p").unwrap();
            let back = PointSet::parse_csv(&ps.to_csv(), "p").unwrap();
            prop_assert_eq!(back, ps);
        }
    }
}
