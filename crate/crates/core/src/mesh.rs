//! Triangle meshes and the OFF text format.

use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
            return Err(Error::invalid(format!(
                "face {f:?} references a vertex beyond {n} vertices"
            )));
        }
        Ok(TriangleMesh { vertices, faces })
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn triangle(&self, face: usize) -> [Point3; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangles(&self) -> impl Iterator<Item = [Point3; 3]> + '_ {
        (0..self.faces.len()).map(move |f| self.triangle(f))
    }

    /// Axis-aligned bounding box as (min, max), `None` for a mesh without vertices.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(mut lo, mut hi), v| {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
            (lo, hi)
        }))
    }

    /// Apply `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(Point3) -> Point3) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Fit the bounding box into the unit cube: centered at (0.5, 0.5, 0.5),
    /// longest edge scaled to length 1, aspect ratio preserved. A zero-extent
    /// box is only re-centered.
    pub fn normalized(&self) -> Result<TriangleMesh> {
        let (lo, hi) = self
            .bounds()
            .ok_or_else(|| Error::Degenerate("cannot normalize a mesh without vertices".into()))?;
        let center = [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        ];
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
        Ok(self.map_vertices(|v| {
            [
                (v[0] - center[0]) * scale + 0.5,
                (v[1] - center[1]) * scale + 0.5,
                (v[2] - center[2]) * scale + 0.5,
            ]
        }))
    }

    pub fn to_off(&self) -> String {
        let mut out = format!("OFF\n{} {} 0\n", self.vertices.len(), self.faces.len());
        for v in &self.vertices {
            out.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
        }
        for f in &self.faces {
            out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
        }
        out
    }
}

/// Lines of an OFF stream with comments and blank lines removed, tagged
/// with 1-based line numbers.
struct Lines<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_content(&mut self) -> Result<Option<(usize, String)>> {
        for line in self.inner.by_ref() {
            self.line_no += 1;
            let line = line?;
            let content = match line.find('#') {
                Some(i) => &line[..i],
                None => &line[..],
            };
            let content = content.trim();
            if !content.is_empty() {
                return Ok(Some((self.line_no, content.to_string())));
            }
        }
        Ok(None)
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_numbers<N: std::str::FromStr>(line: usize, text: &str) -> Result<Vec<N>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<N>()
                .map_err(|_| parse_err(line, format!("cannot parse `{t}` as a number")))
        })
        .collect()
}

/// Parse an OFF mesh. Polygons with more than three vertices are
/// fan-triangulated. Both the standard header layout and the variant with
/// the counts on the `OFF` line itself (e.g. `OFF490 518 0`) are accepted.
pub fn parse_off<R: BufRead>(reader: R) -> Result<TriangleMesh> {
    let mut lines = Lines {
        inner: reader.lines(),
        line_no: 0,
    };
    let (header_line, header) = lines
        .next_content()?
        .ok_or_else(|| parse_err(0, "empty file, expected OFF header"))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| parse_err(header_line, format!("expected `OFF` header, found `{header}`")))?
        .trim();

    let (count_line, counts) = if rest.is_empty() {
        let (l, text) = lines
            .next_content()?
            .ok_or_else(|| parse_err(lines.line_no, "missing vertex/face counts"))?;
        (l, parse_numbers::<usize>(l, &text)?)
    } else {
        (header_line, parse_numbers::<usize>(header_line, rest)?)
    };
    if counts.len() < 2 || counts.len() > 3 {
        return Err(parse_err(
            count_line,
            format!("expected `vertices faces [edges]`, found {} values", counts.len()),
        ));
    }
    let (n_vertices, n_faces) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(n_vertices);
    for i in 0..n_vertices {
        let (l, text) = lines.next_content()?.ok_or_else(|| {
            parse_err(
                lines.line_no,
                format!("file ends after {i} of {n_vertices} declared vertices"),
            )
        })?;
        let v = parse_numbers::<f64>(l, &text)?;
        if v.len() != 3 {
            return Err(parse_err(
                l,
                format!("vertex {i} has {} coordinates, expected 3", v.len()),
            ));
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(parse_err(l, format!("vertex {i} has a non-finite coordinate")));
        }
        vertices.push([v[0], v[1], v[2]]);
    }

    let mut faces = Vec::with_capacity(n_faces);
    for i in 0..n_faces {
        let (l, text) = lines.next_content()?.ok_or_else(|| {
            parse_err(
                lines.line_no,
                format!("file ends after {i} of {n_faces} declared faces"),
            )
        })?;
        let mut tokens = text.split_whitespace();
        let arity: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(l, "face line must start with a vertex count"))?;
        if arity < 3 {
            return Err(parse_err(l, format!("face {i} has only {arity} vertices")));
        }
        let mut idx = Vec::with_capacity(arity);
        for _ in 0..arity {
            let t = tokens
                .next()
                .ok_or_else(|| parse_err(l, format!("face {i} lists fewer than {arity} indices")))?;
            let k: u32 = t
                .parse()
                .map_err(|_| parse_err(l, format!("cannot parse face index `{t}`")))?;
            if k as usize >= n_vertices {
                return Err(parse_err(
                    l,
                    format!("face index {k} out of range for {n_vertices} vertices"),
                ));
            }
            idx.push(k);
        }
        // trailing tokens (per-face colors) are ignored
        for j in 1..arity - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }

    if let Some((l, _)) = lines.next_content()? {
        log::debug!("ignoring trailing content from line {l}");
    }
    Ok(TriangleMesh { vertices, faces })
}

pub fn parse_off_str(text: &str) -> Result<TriangleMesh> {
    parse_off(text.as_bytes())
}

pub fn read_off(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_off(std::io::BufReader::new(file)).map_err(|e| e.in_file(path))
}
