use super::ShapeError;

pub type Vec3 = [f64; 3];

/// Indexed triangle soup.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, ShapeError> {
        if vertices.is_empty() || faces.is_empty() {
            return Err(ShapeError::EmptyMesh);
        }
        if let Some(v) = vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(ShapeError::NonFinite(v));
        }
        for (f, tri) in faces.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i >= vertices.len()) {
                return Err(ShapeError::FaceIndexOutOfRange { face: f, index, vertices: vertices.len() });
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangles(&self) -> impl Iterator<Item = [Vec3; 3]> + '_ {
        (0..self.faces.len()).map(|f| self.triangle(f))
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles().map(|t| triangle_area(&t)).sum()
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self { vertices: self.vertices.iter().map(|&v| f(v)).collect(), faces: self.faces.clone() }
    }

    /// Concatenates meshes, re-indexing faces.
    pub fn merge<'a>(parts: impl IntoIterator<Item = &'a TriangleMesh>) -> Result<Self, ShapeError> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for m in parts {
            let base = vertices.len();
            vertices.extend_from_slice(&m.vertices);
            faces.extend(m.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        }
        Self::new(vertices, faces)
    }

    /// Centers the bounding box on the origin and scales so the farthest
    /// vertex has norm exactly 1.
    pub fn normalize(&self) -> Result<Self, ShapeError> {
        let (lo, hi) = self.bounds();
        let center = [(lo[0] + hi[0]) * 0.5, (lo[1] + hi[1]) * 0.5, (lo[2] + hi[2]) * 0.5];
        let centered: Vec<Vec3> =
            self.vertices.iter().map(|v| [v[0] - center[0], v[1] - center[1], v[2] - center[2]]).collect();
        let radius = centered.iter().map(|v| norm(*v)).fold(0.0, f64::max);
        if !radius.is_finite() || radius <= 0.0 {
            return Err(ShapeError::DegenerateMesh);
        }
        let vertices = centered.into_iter().map(|v| [v[0] / radius, v[1] / radius, v[2] / radius]).collect();
        Ok(Self { vertices, faces: self.faces.clone() })
    }
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn triangle_area(t: &[Vec3; 3]) -> f64 {
    0.5 * norm(cross(sub(t[1], t[0]), sub(t[2], t[0])))
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { inner: text.lines().enumerate() }
    }

    /// Next line with content, comments stripped, with its 1-based number.
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                return Some((i + 1, line));
            }
        }
        None
    }
}

fn number<T: std::str::FromStr>(line: usize, token: &str) -> Result<T, ShapeError> {
    token.parse().map_err(|_| ShapeError::InvalidNumber { line, token: token.to_string() })
}

fn coordinate(line: usize, token: &str) -> Result<f64, ShapeError> {
    let v: f64 = number(line, token)?;
    if !v.is_finite() {
        return Err(ShapeError::InvalidNumber { line, token: token.to_string() });
    }
    Ok(v)
}

fn fan(poly: &[usize], out: &mut Vec<[usize; 3]>) {
    for k in 1..poly.len() - 1 {
        out.push([poly[0], poly[k], poly[k + 1]]);
    }
}

/// Parses OFF text. Polygons are fan-triangulated.
///
/// Accepts the ModelNet defect where the counts are glued onto the header
/// (`OFF490 976 0`).
pub fn parse_off(bytes: &[u8]) -> Result<TriangleMesh, ShapeError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ShapeError::NotText)?;
    let mut lines = Lines::new(text);
    let (_, header) = lines.next_content().ok_or(ShapeError::MissingHeader)?;
    let rest = header.strip_prefix("OFF").ok_or(ShapeError::MissingHeader)?;
    let (count_line, counts) = if rest.trim().is_empty() {
        lines.next_content().ok_or(ShapeError::BadCounts("missing counts line".into()))?
    } else if rest.starts_with(|c: char| c.is_ascii_digit() || c.is_whitespace()) {
        (1, rest.trim())
    } else {
        return Err(ShapeError::MissingHeader);
    };
    let tokens: Vec<&str> = counts.split_whitespace().collect();
    if tokens.len() < 2 || tokens.len() > 3 {
        return Err(ShapeError::BadCounts(format!("line {count_line}: expected 'V F [E]', got '{counts}'")));
    }
    let nv: usize = number(count_line, tokens[0])?;
    let nf: usize = number(count_line, tokens[1])?;
    if nv == 0 || nf == 0 {
        return Err(ShapeError::EmptyMesh);
    }

    let mut vertices = Vec::with_capacity(nv.min(1 << 20));
    for i in 0..nv {
        let (ln, line) =
            lines.next_content().ok_or(ShapeError::Truncated { what: "vertex", expected: nv, found: i })?;
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() < 3 {
            return Err(ShapeError::InvalidNumber { line: ln, token: line.to_string() });
        }
        vertices.push([coordinate(ln, t[0])?, coordinate(ln, t[1])?, coordinate(ln, t[2])?]);
    }

    let mut faces = Vec::with_capacity(nf.min(1 << 20));
    for f in 0..nf {
        let (ln, line) = lines.next_content().ok_or(ShapeError::Truncated { what: "face", expected: nf, found: f })?;
        let t: Vec<&str> = line.split_whitespace().collect();
        let n: usize = number(ln, t[0])?;
        if n < 3 {
            return Err(ShapeError::DegenerateFace { line: ln });
        }
        if t.len() < n + 1 {
            return Err(ShapeError::Truncated { what: "face index", expected: n, found: t.len() - 1 });
        }
        let poly: Vec<usize> = t[1..=n].iter().map(|s| number(ln, s)).collect::<Result<_, _>>()?;
        if let Some(&index) = poly.iter().find(|&&i| i >= nv) {
            return Err(ShapeError::FaceIndexOutOfRange { face: f, index, vertices: nv });
        }
        fan(&poly, &mut faces);
    }

    if let Some((line, _)) = lines.next_content() {
        return Err(ShapeError::TrailingData { line });
    }
    TriangleMesh::new(vertices, faces)
}

/// Parses the geometry subset of Wavefront OBJ (`v` and `f` records).
pub fn parse_obj(bytes: &[u8]) -> Result<TriangleMesh, ShapeError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ShapeError::NotText)?;
    let mut lines = Lines::new(text);
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut polys: Vec<(usize, Vec<i64>)> = Vec::new();
    while let Some((ln, line)) = lines.next_content() {
        let mut t = line.split_whitespace();
        match t.next() {
            Some("v") => {
                let c: Vec<&str> = t.take(3).collect();
                if c.len() < 3 {
                    return Err(ShapeError::InvalidNumber { line: ln, token: line.to_string() });
                }
                vertices.push([coordinate(ln, c[0])?, coordinate(ln, c[1])?, coordinate(ln, c[2])?]);
            }
            Some("f") => {
                let idx: Vec<i64> =
                    t.map(|tok| number(ln, tok.split('/').next().unwrap_or(""))).collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(ShapeError::DegenerateFace { line: ln });
                }
                polys.push((vertices.len(), idx));
            }
            _ => {}
        }
    }
    if vertices.is_empty() || polys.is_empty() {
        return Err(ShapeError::EmptyMesh);
    }
    let nv = vertices.len();
    let mut faces = Vec::new();
    for (f, (seen, idx)) in polys.iter().enumerate() {
        let resolved: Vec<usize> = idx
            .iter()
            .map(|&i| {
                let r = if i > 0 { i - 1 } else { *seen as i64 + i };
                if r < 0 || r as usize >= nv || i == 0 {
                    Err(ShapeError::FaceIndexOutOfRange { face: f, index: i.unsigned_abs() as usize, vertices: nv })
                } else {
                    Ok(r as usize)
                }
            })
            .collect::<Result<_, _>>()?;
        fan(&resolved, &mut faces);
    }
    TriangleMesh::new(vertices, faces)
}
