//! Scattered-data interpolation over anchor `(q2, q3)` sites: nearest,
//! piecewise linear and Clough–Tocher cubic on a Delaunay triangulation.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use spade::{DelaunayTriangulation, HasPosition, Point2, Triangulation as _};

use crate::error::{Error, Result};

const INSIDE_TOL: f64 = 1e-10;
const LINE_TOL: f64 = 1e-9;
const QUAD_COND: f64 = 1e-2;

#[derive(Debug, Clone, Copy)]
struct Site {
    pos: Point2<f64>,
    index: usize,
}

impl HasPosition for Site {
    type Scalar = f64;
    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

#[derive(Debug, Clone)]
struct Tri {
    v: [usize; 3],
    origin: Vector2<f64>,
    inv: Matrix2<f64>,
}

impl Tri {
    fn barycentric(&self, x: &Vector2<f64>) -> [f64; 3] {
        let l = self.inv * (x - self.origin);
        [1.0 - l[0] - l[1], l[0], l[1]]
    }
}

/// Sites along a line when no triangle exists.
#[derive(Debug, Clone)]
struct Line {
    origin: Vector2<f64>,
    dir: Vector2<f64>,
    /// `(t, site)` sorted by `t`.
    stations: Vec<(f64, usize)>,
}

/// Delaunay triangulation of the anchor sites. Duplicate sites collapse
/// onto the lowest anchor index.
#[derive(Debug, Clone)]
pub struct Triangulation {
    points: Vec<Vector2<f64>>,
    tris: Vec<Tri>,
    line: Option<Line>,
    /// Neighbor lists over unique sites, for gradient estimation.
    neighbors: Vec<Vec<usize>>,
    unique: Vec<usize>,
}

impl Triangulation {
    pub fn new(points: &[[f64; 2]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyModel);
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData("non-finite anchor".into()));
        }
        let pts: Vec<Vector2<f64>> = points.iter().map(|p| Vector2::new(p[0], p[1])).collect();
        let mut unique: Vec<usize> = Vec::new();
        for (i, p) in pts.iter().enumerate() {
            if !unique.iter().any(|&u| pts[u] == *p) {
                unique.push(i);
            }
        }
        let mut dt: DelaunayTriangulation<Site> = DelaunayTriangulation::new();
        for &u in &unique {
            dt.insert(Site {
                pos: Point2::new(pts[u].x, pts[u].y),
                index: u,
            })
            .map_err(|e| Error::DegenerateGeometry(format!("triangulation: {e:?}")))?;
        }
        let mut tris = Vec::new();
        for f in dt.inner_faces() {
            let v = f.vertices().map(|h| h.data().index);
            let origin = pts[v[0]];
            let m = Matrix2::from_columns(&[pts[v[1]] - origin, pts[v[2]] - origin]);
            if let Some(inv) = m.try_inverse() {
                tris.push(Tri { v, origin, inv });
            }
        }
        let mut neighbors = vec![Vec::new(); pts.len()];
        for t in &tris {
            for a in 0..3 {
                for b in 0..3 {
                    if a != b && !neighbors[t.v[a]].contains(&t.v[b]) {
                        neighbors[t.v[a]].push(t.v[b]);
                    }
                }
            }
        }
        let line = if tris.is_empty() && unique.len() >= 2 {
            let origin = pts[unique[0]];
            let far = unique
                .iter()
                .copied()
                .max_by(|&a, &b| (pts[a] - origin).norm().total_cmp(&(pts[b] - origin).norm()))
                .expect("nonempty");
            let dir = (pts[far] - origin).normalize();
            let mut stations: Vec<(f64, usize)> = unique.iter().map(|&u| ((pts[u] - origin).dot(&dir), u)).collect();
            stations.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in stations.windows(2) {
                neighbors[w[0].1].push(w[1].1);
                neighbors[w[1].1].push(w[0].1);
            }
            Some(Line { origin, dir, stations })
        } else {
            None
        };
        Ok(Self {
            points: pts,
            tris,
            line,
            neighbors,
            unique,
        })
    }

    pub fn num_triangles(&self) -> usize {
        self.tris.len()
    }

    /// Undirected neighbor pairs `(i, j)`, `i < j`, over all anchor indices.
    /// Delaunay (or chain) edges join unique sites; each duplicate joins the
    /// site it collapsed onto.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &i in &self.unique {
            for &j in &self.neighbors[i] {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            if !self.unique.contains(&i) {
                let j = self.unique.iter().copied().find(|&j| self.points[j] == *p).expect("duplicate of a unique site");
                out.push((j.min(i), j.max(i)));
            }
        }
        out.sort_unstable();
        out
    }

    /// Anchor closest to `x`, lowest index on ties.
    pub fn nearest(&self, x: [f64; 2]) -> usize {
        let x = Vector2::new(x[0], x[1]);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (p - x).norm_squared();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    fn locate(&self, x: &Vector2<f64>) -> Option<(usize, [f64; 3])> {
        let mut best: Option<(usize, [f64; 3])> = None;
        let mut best_min = -INSIDE_TOL;
        for (k, t) in self.tris.iter().enumerate() {
            let l = t.barycentric(x);
            let m = l[0].min(l[1]).min(l[2]);
            if m >= best_min {
                best_min = m;
                best = Some((k, l));
                if m >= 0.0 {
                    break;
                }
            }
        }
        best
    }

    /// Convex weights over at most three sites, or `None` outside the hull.
    pub fn linear_weights(&self, x: [f64; 2]) -> Option<Vec<(usize, f64)>> {
        let xv = Vector2::new(x[0], x[1]);
        if let Some(line) = &self.line {
            let d = xv - line.origin;
            let t = d.dot(&line.dir);
            let off = (d - line.dir * t).norm();
            let span = line.stations.last().unwrap().0 - line.stations[0].0;
            if off > LINE_TOL * span.max(1.0) {
                return None;
            }
            for w in line.stations.windows(2) {
                let (t0, a) = w[0];
                let (t1, b) = w[1];
                if t >= t0 - LINE_TOL && t <= t1 + LINE_TOL {
                    let s = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                    return Some(vec![(a, 1.0 - s), (b, s)]);
                }
            }
            return None;
        }
        let (k, l) = self.locate(&xv)?;
        let v = self.tris[k].v;
        Some((0..3).map(|i| (v[i], l[i])).collect())
    }
}

/// Values attached to each anchor site, with the interpolation scheme.
#[derive(Debug, Clone)]
pub struct ScatteredField {
    tri: Triangulation,
    /// `m × L`, one column per anchor.
    values: DMatrix<f64>,
    gradients: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl ScatteredField {
    pub fn new(points: &[[f64; 2]], values: DMatrix<f64>, cubic: bool) -> Result<Self> {
        if values.ncols() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: values.ncols(),
            });
        }
        let tri = Triangulation::new(points)?;
        let gradients = if cubic { Some(estimate_gradients(&tri, &values)) } else { None };
        Ok(Self { tri, values, gradients })
    }

    pub fn triangulation(&self) -> &Triangulation {
        &self.tri
    }

    pub fn nearest(&self, x: [f64; 2]) -> DVector<f64> {
        self.values.column(self.tri.nearest(x)).into_owned()
    }

    pub fn linear(&self, x: [f64; 2]) -> DVector<f64> {
        match self.tri.linear_weights(x) {
            Some(w) => {
                let mut out = DVector::zeros(self.values.nrows());
                for (i, wi) in w {
                    out += self.values.column(i) * wi;
                }
                out
            }
            None => self.nearest(x),
        }
    }

    pub fn cubic(&self, x: [f64; 2]) -> DVector<f64> {
        let Some((gx, gy)) = &self.gradients else {
            return self.linear(x);
        };
        if self.tri.line.is_some() {
            return self.linear(x);
        }
        let xv = Vector2::new(x[0], x[1]);
        let Some((k, lam)) = self.tri.locate(&xv) else {
            return self.nearest(x);
        };
        let v = self.tri.tris[k].v;
        let p = v.map(|i| self.tri.points[i]);
        let f = v.map(|i| self.values.column(i).into_owned());
        let g = v.map(|i| (gx.column(i).into_owned(), gy.column(i).into_owned()));
        clough_tocher(&p, &f, &g, lam)
    }
}

/// Least-squares gradient at each site from a local quadratic fit, or a
/// linear one when the neighbors are too few or the quadratic is poorly
/// conditioned.
fn estimate_gradients(tri: &Triangulation, values: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = values.nrows();
    let l = values.ncols();
    let mut gx = DMatrix::zeros(m, l);
    let mut gy = DMatrix::zeros(m, l);
    for &i in &tri.unique {
        let mut nb = tri.neighbors[i].clone();
        if nb.len() < 5 {
            for &j in &tri.neighbors[i] {
                for &k in &tri.neighbors[j] {
                    if k != i && !nb.contains(&k) {
                        nb.push(k);
                    }
                }
            }
        }
        if nb.is_empty() {
            continue;
        }
        let cols = if nb.len() >= 5 { 5 } else { 2 };
        let build = |cols: usize| {
            DMatrix::from_fn(nb.len(), cols, |r, c| {
                let d = tri.points[nb[r]] - tri.points[i];
                [d.x, d.y, 0.5 * d.x * d.x, d.x * d.y, 0.5 * d.y * d.y][c]
            })
        };
        let rhs = DMatrix::from_fn(nb.len(), m, |r, c| values[(c, nb[r])] - values[(c, i)]);
        let mut design = build(cols);
        if cols == 5 && !well_conditioned(&design) {
            design = build(2);
        }
        let sol = super::coeff::pinv(&design).0 * rhs;
        gx.column_mut(i).copy_from(&sol.row(0).transpose());
        gy.column_mut(i).copy_from(&sol.row(1).transpose());
    }
    for (i, u) in tri.points.iter().enumerate() {
        if !tri.unique.contains(&i) {
            let j = tri.unique.iter().copied().find(|&j| tri.points[j] == *u).expect("duplicate of a unique site");
            let (cx, cy) = (gx.column(j).into_owned(), gy.column(j).into_owned());
            gx.column_mut(i).copy_from(&cx);
            gy.column_mut(i).copy_from(&cy);
        }
    }
    (gx, gy)
}

/// Column-scaled condition test; a boundary site whose neighbors span only
/// two rows cannot separate slope from curvature.
fn well_conditioned(design: &DMatrix<f64>) -> bool {
    let mut scaled = design.clone();
    for mut c in scaled.column_iter_mut() {
        let n = c.norm();
        if n == 0.0 {
            return false;
        }
        c /= n;
    }
    let s = scaled.singular_values();
    s.min() > QUAD_COND * s.max()
}

type Grad = (DVector<f64>, DVector<f64>);

fn directional(g: &Grad, d: &Vector2<f64>) -> DVector<f64> {
    &g.0 * d.x + &g.1 * d.y
}

/// Clough–Tocher element with the centroid split. `lam` are barycentric
/// coordinates of the query in the macro triangle `p`.
pub(crate) fn clough_tocher(p: &[Vector2<f64>; 3], f: &[DVector<f64>; 3], g: &[Grad; 3], lam: [f64; 3]) -> DVector<f64> {
    let c = (p[0] + p[1] + p[2]) / 3.0;
    // points one third toward the centroid
    let r: Vec<DVector<f64>> = (0..3).map(|i| &f[i] + directional(&g[i], &(c - p[i])) / 3.0).collect();
    // edge (i, i+1) interior control point, with linear cross-boundary derivative
    let e: Vec<DVector<f64>> = (0..3)
        .map(|i| {
            let j = (i + 1) % 3;
            let t = p[j] - p[i];
            let alpha = (c - p[i]).dot(&t) / t.norm_squared();
            let b210 = &f[i] + directional(&g[i], &t) / 3.0;
            let b120 = &f[j] - directional(&g[j], &t) / 3.0;
            let t0 = &b210 - &f[i];
            let t1 = &b120 - &b210;
            let t2 = &f[j] - &b120;
            let d0 = &r[i] - &f[i];
            let d2 = &r[j] - &b120;
            let n0 = &d0 - &t0 * alpha;
            let n2 = &d2 - &t2 * alpha;
            &b210 + &t1 * alpha + (n0 + n2) * 0.5
        })
        .collect();
    // points two thirds toward the centroid on each interior edge
    let a: Vec<DVector<f64>> = (0..3).map(|i| (&r[i] + &e[i] + &e[(i + 2) % 3]) / 3.0).collect();
    let center = (&a[0] + &a[1] + &a[2]) / 3.0;

    let k = (0..3).min_by(|&x, &y| lam[x].total_cmp(&lam[y])).expect("three");
    let i = (k + 1) % 3;
    let j = (k + 2) % 3;
    let u = lam[i] - lam[k];
    let v = lam[j] - lam[k];
    let w = 3.0 * lam[k];
    let b210 = &f[i] + directional(&g[i], &(p[j] - p[i])) / 3.0;
    let b120 = &f[j] + directional(&g[j], &(p[i] - p[j])) / 3.0;
    &f[i] * u.powi(3)
        + &f[j] * v.powi(3)
        + &center * w.powi(3)
        + b210 * (3.0 * u * u * v)
        + b120 * (3.0 * u * v * v)
        + &r[i] * (3.0 * u * u * w)
        + &r[j] * (3.0 * v * v * w)
        + &a[i] * (3.0 * u * w * w)
        + &a[j] * (3.0 * v * w * w)
        + &e[i] * (6.0 * u * v * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
    }

    fn field(points: &[[f64; 2]], f: impl Fn(f64, f64) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(1, points.len(), |_, c| f(points[c][0], points[c][1]))
    }

    fn quad(x: f64, y: f64) -> f64 {
        1.0 + 2.0 * x - y + 0.5 * x * x - 1.5 * x * y + 0.25 * y * y
    }

    #[test]
    fn anchors_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 40);
        let vals = DMatrix::from_fn(3, 40, |_, _| rng.random_range(-1.0..1.0));
        let f = ScatteredField::new(&pts, vals.clone(), true).unwrap();
        for (k, p) in pts.iter().enumerate() {
            assert_eq!(f.nearest(*p), vals.column(k));
            assert!((f.linear(*p) - vals.column(k)).amax() < 1e-9);
            assert!((f.cubic(*p) - vals.column(k)).amax() < 1e-9);
        }
    }

    #[test]
    fn linear_is_exact_for_affine_and_cubic_for_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = random_points(&mut rng, 60);
        pts.extend([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]);
        let lin = ScatteredField::new(&pts, field(&pts, |x, y| 3.0 * x - 2.0 * y + 1.0), false).unwrap();
        let cub = ScatteredField::new(&pts, field(&pts, quad), true).unwrap();
        for _ in 0..200 {
            let x = [rng.random_range(-0.99..0.99), rng.random_range(-0.99..0.99)];
            assert!((lin.linear(x)[0] - (3.0 * x[0] - 2.0 * x[1] + 1.0)).abs() < 1e-10);
            assert!((cub.cubic(x)[0] - quad(x[0], x[1])).abs() < 1e-8, "{x:?}");
        }
    }

    #[test]
    fn outside_hull_falls_back_to_nearest() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let vals = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let f = ScatteredField::new(&pts, vals, true).unwrap();
        assert_eq!(f.linear([2.0, 0.1])[0], 2.0);
        assert_eq!(f.cubic([-1.0, 2.0])[0], 3.0);
    }

    #[test]
    fn collinear_and_single_sites() {
        let pts = [[0.0, 0.5], [1.0, 0.5]];
        let vals = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, -2.0, 4.0]);
        let f = ScatteredField::new(&pts, vals, true).unwrap();
        let mid = f.linear([0.5, 0.5]);
        assert!((mid[0] - 2.0).abs() < 1e-12 && (mid[1] - 1.0).abs() < 1e-12);
        assert_eq!(f.linear([0.5, 0.9])[0], 1.0);
        let single = ScatteredField::new(&[[0.2, 0.2]], DMatrix::from_element(1, 1, 7.0), true).unwrap();
        assert_eq!(single.cubic([5.0, 5.0])[0], 7.0);
    }

    #[test]
    fn duplicates_and_ties_use_lowest_index() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        let vals = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 9.0, 3.0]);
        let f = ScatteredField::new(&pts, vals, false).unwrap();
        assert_eq!(f.nearest([0.0, 0.0])[0], 1.0);
        assert_eq!(f.nearest([0.5, 0.0])[0], 1.0);
        assert!((f.linear([0.0, 0.0])[0] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cubic_is_c1_across_edges(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, 25);
            let vals = field(&pts, |x, y| (2.0 * x).sin() * (1.5 * y).cos());
            let f = ScatteredField::new(&pts, vals, true).unwrap();
            // gradient continuity at random points on random interior segments
            let h = 1e-5;
            for _ in 0..20 {
                let x = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let pt = |s: f64| [x[0] + s * d[0], x[1] + s * d[1]];
                if f.triangulation().linear_weights(pt(-2.0 * h)).is_none() || f.triangulation().linear_weights(pt(2.0 * h)).is_none() {
                    continue;
                }
                let at = |s: f64| f.cubic(pt(s))[0];
                // second-order one-sided differences
                let left = (3.0 * at(0.0) - 4.0 * at(-h) + at(-2.0 * h)) / (2.0 * h);
                let right = (-3.0 * at(0.0) + 4.0 * at(h) - at(2.0 * h)) / (2.0 * h);
                prop_assert!((left - right).abs() < 1e-4 * left.abs().max(1.0), "{} vs {}", left, right);
            }
        }
    }
}
