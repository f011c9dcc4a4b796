//! Point clouds, exact nearest-neighbour matching and the shape metrics
//! built on it: Chamfer, Hausdorff and multi-scale Chamfer distance.

mod kdtree;

pub use kdtree::{dist2, KdTree, LEAF_SIZE};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::par::Exec;

/// Unordered set of 3-D points, stored in an arbitrary but fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("a point cloud needs at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    /// Reads an `n x 3` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.matrix_dims() {
            Some((_, 3)) => {}
            _ => {
                return Err(Error::Shape(format!(
                    "point cloud tensor must be n x 3, got {:?}",
                    t.shape()
                )))
            }
        }
        Self::new(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flatten().copied().collect();
        Tensor::new(vec![self.points.len(), 3], data).expect("n x 3 layout")
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    /// Points reordered by `perm` (output `k` is input `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn translated(&self, v: [f64; 3]) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]])
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NnMethod {
    Brute,
    #[default]
    KdTree,
}

/// How matched distances enter Chamfer-type sums.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistanceMode {
    /// Plain Euclidean distance.
    #[default]
    Euclidean,
    /// Squared Euclidean distance, as in many public Chamfer implementations.
    Squared,
}

/// Nearest target point for every source point.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Matching {
    pub fn mean_distance(&self) -> f64 {
        self.distances.iter().sum::<f64>() / self.distances.len() as f64
    }

    pub fn max_distance(&self) -> f64 {
        self.distances.iter().copied().fold(0.0, f64::max)
    }
}

pub fn nn_match(source: &PointCloud, target: &PointCloud, method: NnMethod) -> Result<Matching> {
    nn_match_with(source, target, method, Exec::default())
}

/// Exact nearest neighbours; ties go to the lowest target index.
pub fn nn_match_with(
    source: &PointCloud,
    target: &PointCloud,
    method: NnMethod,
    exec: Exec,
) -> Result<Matching> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud("nn_match needs nonempty clouds".into()));
    }
    let tp = target.points();
    let found: Vec<(usize, f64)> = match method {
        NnMethod::Brute => exec.map(source.points(), |q| {
            let mut best = (0, dist2(q, &tp[0]));
            for (i, p) in tp.iter().enumerate().skip(1) {
                let d = dist2(q, p);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best
        }),
        NnMethod::KdTree => {
            let tree = KdTree::build(tp);
            exec.map(source.points(), |q| tree.nearest(q).expect("nonempty tree"))
        }
    };
    let (indices, distances) = found.into_iter().map(|(i, d2)| (i, d2.sqrt())).unzip();
    Ok(Matching { indices, distances })
}

fn directed_mean(m: &Matching, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Euclidean => m.mean_distance(),
        DistanceMode::Squared => {
            m.distances.iter().map(|d| d * d).sum::<f64>() / m.distances.len() as f64
        }
    }
}

/// Symmetric Chamfer distance with unsquared Euclidean distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_with(a, b, DistanceMode::Euclidean)
}

pub fn chamfer_with(a: &PointCloud, b: &PointCloud, mode: DistanceMode) -> Result<f64> {
    let ab = nn_match(a, b, NnMethod::default())?;
    let ba = nn_match(b, a, NnMethod::default())?;
    Ok(0.5 * (directed_mean(&ab, mode) + directed_mean(&ba, mode)))
}

pub fn hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let ab = nn_match(a, b, NnMethod::default())?;
    let ba = nn_match(b, a, NnMethod::default())?;
    Ok(ab.max_distance().max(ba.max_distance()))
}

/// Greedy farthest-point subset of `k` points starting at `seed_index`.
/// Ties go to the lowest index. Output is in selection order.
pub fn fps(cloud: &PointCloud, k: usize, seed_index: usize) -> Result<PointCloud> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "fps: k = {k} outside 1..={n}"
        )));
    }
    if seed_index >= n {
        return Err(Error::InvalidArgument(format!(
            "fps: seed index {seed_index} out of range for {n} points"
        )));
    }
    let pts = cloud.points();
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed_index;
    for _ in 0..k {
        chosen.push(pts[current]);
        min_d[current] = f64::NEG_INFINITY;
        let mut next = current;
        let mut best = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(p, &pts[current]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        current = next;
    }
    PointCloud::new(chosen)
}

fn canonical(cloud: &PointCloud) -> PointCloud {
    let mut pts = cloud.points().to_vec();
    pts.sort_by(|p, q| {
        p[0].total_cmp(&q[0])
            .then(p[1].total_cmp(&q[1]))
            .then(p[2].total_cmp(&q[2]))
    });
    PointCloud { points: pts }
}

/// Point fractions used by [`mcd`].
pub const MCD_SCALES: [f64; 3] = [1.0, 0.5, 0.25];

/// Multi-scale Chamfer distance: mean Chamfer distance over farthest-point
/// subsamples of both clouds at each fraction of [`MCD_SCALES`].
/// Subsample sizes are floored and clamped to at least one point.
///
/// Each cloud is put in lexicographic order before sampling from index 0,
/// so the seed and tie-breaks do not depend on the input order.
pub fn mcd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    mcd_with_scales(a, b, &MCD_SCALES)
}

pub fn mcd_with_scales(a: &PointCloud, b: &PointCloud, scales: &[f64]) -> Result<f64> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("mcd needs at least one scale".into()));
    }
    let size = |n: usize, s: f64| ((n as f64 * s).floor() as usize).clamp(1, n);
    let (a, b) = (&canonical(a), &canonical(b));
    let mut total = 0.0;
    for &s in scales {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::InvalidArgument(format!("mcd scale {s} outside (0, 1]")));
        }
        let sa = fps(a, size(a.len(), s), 0)?;
        let sb = fps(b, size(b.len(), s), 0)?;
        total += chamfer(&sa, &sb)?;
    }
    Ok(total / scales.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(p: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(p.to_vec()).unwrap()
    }

    fn pair() -> (PointCloud, PointCloud) {
        (
            cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
            cloud(&[[0.0, 0.0, 0.0]]),
        )
    }

    #[test]
    fn hand_computed_matching() {
        let (a, b) = pair();
        for m in [NnMethod::Brute, NnMethod::KdTree] {
            let r = nn_match(&a, &b, m).unwrap();
            assert_eq!(r.indices, vec![0, 0]);
            assert_eq!(r.distances, vec![0.0, 1.0]);
        }
        let s = nn_match(&a, &a, NnMethod::KdTree).unwrap();
        assert!(s.distances.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn hand_computed_metrics() {
        let (a, b) = pair();
        assert_eq!(chamfer(&a, &b).unwrap(), 0.25);
        assert_eq!(hausdorff(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff(&b, &b).unwrap(), 0.0);
        // Squared mode only changes non-unit distances.
        let c = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(chamfer_with(&c, &b, DistanceMode::Squared).unwrap(), 1.0);
        assert_eq!(chamfer(&c, &b).unwrap(), 0.5);
    }

    #[test]
    fn mcd_examples() {
        let (a, b) = pair();
        assert_eq!(mcd(&a, &a).unwrap(), 0.0);
        assert_eq!(mcd_with_scales(&a, &b, &[1.0]).unwrap(), chamfer(&a, &b).unwrap());
        assert_eq!(mcd_with_scales(&a, &b, &[1.0, 0.5]).unwrap(), 0.125);
        assert!(mcd_with_scales(&a, &b, &[]).is_err());
    }

    #[test]
    fn fps_examples() {
        let c = cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        assert_eq!(
            fps(&c, 2, 0).unwrap().points(),
            &[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]
        );
        assert_eq!(fps(&c, 1, 2).unwrap().points(), &[[5.0, 0.0, 0.0]]);
        let all = fps(&c, 3, 0).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all.points()[2], [5.0, 0.0, 0.0]);
        assert!(fps(&c, 0, 0).is_err());
        assert!(fps(&c, 4, 0).is_err());
        assert!(fps(&c, 1, 3).is_err());
    }

    #[test]
    fn empty_and_non_finite_clouds_rejected() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud(_))));
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let (a, _) = pair();
        assert_eq!(PointCloud::from_tensor(&a.to_tensor()).unwrap(), a);
        assert!(PointCloud::from_tensor(&Tensor::vector(vec![1.0, 2.0])).is_err());
    }
}
