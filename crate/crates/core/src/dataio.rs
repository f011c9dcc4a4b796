//! Synthetic shapes, ASCII xyz files and normalisation.
//!
//! Generated clouds are built from antipodal pairs `(p, -p)` of surface
//! samples. Every family is centrally symmetric, so the pairs are valid
//! surface samples and the centroid of an even-sized cloud is the shape
//! centre up to rounding.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Sphere, Family::Cube, Family::Cylinder, Family::Torus];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sphere => "sphere",
            Family::Cube => "cube",
            Family::Cylinder => "cylinder",
            Family::Torus => "torus",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape family `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    /// Family of each cloud, when known.
    pub labels: Vec<Option<Family>>,
    /// Position of each cloud in the dataset it was split from.
    pub ids: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Every tenth cloud (ids 9, 19, ...) goes to the evaluation split; a
    /// dataset with fewer than ten clouds gives its last cloud to it.
    pub fn split_eval(self) -> (Dataset, Dataset) {
        let n = self.clouds.len();
        let is_eval = |i: usize| (i + 1).is_multiple_of(10) || ((2..10).contains(&n) && i == n - 1);
        let mut train = Dataset {
            clouds: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
            split: Split::Train,
        };
        let mut eval = Dataset {
            split: Split::Eval,
            ..train.clone()
        };
        for (k, ((c, l), id)) in self.clouds.into_iter().zip(self.labels).zip(self.ids).enumerate() {
            let dst = if is_eval(k) { &mut eval } else { &mut train };
            dst.clouds.push(c);
            dst.labels.push(l);
            dst.ids.push(id);
        }
        (train, eval)
    }
}

/// Uniform surface samples of the given families with Gaussian jitter,
/// normalised to zero centroid and unit max radius. Families are assigned
/// round-robin; cloud `i` draws from its own random stream.
pub fn gen_shapes(
    families: &[Family],
    count: usize,
    points: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if families.is_empty() {
        return Err(Error::InvalidArgument("no shape families given".into()));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("shape count must be at least 1".into()));
    }
    if points < 8 {
        return Err(Error::InvalidArgument(format!(
            "clouds need at least 8 points, got {points}"
        )));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid noise level {noise_std}")));
    }
    let mut clouds = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let family = families[i % families.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let raw = sample_shape(family, points, noise_std, &mut rng)?;
        clouds.push(normalize(&raw).cloud);
        labels.push(Some(family));
    }
    Ok(Dataset {
        clouds,
        labels,
        ids: (0..count).collect(),
        split: Split::Train,
    })
}

fn sample_shape(family: Family, n: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let sampler = SurfaceSampler::new(family, rng);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let jittered = |rng: &mut ChaCha8Rng| {
        let p = sampler.sample(rng);
        if noise_std > 0.0 {
            [p[0] + noise.sample(rng), p[1] + noise.sample(rng), p[2] + noise.sample(rng)]
        } else {
            p
        }
    };
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let p = jittered(rng);
        pts.push(p);
        pts.push([-p[0], -p[1], -p[2]]);
    }
    if n % 2 == 1 {
        pts.push(jittered(rng));
    }
    pts.shuffle(rng);
    PointCloud::new(pts)
}

/// Per-instance shape parameters. Sphere and cube are fixed; cylinders get
/// a random half-height, tori a random tube radius.
struct SurfaceSampler {
    family: Family,
    half_height: f64,
    tube: f64,
}

impl SurfaceSampler {
    fn new(family: Family, rng: &mut ChaCha8Rng) -> Self {
        let (half_height, tube) = match family {
            Family::Cylinder => (rng.random_range(0.5..1.5), 0.0),
            Family::Torus => (0.0, rng.random_range(0.25..0.45)),
            _ => (0.0, 0.0),
        };
        Self {
            family,
            half_height,
            tube,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        use std::f64::consts::TAU;
        match self.family {
            Family::Sphere => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if r > 1e-9 {
                    break v.map(|x| x / r);
                }
            },
            Family::Cube => {
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let mut p = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0];
                p.rotate_right((axis + 1) % 3);
                p[axis] = if face % 2 == 0 { 1.0 } else { -1.0 };
                p
            }
            Family::Cylinder => {
                let h = self.half_height;
                let theta = rng.random_range(0.0..TAU);
                // Lateral area 4 pi h against 2 pi for both caps.
                if rng.random_bool(2.0 * h / (2.0 * h + 1.0)) {
                    [theta.cos(), theta.sin(), rng.random_range(-h..=h)]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    let z = if rng.random_bool(0.5) { h } else { -h };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
            Family::Torus => {
                let (big, small) = (1.0, self.tube);
                let v = loop {
                    let v = rng.random_range(0.0..TAU);
                    if rng.random::<f64>() * (big + small) <= big + small * f64::cos(v) {
                        break v;
                    }
                };
                let u = rng.random_range(0.0..TAU);
                let ring = big + small * v.cos();
                [ring * u.cos(), ring * u.sin(), small * v.sin()]
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Normalized {
    pub cloud: PointCloud,
    pub centroid: [f64; 3],
    pub scale: f64,
    /// All points coincide; the scale was set to 1.
    pub degenerate: bool,
}

impl Normalized {
    /// Maps a normalised cloud back to the original frame.
    pub fn restore(&self, cloud: &PointCloud) -> PointCloud {
        let pts = cloud
            .points()
            .iter()
            .map(|p| {
                [
                    p[0] * self.scale + self.centroid[0],
                    p[1] * self.scale + self.centroid[1],
                    p[2] * self.scale + self.centroid[2],
                ]
            })
            .collect();
        PointCloud::new(pts).expect("restored cloud is nonempty and finite")
    }
}

/// Centre on the centroid and scale the farthest point to radius 1.
pub fn normalize(cloud: &PointCloud) -> Normalized {
    let c = cloud.centroid();
    let centred: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let radius = centred
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let degenerate = radius == 0.0;
    let scale = if degenerate { 1.0 } else { radius };
    let pts = centred.into_iter().map(|p| p.map(|v| v / scale)).collect();
    Normalized {
        cloud: PointCloud::new(pts).expect("normalised cloud is nonempty and finite"),
        centroid: c,
        scale,
        degenerate,
    }
}

/// Three whitespace-separated floats per line, 17 significant digits.
pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in cloud.points() {
        writeln!(w, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an xyz file; blank lines are ignored.
pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(
                line_no,
                format!("expected 3 coordinates, found {}", fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (a, f) in fields.iter().enumerate() {
            p[a] = f
                .parse::<f64>()
                .map_err(|e| parse_err(line_no, format!("`{f}`: {e}")))?;
            if !p[a].is_finite() {
                return Err(parse_err(line_no, format!("non-finite coordinate `{f}`")));
            }
        }
        pts.push(p);
    }
    if pts.is_empty() {
        return Err(parse_err(0, "file contains no points".into()));
    }
    PointCloud::new(pts)
}

/// Writes one cloud per file (`<family>_<index>.xyz`) plus `manifest.txt`
/// listing the file names. Returns the manifest path.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (k, cloud) in data.clouds.iter().enumerate() {
        let stem = data.labels[k].map(Family::name).unwrap_or("cloud");
        let name = format!("{stem}_{:04}.xyz", data.ids[k]);
        save_xyz(cloud, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every file listed in a manifest (paths relative to the manifest's
/// directory) and normalises it. Families are read from file-name prefixes.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut data = Dataset {
        clouds: Vec::new(),
        labels: Vec::new(),
        ids: Vec::new(),
        split: Split::Train,
    };
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let path = base.join(line);
        data.clouds.push(normalize(&load_xyz(&path)?).cloud);
        data.labels.push(family_from_path(&path));
        data.ids.push(data.ids.len());
    }
    if data.clouds.is_empty() {
        return Err(Error::Parse {
            path: manifest.to_path_buf(),
            line: 0,
            msg: "manifest lists no files".into(),
        });
    }
    Ok(data)
}

fn family_from_path(path: &Path) -> Option<Family> {
    let stem = path.file_stem()?.to_str()?;
    let prefix = stem.rsplit_once('_').map_or(stem, |(p, _)| p);
    prefix.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(p: &[f64; 3]) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    #[test]
    fn noiseless_spheres_lie_on_unit_sphere() {
        let d = gen_shapes(&[Family::Sphere], 3, 64, 0.0, 11).unwrap();
        for c in &d.clouds {
            let ctr = c.centroid();
            assert!(ctr.iter().all(|v| v.abs() < 1e-12));
            for p in c.points() {
                assert!((norm(p) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_cubes_lie_on_faces() {
        let d = gen_shapes(&[Family::Cube], 2, 200, 0.0, 5).unwrap();
        for c in &d.clouds {
            let half = c.points().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            for p in c.points() {
                let face = p.iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!((face - half).abs() < 1e-9, "{p:?} not on a face of half-extent {half}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_normalised() {
        let a = gen_shapes(&Family::ALL, 8, 33, 0.02, 3).unwrap();
        let b = gen_shapes(&Family::ALL, 8, 33, 0.02, 3).unwrap();
        assert_eq!(a.clouds, b.clouds);
        let c = gen_shapes(&Family::ALL, 8, 33, 0.02, 4).unwrap();
        assert_ne!(a.clouds, c.clouds);
        for cl in &a.clouds {
            assert_eq!(cl.len(), 33);
            let r = cl.points().iter().map(norm).fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.labels[5], Some(Family::Cube));
    }

    #[test]
    fn generation_rejects_bad_arguments() {
        assert!(gen_shapes(&[], 1, 16, 0.0, 0).is_err());
        assert!(gen_shapes(&Family::ALL, 0, 16, 0.0, 0).is_err());
        assert!(gen_shapes(&Family::ALL, 1, 7, 0.0, 0).is_err());
        assert!(gen_shapes(&Family::ALL, 1, 16, -1.0, 0).is_err());
    }

    #[test]
    fn split_is_disjoint() {
        let d = gen_shapes(&Family::ALL, 40, 16, 0.0, 0).unwrap();
        let (tr, ev) = d.split_eval();
        assert_eq!(ev.len(), 4);
        assert_eq!(tr.len(), 36);
        assert!(ev.ids.iter().all(|i| !tr.ids.contains(i)));
    }

    #[test]
    fn normalize_examples() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0], [3.0, 2.0, 3.0], [2.0, 4.0, 3.0]]).unwrap();
        let n = normalize(&c);
        assert!(n.cloud.centroid().iter().all(|v| v.abs() < 1e-12));
        let moved = PointCloud::new(c.points().iter().map(|p| p.map(|v| 5.0 * v - 7.0)).collect()).unwrap();
        let m = normalize(&moved);
        for (p, q) in n.cloud.points().iter().zip(m.cloud.points()) {
            for a in 0..3 {
                assert!((p[a] - q[a]).abs() < 1e-12);
            }
        }
        let twice = normalize(&n.cloud);
        for (p, q) in n.cloud.points().iter().zip(twice.cloud.points()) {
            for a in 0..3 {
                assert!((p[a] - q[a]).abs() < 1e-12);
            }
        }
        let back = n.restore(&n.cloud);
        for (p, q) in back.points().iter().zip(c.points()) {
            for a in 0..3 {
                assert!((p[a] - q[a]).abs() < 1e-12);
            }
        }
        let same = PointCloud::new(vec![[2.0, 2.0, 2.0]; 4]).unwrap();
        let s = normalize(&same);
        assert!(s.degenerate);
        assert_eq!(s.scale, 1.0);
        assert!(s.cloud.points().iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn xyz_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_shapes(&[Family::Torus], 1, 50, 0.01, 9).unwrap().clouds.remove(0);
        let p = dir.path().join("t.xyz");
        save_xyz(&c, &p).unwrap();
        assert_eq!(load_xyz(&p).unwrap(), c);

        fs::write(&p, "1 2\n").unwrap();
        let e = load_xyz(&p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        fs::write(&p, "0 0 0\n1 x 2\n").unwrap();
        assert!(matches!(load_xyz(&p), Err(Error::Parse { line: 2, .. })));
        fs::write(&p, "").unwrap();
        assert!(load_xyz(&p).is_err());
    }

    #[test]
    fn dataset_round_trip_keeps_families() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_shapes(&Family::ALL, 6, 16, 0.0, 1).unwrap();
        let m = save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(&m).unwrap();
        assert_eq!(back.labels, d.labels);
        for (a, b) in back.clouds.iter().zip(&d.clouds) {
            for (p, q) in a.points().iter().zip(b.points()) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() < 1e-12);
                }
            }
        }
    }
}
