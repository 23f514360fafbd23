use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub const DATASET_MAGIC: &str = "DKDS v1";

const RING_MODES: usize = 8;
const RING_RADIUS: f64 = 2.0;
const RING_STD: f64 = 0.15;
const SHAPE_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    /// `N(m, s²I)` in two dimensions.
    Gauss2d { m: [f64; 2], s: f64 },
    /// Eight Gaussian modes evenly spaced on a circle.
    Rings,
    /// 8×8 single-channel images of jittered rectangles and crosses.
    Shapes8x8,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gauss2d { .. } => "gauss2d",
            Self::Rings => "mixture2d-rings",
            Self::Shapes8x8 => "shapes8x8",
        }
    }

    /// Sample dims: `[2]` or `[1, 8, 8]`.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Self::Gauss2d { .. } | Self::Rings => vec![2],
            Self::Shapes8x8 => vec![1, SHAPE_SIDE, SHAPE_SIDE],
        }
    }

    pub fn row_len(&self) -> usize {
        self.dims().iter().product()
    }

    /// Parses a kind name; `m` and `s` only apply to gauss2d.
    pub fn parse(name: &str, m: [f64; 2], s: f64) -> Result<Self> {
        match name {
            "gauss2d" => {
                if !(s > 0.0) {
                    return Err(Error::arg(format!("gauss2d needs s > 0, got {s}")));
                }
                Ok(Self::Gauss2d { m, s })
            }
            "mixture2d-rings" | "rings" => Ok(Self::Rings),
            "shapes8x8" => Ok(Self::Shapes8x8),
            other => Err(Error::arg(format!("unknown dataset kind `{other}`"))),
        }
    }

    fn sample_into(&self, rng: &mut SeedStream, out: &mut Vec<f32>) {
        match self {
            Self::Gauss2d { m, s } => {
                for mk in m {
                    out.push((mk + s * rng.normal()) as f32);
                }
            }
            Self::Rings => {
                let k = rng.below(RING_MODES as u64) as f64;
                let angle = 2.0 * std::f64::consts::PI * k / RING_MODES as f64;
                out.push((RING_RADIUS * angle.cos() + RING_STD * rng.normal()) as f32);
                out.push((RING_RADIUS * angle.sin() + RING_STD * rng.normal()) as f32);
            }
            Self::Shapes8x8 => render_shape(rng, out),
        }
    }
}

fn render_shape(rng: &mut SeedStream, out: &mut Vec<f32>) {
    let n = SHAPE_SIDE;
    let mut img = vec![-1.0f64; n * n];
    let level = 0.6 + 0.4 * rng.uniform();
    if rng.below(2) == 0 {
        let w = rng.range_inclusive(2, 5);
        let h = rng.range_inclusive(2, 5);
        let x0 = rng.range_inclusive(0, n - w);
        let y0 = rng.range_inclusive(0, n - h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img[y * n + x] = level;
            }
        }
    } else {
        let cx = rng.range_inclusive(2, n - 3);
        let cy = rng.range_inclusive(2, n - 3);
        let arm = rng.range_inclusive(1, 2);
        for d in 0..=2 * arm {
            let off = d as isize - arm as isize;
            let y = (cy as isize + off) as usize;
            let x = (cx as isize + off) as usize;
            img[y * n + cx] = level;
            img[cy * n + x] = level;
        }
    }
    for v in img {
        let jitter = 0.05 * rng.normal();
        out.push((v + jitter).clamp(-1.0, 1.0) as f32);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// `[n, row_len]`.
    pub samples: Tensor<f32>,
    pub seed: u64,
}

/// `n` samples of `kind` from the `data` stream of `seed`.
pub fn make_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    let samples = draw_samples(&kind, n, &mut SeedStream::derive(seed, "data"))?;
    Ok(Dataset {
        samples,
        kind,
        seed,
    })
}

/// `[n, row_len]` samples of `kind` from `rng`.
pub fn draw_samples(kind: &DatasetKind, n: usize, rng: &mut SeedStream) -> Result<Tensor<f32>> {
    if n == 0 {
        return Err(Error::arg("dataset size must be >= 1"));
    }
    let d = kind.row_len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        kind.sample_into(rng, &mut data);
    }
    Tensor::new(vec![n, d], data)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        self.kind.dims()
    }

    /// Writes the text header followed by little-endian f32 records.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dims = self
            .dims()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{DATASET_MAGIC}")?;
        writeln!(f, "kind {}", self.kind.name())?;
        writeln!(f, "n {}", self.len())?;
        writeln!(f, "dims {dims}")?;
        writeln!(f, "seed {}", self.seed)?;
        for v in self.samples.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a dataset file. Gaussian parameters are not stored, so a
    /// gauss2d file comes back with `m = 0, s = 1` as placeholders.
    pub fn load(path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::format(path, msg);
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        let mut header = Vec::new();
        for _ in 0..5 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(fail("truncated header".into()));
            }
            header.push(line.trim_end().to_string());
        }
        if header[0] != DATASET_MAGIC {
            return Err(fail(format!(
                "bad magic `{}`, expected `{DATASET_MAGIC}`",
                header[0]
            )));
        }
        let field = |i: usize, key: &str| -> Result<String> {
            header[i]
                .strip_prefix(key)
                .and_then(|v| v.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| fail(format!("expected `{key}` on header line {}", i + 1)))
        };
        let kind = DatasetKind::parse(&field(1, "kind")?, [0.0, 0.0], 1.0)
            .map_err(|e| fail(e.to_string()))?;
        let n: usize = field(2, "n")?
            .parse()
            .map_err(|_| fail("bad sample count".into()))?;
        let dims: Vec<usize> = field(3, "dims")?
            .split('x')
            .map(|d| d.parse().map_err(|_| fail(format!("bad dims entry `{d}`"))))
            .collect::<Result<_>>()?;
        if dims != kind.dims() {
            return Err(fail(format!(
                "dims {dims:?} do not match kind {}",
                kind.name()
            )));
        }
        let seed: u64 = field(4, "seed")?
            .parse()
            .map_err(|_| fail("bad seed".into()))?;
        let d = kind.row_len();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * d * 4 {
            return Err(fail(format!(
                "payload holds {} bytes, header needs {}",
                bytes.len(),
                n * d * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            kind,
            samples: Tensor::new(vec![n, d], data)?,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss2d_mean_within_bound() {
        let (m, s, n) = ([1.0, -1.0], 0.5, 100_000);
        let ds = make_dataset(DatasetKind::Gauss2d { m, s }, n, 11).unwrap();
        for k in 0..2 {
            let mean: f64 = (0..n).map(|i| ds.samples.row(i)[k] as f64).sum::<f64>() / n as f64;
            assert!(
                (mean - m[k]).abs() < 3.0 * s / (n as f64).sqrt(),
                "coord {k}: {mean}"
            );
        }
    }

    #[test]
    fn same_seed_same_bits() {
        for kind in [DatasetKind::Rings, DatasetKind::Shapes8x8] {
            let a = make_dataset(kind.clone(), 50, 3).unwrap();
            let b = make_dataset(kind, 50, 3).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shapes_stay_in_range() {
        let ds = make_dataset(DatasetKind::Shapes8x8, 2000, 5).unwrap();
        assert!(ds.samples.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(ds.samples.dims(), &[2000, 64]);
        // not all background
        assert!(ds.samples.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn unknown_kind_and_empty() {
        assert!(DatasetKind::parse("cifar", [0.0; 2], 1.0).is_err());
        assert!(make_dataset(DatasetKind::Rings, 0, 1).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (kind, n) in [(DatasetKind::Shapes8x8, 7), (DatasetKind::Rings, 1)] {
            let ds = make_dataset(kind, n, 9).unwrap();
            let p = dir.path().join("d.dkds");
            ds.save(&p).unwrap();
            assert_eq!(Dataset::load(&p).unwrap(), ds);
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.dkds");
        make_dataset(DatasetKind::Rings, 4, 1)
            .unwrap()
            .save(&p)
            .unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Dataset::load(&p), Err(Error::Format { .. })));
    }
}
