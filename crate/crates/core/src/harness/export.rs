use std::io::Write;
use std::path::Path;

use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    PgmGrid,
    CsvPoints,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm-grid" => Ok(Self::PgmGrid),
            "csv-points" => Ok(Self::CsvPoints),
            other => Err(Error::arg(format!("unknown export format `{other}`"))),
        }
    }
}

/// Writes `batch` (`[n, row_len]`) as a PGM image grid or as 2D points.
/// `sample_dims` is `[C, H, W]` (single channel) or `[2]`.
pub fn export_samples<E: Element>(
    batch: &Tensor<E>,
    sample_dims: &[usize],
    path: &Path,
    format: ExportFormat,
) -> Result<()> {
    let n = batch.rows();
    match format {
        ExportFormat::PgmGrid => {
            let (h, w) = match sample_dims {
                [1, h, w] | [h, w] => (*h, *w),
                _ => {
                    return Err(Error::arg(format!(
                        "pgm-grid needs single-channel images, got {sample_dims:?}"
                    )))
                }
            };
            if batch.row_len() != h * w || n == 0 {
                return Err(Error::arg(format!(
                    "batch {:?} does not hold {h}×{w} images",
                    batch.dims()
                )));
            }
            let cols = (n as f64).sqrt().ceil() as usize;
            let rows = n.div_ceil(cols);
            let (width, height) = (cols * w, rows * h);
            let mut pixels = vec![0u8; width * height];
            for k in 0..n {
                let (gy, gx) = (k / cols, k % cols);
                for (p, v) in batch.row(k).iter().enumerate() {
                    let (y, x) = (gy * h + p / w, gx * w + p % w);
                    let level = ((v.as_f64().clamp(-1.0, 1.0) + 1.0) * 127.5).round();
                    pixels[y * width + x] = level as u8;
                }
            }
            let mut f = std::fs::File::create(path)?;
            write!(f, "P5\n{width} {height}\n255\n")?;
            f.write_all(&pixels)?;
        }
        ExportFormat::CsvPoints => {
            if sample_dims != [2] || batch.row_len() != 2 {
                return Err(Error::arg(format!(
                    "csv-points needs 2D samples, got {sample_dims:?}"
                )));
            }
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "x,y")?;
            for k in 0..n {
                let r = batch.row(k);
                writeln!(f, "{},{}", r[0].as_f64(), r[1].as_f64())?;
            }
            f.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm_payload(path: &Path) -> (String, Vec<u8>) {
        let bytes = std::fs::read(path).unwrap();
        // three header lines
        let mut nl = 0;
        let mut cut = 0;
        for (i, b) in bytes.iter().enumerate() {
            if *b == b'\n' {
                nl += 1;
                if nl == 3 {
                    cut = i + 1;
                    break;
                }
            }
        }
        (
            String::from_utf8(bytes[..cut].to_vec()).unwrap(),
            bytes[cut..].to_vec(),
        )
    }

    #[test]
    fn constant_black_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let t: Tensor<f32> = Tensor::full(&[1, 64], -1.0);
        export_samples(&t, &[1, 8, 8], &p, ExportFormat::PgmGrid).unwrap();
        let (header, payload) = pgm_payload(&p);
        assert_eq!(header, "P5\n8 8\n255\n");
        assert!(payload.iter().all(|&b| b == 0));
    }

    #[test]
    fn sixteen_tiles_make_a_square() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let t: Tensor<f32> = Tensor::full(&[16, 64], 2.0);
        export_samples(&t, &[1, 8, 8], &p, ExportFormat::PgmGrid).unwrap();
        let (header, payload) = pgm_payload(&p);
        assert_eq!(header, "P5\n32 32\n255\n");
        assert_eq!(payload.len(), 1024);
        assert!(payload.iter().all(|&b| b == 255));
    }

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let t = Tensor::<f32>::from_f64(&[3, 2], &[0.1, -2.5, 3.25, 1e-3, -0.7, 0.0]).unwrap();
        export_samples(&t, &[2], &p, ExportFormat::CsvPoints).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let vals: Vec<f64> = text
            .lines()
            .skip(1)
            .flat_map(|l| {
                l.split(',')
                    .map(|v| v.parse::<f64>().unwrap())
                    .collect::<Vec<_>>()
            })
            .collect();
        for (a, b) in vals.iter().zip(t.data()) {
            assert!((a - *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_dimensionality_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img: Tensor<f32> = Tensor::zeros(&[2, 64]);
        let pts: Tensor<f32> = Tensor::zeros(&[2, 2]);
        assert!(export_samples(
            &img,
            &[1, 8, 8],
            &dir.path().join("x.csv"),
            ExportFormat::CsvPoints
        )
        .is_err());
        assert!(
            export_samples(&pts, &[2], &dir.path().join("x.pgm"), ExportFormat::PgmGrid).is_err()
        );
    }
}
