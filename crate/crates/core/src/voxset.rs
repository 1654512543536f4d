//! Text dataset format `voxset v1`.
//!
//! ```text
//! voxset 1 <N> <N_F> <has_labels> <has_centroids>
//! batch x y z f_1 .. f_NF [label] [cx cy cz]
//! ```
//!
//! One header line, then `N` whitespace-separated voxel lines. Reals are
//! written with Rust's shortest round-trip formatting, so a write/read cycle
//! reproduces every value bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sparse_tensor::{Coordinate, DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct Voxset {
    pub coords: Vec<Coordinate>,
    pub features: Matrix,
    pub labels: Option<Vec<u32>>,
    /// Instance centroid per voxel, world units.
    pub centroids: Option<Vec<[f64; DIM]>>,
}

impl Voxset {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.coords.len();
        if self.features.rows() != n {
            return Err(Error::shape("Voxset::write (features)", n, self.features.rows()));
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::shape("Voxset::write (labels)", n, l.len()));
            }
        }
        if let Some(c) = &self.centroids {
            if c.len() != n {
                return Err(Error::shape("Voxset::write (centroids)", n, c.len()));
            }
        }
        writeln!(
            w,
            "voxset 1 {} {} {} {}",
            n,
            self.features.cols(),
            u8::from(self.labels.is_some()),
            u8::from(self.centroids.is_some())
        )?;
        let mut line = String::new();
        for (i, c) in self.coords.iter().enumerate() {
            line.clear();
            let _ = write!(line, "{} {} {} {}", c.batch, c.xyz[0], c.xyz[1], c.xyz[2]);
            for v in self.features.row(i) {
                let _ = write!(line, " {v}");
            }
            if let Some(l) = &self.labels {
                let _ = write!(line, " {}", l[i]);
            }
            if let Some(cs) = &self.centroids {
                for v in cs[i] {
                    let _ = write!(line, " {v}");
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Voxset {
            line: 1,
            message: "missing header".into(),
        })?;
        let header = header?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "voxset" || fields[1] != "1" {
            return Err(Error::Voxset {
                line: 1,
                message: format!("bad header {header:?}"),
            });
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>().map_err(|e| Error::Voxset {
                line: 1,
                message: format!("bad header field {s:?}: {e}"),
            })
        };
        let n = parse_usize(fields[2])?;
        let nf = parse_usize(fields[3])?;
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::Voxset {
                line: 1,
                message: format!("flag must be 0 or 1, got {s:?}"),
            }),
        };
        let has_labels = flag(fields[4])?;
        let has_centroids = flag(fields[5])?;
        let width = 4 + nf + usize::from(has_labels) + 3 * usize::from(has_centroids);

        let mut coords = Vec::with_capacity(n);
        let mut feats = Vec::with_capacity(n * nf);
        let mut labels = has_labels.then(|| Vec::with_capacity(n));
        let mut centroids = has_centroids.then(|| Vec::with_capacity(n));
        for _ in 0..n {
            let (ln, line) = lines.next().ok_or(Error::Voxset {
                line: coords.len() + 2,
                message: format!("expected {n} voxel lines, found {}", coords.len()),
            })?;
            let line = line?;
            let lineno = ln + 1;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != width {
                return Err(Error::Voxset {
                    line: lineno,
                    message: format!("expected {width} fields, found {}", tok.len()),
                });
            }
            let bad = |s: &str| Error::Voxset {
                line: lineno,
                message: format!("cannot parse {s:?}"),
            };
            let batch = tok[0].parse::<u32>().map_err(|_| bad(tok[0]))?;
            let mut xyz = [0i32; DIM];
            for d in 0..DIM {
                xyz[d] = tok[1 + d].parse().map_err(|_| bad(tok[1 + d]))?;
            }
            coords.push(Coordinate::new(batch, xyz));
            for t in &tok[4..4 + nf] {
                feats.push(t.parse::<f64>().map_err(|_| bad(t))?);
            }
            let mut k = 4 + nf;
            if let Some(l) = labels.as_mut() {
                l.push(tok[k].parse::<u32>().map_err(|_| bad(tok[k]))?);
                k += 1;
            }
            if let Some(cs) = centroids.as_mut() {
                let mut v = [0.0; DIM];
                for d in 0..DIM {
                    v[d] = tok[k + d].parse().map_err(|_| bad(tok[k + d]))?;
                }
                cs.push(v);
            }
        }
        Ok(Self {
            coords,
            features: Matrix::from_vec(n, nf, feats)?,
            labels,
            centroids,
        })
    }
}
