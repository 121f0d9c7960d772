//! Trajectory datasets on disk: `manifest.json` plus `curves/curve_<k>.csv`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{GridFunction, Lattice, LatticeAxis, TimeGrid};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    #[serde(default)]
    pub params: serde_json::Value,
    pub seed: u64,
    pub n_curves: usize,
    pub n_time: usize,
    pub dim: usize,
    pub channels: Vec<String>,
    pub times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<Vec<AxisSpec>>,
}

/// A batch of trajectories sharing one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub times: TimeGrid<f64>,
    pub lattice: Option<Lattice<f64>>,
    /// `[n_curves, N, X.., d]`.
    pub trajectories: Tensor<f64>,
}

impl Dataset {
    /// Assembles a dataset, filling the shape fields of the manifest.
    pub fn new(
        generator: &str,
        params: serde_json::Value,
        seed: u64,
        channels: Vec<String>,
        times: TimeGrid<f64>,
        lattice: Option<Lattice<f64>>,
        trajectories: Tensor<f64>,
    ) -> Result<Self> {
        let s = trajectories.shape();
        let mut expected = vec![times.len()];
        if let Some(l) = &lattice {
            expected.extend(l.shape());
        }
        expected.push(channels.len());
        if s.len() != expected.len() + 1 || s[1..] != expected[..] {
            return Err(Error::DatasetShape(format!(
                "trajectories {s:?} do not match [n_curves] + {expected:?}"
            )));
        }
        let manifest = Manifest {
            generator: generator.to_string(),
            params,
            seed,
            n_curves: s[0],
            n_time: times.len(),
            dim: channels.len(),
            channels,
            times: times.points().to_vec(),
            lattice: lattice.as_ref().map(|l| {
                l.axes
                    .iter()
                    .map(|a| AxisSpec {
                        lo: a.lo,
                        hi: a.hi,
                        count: a.count,
                    })
                    .collect()
            }),
        };
        Ok(Self {
            manifest,
            times,
            lattice,
            trajectories,
        })
    }

    pub fn n_curves(&self) -> usize {
        self.trajectories.shape()[0]
    }

    pub fn n_time(&self) -> usize {
        self.times.len()
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn n_space(&self) -> usize {
        self.lattice.as_ref().map_or(1, Lattice::num_points)
    }

    pub fn curve(&self, k: usize) -> GridFunction<f64> {
        GridFunction::with_lattice(
            self.times.clone(),
            self.lattice.clone(),
            self.trajectories.index_axis0(k),
        )
        .expect("dataset curves match the grid")
    }

    /// The curves at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let curves: Vec<Tensor<f64>> = indices
            .iter()
            .map(|&k| {
                if k >= self.n_curves() {
                    Err(Error::InvalidArgument(format!(
                        "curve {k} out of range for {} curves",
                        self.n_curves()
                    )))
                } else {
                    Ok(self.trajectories.index_axis0(k))
                }
            })
            .collect::<Result<_>>()?;
        let mut out = self.clone();
        out.trajectories = Tensor::stack(&curves)?;
        out.manifest.n_curves = indices.len();
        Ok(out)
    }
}

fn column_names(m: &Manifest) -> Vec<String> {
    let Some(axes) = &m.lattice else {
        return m.channels.clone();
    };
    let shape: Vec<usize> = axes.iter().map(|a| a.count).collect();
    let n: usize = shape.iter().product();
    let mut names = Vec::with_capacity(n * m.channels.len());
    for flat in 0..n {
        let mut idx = vec![0; shape.len()];
        let mut r = flat;
        for (i, &c) in shape.iter().enumerate().rev() {
            idx[i] = r % c;
            r /= c;
        }
        let tag: Vec<String> = idx.iter().map(usize::to_string).collect();
        for ch in &m.channels {
            names.push(format!("{ch}@{}", tag.join("_")));
        }
    }
    names
}

fn curve_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("curves").join(format!("curve_{k}.csv"))
}

pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("curves"))?;
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&ds.manifest)?)?;
    let names = column_names(&ds.manifest);
    let width = names.len();
    for k in 0..ds.n_curves() {
        let curve = ds.trajectories.index_axis0(k);
        let mut out = std::io::BufWriter::new(fs::File::create(curve_path(dir, k))?);
        writeln!(out, "{}", names.join(","))?;
        for row in curve.data().chunks(width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        out.flush()?;
    }
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::MissingFile(mpath));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    if manifest.channels.len() != manifest.dim || manifest.times.len() != manifest.n_time {
        return Err(Error::DatasetShape(
            "manifest channel or time counts disagree".into(),
        ));
    }
    let times = TimeGrid::new(manifest.times.clone())?;
    let lattice = manifest
        .lattice
        .as_ref()
        .map(|axes| {
            Lattice::new(
                axes.iter()
                    .map(|a| LatticeAxis {
                        lo: a.lo,
                        hi: a.hi,
                        count: a.count,
                    })
                    .collect(),
            )
        })
        .transpose()?;

    let on_disk = fs::read_dir(dir.join("curves"))
        .map(|it| {
            it.filter_map(|e| e.ok())
                .filter(|e| e.file_name().to_string_lossy().ends_with(".csv"))
                .count()
        })
        .unwrap_or(0);
    if on_disk != manifest.n_curves {
        return Err(Error::DatasetShape(format!(
            "manifest lists {} curves but {} curve files exist",
            manifest.n_curves, on_disk
        )));
    }

    let names = column_names(&manifest);
    let mut data = Vec::with_capacity(manifest.n_curves * manifest.n_time * names.len());
    for k in 0..manifest.n_curves {
        let path = curve_path(dir, k);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let mut reader = csv::Reader::from_path(&path)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != names {
            return Err(Error::DatasetShape(format!(
                "{}: header has {} columns, expected {}",
                path.display(),
                header.len(),
                names.len()
            )));
        }
        let mut rows = 0;
        for (r, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != names.len() {
                return Err(Error::DatasetShape(format!(
                    "{}: row {} has {} cells, expected {}",
                    path.display(),
                    r + 1,
                    record.len(),
                    names.len()
                )));
            }
            for (c, cell) in record.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::BadCell {
                    path: path.clone(),
                    row: r + 1,
                    col: c + 1,
                    cell: cell.to_string(),
                })?;
                data.push(v);
            }
            rows += 1;
        }
        if rows != manifest.n_time {
            return Err(Error::DatasetShape(format!(
                "{}: {rows} rows, manifest says {}",
                path.display(),
                manifest.n_time
            )));
        }
    }
    let mut shape = vec![manifest.n_curves, manifest.n_time];
    if let Some(l) = &lattice {
        shape.extend(l.shape());
    }
    shape.push(manifest.dim);
    Ok(Dataset {
        trajectories: Tensor::new(shape, data)?,
        times,
        lattice,
        manifest,
    })
}
