//! Trajectory data and the Hankel/Page/mosaic matrices built from it.
//!
//! Signals are stored column-wise: a `q x T` matrix holds `T` samples of a
//! `q`-dimensional signal. A depth-`L` Hankel matrix of such a signal has
//! block `(i, j)` equal to sample `i + j`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, vstack};

/// One experiment: `inputs` is `n_u x T`, `outputs` is `n_y x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub inputs: DMatrix<f64>,
    pub outputs: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        if inputs.ncols() != outputs.ncols() {
            return Err(Error::invalid(format!(
                "input length {} differs from output length {}",
                inputs.ncols(),
                outputs.ncols()
            )));
        }
        if inputs.ncols() == 0 {
            return Err(Error::invalid("trajectory must contain at least one sample"));
        }
        Ok(Trajectory { inputs, outputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples `start..start+len` as a new trajectory.
    pub fn slice(&self, start: usize, len: usize) -> Trajectory {
        Trajectory {
            inputs: self.inputs.columns(start, len).into_owned(),
            outputs: self.outputs.columns(start, len).into_owned(),
        }
    }

    /// Stacked signal `[u; y]`.
    pub fn joint(&self) -> DMatrix<f64> {
        vstack(&[&self.inputs, &self.outputs])
    }
}

/// Ordered input/output samples from one or more experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    trajectories: Vec<Trajectory>,
    sample_period: f64,
}

impl TrajectoryDataset {
    pub fn new(trajectories: Vec<Trajectory>, sample_period: f64) -> Result<Self> {
        if !(sample_period > 0.0) || !sample_period.is_finite() {
            return Err(Error::invalid(format!("sample period must be positive, got {sample_period}")));
        }
        if let Some(first) = trajectories.first() {
            let (nu, ny) = (first.inputs.nrows(), first.outputs.nrows());
            for (i, t) in trajectories.iter().enumerate() {
                if t.inputs.nrows() != nu || t.outputs.nrows() != ny {
                    return Err(Error::invalid(format!(
                        "trajectory {i} has (n_u, n_y) = ({}, {}), expected ({nu}, {ny})",
                        t.inputs.nrows(),
                        t.outputs.nrows()
                    )));
                }
                if t.is_empty() || t.inputs.ncols() != t.outputs.ncols() {
                    return Err(Error::invalid(format!("trajectory {i} has inconsistent length")));
                }
            }
        }
        Ok(TrajectoryDataset { trajectories, sample_period })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.inputs.nrows())
    }

    pub fn n_y(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.outputs.nrows())
    }

    pub fn total_samples(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Hankel,
    Page,
    Mosaic,
}

/// A block-row data matrix of depth `depth` over a `block_height`-dimensional signal.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    pub entries: DMatrix<f64>,
    pub depth: usize,
    pub block_height: usize,
    pub kind: MatrixKind,
}

impl DataMatrix {
    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    /// Block `(i, j)` as a column vector.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.entries
            .view((i * self.block_height, j), (self.block_height, 1))
            .into_owned()
    }
}

fn hankel_entries(w: &DMatrix<f64>, depth: usize) -> DMatrix<f64> {
    let q = w.nrows();
    let cols = w.ncols() + 1 - depth;
    let mut h = DMatrix::zeros(depth * q, cols);
    for j in 0..cols {
        for i in 0..depth {
            h.view_mut((i * q, j), (q, 1)).copy_from(&w.column(i + j));
        }
    }
    h
}

fn page_entries(w: &DMatrix<f64>, depth: usize) -> DMatrix<f64> {
    let q = w.nrows();
    let cols = w.ncols() / depth;
    let mut p = DMatrix::zeros(depth * q, cols);
    for j in 0..cols {
        for i in 0..depth {
            p.view_mut((i * q, j), (q, 1)).copy_from(&w.column(j * depth + i));
        }
    }
    p
}

/// Depth-`depth` Hankel matrix of the signal `w` (`q x T`).
pub fn build_hankel(w: &DMatrix<f64>, depth: usize) -> Result<DataMatrix> {
    if depth == 0 || w.ncols() < depth {
        return Err(Error::invalid(format!(
            "Hankel depth {depth} needs 1 <= depth <= signal length {}",
            w.ncols()
        )));
    }
    Ok(DataMatrix {
        entries: hankel_entries(w, depth),
        depth,
        block_height: w.nrows(),
        kind: MatrixKind::Hankel,
    })
}

/// Depth-`depth` Page matrix: non-overlapping windows, trailing remainder dropped.
pub fn build_page(w: &DMatrix<f64>, depth: usize) -> Result<DataMatrix> {
    if depth == 0 || w.ncols() < depth {
        return Err(Error::invalid(format!(
            "Page depth {depth} needs 1 <= depth <= signal length {}",
            w.ncols()
        )));
    }
    Ok(DataMatrix {
        entries: page_entries(w, depth),
        depth,
        block_height: w.nrows(),
        kind: MatrixKind::Page,
    })
}

/// Horizontal concatenation of per-trajectory Hankel matrices of `[u; y]`.
pub fn build_mosaic(dataset: &TrajectoryDataset, depth: usize) -> Result<DataMatrix> {
    let signals: Vec<DMatrix<f64>> = dataset.trajectories().iter().map(Trajectory::joint).collect();
    mosaic_of(&signals, depth)
}

/// Mosaic Hankel matrix of arbitrary signals sharing one block height.
pub fn mosaic_of(signals: &[DMatrix<f64>], depth: usize) -> Result<DataMatrix> {
    if depth == 0 {
        return Err(Error::invalid("mosaic depth must be at least 1"));
    }
    let q = signals.first().map_or(0, |s| s.nrows());
    let mut blocks = Vec::with_capacity(signals.len());
    for (i, s) in signals.iter().enumerate() {
        if s.ncols() < depth {
            return Err(Error::invalid(format!(
                "trajectory {i} has {} samples, shorter than depth {depth}",
                s.ncols()
            )));
        }
        blocks.push(hankel_entries(s, depth));
    }
    let ncols = blocks.iter().map(|b| b.ncols()).sum();
    let mut entries = DMatrix::zeros(depth * q, ncols);
    let mut c = 0;
    for b in &blocks {
        entries.columns_mut(c, b.ncols()).copy_from(b);
        c += b.ncols();
    }
    Ok(DataMatrix { entries, depth, block_height: q, kind: MatrixKind::Mosaic })
}

/// Persistency of excitation of order `order`: full row rank of the depth-`order`
/// Hankel matrix. Returns the verdict together with the numerical rank.
pub fn is_persistently_exciting(w: &DMatrix<f64>, order: usize) -> Result<(bool, usize)> {
    let h = build_hankel(w, order)?;
    let rank = numerical_rank(&h.entries);
    Ok((rank == order * w.nrows(), rank))
}

/// Persistency of excitation of the input channel across a multi-trajectory set,
/// via the mosaic Hankel matrix. Trajectories shorter than `order` are skipped.
pub fn dataset_excitation(dataset: &TrajectoryDataset, order: usize) -> Option<(bool, usize)> {
    if order == 0 {
        return None;
    }
    let signals: Vec<DMatrix<f64>> = dataset
        .trajectories()
        .iter()
        .filter(|t| t.len() >= order)
        .map(|t| t.inputs.clone())
        .collect();
    if signals.is_empty() {
        return None;
    }
    let h = mosaic_of(&signals, order).ok()?;
    let rank = numerical_rank(&h.entries);
    Some((rank == h.entries.nrows(), rank))
}

/// A `T_ini`-step window of past inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// `n_u x T_ini`
    pub inputs: DMatrix<f64>,
    /// `n_y x T_ini`
    pub outputs: DMatrix<f64>,
}

impl Window {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        if inputs.ncols() != outputs.ncols() {
            return Err(Error::invalid("window input/output lengths differ"));
        }
        Ok(Window { inputs, outputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of(traj: &Trajectory, start: usize, len: usize) -> Window {
        Window {
            inputs: traj.inputs.columns(start, len).into_owned(),
            outputs: traj.outputs.columns(start, len).into_owned(),
        }
    }
}

/// Result of the excitation-order check performed while building a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExcitationCheck {
    pub order: usize,
    pub rank: usize,
    pub rows: usize,
    pub satisfied: bool,
}

/// Partitioned data matrices of one prediction problem.
///
/// Column `j` pairs the conditioning window `windows[j]` (steps `j..j+T_ini`)
/// with the future blocks `u_f`, `y_f` (steps `j+T_ini..j+T_ini+L`). `u_p`/`y_p`
/// hold the same samples as the windows in matrix form.
#[derive(Debug, Clone)]
pub struct HankelBundle {
    pub u_p: DMatrix<f64>,
    pub y_p: DMatrix<f64>,
    pub u_f: DMatrix<f64>,
    pub y_f: DMatrix<f64>,
    pub windows: Vec<Window>,
    pub t_ini: usize,
    pub horizon: usize,
    pub kind: MatrixKind,
    pub excitation: Option<ExcitationCheck>,
}

impl HankelBundle {
    pub fn ncols(&self) -> usize {
        self.u_p.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.u_f.nrows() / self.horizon
    }

    pub fn n_y(&self) -> usize {
        self.y_f.nrows() / self.horizon
    }

    /// `[U_p; U_f]`
    pub fn u_stack(&self) -> DMatrix<f64> {
        vstack(&[&self.u_p, &self.u_f])
    }

    /// `[Y_p; Y_f]`
    pub fn y_stack(&self) -> DMatrix<f64> {
        vstack(&[&self.y_p, &self.y_f])
    }
}

/// Builds the partitioned matrices for `(T_ini, L)`.
///
/// `kind` selects overlapping (`Hankel`/`Mosaic`, which coincide for the
/// column layout here) or non-overlapping (`Page`) windows per trajectory.
/// `lift_dim`, when known, triggers the excitation-order check of the input
/// at order `lift_dim - n_u + L`; a failure is logged, not raised.
pub fn build_bundle(
    dataset: &TrajectoryDataset,
    t_ini: usize,
    horizon: usize,
    kind: MatrixKind,
    lift_dim: Option<usize>,
) -> Result<HankelBundle> {
    if t_ini == 0 || horizon == 0 {
        return Err(Error::invalid("T_ini and L must both be at least 1"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("dataset has no trajectories"));
    }
    let depth = t_ini + horizon;
    let (nu, ny) = (dataset.n_u(), dataset.n_y());
    let mut u_blocks = Vec::new();
    let mut y_blocks = Vec::new();
    let mut windows = Vec::new();
    for (i, traj) in dataset.trajectories().iter().enumerate() {
        if traj.len() < depth {
            return Err(Error::invalid(format!(
                "trajectory {i} has {} samples, needs at least T_ini + L = {depth}",
                traj.len()
            )));
        }
        let (hu, hy, starts): (DMatrix<f64>, DMatrix<f64>, Vec<usize>) = match kind {
            MatrixKind::Page => {
                let n = traj.len() / depth;
                (
                    page_entries(&traj.inputs, depth),
                    page_entries(&traj.outputs, depth),
                    (0..n).map(|j| j * depth).collect(),
                )
            }
            MatrixKind::Hankel | MatrixKind::Mosaic => {
                let n = traj.len() + 1 - depth;
                (
                    hankel_entries(&traj.inputs, depth),
                    hankel_entries(&traj.outputs, depth),
                    (0..n).collect(),
                )
            }
        };
        for s in starts {
            windows.push(Window::of(traj, s, t_ini));
        }
        u_blocks.push(hu);
        y_blocks.push(hy);
    }
    let ncols: usize = u_blocks.iter().map(|b| b.ncols()).sum();
    let mut hu = DMatrix::zeros(depth * nu, ncols);
    let mut hy = DMatrix::zeros(depth * ny, ncols);
    let mut c = 0;
    for (bu, by) in u_blocks.iter().zip(&y_blocks) {
        hu.columns_mut(c, bu.ncols()).copy_from(bu);
        hy.columns_mut(c, by.ncols()).copy_from(by);
        c += bu.ncols();
    }
    let u_p = hu.rows(0, t_ini * nu).into_owned();
    let u_f = hu.rows(t_ini * nu, horizon * nu).into_owned();
    let y_p = hy.rows(0, t_ini * ny).into_owned();
    let y_f = hy.rows(t_ini * ny, horizon * ny).into_owned();

    let rank = numerical_rank(&hu);
    if rank < hu.nrows() {
        return Err(Error::DegenerateData(format!(
            "[U_p; U_f] has rank {rank} < {} rows ({} columns); input data is not rich enough",
            hu.nrows(),
            ncols
        )));
    }

    let excitation = lift_dim.and_then(|n_phi| {
        let order = (n_phi + horizon).saturating_sub(nu).max(1);
        let rows = order * nu;
        match dataset_excitation(dataset, order) {
            Some((ok, rank)) => {
                if !ok {
                    warn!(
                        "input is not persistently exciting of order {order} \
                         (mosaic rank {rank} < {rows}); prediction may be non-unique"
                    );
                }
                Some(ExcitationCheck { order, rank, rows, satisfied: ok })
            }
            None => {
                warn!("cannot check excitation of order {order}: trajectories are too short");
                None
            }
        }
    });

    Ok(HankelBundle { u_p, y_p, u_f, y_f, windows, t_ini, horizon, kind, excitation })
}

// ---------------------------------------------------------------------------
// CSV persistence: header `traj,t,u0..,y0..`, rows sorted by (traj, t).

pub fn save_trajectories(dataset: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut w = csv::Writer::from_writer(file);
    let (nu, ny) = (dataset.n_u(), dataset.n_y());
    let mut header = vec!["traj".to_string(), "t".to_string()];
    header.extend((0..nu).map(|i| format!("u{i}")));
    header.extend((0..ny).map(|i| format!("y{i}")));
    w.write_record(&header).map_err(csv_io)?;
    let dt = dataset.sample_period();
    let mut row = Vec::with_capacity(2 + nu + ny);
    for (k, traj) in dataset.trajectories().iter().enumerate() {
        for t in 0..traj.len() {
            row.clear();
            row.push(k.to_string());
            row.push(format!("{}", t as f64 * dt));
            row.extend(traj.inputs.column(t).iter().map(|v| format!("{v}")));
            row.extend(traj.outputs.column(t).iter().map(|v| format!("{v}")));
            w.write_record(&row).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line: 0, message: format!("{other:?}") },
    }
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize)> {
    let bad = |msg: String| Error::Parse { line: 1, message: msg };
    if header.len() < 3 || &header[0] != "traj" || &header[1] != "t" {
        return Err(bad("header must start with `traj,t`".into()));
    }
    let mut nu = 0;
    let mut idx = 2;
    while idx < header.len() && header[idx] == format!("u{nu}") {
        nu += 1;
        idx += 1;
    }
    let mut ny = 0;
    while idx < header.len() && header[idx] == format!("y{ny}") {
        ny += 1;
        idx += 1;
    }
    if idx != header.len() {
        return Err(bad(format!("unexpected column `{}`", &header[idx])));
    }
    if ny == 0 {
        return Err(bad("missing output column `y0`".into()));
    }
    Ok((nu, ny))
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    let file = BufReader::new(File::open(path)?);
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let header = r.headers().map_err(csv_io)?.clone();
    let (nu, ny) = parse_header(&header)?;
    let width = 2 + nu + ny;

    let mut trajectories = Vec::new();
    let mut current: Option<(u64, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    let mut sample_period: Option<f64> = None;
    let finish = |cur: (u64, Vec<f64>, Vec<f64>, Vec<f64>),
                      sp: &mut Option<f64>,
                      out: &mut Vec<Trajectory>|
     -> Result<()> {
        let (_, times, u, y) = cur;
        let len = times.len();
        if sp.is_none() && len >= 2 {
            *sp = Some(times[1] - times[0]);
        }
        out.push(Trajectory::new(
            DMatrix::from_vec(nu, len, u),
            DMatrix::from_vec(ny, len, y),
        )?);
        Ok(())
    };

    for (k, rec) in r.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            rec[i].trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric field `{}` in column {}", &rec[i], &header[i]),
            })
        };
        let traj: u64 = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("trajectory id `{}` is not a non-negative integer", &rec[0]),
        })?;
        let t = num(1)?;
        let same = matches!(&current, Some((id, ..)) if *id == traj);
        if !same {
            if let Some((prev, ..)) = &current {
                if traj < *prev {
                    return Err(Error::Parse { line, message: "rows not sorted by trajectory".into() });
                }
            }
            if let Some(cur) = current.take() {
                finish(cur, &mut sample_period, &mut trajectories)?;
            }
            current = Some((traj, Vec::new(), Vec::new(), Vec::new()));
        }
        let (_, times, u, y) = current.as_mut().expect("current trajectory");
        if let Some(&last) = times.last() {
            if t <= last {
                return Err(Error::Parse { line, message: "time stamps not increasing".into() });
            }
        }
        times.push(t);
        for i in 0..nu {
            u.push(num(2 + i)?);
        }
        for i in 0..ny {
            y.push(num(2 + nu + i)?);
        }
    }
    if let Some(cur) = current.take() {
        finish(cur, &mut sample_period, &mut trajectories)?;
    }
    TrajectoryDataset::new(trajectories, sample_period.unwrap_or(1.0))
}
