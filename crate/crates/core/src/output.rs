//! CSV diagnostics, legacy VTK snapshots and convergence tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diagnostics::DiagnosticsRow;
use crate::error::{Error, Result};
use crate::fields::CoupledState;
use crate::mesh::CellType;
use crate::scenarios::EocTable;

pub const CSV_HEADER: &str = "step,time,energy,mass,min_sample,max_sample,min_avg,max_avg,newton_iters,residual,violation";

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Shortest text that parses back to the same `f64`; exponent form for
/// very small or large magnitudes.
fn num(v: f64) -> String {
    if v != 0.0 && !(1e-4..1e15).contains(&v.abs()) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn csv_string(rows: &[DiagnosticsRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            num(r.time),
            num(r.energy),
            num(r.mass),
            num(r.min_sample),
            num(r.max_sample),
            num(r.min_avg),
            num(r.max_avg),
            r.newton_iters,
            num(r.residual),
            num(r.violation)
        );
    }
    s
}

pub fn write_csv(rows: &[DiagnosticsRow], path: &Path) -> Result<()> {
    write_file(path, &csv_string(rows))
}

pub fn parse_csv(text: &str) -> Result<Vec<DiagnosticsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(Error::Config(format!("unexpected CSV header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Config(format!("malformed CSV line {}: {line:?}", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad());
        }
        let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad());
        let int = |k: usize| f[k].trim().parse::<usize>().map_err(|_| bad());
        rows.push(DiagnosticsRow {
            step: int(0)?,
            time: num(1)?,
            energy: num(2)?,
            mass: num(3)?,
            min_sample: num(4)?,
            max_sample: num(5)?,
            min_avg: num(6)?,
            max_avg: num(7)?,
            newton_iters: int(8)?,
            residual: num(9)?,
            violation: num(10)?,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<DiagnosticsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

/// Legacy ASCII unstructured grid. Cell data holds the averages of `phi` and
/// `mu`; for `p >= 1` every cell gets its own corner points carrying the
/// corner values, so the discontinuous field is visible.
pub fn vtk_string(state: &CoupledState) -> String {
    let space = state.space();
    let mesh = &space.mesh;
    let nc = mesh.num_cells();
    let nv = mesh.cell_type().num_vertices();
    let vtk_type = match mesh.cell_type() {
        CellType::Tri => 5,
        CellType::Quad => 9,
    };
    let broken = space.order() > 0;
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "phase field at t = {} (step {})", state.time, state.step);
    let _ = writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID");
    if broken {
        let _ = writeln!(s, "POINTS {} double", nc * nv);
        for cell in &mesh.cells {
            for &v in &cell.vertices {
                let p = mesh.vertices[v];
                let _ = writeln!(s, "{} {} 0", p[0], p[1]);
            }
        }
    } else {
        let _ = writeln!(s, "POINTS {} double", mesh.vertices.len());
        for p in &mesh.vertices {
            let _ = writeln!(s, "{} {} 0", p[0], p[1]);
        }
    }
    let _ = writeln!(s, "CELLS {} {}", nc, nc * (nv + 1));
    for (k, cell) in mesh.cells.iter().enumerate() {
        s.push_str(&nv.to_string());
        for (l, &v) in cell.vertices.iter().enumerate() {
            let id = if broken { k * nv + l } else { v };
            let _ = write!(s, " {id}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "CELL_TYPES {nc}");
    for _ in 0..nc {
        let _ = writeln!(s, "{vtk_type}");
    }
    let _ = writeln!(s, "CELL_DATA {nc}");
    for (name, f) in [("phi_avg", &state.phi), ("mu_avg", &state.mu)] {
        let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for k in 0..nc {
            let _ = writeln!(s, "{}", f.cell(k)[0]);
        }
    }
    if broken {
        let _ = writeln!(s, "POINT_DATA {}", nc * nv);
        for (name, f) in [("phi", &state.phi), ("mu", &state.mu)] {
            let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
            for (k, cell) in mesh.cells.iter().enumerate() {
                for &v in &cell.vertices {
                    let xi = cell.map.to_reference(mesh.vertices[v]);
                    let _ = writeln!(s, "{}", f.evaluate(k, xi));
                }
            }
        }
    }
    s
}

pub fn write_vtk(state: &CoupledState, path: &Path) -> Result<()> {
    write_file(path, &vtk_string(state))
}

fn sci(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2e}")).unwrap_or_else(|| "---".into())
}

fn fixed(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "---".into())
}

/// Aligned plain-text table with the columns of the convergence study.
pub fn eoc_string(table: &EocTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# p = {}, A = {}", table.p, table.amplitude);
    let _ = writeln!(
        s,
        "{:>6} {:>10} {:>10} {:>6} {:>10} {:>6}",
        "N", "tau", "L2 error", "EOC", "H1 error", "EOC"
    );
    for r in &table.rows {
        let _ = write!(
            s,
            "{:>6} {:>10.3e} {:>10} {:>6} {:>10} {:>6}",
            r.n,
            r.tau,
            sci(r.l2),
            fixed(r.l2_eoc),
            sci(r.h1),
            fixed(r.h1_eoc)
        );
        if let Some(f) = &r.failure {
            let _ = write!(s, "  failed: {f}");
        }
        s.push('\n');
    }
    s
}

pub fn write_eoc(table: &EocTable, path: &Path) -> Result<()> {
    write_file(path, &eoc_string(table))
}
