use std::sync::Arc;

use chdg_core::diagnostics::DiagnosticsRow;
use chdg_core::fields::{CoupledState, DiscreteField};
use chdg_core::mesh::{build_quad_mesh, build_tri_mesh, Rect};
use chdg_core::output::{eoc_string, read_csv, vtk_string, write_csv, CSV_HEADER};
use chdg_core::scenarios::{EocRow, EocTable};
use chdg_core::space::DgSpace;

fn section<'a>(text: &'a str, key: &str) -> Vec<&'a str> {
    let mut lines = text.lines().skip_while(|l| !l.starts_with(key));
    let head = lines.next().unwrap();
    let count: usize = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let skip = usize::from(key == "SCALARS");
    lines.skip(skip).take(count).collect()
}

#[test]
fn vtk_single_quad_p1() {
    let mesh = build_quad_mesh(1, 1, Rect::new(0.0, 2.0, 0.0, 1.0)).unwrap();
    let s = DgSpace::new(Arc::new(mesh), 1).unwrap();
    // phi = 0.5 + 0.25 * P1(x) in reference coordinates: linear in x.
    let phi = DiscreteField::from_coeffs(&s, vec![0.5, 0.25, 0.0, 0.0]).unwrap();
    let mu = DiscreteField::constant(&s, -2.0);
    let st = CoupledState::new(phi.clone(), mu, 0.5, 3).unwrap();
    let text = vtk_string(&st);
    assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
    assert!(text.contains("ASCII\nDATASET UNSTRUCTURED_GRID\n"));
    assert_eq!(section(&text, "POINTS").len(), 4);
    assert!(text.contains("CELLS 1 5\n4 0 1 2 3\n"));
    assert!(text.contains("CELL_TYPES 1\n9\n"));
    assert!(text.contains("CELL_DATA 1\nSCALARS phi_avg double 1\nLOOKUP_TABLE default\n0.5\n"));
    assert!(text.contains("SCALARS mu_avg double 1\nLOOKUP_TABLE default\n-2\n"));
    assert!(text.contains("POINT_DATA 4\n"));
    // Corner values in the order of the points.
    let pts = section(&text, "POINTS");
    let start = text.find("SCALARS phi double").unwrap();
    let vals: Vec<f64> = text[start..].lines().skip(2).take(4).map(|l| l.parse().unwrap()).collect();
    for (p, v) in pts.iter().zip(vals) {
        let xy: Vec<f64> = p.split_whitespace().map(|t| t.parse().unwrap()).collect();
        let k = 0;
        let xi = s.mesh.cells[k].map.to_reference([xy[0], xy[1]]);
        assert!((phi.evaluate(k, xi) - v).abs() < 1e-15);
        assert!((v - 0.5).abs() > 0.1);
    }
}

#[test]
fn vtk_triangles_p0_share_vertices() {
    let mesh = build_tri_mesh(2, 2, Rect::unit()).unwrap();
    let nv = mesh.vertices.len();
    let nc = mesh.num_cells();
    let s = DgSpace::new(Arc::new(mesh), 0).unwrap();
    let st = CoupledState::new(DiscreteField::constant(&s, 0.25), DiscreteField::zeros(&s), 0.0, 0).unwrap();
    let text = vtk_string(&st);
    assert_eq!(section(&text, "POINTS").len(), nv);
    assert_eq!(section(&text, "CELL_TYPES").iter().filter(|l| **l == "5").count(), nc);
    assert!(!text.contains("POINT_DATA"));
}

#[test]
fn csv_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/diagnostics.csv");
    let rows: Vec<DiagnosticsRow> = (0..5)
        .map(|i| DiagnosticsRow {
            step: i,
            time: i as f64 * 1e-4,
            energy: 20.0 / (1.0 + i as f64),
            mass: 0.3 - 1e-17 * i as f64,
            min_sample: -0.1 * i as f64,
            max_sample: 1.0,
            min_avg: -1.0 + 1e-15,
            max_avg: 0.999999999999,
            newton_iters: 3 + i,
            residual: 2.2e-14 * i as f64,
            violation: 0.0,
        })
        .collect();
    write_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(read_csv(&path).unwrap(), rows);
}

#[test]
fn eoc_table_is_aligned() {
    let table = EocTable {
        p: 1,
        amplitude: 0.99,
        rows: vec![
            EocRow {
                n: 40,
                tau: 1e-4,
                steps: 1,
                l2: Some(3.448e-3),
                l2_eoc: None,
                h1: Some(0.797),
                h1_eoc: None,
                failure: None,
            },
            EocRow {
                n: 80,
                tau: 5e-5,
                steps: 2,
                l2: Some(8.889e-4),
                l2_eoc: Some(1.956),
                h1: Some(0.3988),
                h1_eoc: Some(0.999),
                failure: None,
            },
        ],
    };
    let text = eoc_string(&table);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].contains("L2 error") && lines[1].contains("H1 error"));
    assert!(lines[2..].iter().all(|l| l.len() == lines[1].len()));
    assert!(lines[3].contains("1.96") && lines[3].contains("1.00"));
    assert!(lines[2].contains("---"));
}
