//! Decoder entry points shared by the fuzz targets and the seed-corpus tests.
//!
//! Each function accepts arbitrary bytes, must never panic, and asserts the
//! round-trip properties of whatever it manages to decode.

use num_complex::Complex64;

use crate::conic::ConicProblem;
use crate::constraints::SecurityFile;
use crate::grid::{build_grid, BranchSpec, GridFile, GridModel};
use crate::report::Report;
use crate::uncertainty::UncertaintyFile;

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn grid_json(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let Ok(file) = GridFile::from_json_str(s) else { return };
    let Ok(model) = file.build() else { return };
    let again = model.to_file().build().expect("rebuilding a valid grid succeeds");
    assert_eq!(model.y(), again.y());
    assert_eq!(model.n_pq(), file.n_pq);
}

/// Three-bus feeder used to interpret security files.
fn reference_grid() -> GridModel {
    build_grid(
        &[
            BranchSpec::line(0, 1, Complex64::new(4.0, -8.0), 0.0),
            BranchSpec::line(1, 2, Complex64::new(3.0, -6.0), 0.01),
        ],
        2,
        Complex64::new(1.0, 0.0),
    )
    .expect("reference grid is valid")
}

pub fn security_json(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let Ok(file) = SecurityFile::from_json_str(s) else { return };
    let back = serde_json::to_string(&file).expect("security files serialise");
    assert_eq!(SecurityFile::from_json_str(&back).expect("re-parse"), file);
    let model = reference_grid();
    if let Ok(spec) = file.to_spec(&model) {
        assert_eq!(spec.vmin.len(), model.n_pq());
        assert_eq!(spec.imax.len(), model.branch_rows().len());
        assert!(spec.validate(&model).is_ok());
    }
    let _ = file.i_node_ref(&model);
}

pub fn uncertainty_json(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let Ok(file) = UncertaintyFile::from_json_str(s) else { return };
    let back = serde_json::to_string(&file).expect("uncertainty files serialise");
    assert_eq!(UncertaintyFile::from_json_str(&back).expect("re-parse"), file);
    let set = file.to_set();
    if set.validate(set.n_buses()).is_ok() && set.n_buses() > 0 {
        for p in set.sample(4, 0) {
            assert_eq!(p.len(), set.n_buses());
            assert!(p.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
        }
    }
    let _ = file.template().at(0.5);
}

pub fn conic_dump(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let Ok(p) = ConicProblem::from_dump(s) else { return };
    let dump = p.to_dump();
    let q = ConicProblem::from_dump(&dump).expect("emitted dumps parse");
    assert_eq!(q, p);
    assert_eq!(q.to_dump(), dump);
}

pub fn report_json(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let Ok(r) = Report::from_json_str(s) else { return };
    let out = r.to_json();
    let again = Report::from_json_str(&out).expect("emitted reports parse");
    assert_eq!(again, r);
    assert_eq!(again.to_json(), out);
}
