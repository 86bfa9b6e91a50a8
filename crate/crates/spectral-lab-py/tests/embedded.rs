//! Drives the module through an embedded interpreter, as Python code would.

use std::ffi::CString;
use std::path::PathBuf;

use pyo3::prelude::*;
use spectral_lab_py::spectral_lab_module;

const SCRIPT: &str = r#"
import math
import spectral_lab as sl

free = sl.Model(sl.Potential.free(), 20.0, steps=1)
phi = max(free.first_step_angles(), key=lambda ab: ab[1] - ab[0])
phi = 0.5 * (phi[0] + phi[1])
assert abs(free.solve_kappa(1, phi) - 20.0) < 1e-12

pot = sl.Potential.from_path(CONFIGS + "/default_potential.toml")
assert pot.max_scale == 3 and pot.norm(1, 1) > pot.norm(2, 3)
model = sl.Model(pot, 20.0, steps=2, params={"r_max": 6})
assert model.params()["r_max"] == 6 and model.scale_cuts == [1, 2]

try:
    sl.Model(pot, 20.0, steps=9)
except sl.LabError as err:
    assert err.args[1] == 2
else:
    raise AssertionError("steps out of range accepted")
"#;

#[test]
fn module_works_in_embedded_interpreter() {
    pyo3::append_to_inittab!(spectral_lab_module);
    Python::initialize();
    let configs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    Python::attach(|py| {
        let globals = pyo3::types::PyDict::new(py);
        globals
            .set_item("CONFIGS", configs.to_str().unwrap())
            .unwrap();
        let code = CString::new(SCRIPT).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.display(py);
            panic!("script failed: {e}");
        }
    });
}
