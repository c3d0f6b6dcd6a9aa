use pyo3::prelude::*;
use pyo3::types::PyDict;
use cnp::cnp as cnp_module;

const SMOKE: &str = include_str!("../../../python/smoke_test.py");

#[test]
fn python_smoke_script_runs() {
    pyo3::append_to_inittab!(cnp_module);
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("__name__", "smoke").unwrap();
        let code = std::ffi::CString::new(SMOKE).unwrap();
        py.run(&code, Some(&globals), None).unwrap();
        let main = globals.get_item("main").unwrap().unwrap();
        if let Err(e) = main.call1((vec!["smoke_test.py"],)) {
            e.display(py);
            panic!("smoke script failed");
        }
    });
}
