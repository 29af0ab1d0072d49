use pyo3::prelude::*;

#[pymodule]
fn ausep_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
