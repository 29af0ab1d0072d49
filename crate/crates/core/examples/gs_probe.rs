fn main() {
    match ausep_core::gradsuite::run_gradient_suite(1e-4) {
        Ok(items) => println!("{}", ausep_core::gradsuite::format_suite(&items)),
        Err(e) => println!("suite error: {e}"),
    }
}
