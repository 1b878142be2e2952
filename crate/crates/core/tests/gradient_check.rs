mod common;

#[test]
fn parameter_and_input_gradients_match_central_differences() {
    match common::gradient_check() {
        Ok(s) => eprintln!("{s}"),
        Err(e) => panic!("{e}"),
    }
}
