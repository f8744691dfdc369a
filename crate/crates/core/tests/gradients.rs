mod common;

use common::grad_suite::{gabor_cases, model_case, msa_cases, tensor_cases, Case, MODEL_TOL, OP_TOL};

fn assert_cases(cases: &[Case], tol: f64) {
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !(c.report.max_rel_err < tol))
        .map(|c| format!("{}: rel {:.3e} at {:?}", c.name, c.report.max_rel_err, c.report.worst))
        .collect();
    assert!(failed.is_empty(), "{}", failed.join("\n"));
    assert!(cases.iter().all(|c| c.report.checked > 0));
}

#[test]
fn tensor_ops_match_central_differences() {
    assert_cases(&tensor_cases(), OP_TOL);
}

#[test]
fn gabor_parameters_match_central_differences() {
    assert_cases(&gabor_cases(), OP_TOL);
}

#[test]
fn attention_weights_match_central_differences() {
    assert_cases(&msa_cases(), OP_TOL);
}

#[test]
fn full_model_matches_central_differences() {
    assert_cases(&[model_case()], MODEL_TOL);
}
