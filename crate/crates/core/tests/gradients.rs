mod common;

use common::{gradient_cases, run_case};

fn check(name: &str) {
    let case = gradient_cases()
        .into_iter()
        .find(|c| c.name == name)
        .unwrap();
    if let Err(e) = run_case(&case) {
        panic!("{name}: {e}");
    }
}

#[test]
fn gru_cell_gradients() {
    check("gru cell");
}

#[test]
fn cgru_step_gradients() {
    check("conditional gru step");
}

#[test]
fn visual_attention_gradients() {
    check("visual-text attention");
}

#[test]
fn projection_gradients() {
    check("shared-space projections");
}

#[test]
fn ranking_loss_gradients() {
    check("ranking loss");
}

#[test]
fn output_layer_gradients() {
    check("output layer");
}

#[test]
fn decoder_init_gradients() {
    check("decoder initialization");
}

#[test]
fn sequence_loss_gradients() {
    check("teacher-forced sequence loss");
}

#[test]
fn encoder_gradients() {
    check("bidirectional encoder");
}

#[test]
fn joint_objective_gradients() {
    check("joint objective");
}
