//! Central finite-difference checks of every learnable tensor at toy sizes.

mod common;

use common::assert_grads;
use common::gradcheck;

#[test]
fn uscaling_adapter() {
    assert_grads("adapter", &gradcheck::adapter());
}

#[test]
fn lora_pair() {
    let errs = gradcheck::lora();
    assert_eq!(errs.len(), 2);
    assert_grads("lora", &errs);
}

#[test]
fn cross_attention_and_stage_head() {
    assert_grads("cross attention", &gradcheck::cross_attention());
}

#[test]
fn encoder_lora_cross_and_heads() {
    assert_grads("encoder", &gradcheck::encoder());
}

#[test]
fn prompt_soft_path() {
    assert_grads("prompt", &gradcheck::prompt());
}

#[test]
fn consistency_decoder() {
    assert_grads("decoder", &gradcheck::decoder());
}

#[test]
fn losses_with_respect_to_predictions() {
    assert_grads("losses", &gradcheck::losses());
}
