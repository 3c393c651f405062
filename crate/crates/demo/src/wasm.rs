//! wasm-bindgen exports; thin shims over the JSON front doors.

use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub fn compare_methods(input: &str) -> String {
    crate::compare_methods_json(input)
}

#[wasm_bindgen]
pub fn sweep_topk(input: &str) -> String {
    crate::sweep_topk_json(input)
}

#[wasm_bindgen]
pub fn search_combinations(input: &str) -> String {
    crate::search_combinations_json(input)
}
