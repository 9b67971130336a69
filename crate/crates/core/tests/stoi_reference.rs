// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Deserialize;
use vbse_core::metrics::stoi;
use vbse_core::wav::read_mono;

#[derive(Deserialize)]
struct Expected {
    stoi: f64,
}

#[test]
fn stoi_agrees_with_reference_implementation() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/stoi");
    let text = std::fs::read_to_string(dir.join("expected.json")).unwrap();
    let expected: BTreeMap<String, Expected> = serde_json::from_str(&text).unwrap();
    assert_eq!(expected.len(), 10);
    for (name, e) in &expected {
        let clean = read_mono(&dir.join(format!("{name}_clean.wav")), 16_000).unwrap();
        let degraded = read_mono(&dir.join(format!("{name}_degraded.wav")), 16_000).unwrap();
        let ours = stoi(&clean, &degraded).unwrap();
        assert!(
            (ours - e.stoi).abs() < 0.01,
            "{name}: ours {ours}, reference {}",
            e.stoi
        );
    }
}
