// SPDX-License-Identifier: Apache-2.0

use std::time::Instant;

use fusepath::model::gradsuite::{composite, composite_cases, COMPOSITES};

#[test]
fn every_composite_block_matches_finite_differences() {
    let start = Instant::now();
    let cases = composite_cases(5);
    assert_eq!(cases.len(), COMPOSITES.len() * 5);
    for c in &cases {
        let r = c.check().unwrap();
        assert!(r.passed(), "{}: {r:?}", c.name);
        assert!(r.checked > 0, "{}", c.name);
    }
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
}

#[test]
fn unknown_composite_has_no_case() {
    assert!(composite("nope", 0).is_none());
}
