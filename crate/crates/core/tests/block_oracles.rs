mod common;

use common::block_cases::compare;

#[test]
fn blocks_match_loop_oracle_on_random_dim4_instances() {
    let e = compare(20);
    assert!(e.mmdit <= 1e-6, "joint block deviates by {}", e.mmdit);
    assert!(e.adapter <= 1e-6, "adapter block deviates by {}", e.adapter);
    assert!(e.inject <= 1e-6, "injection deviates by {}", e.inject);
    assert!(e.dit <= 1e-6, "one-way block deviates by {}", e.dit);
}
