mod common;

use common::{network_case, primitive_case, FD_TOLERANCE, NETWORKS, PRIMITIVES};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn primitives_match_central_differences(seed in any::<u64>()) {
        for name in PRIMITIVES {
            let err = primitive_case(name, seed).max_error();
            prop_assert!(err <= FD_TOLERANCE, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn networks_match_central_differences(seed in any::<u64>()) {
        for name in NETWORKS {
            let err = network_case(name, seed).max_error();
            prop_assert!(err <= FD_TOLERANCE, "{name}: relative error {err:e}");
        }
    }
}
