mod support {
    pub mod prompt_cases;
}

use proptest::prelude::*;
use support::prompt_cases::{check_case, compose_case};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn accepted_prompts_respect_budget_and_order(case in compose_case()) {
        check_case(&case)?;
    }
}
