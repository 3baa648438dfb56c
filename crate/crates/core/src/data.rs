//! Reference data compiled into the crate.

use crate::rules::RuleSet;
use crate::umi::Umi;

pub const UMI_JSON: &str = include_str!("../data/umi.json");
pub const RULES_JSON: &str = include_str!("../data/rules.json");
pub const RESOLVE_FEWSHOT_JSON: &str = include_str!("../data/resolve_fewshot.json");

pub fn reference_umi() -> Umi {
    Umi::from_json_str(UMI_JSON).expect("bundled index is valid")
}

pub fn reference_rules(umi: &Umi) -> RuleSet {
    RuleSet::from_json_str(RULES_JSON, umi).expect("bundled rules are valid")
}
