use serde::{Deserialize, Serialize};
use trinity_core::fusion::AblationFlags;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub name: String,
    #[serde(default)]
    pub flags: AblationFlags,
}

/// Named configurations trained with a shared seed, in report order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AblationPlan {
    pub entries: Vec<AblationEntry>,
}

impl Default for AblationPlan {
    /// `full`, `freq_ablated`, `caption_ablated`, `caption_generated`.
    fn default() -> Self {
        let entry = |name: &str, flags| AblationEntry {
            name: name.into(),
            flags,
        };
        Self {
            entries: vec![
                entry("full", AblationFlags::default()),
                entry(
                    "freq_ablated",
                    AblationFlags {
                        disable_frequency: true,
                        ..Default::default()
                    },
                ),
                entry(
                    "caption_ablated",
                    AblationFlags {
                        disable_caption: true,
                        ..Default::default()
                    },
                ),
                entry(
                    "caption_generated",
                    AblationFlags {
                        caption_generated: true,
                        ..Default::default()
                    },
                ),
            ],
        }
    }
}

impl AblationPlan {
    pub fn validate(&self) -> CliResult<()> {
        if self.entries.is_empty() {
            return Err(CliError::Usage("ablation plan is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.name.is_empty() || !seen.insert(e.name.as_str()) {
                return Err(CliError::Usage(format!("ablation names must be unique and non-empty: `{}`", e.name)));
            }
            e.flags.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_has_four_unique_rows() {
        let plan = AblationPlan::default();
        plan.validate().unwrap();
        let names: Vec<&str> = plan.entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["full", "freq_ablated", "caption_ablated", "caption_generated"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut plan = AblationPlan::default();
        plan.entries[1].name = "full".into();
        assert!(matches!(plan.validate(), Err(CliError::Usage(_))));
    }

    #[test]
    fn parses_from_json_list() {
        let plan: AblationPlan =
            serde_json::from_str(r#"[{"name":"full"},{"name":"nofreq","flags":{"disable_frequency":true}}]"#).unwrap();
        assert!(plan.entries[1].flags.disable_frequency);
        plan.validate().unwrap();
    }
}
