use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TASK_LABELS: usize = 25;
pub const AUX_LABELS: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelGroup {
    Acute,
    Mixed,
    Chronic,
}

impl LabelGroup {
    pub const ALL: [LabelGroup; 3] = [LabelGroup::Acute, LabelGroup::Mixed, LabelGroup::Chronic];

    /// Required number of task labels in each group.
    pub fn required_count(self) -> usize {
        match self {
            LabelGroup::Acute => 12,
            LabelGroup::Mixed => 5,
            LabelGroup::Chronic => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelGroup::Acute => "acute",
            LabelGroup::Mixed => "mixed",
            LabelGroup::Chronic => "chronic",
        }
    }
}

impl fmt::Display for LabelGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acute" => Ok(LabelGroup::Acute),
            "mixed" => Ok(LabelGroup::Mixed),
            "chronic" => Ok(LabelGroup::Chronic),
            other => Err(Error::Config(format!(
                "unknown label group {other:?}; expected acute, mixed or chronic"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLabel {
    pub name: String,
    pub group: LabelGroup,
}

/// The 25 phenotype task labels with their groups and the 14 radiology labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub task: Vec<TaskLabel>,
    pub aux: Vec<String>,
}

const PHENOTYPES: [(&str, LabelGroup); TASK_LABELS] = [
    ("Acute and unspecified renal failure", LabelGroup::Acute),
    ("Acute cerebrovascular disease", LabelGroup::Acute),
    ("Acute myocardial infarction", LabelGroup::Acute),
    ("Cardiac dysrhythmias", LabelGroup::Mixed),
    ("Chronic kidney disease", LabelGroup::Chronic),
    ("Chronic obstructive pulmonary disease", LabelGroup::Chronic),
    ("Complications of surgical procedures or medical care", LabelGroup::Mixed),
    ("Conduction disorders", LabelGroup::Mixed),
    ("Congestive heart failure; nonhypertensive", LabelGroup::Mixed),
    ("Coronary atherosclerosis and other heart disease", LabelGroup::Chronic),
    ("Diabetes mellitus with complications", LabelGroup::Chronic),
    ("Diabetes mellitus without complication", LabelGroup::Chronic),
    ("Disorders of lipid metabolism", LabelGroup::Chronic),
    ("Essential hypertension", LabelGroup::Chronic),
    ("Fluid and electrolyte disorders", LabelGroup::Acute),
    ("Gastrointestinal hemorrhage", LabelGroup::Acute),
    ("Hypertension with complications", LabelGroup::Chronic),
    ("Other liver diseases", LabelGroup::Mixed),
    ("Other lower respiratory disease", LabelGroup::Acute),
    ("Other upper respiratory disease", LabelGroup::Acute),
    ("Pleurisy; pneumothorax; pulmonary collapse", LabelGroup::Acute),
    ("Pneumonia", LabelGroup::Acute),
    ("Respiratory failure; insufficiency; arrest", LabelGroup::Acute),
    ("Septicemia (except in labor)", LabelGroup::Acute),
    ("Shock", LabelGroup::Acute),
];

const RADIOLOGY: [&str; AUX_LABELS] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
];

impl Default for LabelSpace {
    fn default() -> Self {
        Self::phenotyping()
    }
}

impl LabelSpace {
    pub fn phenotyping() -> Self {
        Self {
            task: PHENOTYPES
                .iter()
                .map(|(name, group)| TaskLabel {
                    name: name.to_string(),
                    group: *group,
                })
                .collect(),
            aux: RADIOLOGY.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Default names with a group assignment read from a data file.
    pub fn with_groups(groups: &[LabelGroup]) -> Result<Self> {
        let mut space = Self::phenotyping();
        if groups.len() != space.task.len() {
            return Err(Error::Config(format!(
                "label group map has {} entries, expected {}",
                groups.len(),
                TASK_LABELS
            )));
        }
        for (label, &g) in space.task.iter_mut().zip(groups) {
            label.group = g;
        }
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.len() != TASK_LABELS {
            return Err(Error::Config(format!("{} task labels, expected {}", self.task.len(), TASK_LABELS)));
        }
        if self.aux.len() != AUX_LABELS {
            return Err(Error::Config(format!("{} auxiliary labels, expected {}", self.aux.len(), AUX_LABELS)));
        }
        for g in LabelGroup::ALL {
            let n = self.task.iter().filter(|l| l.group == g).count();
            if n != g.required_count() {
                return Err(Error::Config(format!(
                    "group {g} has {n} labels, expected {}",
                    g.required_count()
                )));
            }
        }
        let mut seen = HashSet::new();
        if !self.task.iter().all(|l| seen.insert(l.name.as_str())) {
            return Err(Error::Config("duplicate task label name".into()));
        }
        let mut seen = HashSet::new();
        if !self.aux.iter().all(|l| seen.insert(l.as_str())) {
            return Err(Error::Config("duplicate auxiliary label name".into()));
        }
        Ok(())
    }

    pub fn groups(&self) -> Vec<LabelGroup> {
        self.task.iter().map(|l| l.group).collect()
    }

    pub fn indices_in(&self, group: LabelGroup) -> Vec<usize> {
        (0..self.task.len()).filter(|&i| self.task[i].group == group).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_space_satisfies_its_invariants() {
        let space = LabelSpace::phenotyping();
        space.validate().unwrap();
        assert_eq!(space.indices_in(LabelGroup::Acute).len(), 12);
        assert_eq!(space.indices_in(LabelGroup::Mixed).len(), 5);
        assert_eq!(space.indices_in(LabelGroup::Chronic).len(), 8);
    }

    #[test]
    fn wrong_group_counts_are_rejected() {
        let groups = vec![LabelGroup::Acute; TASK_LABELS];
        assert!(LabelSpace::with_groups(&groups).is_err());
    }

    #[test]
    fn group_names_parse() {
        assert_eq!("mixed".parse::<LabelGroup>().unwrap(), LabelGroup::Mixed);
        assert!("other".parse::<LabelGroup>().is_err());
    }
}
