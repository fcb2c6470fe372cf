//! Organ table: label ids, names, minimum training volumes and left/right pairs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patient side of a lateralized organ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub label: u8,
    pub name: String,
    #[serde(default)]
    pub min_volume_mm3: f64,
    #[serde(default)]
    pub lr_partner: Option<u8>,
    /// Required when `lr_partner` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
}

impl OrganSpec {
    pub fn new(label: u8, name: impl Into<String>, min_volume_mm3: f64) -> Self {
        OrganSpec {
            label,
            name: name.into(),
            min_volume_mm3,
            lr_partner: None,
            side: None,
        }
    }

    fn paired(mut self, partner: u8, side: Side) -> Self {
        self.lr_partner = Some(partner);
        self.side = Some(side);
        self
    }
}

/// A left/right organ pair in (left, right) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LrPair {
    pub left: u8,
    pub right: u8,
}

impl LrPair {
    pub fn contains(&self, label: u8) -> bool {
        self.left == label || self.right == label
    }

    /// Smaller of the two label ids; orders pair processing.
    pub fn first_label(&self) -> u8 {
        self.left.min(self.right)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganTable {
    pub organs: Vec<OrganSpec>,
}

impl OrganTable {
    pub fn new(organs: Vec<OrganSpec>) -> Result<Self> {
        let table = OrganTable { organs };
        table.validate()?;
        Ok(table)
    }

    /// AMOS label map in the conventional order, with the minimum organ
    /// volumes (mm³) observed on the challenge training set.
    pub fn amos() -> Self {
        let organs = vec![
            OrganSpec::new(1, "Spleen", 14514.5),
            OrganSpec::new(2, "R. Kidney", 32323.3).paired(3, Side::Right),
            OrganSpec::new(3, "L. Kidney", 10084.4).paired(2, Side::Left),
            OrganSpec::new(4, "Gall Bladder", 1242.1),
            OrganSpec::new(5, "Esophagus", 418.9),
            OrganSpec::new(6, "Liver", 653406.2),
            OrganSpec::new(7, "Stomach", 30.6),
            OrganSpec::new(8, "Aorta", 26481.4),
            OrganSpec::new(9, "Postcava", 31401.8),
            OrganSpec::new(10, "Pancreas", 15213.3),
            OrganSpec::new(11, "R. Adrenal Gland", 1076.1).paired(12, Side::Right),
            OrganSpec::new(12, "L. Adrenal Gland", 663.7).paired(11, Side::Left),
            OrganSpec::new(13, "Duodenum", 19244.0),
            OrganSpec::new(14, "Bladder", 14665.4),
            OrganSpec::new(15, "Prostate/Uterus", 7937.5),
        ];
        OrganTable { organs }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for o in &self.organs {
            if o.label == 0 {
                return Err(Error::InvalidConfig(format!(
                    "organ '{}' uses the background label 0",
                    o.name
                )));
            }
            if !seen.insert(o.label) {
                return Err(Error::InvalidConfig(format!("duplicate organ label {}", o.label)));
            }
            if !(o.min_volume_mm3.is_finite() && o.min_volume_mm3 >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "organ {} has invalid minimum volume {}",
                    o.label, o.min_volume_mm3
                )));
            }
        }
        for o in &self.organs {
            let Some(p) = o.lr_partner else { continue };
            let partner = self.get(p).ok_or_else(|| {
                Error::InvalidConfig(format!("organ {} names unknown partner {p}", o.label))
            })?;
            if partner.lr_partner != Some(o.label) || p == o.label {
                return Err(Error::InvalidConfig(format!(
                    "left/right partnership {} <-> {p} is not symmetric",
                    o.label
                )));
            }
            match (o.side, partner.side) {
                (Some(a), Some(b)) if a == b.opposite() => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "paired organs {} and {p} need opposite sides",
                        o.label
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, label: u8) -> Option<&OrganSpec> {
        self.organs.iter().find(|o| o.label == label)
    }

    pub fn labels(&self) -> Vec<u8> {
        let mut l: Vec<u8> = self.organs.iter().map(|o| o.label).collect();
        l.sort_unstable();
        l
    }

    pub fn max_label(&self) -> u8 {
        self.organs.iter().map(|o| o.label).max().unwrap_or(0)
    }

    /// The left/right pair an organ belongs to, if any.
    pub fn pair_of(&self, label: u8) -> Option<LrPair> {
        let o = self.get(label)?;
        let partner = o.lr_partner?;
        match o.side? {
            Side::Left => Some(LrPair { left: label, right: partner }),
            Side::Right => Some(LrPair { left: partner, right: label }),
        }
    }

    /// All pairs, ordered by their smallest label id.
    pub fn pairs(&self) -> Vec<LrPair> {
        let mut pairs: Vec<LrPair> = self
            .organs
            .iter()
            .filter_map(|o| self.pair_of(o.label))
            .collect();
        pairs.sort_by_key(|p| (p.first_label(), p.left, p.right));
        pairs.dedup();
        pairs
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: OrganTable = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }
}
