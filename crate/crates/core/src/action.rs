//! Ventilator action space: three settings (tidal volume, PEEP, FiO2), each
//! discretised into seven levels, giving 343 joint actions.
//!
//! Raw settings are binned with right-open intervals, so a value sitting on a
//! listed boundary belongs to the upper bin. Consecutive actions are also
//! summarised as a [`ChangeClass`]: per setting, whether it went down, stayed,
//! or went up. The first action of a stay has no predecessor and gets the
//! distinguished [`ChangeClass::Initial`].

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{DacError, Result};

/// Levels per ventilator setting.
pub const LEVELS: u8 = 7;
/// Size of the joint action space (7 x 7 x 7).
pub const NUM_ACTIONS: usize = 343;
/// Number of non-initial change classes (3 x 3 x 3).
pub const NUM_CHANGE_CLASSES: usize = 27;

/// Lower bin edges (levels 2..=7) for tidal volume in mL/kg.
const VT_EDGES: [f64; 6] = [2.5, 5.0, 7.5, 10.0, 12.5, 15.0];
/// Lower bin edges (levels 2..=7) for PEEP in cmH2O.
const PEEP_EDGES: [f64; 6] = [5.0, 7.0, 9.0, 11.0, 13.0, 15.0];
/// Lower bin edges (levels 2..=7) for FiO2 in percent. Anything under 30%
/// (including room air) lands in level 1.
const FIO2_EDGES: [f64; 6] = [30.0, 35.0, 40.0, 45.0, 50.0, 55.0];

/// One of the three ventilator settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    TidalVolume,
    Peep,
    Fio2,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::TidalVolume, Setting::Peep, Setting::Fio2];

    pub fn name(self) -> &'static str {
        match self {
            Setting::TidalVolume => "vt",
            Setting::Peep => "peep",
            Setting::Fio2 => "fio2",
        }
    }

    fn edges(self) -> &'static [f64; 6] {
        match self {
            Setting::TidalVolume => &VT_EDGES,
            Setting::Peep => &PEEP_EDGES,
            Setting::Fio2 => &FIO2_EDGES,
        }
    }

    /// Level (1..=7) for a raw value of this setting.
    pub fn level_of(self, raw: f64) -> Result<u8> {
        if !raw.is_finite() || raw < 0.0 {
            return Err(DacError::validation(format!(
                "{} must be finite and non-negative, got {raw}",
                self.name()
            )));
        }
        let above = self.edges().iter().filter(|&&edge| raw >= edge).count();
        Ok(1 + above as u8)
    }
}

/// A discretised ventilator setting `(vt, peep, fio2)`, each level in `1..=7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionTriple {
    levels: [u8; 3],
}

impl ActionTriple {
    pub fn new(vt: u8, peep: u8, fio2: u8) -> Result<Self> {
        for (setting, level) in Setting::ALL.iter().zip([vt, peep, fio2]) {
            if !(1..=LEVELS).contains(&level) {
                return Err(DacError::validation(format!(
                    "{} level must be in 1..=7, got {level}",
                    setting.name()
                )));
            }
        }
        Ok(Self {
            levels: [vt, peep, fio2],
        })
    }

    /// Bin raw ventilator settings into an action.
    pub fn discretize(vt_ml_per_kg: f64, peep_cmh2o: f64, fio2_percent: f64) -> Result<Self> {
        Ok(Self {
            levels: [
                Setting::TidalVolume.level_of(vt_ml_per_kg)?,
                Setting::Peep.level_of(peep_cmh2o)?,
                Setting::Fio2.level_of(fio2_percent)?,
            ],
        })
    }

    pub fn levels(&self) -> [u8; 3] {
        self.levels
    }

    pub fn level(&self, setting: Setting) -> u8 {
        match setting {
            Setting::TidalVolume => self.levels[0],
            Setting::Peep => self.levels[1],
            Setting::Fio2 => self.levels[2],
        }
    }

    /// Row-major index with tidal volume as the slowest axis.
    pub fn flat_index(&self) -> usize {
        let [vt, peep, fio2] = self.levels.map(|l| (l - 1) as usize);
        vt * 49 + peep * 7 + fio2
    }

    pub fn from_flat_index(index: usize) -> Result<Self> {
        if index >= NUM_ACTIONS {
            return Err(DacError::validation(format!(
                "action index {index} outside 0..{NUM_ACTIONS}"
            )));
        }
        Ok(Self::from_index_unchecked(index))
    }

    pub(crate) fn from_index_unchecked(index: usize) -> Self {
        Self {
            levels: [
                (index / 49) as u8 + 1,
                ((index / 7) % 7) as u8 + 1,
                (index % 7) as u8 + 1,
            ],
        }
    }

    /// All 343 actions in flat-index order.
    pub fn all() -> impl Iterator<Item = ActionTriple> {
        (0..NUM_ACTIONS).map(Self::from_index_unchecked)
    }
}

impl Serialize for ActionTriple {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.levels.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ActionTriple {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let [vt, peep, fio2] = <[u8; 3]>::deserialize(deserializer)?;
        ActionTriple::new(vt, peep, fio2).map_err(serde::de::Error::custom)
    }
}

impl std::fmt::Display for ActionTriple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [vt, peep, fio2] = self.levels;
        write!(f, "({vt},{peep},{fio2})")
    }
}

/// Direction of change of a single setting between consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Delta {
    Decrease,
    Keep,
    Increase,
}

impl Delta {
    fn code(self) -> usize {
        match self {
            Delta::Decrease => 0,
            Delta::Keep => 1,
            Delta::Increase => 2,
        }
    }

    fn from_code(code: usize) -> Self {
        match code {
            0 => Delta::Decrease,
            1 => Delta::Keep,
            _ => Delta::Increase,
        }
    }
}

/// Per-setting change between two consecutive actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChangeClass {
    /// First step of a trajectory; contributes a factor of one to IPTW products.
    Initial,
    Change([Delta; 3]),
}

impl ChangeClass {
    /// Change from `prev` to `cur`; `None` marks the first step.
    pub fn between(prev: Option<ActionTriple>, cur: ActionTriple) -> Self {
        let Some(prev) = prev else {
            return ChangeClass::Initial;
        };
        let mut deltas = [Delta::Keep; 3];
        for (d, (p, c)) in deltas.iter_mut().zip(prev.levels.iter().zip(cur.levels)) {
            *d = match c.cmp(p) {
                std::cmp::Ordering::Less => Delta::Decrease,
                std::cmp::Ordering::Equal => Delta::Keep,
                std::cmp::Ordering::Greater => Delta::Increase,
            };
        }
        ChangeClass::Change(deltas)
    }

    /// Index in `0..27` for non-initial classes, `27` for [`ChangeClass::Initial`].
    pub fn index(&self) -> usize {
        match self {
            ChangeClass::Initial => NUM_CHANGE_CLASSES,
            ChangeClass::Change(d) => d[0].code() * 9 + d[1].code() * 3 + d[2].code(),
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            i if i < NUM_CHANGE_CLASSES => Ok(ChangeClass::Change([
                Delta::from_code(i / 9),
                Delta::from_code((i / 3) % 3),
                Delta::from_code(i % 3),
            ])),
            NUM_CHANGE_CLASSES => Ok(ChangeClass::Initial),
            _ => Err(DacError::validation(format!("change class index {index} out of range"))),
        }
    }

    pub fn is_initial(&self) -> bool {
        matches!(self, ChangeClass::Initial)
    }
}

/// Lookup table `class_of[prev][cur]` of change-class indices for all action pairs.
///
/// Used to marginalise a distribution over the 343 actions into the 27 change
/// classes relative to a known previous action.
pub struct ChangeTable {
    class_of: Vec<[u8; NUM_ACTIONS]>,
}

impl ChangeTable {
    pub fn new() -> Self {
        let class_of = ActionTriple::all()
            .map(|prev| {
                let mut row = [0u8; NUM_ACTIONS];
                for cur in ActionTriple::all() {
                    row[cur.flat_index()] = ChangeClass::between(Some(prev), cur).index() as u8;
                }
                row
            })
            .collect();
        Self { class_of }
    }

    pub fn class_index(&self, prev: usize, cur: usize) -> usize {
        self.class_of[prev][cur] as usize
    }

    /// Sum action probabilities into change-class probabilities relative to `prev`.
    pub fn marginalize(&self, prev: usize, action_probs: &[f64]) -> [f64; NUM_CHANGE_CLASSES] {
        let mut out = [0.0; NUM_CHANGE_CLASSES];
        for (cur, p) in action_probs.iter().enumerate() {
            out[self.class_of[prev][cur] as usize] += p;
        }
        out
    }
}

impl Default for ChangeTable {
    fn default() -> Self {
        Self::new()
    }
}
