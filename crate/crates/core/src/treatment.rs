//! Guidance plans: a route-guide switch plus which two of the six exit doors
//! are fully open.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const DOOR_COUNT: usize = 6;
pub const TREATMENT_DIM: usize = 1 + DOOR_COUNT;
pub const TREATMENT_COUNT: usize = 30;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreatmentError {
    #[error("exactly two doors must be fully open, got {0}")]
    DoorCount(usize),
    #[error("door ids must be distinct values in 1..=6, got ({0}, {1})")]
    DoorIds(u8, u8),
    #[error("treatment string must be 7 characters of '0'/'1', got {0:?}")]
    Malformed(String),
    #[error("treatment index {0} out of range")]
    Index(usize),
}

/// One guidance plan. Encodes to `z ∈ {0,1}^7`, route guide first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Treatment {
    route_guide: bool,
    doors: [bool; DOOR_COUNT],
}

impl Treatment {
    pub fn new(route_guide: bool, doors: [bool; DOOR_COUNT]) -> Result<Self, TreatmentError> {
        let open = doors.iter().filter(|&&d| d).count();
        if open != 2 {
            return Err(TreatmentError::DoorCount(open));
        }
        Ok(Self { route_guide, doors })
    }

    /// Plan with doors `a` and `b` (1-based ids) fully open.
    pub fn with_doors(route_guide: bool, a: u8, b: u8) -> Result<Self, TreatmentError> {
        if a == b || !(1..=6).contains(&a) || !(1..=6).contains(&b) {
            return Err(TreatmentError::DoorIds(a, b));
        }
        let mut doors = [false; DOOR_COUNT];
        doors[a as usize - 1] = true;
        doors[b as usize - 1] = true;
        Self::new(route_guide, doors)
    }

    pub fn route_guide(&self) -> bool {
        self.route_guide
    }

    pub fn doors(&self) -> [bool; DOOR_COUNT] {
        self.doors
    }

    pub fn door_fully_open(&self, exit_id: u8) -> bool {
        self.doors[exit_id as usize - 1]
    }

    /// The two fully open door ids, ascending.
    pub fn open_pair(&self) -> (u8, u8) {
        let mut ids = (1..=DOOR_COUNT as u8).filter(|&id| self.door_fully_open(id));
        (ids.next().expect("two doors"), ids.next().expect("two doors"))
    }

    pub fn to_vector(&self) -> [f64; TREATMENT_DIM] {
        let mut z = [0.0; TREATMENT_DIM];
        z[0] = f64::from(u8::from(self.route_guide));
        for (slot, &d) in z[1..].iter_mut().zip(&self.doors) {
            *slot = f64::from(u8::from(d));
        }
        z
    }

    pub fn to_bits(&self) -> [u8; TREATMENT_DIM] {
        self.to_vector().map(|v| v as u8)
    }

    /// Position in [`enumerate_treatments`] order.
    pub fn index(&self) -> usize {
        let (a, b) = self.open_pair();
        let pair = pair_ordinal(a as usize - 1, b as usize - 1);
        usize::from(self.route_guide) * 15 + pair
    }

    pub fn from_index(index: usize) -> Result<Self, TreatmentError> {
        ALL.get(index).copied().ok_or(TreatmentError::Index(index))
    }
}

/// Lexicographic ordinal of the unordered pair `a < b` among pairs of 6 doors.
fn pair_ordinal(a: usize, b: usize) -> usize {
    (0..a).map(|i| DOOR_COUNT - 1 - i).sum::<usize>() + (b - a - 1)
}

const fn build_all() -> [Treatment; TREATMENT_COUNT] {
    let mut out = [Treatment { route_guide: false, doors: [false; DOOR_COUNT] }; TREATMENT_COUNT];
    let mut k = 0;
    let mut g = 0;
    while g < 2 {
        let mut a = 0;
        while a < DOOR_COUNT {
            let mut b = a + 1;
            while b < DOOR_COUNT {
                let mut doors = [false; DOOR_COUNT];
                doors[a] = true;
                doors[b] = true;
                out[k] = Treatment { route_guide: g == 1, doors };
                k += 1;
                b += 1;
            }
            a += 1;
        }
        g += 1;
    }
    out
}

static ALL: [Treatment; TREATMENT_COUNT] = build_all();

/// All 2 × C(6,2) = 30 plans, ordered by (route guide, door pair).
pub fn enumerate_treatments() -> &'static [Treatment; TREATMENT_COUNT] {
    &ALL
}

impl fmt::Display for Treatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.to_bits() {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for Treatment {
    type Err = TreatmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(TreatmentError::Malformed(s.to_string())),
            })
            .collect::<Result<_, _>>()?;
        if bits.len() != TREATMENT_DIM {
            return Err(TreatmentError::Malformed(s.to_string()));
        }
        let mut doors = [false; DOOR_COUNT];
        doors.copy_from_slice(&bits[1..]);
        Self::new(bits[0], doors)
    }
}

impl Serialize for Treatment {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Treatment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
