use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

/// Seat occupancy vector `x`, one flag per seat in layout seat order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Occupancy(Vec<bool>);

impl Occupancy {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn empty(seats: usize) -> Self {
        Self(vec![false; seats])
    }

    pub fn full(seats: usize) -> Self {
        Self(vec![true; seats])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_occupied(&self, seat: usize) -> bool {
        self.0[seat]
    }

    pub fn set(&mut self, seat: usize, occupied: bool) {
        self.0[seat] = occupied;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn occupied_seats(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Packs seat `i` into byte `i / 8`, bit `i % 8` (LSB first), then base64.
    pub fn to_base64(&self) -> String {
        let mut bytes = vec![0u8; self.0.len().div_ceil(8)];
        for (i, &b) in self.0.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        STANDARD.encode(bytes)
    }

    pub fn from_base64(text: &str, seats: usize) -> Result<Self, String> {
        let bytes = STANDARD.decode(text).map_err(|e| format!("invalid base64 occupancy: {e}"))?;
        if bytes.len() != seats.div_ceil(8) {
            return Err(format!("occupancy holds {} bytes, expected {}", bytes.len(), seats.div_ceil(8)));
        }
        let bits: Vec<bool> = (0..seats).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        if (seats..bytes.len() * 8).any(|i| bytes[i / 8] >> (i % 8) & 1 == 1) {
            return Err("occupancy has bits set past the last seat".into());
        }
        Ok(Self(bits))
    }
}
