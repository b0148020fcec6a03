use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// SOHO instrument feeding one pipeline of the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Instrument {
    /// LASCO C2 coronagraph (base-difference images).
    C2,
    /// EIT 195 Å extreme-ultraviolet imager.
    #[serde(rename = "EIT")]
    Eit,
    /// MDI line-of-sight magnetogram.
    #[serde(rename = "MDI")]
    Mdi,
}

impl Instrument {
    pub const ALL: [Instrument; 3] = [Instrument::C2, Instrument::Eit, Instrument::Mdi];

    pub fn as_str(self) -> &'static str {
        match self {
            Instrument::C2 => "C2",
            Instrument::Eit => "EIT",
            Instrument::Mdi => "MDI",
        }
    }

    /// Position in [`Instrument::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Instrument {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C2" | "LASCO" | "LASCO_C2" => Ok(Instrument::C2),
            "EIT" | "EIT195" => Ok(Instrument::Eit),
            "MDI" => Ok(Instrument::Mdi),
            other => Err(format!("unknown instrument '{other}'")),
        }
    }
}

/// Event class. A CME is geoeffective when the minimum Dst it drives is
/// strictly below −50 nT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Geoeffective,
    NonGeoeffective,
}

/// Storm threshold on minimum Dst, in nT.
pub const DST_STORM_THRESHOLD_NT: f64 = -50.0;

impl Label {
    pub fn from_dst(dst_min_nt: f64) -> Label {
        if dst_min_nt < DST_STORM_THRESHOLD_NT {
            Label::Geoeffective
        } else {
            Label::NonGeoeffective
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Geoeffective
    }

    /// 1 for geoeffective, 0 otherwise.
    pub fn as_target(self) -> u8 {
        u8::from(self.is_positive())
    }

    pub fn from_target(y: u8) -> Label {
        if y != 0 {
            Label::Geoeffective
        } else {
            Label::NonGeoeffective
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Geoeffective => "geoeffective",
            Label::NonGeoeffective => "non_geoeffective",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn storm_rule_is_strict() {
        assert_eq!(Label::from_dst(-84.0), Label::Geoeffective);
        assert_eq!(Label::from_dst(-50.0), Label::NonGeoeffective);
        assert_eq!(Label::from_dst(-50.0001), Label::Geoeffective);
        assert_eq!(Label::from_dst(12.0), Label::NonGeoeffective);
    }

    #[test]
    fn instrument_round_trips_through_str() {
        for inst in Instrument::ALL {
            assert_eq!(inst.as_str().parse::<Instrument>().unwrap(), inst);
        }
        assert!("HMI".parse::<Instrument>().is_err());
    }
}
