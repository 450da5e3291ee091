//! Information quantities in natural-log units.

use std::fmt;
use std::ops::Add;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

/// Surprisal `-ln p` in nats. `p = 0` is carried as +infinity and serialized
/// as the string `"inf"` so it survives JSON round trips.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Nats(pub f64);

impl Nats {
    pub const ZERO: Nats = Nats(0.0);
    pub const INFINITE: Nats = Nats(f64::INFINITY);

    /// Surprisal of a probability.
    pub fn from_prob(p: f64) -> Nats {
        if p <= 0.0 {
            Nats::INFINITE
        } else {
            Nats(-p.ln())
        }
    }

    /// Surprisal from a natural-log probability (`-inf` maps to infinite).
    pub fn from_ln(ln_p: f64) -> Nats {
        Nats(-ln_p)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    pub fn bits(self) -> f64 {
        self.0 / std::f64::consts::LN_2
    }

    pub fn prob(self) -> f64 {
        (-self.0).exp()
    }
}

impl Add for Nats {
    type Output = Nats;
    fn add(self, rhs: Nats) -> Nats {
        Nats(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Nats {
    fn sum<I: Iterator<Item = Nats>>(iter: I) -> Nats {
        iter.fold(Nats::ZERO, Add::add)
    }
}

impl fmt::Display for Nats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{:.6}", self.0)
        }
    }
}

impl Serialize for Nats {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Nats {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct NatsVisitor;
        impl Visitor<'_> for NatsVisitor {
            type Value = Nats;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Nats, E> {
                Ok(Nats(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Nats, E> {
                Ok(Nats(v as f64))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Nats, E> {
                Ok(Nats(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Nats, E> {
                match v {
                    "inf" => Ok(Nats::INFINITE),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }
        d.deserialize_any(NatsVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_round_trips() {
        let s = serde_json::to_string(&Nats::INFINITE).unwrap();
        assert_eq!(s, "\"inf\"");
        let back: Nats = serde_json::from_str(&s).unwrap();
        assert!(back.is_infinite());
        let back: Nats = serde_json::from_str("0.5").unwrap();
        assert_eq!(back, Nats(0.5));
    }

    #[test]
    fn from_prob() {
        assert_eq!(Nats::from_prob(1.0), Nats(0.0));
        assert!(Nats::from_prob(0.0).is_infinite());
        assert!((Nats::from_prob(0.125).value() - 8f64.ln()).abs() < 1e-15);
    }
}
