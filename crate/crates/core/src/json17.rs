//! Serializes floats with 17 significant digits so model documents
//! round-trip bit-exactly and read the same on every platform.

use serde::ser::{Error as _, SerializeSeq};
use serde::Serializer;
use serde_json::value::RawValue;

fn raw(x: f64) -> Result<Box<RawValue>, serde_json::Error> {
    if !x.is_finite() {
        return Err(serde_json::Error::custom(format!("cannot serialize non-finite {x}")));
    }
    RawValue::from_string(format!("{x:.16e}"))
}

pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(values.len()))?;
    for &x in values {
        seq.serialize_element(&raw(x).map_err(S::Error::custom)?)?;
    }
    seq.end()
}

pub mod scalar {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_some(&raw(*x).map_err(S::Error::custom)?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Doc {
        #[serde(serialize_with = "super::serialize")]
        values: Vec<f64>,
        #[serde(serialize_with = "super::scalar::serialize")]
        one: f64,
    }

    #[test]
    fn writes_seventeen_significant_digits() {
        let doc = Doc { values: vec![0.1, -2.0], one: 1.0 / 3.0 };
        let text = serde_json::to_string(&doc).unwrap();
        assert_eq!(
            text,
            r#"{"values":[1.0000000000000001e-1,-2.0000000000000000e0],"one":3.3333333333333331e-1}"#
        );
    }

    proptest! {
        #[test]
        fn round_trips_bit_exactly(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 0..20)) {
            let doc = Doc { values, one: 1.0 };
            let back: Doc = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
            for (a, b) in doc.values.iter().zip(&back.values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
