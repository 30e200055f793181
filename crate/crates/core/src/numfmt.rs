//! Bit-stable decimal rendering of floats for JSON and CSV artifacts.
//!
//! Every float that ends up in a report is written with 17 significant digits,
//! which round-trips any `f64` exactly.

use serde::{Deserialize, Deserializer, Serializer};

/// Renders `v` with 17 significant digits (`-1.2345678901234567e-3`), or
/// `inf` / `-inf` / `nan`.
pub fn sci17(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{v:.16e}")
    }
}

pub fn parse_sci17(s: &str) -> Option<f64> {
    match s {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

pub fn ser_f64<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&sci17(*v))
}

pub fn ser_vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| sci17(*x)))
}

pub fn ser_opt_f64<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_str(&sci17(*x)),
        None => s.serialize_none(),
    }
}

pub fn de_f64<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let s = String::deserialize(d)?;
    parse_sci17(&s).ok_or_else(|| serde::de::Error::custom(format!("bad float '{s}'")))
}

pub fn de_vec<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    let v = Vec::<String>::deserialize(d)?;
    v.iter()
        .map(|s| parse_sci17(s).ok_or_else(|| serde::de::Error::custom(format!("bad float '{s}'"))))
        .collect()
}

pub fn de_opt_f64<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    let v = Option::<String>::deserialize(d)?;
    v.map(|s| parse_sci17(&s).ok_or_else(|| serde::de::Error::custom(format!("bad float '{s}'"))))
        .transpose()
}


/// Extended reals in human-edited configs: finite values as numbers, `+∞` as the string `"inf"`.
pub mod ext_real {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.to_ascii_lowercase().as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                other => other
                    .parse()
                    .map_err(|_| serde::de::Error::custom(format!("expected number or \"inf\", got '{t}'"))),
            },
        }
    }
}
