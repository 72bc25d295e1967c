//! Fixed-precision number formatting for byte-stable JSON output.

use serde::ser::Error as _;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

/// Serializes an `f64` with exactly six fractional digits.
pub(crate) fn fixed6<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    if !value.is_finite() {
        return Err(S::Error::custom(format!("non-finite value {value}")));
    }
    let raw = RawValue::from_string(format!("{value:.6}")).map_err(S::Error::custom)?;
    raw.serialize(serializer)
}
