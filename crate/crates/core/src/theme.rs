use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the five interview themes. `Overall` is the virtual theme that
/// covers the whole session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThemeId {
    Family,
    Work,
    Mental,
    Medical,
    Overall,
}

impl ThemeId {
    /// Canonical order used for every per-theme vector and matrix.
    pub const ALL: [ThemeId; 5] = [
        ThemeId::Family,
        ThemeId::Work,
        ThemeId::Mental,
        ThemeId::Medical,
        ThemeId::Overall,
    ];

    /// The four topical themes that dialogue sentences can be routed to.
    pub const TOPICAL: [ThemeId; 4] = [
        ThemeId::Family,
        ThemeId::Work,
        ThemeId::Mental,
        ThemeId::Medical,
    ];

    pub const COUNT: usize = 5;

    pub fn as_str(self) -> &'static str {
        match self {
            ThemeId::Family => "family",
            ThemeId::Work => "work",
            ThemeId::Mental => "mental",
            ThemeId::Medical => "medical",
            ThemeId::Overall => "overall",
        }
    }

    /// Position in [`ThemeId::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ThemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown theme `{0}` (expected one of family, work, mental, medical, overall)")]
pub struct UnknownTheme(pub String);

impl FromStr for ThemeId {
    type Err = UnknownTheme;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ThemeId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownTheme(s.to_string()))
    }
}

/// A fixed-size map keyed by theme, stored in canonical order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerTheme<T>(pub [T; 5]);

impl<T> PerTheme<T> {
    pub fn from_fn(mut f: impl FnMut(ThemeId) -> T) -> Self {
        PerTheme(ThemeId::ALL.map(&mut f))
    }

    pub fn get(&self, theme: ThemeId) -> &T {
        &self.0[theme.index()]
    }

    pub fn get_mut(&mut self, theme: ThemeId) -> &mut T {
        &mut self.0[theme.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ThemeId, &T)> {
        ThemeId::ALL.into_iter().zip(self.0.iter())
    }

    pub fn map<U>(&self, mut f: impl FnMut(ThemeId, &T) -> U) -> PerTheme<U> {
        PerTheme::from_fn(|t| f(t, &self.0[t.index()]))
    }

    pub fn values(&self) -> &[T; 5] {
        &self.0
    }
}

impl<T: Serialize> Serialize for PerTheme<T> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(5))?;
        for (theme, value) in self.iter() {
            map.serialize_entry(theme.as_str(), value)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for PerTheme<T> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use std::collections::BTreeMap;
        let mut raw: BTreeMap<ThemeId, T> = BTreeMap::deserialize(deserializer)?;
        let mut out: [Option<T>; 5] = Default::default();
        for theme in ThemeId::ALL {
            match raw.remove(&theme) {
                Some(v) => out[theme.index()] = Some(v),
                None => {
                    return Err(serde::de::Error::custom(format!(
                        "missing theme `{theme}`"
                    )))
                }
            }
        }
        Ok(PerTheme(out.map(|v| v.expect("all themes filled"))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_matches_index() {
        for (i, t) in ThemeId::ALL.iter().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(t.as_str().parse::<ThemeId>().unwrap(), *t);
        }
        assert!("sleep".parse::<ThemeId>().is_err());
    }

    #[test]
    fn per_theme_serde_roundtrip() {
        let m = PerTheme::from_fn(|t| t.index() as f64);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(
            json,
            r#"{"family":0.0,"work":1.0,"mental":2.0,"medical":3.0,"overall":4.0}"#
        );
        let back: PerTheme<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let missing: Result<PerTheme<f64>, _> = serde_json::from_str(r#"{"family":1.0}"#);
        assert!(missing.is_err());
    }
}
