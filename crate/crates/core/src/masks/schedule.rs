use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which mask a transformer layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Dis,
    Har,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Dis => "dis",
            Regime::Har => "har",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dis" => Ok(Regime::Dis),
            "har" => Ok(Regime::Har),
            other => Err(Error::Schedule(format!("unknown regime {other:?}"))),
        }
    }
}

/// The eight (early, mid, late) assignments of the layer-scheduling ablation,
/// in table order. Row 6 is the default.
pub const ABLATION_ROWS: [[Regime; 3]; 8] = {
    use Regime::{Dis as D, Har as H};
    [
        [D, D, D],
        [D, H, H],
        [D, D, H],
        [D, H, D],
        [H, H, D],
        [H, D, D],
        [H, D, H],
        [H, H, H],
    ]
};

/// Per-layer regime assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub num_layers: usize,
    pub early: Range<usize>,
    pub late: Range<usize>,
    pub regimes: Vec<Regime>,
}

impl LayerSchedule {
    /// Assigns one regime to each of the early, middle and late groups.
    pub fn from_groups(num_layers: usize, early_count: usize, late_count: usize, groups: [Regime; 3]) -> Result<Self> {
        let mut s = schedule(num_layers, early_count, late_count, None)?;
        for (l, r) in s.regimes.iter_mut().enumerate() {
            *r = if s.early.contains(&l) {
                groups[0]
            } else if s.late.contains(&l) {
                groups[2]
            } else {
                groups[1]
            };
        }
        Ok(s)
    }

    /// Parses `default`, `all-dis`, `all-har` or an `early-mid-late` triple
    /// such as `har-dis-har`.
    pub fn parse(spec: &str, num_layers: usize, early_count: usize, late_count: usize) -> Result<Self> {
        let groups = match spec {
            "default" => [Regime::Har, Regime::Dis, Regime::Har],
            "all-dis" => [Regime::Dis; 3],
            "all-har" => [Regime::Har; 3],
            triple => {
                let parts: Vec<&str> = triple.split('-').collect();
                if parts.len() != 3 {
                    return Err(Error::Schedule(format!("cannot parse schedule {spec:?}")));
                }
                [parts[0].parse()?, parts[1].parse()?, parts[2].parse()?]
            }
        };
        Self::from_groups(num_layers, early_count, late_count, groups)
    }

    pub fn regime(&self, layer: usize) -> Regime {
        self.regimes[layer]
    }

    pub fn is_mid(&self, layer: usize) -> bool {
        !self.early.contains(&layer) && !self.late.contains(&layer)
    }

    /// Short label such as `har-dis-har` describing the three groups.
    pub fn label(&self) -> String {
        let pick = |range: Range<usize>, fallback: &str| {
            range
                .map(|l| self.regimes[l].to_string())
                .next()
                .unwrap_or_else(|| fallback.to_owned())
        };
        let mid = (0..self.num_layers).find(|&l| self.is_mid(l));
        format!(
            "{}-{}-{}",
            pick(self.early.clone(), "-"),
            mid.map_or_else(|| "-".to_owned(), |l| self.regimes[l].to_string()),
            pick(self.late.clone(), "-")
        )
    }
}

/// Default schedule: harmonize in the first `early_count` and last
/// `late_count` layers, disentangle in between. `override_regimes` replaces
/// the per-layer assignment wholesale.
pub fn schedule(
    num_layers: usize,
    early_count: usize,
    late_count: usize,
    override_regimes: Option<&[Regime]>,
) -> Result<LayerSchedule> {
    if num_layers == 0 {
        return Err(Error::Schedule("no layers".into()));
    }
    if early_count + late_count > num_layers {
        return Err(Error::Schedule(format!(
            "early {early_count} + late {late_count} exceeds {num_layers} layers"
        )));
    }
    let early = 0..early_count;
    let late = num_layers - late_count..num_layers;
    let regimes = match override_regimes {
        Some(r) if r.len() != num_layers => {
            return Err(Error::Schedule(format!(
                "override has {} regimes for {num_layers} layers",
                r.len()
            )))
        }
        Some(r) => r.to_vec(),
        None => (0..num_layers)
            .map(|l| {
                if early.contains(&l) || late.contains(&l) {
                    Regime::Har
                } else {
                    Regime::Dis
                }
            })
            .collect(),
    };
    Ok(LayerSchedule {
        num_layers,
        early,
        late,
        regimes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Regime::{Dis, Har};

    #[test]
    fn default_schedule() {
        let s = schedule(8, 2, 2, None).unwrap();
        assert_eq!(s.regimes, vec![Har, Har, Dis, Dis, Dis, Dis, Har, Har]);
        assert_eq!(s.label(), "har-dis-har");
    }

    #[test]
    fn override_all_dis() {
        let s = schedule(8, 2, 2, Some(&[Dis; 8])).unwrap();
        assert_eq!(s.regimes, vec![Dis; 8]);
    }

    #[test]
    fn empty_groups_are_all_mid() {
        let s = schedule(8, 0, 0, None).unwrap();
        assert_eq!(s.regimes, vec![Dis; 8]);
    }

    #[test]
    fn invalid_counts() {
        assert!(schedule(4, 3, 2, None).is_err());
        assert!(schedule(0, 0, 0, None).is_err());
        assert!(schedule(4, 1, 1, Some(&[Dis; 3])).is_err());
    }

    #[test]
    fn table_rows_are_distinct_and_complete() {
        let mut seen = std::collections::HashSet::new();
        for row in ABLATION_ROWS {
            assert!(seen.insert(row));
        }
        assert_eq!(seen.len(), 8);
        assert_eq!(ABLATION_ROWS[6], [Har, Dis, Har]);
    }

    #[test]
    fn parse_specs() {
        assert_eq!(LayerSchedule::parse("default", 8, 2, 2).unwrap().regimes, schedule(8, 2, 2, None).unwrap().regimes);
        assert_eq!(LayerSchedule::parse("all-har", 8, 2, 2).unwrap().regimes, vec![Har; 8]);
        let s = LayerSchedule::parse("dis-har-dis", 6, 1, 1).unwrap();
        assert_eq!(s.regimes, vec![Dis, Har, Har, Har, Har, Dis]);
        assert!(LayerSchedule::parse("dis-foo-har", 6, 1, 1).is_err());
    }
}
