//! Declarative DIF model specifications and design-matrix construction.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prep::ItemFrame;

/// Default number of ability strata in the Mantel-Haenszel formulation.
pub const MH_STRATA: usize = 5;

/// A predictor column (or block of columns) drawn from an [`ItemFrame`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    G,
    ThetaK,
    ThetaKxG,
    ThetaS,
    ThetaSxG,
    /// Raw level-2 cluster size `n_j`.
    ClusterSize,
    /// Dummy-coded equal-frequency strata of the final estimate; stratum 1 is
    /// the reference level.
    Strata(usize),
}

impl Term {
    fn column_names(&self) -> Vec<String> {
        let name = match self {
            Term::Intercept => "(Intercept)",
            Term::G => "g",
            Term::ThetaK => "theta_K",
            Term::ThetaKxG => "theta_K:g",
            Term::ThetaS => "theta_s",
            Term::ThetaSxG => "theta_s:g",
            Term::ClusterSize => "n_j",
            Term::Strata(l) => return (2..=*l).map(|s| format!("stratum{s}")).collect(),
        };
        vec![name.to_string()]
    }
}

/// Random-effect terms varying over provisional-ability intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RandomTerm {
    Intercept,
    G,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelName {
    S1,
    S2,
    S3,
    #[serde(rename = "MH")]
    Mh,
    #[serde(rename = "LR_ALT")]
    LrAlt,
    #[serde(rename = "EMPTY")]
    Empty,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
}

impl ModelName {
    pub const ALL: [ModelName; 14] = [
        ModelName::S1,
        ModelName::S2,
        ModelName::S3,
        ModelName::Mh,
        ModelName::LrAlt,
        ModelName::Empty,
        ModelName::M1,
        ModelName::M2,
        ModelName::M3,
        ModelName::M4,
        ModelName::M5,
        ModelName::M6,
        ModelName::M7,
        ModelName::M8,
    ];

    pub fn is_multilevel(&self) -> bool {
        !matches!(
            self,
            ModelName::S1 | ModelName::S2 | ModelName::S3 | ModelName::Mh | ModelName::LrAlt
        )
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelName::S1 => "S1",
            ModelName::S2 => "S2",
            ModelName::S3 => "S3",
            ModelName::Mh => "MH",
            ModelName::LrAlt => "LR_ALT",
            ModelName::Empty => "EMPTY",
            ModelName::M1 => "M1",
            ModelName::M2 => "M2",
            ModelName::M3 => "M3",
            ModelName::M4 => "M4",
            ModelName::M5 => "M5",
            ModelName::M6 => "M6",
            ModelName::M7 => "M7",
            ModelName::M8 => "M8",
        }
    }

    pub fn fixed_terms(&self) -> Vec<Term> {
        use Term::*;
        match self {
            ModelName::S1 | ModelName::LrAlt => vec![Intercept, G, ThetaK, ThetaKxG],
            ModelName::S2 => vec![Intercept, G, ThetaK, ThetaKxG, ThetaS],
            ModelName::S3 => vec![Intercept, G, ThetaS, ThetaSxG],
            ModelName::Mh => vec![Intercept, Strata(MH_STRATA), G],
            ModelName::Empty => vec![Intercept],
            ModelName::M1 | ModelName::M5 => vec![Intercept, G],
            ModelName::M2 | ModelName::M6 => vec![Intercept, G, ClusterSize],
            ModelName::M3 | ModelName::M7 => vec![Intercept, G, ThetaK, ThetaKxG],
            ModelName::M4 | ModelName::M8 => vec![Intercept, G, ClusterSize, ThetaK, ThetaKxG],
        }
    }

    pub fn random_terms(&self) -> Vec<RandomTerm> {
        match self {
            ModelName::Empty | ModelName::M1 | ModelName::M2 | ModelName::M3 | ModelName::M4 => {
                vec![RandomTerm::Intercept]
            }
            ModelName::M5 | ModelName::M6 | ModelName::M7 | ModelName::M8 => {
                vec![RandomTerm::Intercept, RandomTerm::G]
            }
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelName::ALL
            .iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::Parse(format!("unknown model {s:?}")))
    }
}

/// Equal-frequency strata labels `0..levels` (0 is the reference stratum).
pub fn make_strata(values: &[f64], levels: usize) -> Result<Vec<usize>> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if levels < 2 || sorted.len() < levels {
        return Err(Error::DegenerateStrata {
            requested: levels,
            distinct: sorted.len(),
        });
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let mut labels = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank * levels / n;
    }
    Ok(labels)
}

/// Fixed-effects design matrix and its column names.
pub fn design_matrix(frame: &ItemFrame, terms: &[Term]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = frame.len();
    let names: Vec<String> = terms.iter().flat_map(Term::column_names).collect();
    let mut x = DMatrix::zeros(n, names.len());
    let mut col = 0;
    for term in terms {
        match term {
            Term::Strata(levels) => {
                let theta_k: Vec<f64> = frame.rows.iter().map(|r| r.theta_k).collect();
                let labels = make_strata(&theta_k, *levels)?;
                for (i, &s) in labels.iter().enumerate() {
                    if s > 0 {
                        x[(i, col + s - 1)] = 1.0;
                    }
                }
                col += levels - 1;
            }
            _ => {
                for (i, r) in frame.rows.iter().enumerate() {
                    let g = r.g as f64;
                    x[(i, col)] = match term {
                        Term::Intercept => 1.0,
                        Term::G => g,
                        Term::ThetaK => r.theta_k,
                        Term::ThetaKxG => r.theta_k * g,
                        Term::ThetaS => r.theta_s,
                        Term::ThetaSxG => r.theta_s * g,
                        Term::ClusterSize => frame.cluster_size_of(r) as f64,
                        Term::Strata(_) => unreachable!(),
                    };
                }
                col += 1;
            }
        }
    }
    Ok((x, names))
}

pub fn response(frame: &ItemFrame) -> Vec<f64> {
    frame.rows.iter().map(|r| r.y as f64).collect()
}

/// Numerical rank of `x` by column-pivoted QR.
pub fn rank(x: &DMatrix<f64>) -> usize {
    if x.ncols() == 0 || x.nrows() == 0 {
        return 0;
    }
    // Scale columns so the tolerance is relative to each column's norm.
    let mut scaled = x.clone();
    for mut c in scaled.column_iter_mut() {
        let norm = c.norm();
        if norm > 0.0 {
            c /= norm;
        }
    }
    let r = scaled.col_piv_qr().r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    diag.iter().filter(|&&d| d > 1e-9 * max).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prep::FrameRow;

    #[test]
    fn model_term_sets() {
        assert_eq!(ModelName::S2.fixed_terms().len(), 5);
        assert_eq!(ModelName::LrAlt.fixed_terms(), ModelName::S1.fixed_terms());
        assert_eq!(ModelName::M1.fixed_terms(), vec![Term::Intercept, Term::G]);
        assert_eq!(ModelName::Empty.fixed_terms(), vec![Term::Intercept]);
        assert_eq!(ModelName::M6.random_terms().len(), 2);
        assert_eq!(ModelName::M4.random_terms().len(), 1);
        assert!(ModelName::S3.random_terms().is_empty());
        assert_eq!("lr_alt".parse::<ModelName>().unwrap(), ModelName::LrAlt);
        assert!("M9".parse::<ModelName>().is_err());
        assert_eq!(serde_json::to_string(&ModelName::Mh).unwrap(), "\"MH\"");
    }

    #[test]
    fn strata_examples() {
        assert_eq!(make_strata(&[-1.0, 1.0, -1.0, 1.0], 2).unwrap(), vec![0, 1, 0, 1]);
        assert!(matches!(
            make_strata(&[0.0, 0.0, 1.0], 3),
            Err(Error::DegenerateStrata { requested: 3, distinct: 2 })
        ));
        let values: Vec<f64> = (0..1000).map(|k| ((k * 7919) % 1000) as f64 / 100.0 - 5.0).collect();
        let labels = make_strata(&values, 5).unwrap();
        for s in 0..5 {
            let size = labels.iter().filter(|&&l| l == s).count();
            assert!(size.abs_diff(200) <= 1);
        }
    }

    #[test]
    fn design_columns() {
        let rows = vec![
            FrameRow { y: 1, g: 1, theta_k: 0.5, theta_s: -0.2, j: 3 },
            FrameRow { y: 0, g: 0, theta_k: -1.0, theta_s: 0.1, j: 3 },
            FrameRow { y: 1, g: 1, theta_k: 2.0, theta_s: 1.0, j: 7 },
        ];
        let frame = ItemFrame::new("x", rows);
        let (x, names) = design_matrix(&frame, &ModelName::M4.fixed_terms()).unwrap();
        assert_eq!(names, vec!["(Intercept)", "g", "n_j", "theta_K", "theta_K:g"]);
        assert_eq!(x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 2.0, 0.5, 0.5]);
        assert_eq!(x.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(rank(&x), 3);
    }
}
