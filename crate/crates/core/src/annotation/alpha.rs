use serde::Serialize;

/// Binary ratings: `values[unit][observer]`, `None` when the observer did not rate the unit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReliabilityMatrix {
    pub units: Vec<String>,
    pub observers: Vec<String>,
    pub values: Vec<Vec<Option<bool>>>,
}

impl ReliabilityMatrix {
    pub fn from_values(values: Vec<Vec<Option<bool>>>) -> Self {
        let n_obs = values.iter().map(Vec::len).max().unwrap_or(0);
        ReliabilityMatrix {
            units: (0..values.len()).map(|i| i.to_string()).collect(),
            observers: (0..n_obs).map(|i| i.to_string()).collect(),
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlphaResult {
    /// `None` when there are no pairable values or expected disagreement is zero.
    pub alpha: Option<f64>,
    /// Units with at least two ratings.
    pub units_used: usize,
    /// Number of pairable values.
    pub pairable: f64,
}

/// Coincidence counts `o[c][k]` of a binary reliability matrix.
#[derive(Debug, Clone, Copy, Default)]
struct Coincidences {
    o: [[f64; 2]; 2],
    units: usize,
}

impl Coincidences {
    fn add_unit(&mut self, ratings: impl Iterator<Item = bool>) {
        let (mut n0, mut n1) = (0usize, 0usize);
        for r in ratings {
            if r {
                n1 += 1
            } else {
                n0 += 1
            }
        }
        let m = n0 + n1;
        if m < 2 {
            return;
        }
        let w = 1.0 / (m - 1) as f64;
        let (n0, n1) = (n0 as f64, n1 as f64);
        self.o[0][0] += n0 * (n0 - 1.0) * w;
        self.o[1][1] += n1 * (n1 - 1.0) * w;
        self.o[0][1] += n0 * n1 * w;
        self.o[1][0] += n0 * n1 * w;
        self.units += 1;
    }

    fn alpha(&self) -> AlphaResult {
        let o = &self.o;
        let n_0 = o[0][0] + o[0][1];
        let n_1 = o[1][0] + o[1][1];
        let n = n_0 + n_1;
        let mut result = AlphaResult {
            alpha: None,
            units_used: self.units,
            pairable: n,
        };
        if n < 2.0 {
            return result;
        }
        let d_o = (o[0][1] + o[1][0]) / n;
        let d_e = 2.0 * n_0 * n_1 / (n * (n - 1.0));
        if d_e > 0.0 {
            result.alpha = Some(1.0 - d_o / d_e);
        }
        result
    }
}

/// Nominal Krippendorff's alpha via the coincidence matrix.
///
/// Each unit with `m >= 2` ratings contributes its ordered value pairs weighted
/// by `1/(m-1)`; units with fewer ratings are ignored.
pub fn krippendorff_alpha(matrix: &ReliabilityMatrix) -> AlphaResult {
    alpha_of_units(matrix.values.iter().map(|row| row.iter().flatten().copied()))
}

/// Alpha over units given directly as their non-missing ratings.
pub fn alpha_of_units<I, U>(units: I) -> AlphaResult
where
    I: IntoIterator<Item = U>,
    U: Iterator<Item = bool>,
{
    let mut c = Coincidences::default();
    for u in units {
        c.add_unit(u);
    }
    c.alpha()
}
