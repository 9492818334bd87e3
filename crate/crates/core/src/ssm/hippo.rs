use crate::error::{Error, Result};

/// Dense HiPPO-LegS transition matrix, kept as a reference object.
#[derive(Clone, Debug, PartialEq)]
pub struct HippoMatrix {
    pub n: usize,
    /// Row-major `n x n`.
    pub entries: Vec<f64>,
}

impl HippoMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }
}

/// `A[n][k] = -sqrt(2n+1) sqrt(2k+1)` below the diagonal, `-(n+1)` on it, `0` above.
pub fn hippo_matrix(n: usize) -> Result<HippoMatrix> {
    if n == 0 {
        return Err(Error::invalid("HiPPO matrix needs n >= 1"));
    }
    let mut entries = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..=row {
            entries[row * n + col] = if row > col {
                -((2 * row + 1) as f64).sqrt() * ((2 * col + 1) as f64).sqrt()
            } else {
                -((row + 1) as f64)
            };
        }
    }
    Ok(HippoMatrix { n, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        assert_eq!(hippo_matrix(1).unwrap().entries, vec![-1.0]);
        let h = hippo_matrix(2).unwrap();
        assert_eq!(h.entries, vec![-1.0, 0.0, -(3f64.sqrt()), -2.0]);
        assert!(hippo_matrix(0).is_err());
    }

    #[test]
    fn four_by_four_matches_piecewise_definition() {
        let h = hippo_matrix(4).unwrap();
        for n in 0..4 {
            for k in 0..4 {
                let expect = match n.cmp(&k) {
                    std::cmp::Ordering::Greater => -(((2 * n + 1) * (2 * k + 1)) as f64).sqrt(),
                    std::cmp::Ordering::Equal => -(n as f64 + 1.0),
                    std::cmp::Ordering::Less => 0.0,
                };
                assert!((h.get(n, k) - expect).abs() < 1e-12, "({n},{k})");
            }
        }
    }
}
