use super::Linear;
use crate::error::{contract_err, Result};
use crate::params::{ParamStore, Scope};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Sinusoidal features of integer timesteps, `(len(ts), dim)`.
///
/// The first half holds `sin(t·ωᵢ)`, the second `cos(t·ωᵢ)`, with
/// `ωᵢ = 10000^(-i/half)`.
pub fn sinusoidal_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<S>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(contract_err!("sinusoidal embedding width must be even and at least 2, got {dim}"));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|w| t as f64 * w).collect();
        data.extend(args.iter().map(|a| S::of(a.sin())));
        data.extend(args.iter().map(|a| S::of(a.cos())));
    }
    Tensor::from_vec(vec![ts.len(), dim], data)
}

/// Sinusoidal table followed by `Linear → SiLU → Linear`; the result is
/// shared by every block, each of which projects it to its own width.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    pub base_dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimestepEmbedding {
    pub fn new(scope: &mut Scope<'_>, base_dim: usize, hidden: usize) -> Self {
        Self {
            base_dim,
            fc1: Linear::new(&mut scope.sub("fc1"), base_dim, hidden, true),
            fc2: Linear::new(&mut scope.sub("fc2"), hidden, hidden, true),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_features
    }

    /// `(len(ts), hidden)` embedding.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        ts: &[usize],
    ) -> Result<Var<'t, S>> {
        let base = tape.constant(sinusoidal_embedding(ts, self.base_dim)?);
        let h = self.fc1.forward(tape, ps, &base)?.silu();
        self.fc2.forward(tape, ps, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Initializer;

    #[test]
    fn table_values() {
        let e = sinusoidal_embedding::<f64>(&[0, 3], 4).unwrap();
        let d = e.data();
        assert_eq!(&d[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((d[4] - 3f64.sin()).abs() < 1e-15);
        assert!((d[5] - (0.03f64).sin()).abs() < 1e-12);
        assert!((d[6] - 3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(sinusoidal_embedding::<f32>(&[1], 5).is_err());
    }

    #[test]
    fn deterministic_and_distinct_over_all_timesteps() {
        let mut ps = ParamStore::new();
        let te = TimestepEmbedding::new(&mut Scope::new(&mut Initializer::new(&mut ps, 3)), 32, 64);
        let ps64: ParamStore<f64> = ps.cast();
        let ts: Vec<usize> = (0..1000).collect();
        let tape = Tape::no_grad();
        let a = te.forward(&tape, &ps64, &ts).unwrap().to_tensor();
        let b = te.forward(&tape, &ps64, &ts).unwrap().to_tensor();
        assert_eq!(a, b);
        let rows: Vec<&[f64]> = a.data().chunks(64).collect();
        for i in 1..rows.len() {
            let d: f64 = rows[i].iter().zip(rows[i - 1]).map(|(x, y)| (x - y).abs()).sum();
            assert!(d > 0.0, "t={i} collides with t={}", i - 1);
        }
        // Base table rows are pairwise distinct as well.
        let base = sinusoidal_embedding::<f64>(&ts, 32).unwrap();
        let brows: Vec<&[f64]> = base.data().chunks(32).collect();
        for i in 0..brows.len() {
            for j in i + 1..brows.len() {
                assert_ne!(brows[i], brows[j]);
            }
        }
    }
}
