use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var, EPSILON_NORM};

/// Cosine classifier: one prototype column of `weight` (`d × |C|`) per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier {
    pub weight: Tensor,
    /// Class id of each column.
    pub classes: Vec<u8>,
    /// Scalar temperature; trained only when `learn_tau` is set.
    pub tau: Tensor,
    pub learn_tau: bool,
}

/// Random unit vector of dimension `d`.
pub fn random_unit(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n >= EPSILON_NORM {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl CosineClassifier {
    /// Random unit prototypes for `classes`, in the given order.
    pub fn random(d: usize, classes: Vec<u8>, tau: f64, rng: &mut Rng) -> Self {
        let cols: Vec<Vec<f64>> = classes.iter().map(|_| random_unit(d, rng)).collect();
        let mut c = Self { weight: Tensor::zeros(vec![d, 0]), classes: Vec::new(), tau: Tensor::scalar(tau), learn_tau: false };
        for (class, col) in classes.into_iter().zip(cols) {
            c.push_column(class, &col).expect("fresh classes");
        }
        c
    }

    pub fn tau(&self) -> f64 {
        self.tau.data()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn column_of(&self, class: u8) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let (d, c) = (self.feature_dim(), self.num_classes());
        (0..d).map(|i| self.weight.data()[i * c + j]).collect()
    }

    /// Appends a prototype column; existing columns are copied bit-for-bit.
    pub fn push_column(&mut self, class: u8, col: &[f64]) -> Result<()> {
        let (d, c) = (self.feature_dim(), self.num_classes());
        if col.len() != d {
            return Err(TensorError::ShapeMismatch { lhs: vec![d], rhs: vec![col.len()] });
        }
        if self.classes.contains(&class) {
            return Err(TensorError::Invalid(format!("class {class} already has a prototype")));
        }
        let old = self.weight.data();
        let mut data = Vec::with_capacity(d * (c + 1));
        for i in 0..d {
            data.extend_from_slice(&old[i * c..(i + 1) * c]);
            data.push(col[i]);
        }
        self.weight = Tensor::new(vec![d, c + 1], data)?;
        self.classes.push(class);
        Ok(())
    }

    /// Leaves for `(weight, tau)`.
    pub fn record_leaves(&self, g: &mut Graph, trainable: bool) -> (Var, Var) {
        let w = if trainable { g.param(&self.weight) } else { g.constant(&self.weight) };
        let t = if trainable && self.learn_tau { g.param(&self.tau) } else { g.constant(&self.tau) };
        (w, t)
    }
}

/// `s_{c,i} = τ · cos(f_i, w_c)` for `[P×d]` features and `[d×|C|]` weights.
pub fn cosine_scores(g: &mut Graph, features: Var, weight: Var, tau: Var) -> Result<Var> {
    let (fs, ws) = (g.shape(features).to_vec(), g.shape(weight).to_vec());
    if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[0] {
        return Err(TensorError::ShapeMismatch { lhs: fs, rhs: ws });
    }
    let fnorm = g.l2_normalize(features, 1)?;
    let wnorm = g.l2_normalize(weight, 0)?;
    let cos = g.matmul(fnorm, wnorm)?;
    g.mul(cos, tau)
}

/// Softmax over the classes of `[P×|C|]` scores.
pub fn class_probabilities(g: &mut Graph, scores: Var) -> Result<Var> {
    g.softmax(scores, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn scores(f: &[f64], w: &[f64], d: usize, tau: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let fv = g.constant(&Tensor::new(vec![f.len() / d, d], f.to_vec()).unwrap());
        let wv = g.constant(&Tensor::new(vec![d, w.len() / d], w.to_vec()).unwrap());
        let t = g.constant(&Tensor::scalar(tau));
        let s = cosine_scores(&mut g, fv, wv, t).unwrap();
        g.value(s).to_vec()
    }

    #[test]
    fn parallel_orthogonal_and_hand_case() {
        assert!((scores(&[2.0, 0.0], &[5.0, 0.0], 2, 10.0)[0] - 10.0).abs() < 1e-12);
        assert_eq!(scores(&[1.0, 0.0], &[0.0, 3.0], 2, 10.0)[0], 0.0);
        assert!((scores(&[3.0, 4.0], &[4.0, 3.0], 2, 1.0)[0] - 0.96).abs() < 1e-15);
    }

    #[test]
    fn probabilities_examples() {
        let mut g = Graph::new();
        let s = g.constant(&Tensor::new(vec![1, 4], vec![0.7; 4]).unwrap());
        let p = class_probabilities(&mut g, s).unwrap();
        assert!(g.value(p).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = g.constant(&Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap());
        let p = class_probabilities(&mut g, s).unwrap();
        assert!(g.value(p)[0] > 1.0 - 1e-8 && g.value(p)[1] < 1e-8);
        let s = g.constant(&Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let p = class_probabilities(&mut g, s).unwrap();
        assert!((g.value(p)[0] - 0.25).abs() < 1e-15 && (g.value(p)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn push_column_preserves_old_columns() {
        let mut c = CosineClassifier::random(4, vec![0, 1, 2], 10.0, &mut rng_for(0, &[]));
        let before: Vec<Vec<f64>> = (0..3).map(|j| c.column(j)).collect();
        c.push_column(7, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.weight.shape(), &[4, 4]);
        for (j, col) in before.iter().enumerate() {
            assert_eq!(&c.column(j), col);
        }
        assert_eq!(c.column(3), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(c.push_column(1, &[1.0; 4]).is_err());
    }
}
