//! Seeded Gaussian-blob classification data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Batch, LossKind, Targets};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Samples stored column-wise: `inputs` is `n_features × count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub eval: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n_features: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise: f64,
    pub separation: f64,
}

fn draw(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class means are `separation · N(0, I)`; sample `i` of a split belongs to
/// class `i mod k` and equals its mean plus `noise · N(0, I)`. The eval split
/// continues the same random stream after the training split.
pub fn blobs(spec: &BlobSpec, seed: u64) -> Result<Task> {
    if spec.n_features == 0 || spec.n_classes == 0 || spec.n_train == 0 || spec.n_eval == 0 {
        return Err(Error::InvalidArgument(format!("degenerate blob spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..spec.n_features).map(|_| spec.separation * draw(&mut rng)).collect())
        .collect();
    let mut split = |count: usize| -> Result<Dataset> {
        let mut data = vec![0.0; spec.n_features * count];
        let labels: Vec<usize> = (0..count).map(|i| i % spec.n_classes).collect();
        for (i, &c) in labels.iter().enumerate() {
            for f in 0..spec.n_features {
                data[f * count + i] = means[c][f] + spec.noise * draw(&mut rng);
            }
        }
        Ok(Dataset { inputs: Matrix::from_vec(spec.n_features, count, data)?, labels, n_classes: spec.n_classes })
    };
    let train = split(spec.n_train)?;
    let eval = split(spec.n_eval)?;
    Ok(Task { train, eval })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Subset of samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty subset".into()));
        }
        let inputs = self.inputs.select_columns(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset { inputs, labels, n_classes: self.n_classes })
    }

    /// Class labels for cross-entropy, one-hot columns for squared error.
    pub fn to_batch(&self, loss: LossKind) -> Result<Batch> {
        let targets = match loss {
            LossKind::SoftmaxCrossEntropy => Targets::Classes(self.labels.clone()),
            LossKind::MeanSquaredError => {
                Targets::Values(Matrix::from_fn(self.n_classes, self.len(), |c, i| f64::from(u8::from(self.labels[i] == c))))
            }
        };
        Batch::new(self.inputs.clone(), targets)
    }
}

/// Fraction of columns of `outputs` whose arg-max equals the label.
pub fn accuracy(outputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if outputs.cols() != labels.len() {
        return Err(Error::shape("accuracy", format!("{} outputs vs {} labels", outputs.cols(), labels.len())));
    }
    let mut hits = 0usize;
    for (j, &label) in labels.iter().enumerate() {
        let mut best = 0;
        for i in 1..outputs.rows() {
            if outputs[(i, j)] > outputs[(best, j)] {
                best = i;
            }
        }
        hits += usize::from(best == label);
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BlobSpec {
        BlobSpec { n_features: 3, n_classes: 2, n_train: 10, n_eval: 6, noise: 0.5, separation: 2.0 }
    }

    #[test]
    fn pure_function_of_seed_and_spec() {
        assert_eq!(blobs(&spec(), 4).unwrap(), blobs(&spec(), 4).unwrap());
        assert_ne!(blobs(&spec(), 4).unwrap(), blobs(&spec(), 5).unwrap());
    }

    #[test]
    fn zero_noise_gives_class_means() {
        let t = blobs(&BlobSpec { noise: 0.0, ..spec() }, 1).unwrap();
        assert_eq!(t.train.inputs.column(0), t.train.inputs.column(2));
        assert_eq!(t.train.inputs.column(1), t.eval.inputs.column(1));
        assert_eq!(t.train.labels[..4], [0, 1, 0, 1]);
    }

    #[test]
    fn one_hot_targets_for_mse() {
        let t = blobs(&spec(), 0).unwrap();
        let b = t.train.to_batch(LossKind::MeanSquaredError).unwrap();
        match b.targets {
            Targets::Values(v) => {
                assert_eq!(v.shape(), (2, 10));
                assert_eq!(v.column(1), vec![0.0, 1.0]);
            }
            _ => panic!("expected values"),
        }
    }

    #[test]
    fn accuracy_counts_argmax() {
        let out = Matrix::from_rows(&[&[1.0, 0.0, 2.0], &[0.0, 1.0, 3.0]]).unwrap();
        assert_eq!(accuracy(&out, &[0, 1, 0]).unwrap(), 2.0 / 3.0);
    }
}
