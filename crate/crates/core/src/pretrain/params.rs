use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("parameter sets differ: {0}")]
    ShapeMismatch(String),
    #[error("momentum must be in [0, 1] (got {0})")]
    Momentum(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Ordered, named collection of parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot-uniform style scaling for a `fan_in x fan_out` matrix.
    Xavier,
    Constant(f64),
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, init: Init, decay: bool, rng: &mut R) -> usize {
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Constant(c) => Array2::from_elem((rows, cols), c),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
            }
            Init::Xavier => {
                let std = (2.0 / (rows + cols) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
            }
        };
        self.push(name, value, decay)
    }

    pub fn push(&mut self, name: &str, value: Array2<f64>, decay: bool) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            value,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Array2<f64> {
        &self.params[index].value
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Array2<f64> {
        &mut self.params[index].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn check_same_shape(&self, other: &ParamSet) -> Result<(), StateError> {
        if self.params.len() != other.params.len() {
            return Err(StateError::ShapeMismatch(format!(
                "{} vs {} tensors",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(StateError::ShapeMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.value.dim(),
                    b.name,
                    b.value.dim()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, momentum: f64) -> Result<(), StateError> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(StateError::Momentum(momentum.to_string()));
    }
    teacher.check_same_shape(student)?;
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        Zip::from(&mut t.value)
            .and(&s.value)
            .for_each(|tv, &sv| *tv = momentum * *tv + (1.0 - momentum) * sv);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", array![[v]], true);
        p
    }

    #[test]
    fn ema_endpoints_and_hand_value() {
        let student = single(0.0);
        let mut teacher = single(1.0);
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.get(0)[[0, 0]], 1.0);
        ema_update(&mut teacher, &student, 0.995).unwrap();
        assert_eq!(teacher.get(0)[[0, 0]], 0.995);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher, student);
    }

    #[test]
    fn ema_rejects_mismatch() {
        let mut a = single(1.0);
        let mut b = ParamSet::new();
        b.push("w", array![[1.0, 2.0]], true);
        assert!(matches!(ema_update(&mut a, &b, 0.5), Err(StateError::ShapeMismatch(_))));
        assert!(matches!(ema_update(&mut a, &single(0.0), 1.5), Err(StateError::Momentum(_))));
    }

    #[test]
    fn fingerprint_tracks_bits() {
        let a = single(1.0);
        let b = single(1.0 + f64::EPSILON);
        assert_eq!(a.fingerprint(), single(1.0).fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
