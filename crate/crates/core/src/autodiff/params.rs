use super::{Tensor, TensorError};

/// Named, ordered collection of tensors.
///
/// Used for trainable weights, graph input bindings, evaluation outputs and
/// gradients. Insertion order is the flattening order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    entries: Vec<(String, Tensor)>,
}

/// Gradients keyed and shaped exactly like the [`ParamTree`] they were taken against.
pub type GradMap = ParamTree;

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`. Replacement keeps the original position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Per-tensor element counts, in flattening order.
    pub fn layout(&self) -> Vec<usize> {
        self.entries.iter().map(|(_, t)| t.len()).collect()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_elements());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every tensor from a flat vector laid out as [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), TensorError> {
        if flat.len() != self.num_elements() {
            return Err(TensorError::ShapeMismatch {
                op: "assign_flat",
                detail: format!("expected {} values, got {}", self.num_elements(), flat.len()),
            });
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Same names and shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// True when both trees carry the same names, in the same order, with the same shapes.
    pub fn same_structure(&self, other: &ParamTree) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

impl FromIterator<(String, Tensor)> for ParamTree {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut tree = ParamTree::new();
        for (n, t) in iter {
            tree.insert(n, t);
        }
        tree
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_and_assign_roundtrip() {
        let mut tree = ParamTree::new();
        tree.insert("a", Tensor::vector(vec![1.0, 2.0]));
        tree.insert("b", Tensor::from_rows(&[&[3.0], &[4.0]]));
        assert_eq!(tree.flatten(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tree.layout(), vec![2, 2]);
        tree.assign_flat(&[5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(tree.get("b").unwrap().data(), &[7.0, 8.0]);
        assert!(tree.assign_flat(&[1.0]).is_err());
    }

    #[test]
    fn insert_replaces_in_place() {
        let mut tree = ParamTree::new();
        tree.insert("a", Tensor::scalar(1.0));
        tree.insert("b", Tensor::scalar(2.0));
        tree.insert("a", Tensor::scalar(3.0));
        assert_eq!(tree.names().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(tree.flatten(), vec![3.0, 2.0]);
    }
}
