use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use crate::scalar::Scalar;

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    /// Layer group for layer-wise learning-rate scaling (0 = patch embedding).
    pub group: usize,
}

impl<S> Param<S> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Flat, ordered collection of named parameter tensors.
///
/// Layers keep [`ParamId`]s into the store, so optimizers, checkpoints and
/// gradient checks all see one uniform list of tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<S>, group: usize) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch for {name}");
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            shape,
            data,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, S> {
        let p = &self.params[id.0];
        ArrayView1::from(&p.data[..])
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, S> {
        let p = &self.params[id.0];
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.data).expect("2D parameter")
    }

    pub fn zeros_grad(&self) -> Gradients<S> {
        Gradients {
            data: self.params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| T::c(v.to_f64_lossy())).collect(),
                    group: p.group,
                })
                .collect(),
        }
    }

    /// Sum of squares of every parameter.
    pub fn squared_norm(&self) -> S {
        self.params
            .iter()
            .flat_map(|p| p.data.iter())
            .fold(S::zero(), |acc, &v| acc + v * v)
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub data: Vec<Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.data[id.0]
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, S> {
        ArrayViewMut1::from(&mut self.data[id.0][..])
    }

    pub fn view2_mut(&mut self, id: ParamId, shape: (usize, usize)) -> ArrayViewMut2<'_, S> {
        ArrayViewMut2::from_shape(shape, &mut self.data[id.0]).expect("2D gradient")
    }

    pub fn add_assign(&mut self, other: &Gradients<S>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: S) {
        for g in self.data.iter_mut().flat_map(|v| v.iter_mut()) {
            *g *= s;
        }
    }

    /// Index of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|g| g.iter().any(|v| !v.is_finite()))
    }
}
