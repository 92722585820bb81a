use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::tensor::DenseMatrix;
use crate::scalar::Scalar;

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Coarse grouping of parameters, used by freeze masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    UserEmbedding,
    ItemEmbedding,
    MarketEmbedding,
    Hidden,
    Output,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::UserEmbedding,
        ParamGroup::ItemEmbedding,
        ParamGroup::MarketEmbedding,
        ParamGroup::Hidden,
        ParamGroup::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::UserEmbedding => "user_embedding",
            ParamGroup::ItemEmbedding => "item_embedding",
            ParamGroup::MarketEmbedding => "market_embedding",
            ParamGroup::Hidden => "hidden",
            ParamGroup::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<S> {
    pub name: String,
    pub group: ParamGroup,
    pub value: DenseMatrix<S>,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: DenseMatrix<S>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix<S> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Replace every tensor value with the one from `other`; layouts must agree.
    pub fn copy_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.as_mut_slice().copy_from_slice(src.value.as_slice());
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &ParamStore<S>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(shape_err("param layout", self.params.len(), other.params.len()));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.value.dims() != b.value.dims() || a.name != b.name {
                return Err(shape_err(
                    "param layout",
                    format!("{} {:?}", a.name, a.value.dims()),
                    format!("{} {:?}", b.name, b.value.dims()),
                ));
            }
        }
        Ok(())
    }

    /// Zero-valued gradient buffers shaped like this store.
    pub fn zero_grads(&self) -> Gradients<S> {
        Gradients {
            grads: self
                .params
                .iter()
                .map(|p| DenseMatrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }
}

/// Gradient buffers mirroring a [`ParamStore`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    grads: Vec<DenseMatrix<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> &DenseMatrix<S> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix<S> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(S::zero());
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients<S>, scale: S) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += scale * *y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }
}
