//! Executor abstraction so the network graph is defined once and run either
//! directly (inference, intermediates freed as they go dead) or on a [`Tape`]
//! (training, intermediates retained for the backward pass).

use std::rc::Rc;

use crate::ops;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Shape, TensorError, TensorOf};

/// A sink for primitive applications. `Ref` is a cheap handle to a value.
pub trait Graph<T: Element> {
    type Ref: Clone;

    fn constant(&mut self, value: TensorOf<T>) -> Self::Ref;
    fn shape(&self, r: &Self::Ref) -> Shape;

    fn conv2d(
        &mut self,
        x: &Self::Ref,
        w: &Self::Ref,
        b: &Self::Ref,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self::Ref, TensorError>;
    fn pixel_shuffle(&mut self, x: &Self::Ref, r: usize) -> Result<Self::Ref, TensorError>;
    fn global_avg_pool(&mut self, x: &Self::Ref) -> Result<Self::Ref, TensorError>;
    fn linear(&mut self, x: &Self::Ref, w: &Self::Ref, b: &Self::Ref)
        -> Result<Self::Ref, TensorError>;
    fn relu(&mut self, x: &Self::Ref) -> Self::Ref;
    fn sigmoid(&mut self, x: &Self::Ref) -> Self::Ref;
    fn add(&mut self, a: &Self::Ref, b: &Self::Ref) -> Result<Self::Ref, TensorError>;
    fn mul(&mut self, a: &Self::Ref, b: &Self::Ref) -> Result<Self::Ref, TensorError>;
    fn expand_channels(&mut self, x: &Self::Ref, c: usize) -> Result<Self::Ref, TensorError>;
    fn concat_channels(&mut self, xs: &[Self::Ref]) -> Result<Self::Ref, TensorError>;
}

/// Immediate executor. Values are reference counted; an intermediate is freed
/// as soon as the last handle to it drops, which keeps full-resolution
/// inference within a small working set.
#[derive(Default)]
pub struct Eval;

impl Eval {
    pub fn new() -> Self {
        Eval
    }
}

impl<T: Element> Graph<T> for Eval {
    type Ref = Rc<TensorOf<T>>;

    fn constant(&mut self, value: TensorOf<T>) -> Self::Ref {
        Rc::new(value)
    }

    fn shape(&self, r: &Self::Ref) -> Shape {
        r.shape()
    }

    fn conv2d(
        &mut self,
        x: &Self::Ref,
        w: &Self::Ref,
        b: &Self::Ref,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self::Ref, TensorError> {
        Ok(Rc::new(ops::conv2d(x, w, b, stride, padding, dilation)?))
    }

    fn pixel_shuffle(&mut self, x: &Self::Ref, r: usize) -> Result<Self::Ref, TensorError> {
        Ok(Rc::new(ops::pixel_shuffle(x, r)?))
    }

    fn global_avg_pool(&mut self, x: &Self::Ref) -> Result<Self::Ref, TensorError> {
        Ok(Rc::new(ops::global_avg_pool(x)?))
    }

    fn linear(
        &mut self,
        x: &Self::Ref,
        w: &Self::Ref,
        b: &Self::Ref,
    ) -> Result<Self::Ref, TensorError> {
        Ok(Rc::new(ops::linear(x, w, b)?))
    }

    fn relu(&mut self, x: &Self::Ref) -> Self::Ref {
        Rc::new(ops::relu(x))
    }

    fn sigmoid(&mut self, x: &Self::Ref) -> Self::Ref {
        Rc::new(ops::sigmoid(x))
    }

    fn add(&mut self, a: &Self::Ref, b: &Self::Ref) -> Result<Self::Ref, TensorError> {
        Ok(Rc::new(ops::add(a, b)?))
    }

    fn mul(&mut self, a: &Self::Ref, b: &Self::Ref) -> Result<Self::Ref, TensorError> {
        Ok(Rc::new(ops::mul(a, b)?))
    }

    fn expand_channels(&mut self, x: &Self::Ref, c: usize) -> Result<Self::Ref, TensorError> {
        Ok(Rc::new(ops::expand_channels(x, c)?))
    }

    fn concat_channels(&mut self, xs: &[Self::Ref]) -> Result<Self::Ref, TensorError> {
        let views: Vec<&TensorOf<T>> = xs.iter().map(|r| r.as_ref()).collect();
        Ok(Rc::new(ops::concat_channels(&views)?))
    }
}

impl<T: Element> Graph<T> for Tape<T> {
    type Ref = NodeId;

    fn constant(&mut self, value: TensorOf<T>) -> Self::Ref {
        Tape::constant(self, value)
    }

    fn shape(&self, r: &Self::Ref) -> Shape {
        self.value(*r).shape()
    }

    fn conv2d(
        &mut self,
        x: &Self::Ref,
        w: &Self::Ref,
        b: &Self::Ref,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self::Ref, TensorError> {
        Tape::conv2d(self, *x, *w, *b, stride, padding, dilation)
    }

    fn pixel_shuffle(&mut self, x: &Self::Ref, r: usize) -> Result<Self::Ref, TensorError> {
        Tape::pixel_shuffle(self, *x, r)
    }

    fn global_avg_pool(&mut self, x: &Self::Ref) -> Result<Self::Ref, TensorError> {
        Tape::global_avg_pool(self, *x)
    }

    fn linear(
        &mut self,
        x: &Self::Ref,
        w: &Self::Ref,
        b: &Self::Ref,
    ) -> Result<Self::Ref, TensorError> {
        Tape::linear(self, *x, *w, *b)
    }

    fn relu(&mut self, x: &Self::Ref) -> Self::Ref {
        Tape::relu(self, *x)
    }

    fn sigmoid(&mut self, x: &Self::Ref) -> Self::Ref {
        Tape::sigmoid(self, *x)
    }

    fn add(&mut self, a: &Self::Ref, b: &Self::Ref) -> Result<Self::Ref, TensorError> {
        Tape::add(self, *a, *b)
    }

    fn mul(&mut self, a: &Self::Ref, b: &Self::Ref) -> Result<Self::Ref, TensorError> {
        Tape::mul(self, *a, *b)
    }

    fn expand_channels(&mut self, x: &Self::Ref, c: usize) -> Result<Self::Ref, TensorError> {
        Tape::expand_channels(self, *x, c)
    }

    fn concat_channels(&mut self, xs: &[Self::Ref]) -> Result<Self::Ref, TensorError> {
        Tape::concat_channels(self, xs)
    }
}
