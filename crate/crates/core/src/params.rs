//! Parameter containers.
//!
//! A parameter struct is a tree of [`Tensor`] leaves. [`Bindable`] walks the
//! tree in declaration order, both to bind leaves into a [`Graph`] and to hand
//! them to the optimizer, so gradient `k` of a graph always belongs to tensor
//! `k` of the struct. Structs are declared through [`parameters!`], which
//! derives both walks from the same field list.
//!
//! [`Graph`]: crate::autodiff::Graph

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, ConstBinder, NodeId};
use crate::tensor::Tensor;

pub trait Bindable {
    type Vars: Copy + std::fmt::Debug;

    fn bind(&self, b: &mut dyn Binder) -> Self::Vars;

    /// Trainable tensors, in binding order.
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t));
        out
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl Bindable for Tensor {
    type Vars = NodeId;

    fn bind(&self, b: &mut dyn Binder) -> NodeId {
        b.bind_trainable(self)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(self)
    }
}

impl<T: Bindable> Bindable for Option<T> {
    type Vars = Option<T::Vars>;

    fn bind(&self, b: &mut dyn Binder) -> Self::Vars {
        self.as_ref().map(|t| t.bind(b))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        if let Some(t) = self {
            t.visit(f)
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        if let Some(t) = self {
            t.visit_mut(f)
        }
    }
}

/// Non-trainable state carried alongside parameters (frozen encoders).
/// Binds as constants and is invisible to the optimizer and EMA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Frozen<T>(pub T);

impl<T: Bindable> Bindable for Frozen<T> {
    type Vars = T::Vars;

    fn bind(&self, b: &mut dyn Binder) -> Self::Vars {
        self.0.bind(&mut ConstBinder(b))
    }

    fn visit<'a>(&'a self, _f: &mut dyn FnMut(&'a Tensor)) {}

    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Tensor)) {}
}

/// Declares a parameter struct and its bound-node counterpart.
///
/// ```ignore
/// parameters! {
///     pub struct GateParams / GateVars {
///         pub w_f: Tensor,
///         pub b_f: Tensor,
///     }
/// }
/// ```
#[macro_export]
macro_rules! parameters {
    (
        $(#[$meta:meta])*
        pub struct $name:ident / $vars:ident {
            $( $(#[$fmeta:meta])* pub $field:ident : $ty:ty ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $ty ),*
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $( pub $field: <$ty as $crate::params::Bindable>::Vars ),*
        }

        impl $crate::params::Bindable for $name {
            type Vars = $vars;

            fn bind(&self, b: &mut dyn $crate::autodiff::Binder) -> $vars {
                $vars { $( $field: self.$field.bind(b) ),* }
            }

            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::tensor::Tensor)) {
                $( self.$field.visit(f); )*
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut $crate::tensor::Tensor)) {
                $( self.$field.visit_mut(f); )*
            }
        }
    };
}
