//! Named parameter storage and the layer primitives built on it.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, ParamKey, Var};
use crate::error::{Error, Result};
use crate::tensor::{real, Real, Tensor};
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// An ordered collection of named parameter tensors belonging to one module.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    id: u16,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Graph handles for every tensor of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new(id: u16) -> Self {
        ParamStore {
            id,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    /// Same tensors under a different store id (used for frozen snapshots).
    pub fn with_id(&self, id: u16) -> Self {
        ParamStore {
            id,
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn key(&self, idx: usize) -> ParamKey {
        ParamKey {
            store: self.id,
            index: idx as u32,
        }
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Inserts every tensor into `g` as a parameter leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(self.key(i), t.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// Replaces every tensor with values of matching shape, e.g. from a checkpoint.
    pub fn load(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::InvalidCheckpoint(alloc::format!(
                "store {} expects {} tensors, got {}",
                self.id,
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (dst, src)) in self.tensors.iter().zip(&tensors).enumerate() {
            if dst.shape() != src.shape() {
                return Err(Error::InvalidCheckpoint(alloc::format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    self.names[i],
                    dst.shape(),
                    src.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            id: self.id,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// 64-bit FNV-1a digest over names, shapes and bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (name, t) in self.names.iter().zip(&self.tensors) {
            name.bytes().for_each(&mut eat);
            for &d in t.shape() {
                (d as u64).to_le_bytes().into_iter().for_each(&mut eat);
            }
            for v in t.data() {
                v.as_f64()
                    .to_bits()
                    .to_le_bytes()
                    .into_iter()
                    .for_each(&mut eat);
            }
        }
        h
    }
}

pub(crate) fn normal_tensor<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    std: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            real::<T>(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// 2-D convolution layer, stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: usize,
    pub b: Option<usize>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He fan-in initialisation, zero bias.
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let w = store.push(
            alloc::format!("{name}.weight"),
            normal_tensor(rng, &[cout, cin, k, k], (2.0 / fan_in).sqrt()),
        );
        let b = bias.then(|| store.push(alloc::format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d {
            w,
            b,
            cin,
            cout,
            k,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + if self.b.is_some() { self.cout } else { 0 }
    }
}

/// Fully connected layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights `N(0, gain/fan_in)`, bias filled with `bias_fill`.
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        bias_fill: f64,
    ) -> Self {
        let w = store.push(
            alloc::format!("{name}.weight"),
            normal_tensor(rng, &[fan_out, fan_in], (gain / fan_in as f64).sqrt()),
        );
        let b = store.push(
            alloc::format!("{name}.bias"),
            Tensor::full(&[fan_out], real(bias_fill)),
        );
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}
