//! Named parameter storage and per-graph binding.
//!
//! Parameters live in a [`ParamStore`] as plain buffers. A forward pass
//! borrows them through a [`Binding`], which hands out one leaf tensor per
//! name (shared buffer, no copy) and later collects their gradients.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{invalid, shape_err, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered parameter collection, partitioned into frozen and trainable sets.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<T>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err(
                "param",
                format!("`{name}`: shape {shape:?} does not hold {} values", data.len()),
            ));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter().filter(|p| p.trainable)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter().filter(|p| !p.trainable)
    }

    /// Total element count of the selected partition.
    pub fn count(&self, trainable: bool) -> usize {
        self.entries.iter().filter(|p| p.trainable == trainable).map(Param::numel).sum()
    }

    /// Element count of every parameter whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|p| p.name.starts_with(prefix)).map(Param::numel).sum()
    }

    /// Mutable access to a buffer (copy-on-write when still shared).
    pub fn data_mut(&mut self, name: &str) -> Result<&mut Vec<T>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?;
        Ok(Arc::make_mut(&mut self.entries[i].data))
    }

    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let slot = self.data_mut(name)?;
        if slot.len() != data.len() {
            return Err(shape_err(
                "param",
                format!("`{name}`: expected {} values, got {}", slot.len(), data.len()),
            ));
        }
        *slot = data;
        Ok(())
    }

    /// Copies every buffer whose name matches `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in other.iter() {
            let i = *self
                .index
                .get(&p.name)
                .ok_or_else(|| invalid(format!("checkpoint tensor `{}` not in model", p.name)))?;
            if self.entries[i].shape != p.shape {
                return Err(shape_err(
                    "load",
                    format!("`{}`: model {:?} vs checkpoint {:?}", p.name, self.entries[i].shape, p.shape),
                ));
            }
            self.entries[i].data = Arc::clone(&p.data);
        }
        if let Some(missing) = self.entries.iter().find(|e| !other.contains(&e.name)) {
            return Err(invalid(format!("checkpoint lacks tensor `{}`", missing.name)));
        }
        Ok(())
    }

    /// Leaf tensors for one forward pass. With `track`, trainable
    /// parameters require gradients.
    pub fn bind(&self, track: bool) -> Binding<'_, T> {
        Binding {
            store: self,
            track,
            leaves: RefCell::new(BTreeMap::new()),
        }
    }
}

pub struct Binding<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    track: bool,
    leaves: RefCell<BTreeMap<String, Tensor<T>>>,
}

impl<T: Scalar> Binding<'_, T> {
    pub fn get(&self, name: &str) -> Result<Tensor<T>> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?;
        let leaf = Tensor::from_shared(&p.shape, Arc::clone(&p.data), self.track && p.trainable)?;
        self.leaves.borrow_mut().insert(name.to_string(), leaf.clone());
        Ok(leaf)
    }

    /// Gradients of every tracked leaf used so far; leaves the loss did
    /// not reach report zeros.
    pub fn grads(&self) -> BTreeMap<String, Vec<T>> {
        self.leaves
            .borrow()
            .iter()
            .filter(|(_, t)| t.tracks_grad())
            .map(|(name, t)| (name.clone(), t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()])))
            .collect()
    }
}

/// Registers freshly initialized parameters under a common prefix.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: RngState,
    trainable: bool,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: RngState, trainable: bool, prefix: &str) -> Self {
        Self {
            store,
            rng,
            trainable,
            prefix: prefix.to_string(),
        }
    }

    /// Builder for a nested scope `prefix.name`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let label = self.rng.next_u64();
        ParamBuilder {
            store: &mut *self.store,
            rng: self.rng.split(label),
            trainable: self.trainable,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn full_name(&self, name: &str) -> String {
        join(&self.prefix, name)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<String> {
        let n = shape.iter().product();
        let data = self.rng.normal_vec(n, std).into_iter().map(T::from_f64_lossy).collect();
        self.push(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<String> {
        let n = shape.iter().product();
        self.push(name, shape, vec![T::from_f64_lossy(value); n])
    }

    pub fn values(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<String> {
        self.push(name, shape, data)
    }

    fn push(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<String> {
        let full = join(&self.prefix, name);
        self.store.insert(&full, shape, data, self.trainable)?;
        Ok(full)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
