//! Named, ordered parameter storage.
//!
//! Registration order is the canonical order everywhere: initialization draws
//! from the RNG in this order, the optimizer walks it, and checkpoints store
//! records in it. Keeping one order is what makes same-seed runs bit-identical.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub u32);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-sqrt(1/fan_in), +sqrt(1/fan_in))
    Uniform { fan_in: usize },
    Zero,
}

pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Weight decay applies to weight matrices/kernels, not biases.
    pub decay: bool,
}

pub struct ParamStore {
    entries: Vec<ParamEntry>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Uniform { fan_in } => {
                let bound = (1.0 / fan_in as f32).sqrt();
                (0..numel).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::Zero => vec![0.0; numel],
        };
        let tensor = Tensor::new(shape.to_vec(), data).unwrap().with_grad();
        let decay = shape.len() > 1;
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            decay,
        });
        ParamId(self.entries.len() as u32 - 1)
    }

    /// Puts the parameter on the tape as a gradient-tracked leaf. Binding the
    /// same parameter twice on one tape returns the same node, so gradients
    /// from shared use accumulate in one place.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        let e = &self.entries[id.0 as usize];
        tape.bound_leaf(id.0, &e.tensor.shape, &e.tensor.data)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0 as usize].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0 as usize].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| ParamId(i as u32))
    }

    /// Copies values in from a name->tensor map (checkpoint restore). Every
    /// entry must be present with a matching shape.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        for e in &mut self.entries {
            let src = values
                .iter()
                .find(|(n, _)| n == &e.name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing parameter {}", e.name)))?;
            if src.1.shape != e.tensor.shape {
                return Err(Error::shape(
                    &src.1.shape,
                    &e.tensor.shape,
                    &format!("checkpoint parameter {}", e.name),
                ));
            }
            e.tensor.data.copy_from_slice(&src.1.data);
        }
        Ok(())
    }
}
