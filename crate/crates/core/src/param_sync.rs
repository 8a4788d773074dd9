//! Tag-driven gradient synchronization and the SGD update.
//!
//! Each trainable tensor carries a [`ParamTag`] naming the ranks that hold a
//! replica of it. Replicated tensors get their gradients averaged over that
//! group; expert weights are unique to their worker and are left alone.

use crate::comm::Communicator;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamTag {
    /// Replicated on every rank.
    World,
    /// Replicated across the rank's data-parallel group.
    DataParallel,
    /// Owned by this rank alone.
    NoSync,
}

/// Ranks split into model-parallel groups of consecutive ranks; the
/// data-parallel groups are orthogonal to them (same position in every
/// model-parallel group).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProcessTopology {
    world_size: usize,
    mp_size: usize,
}

impl ProcessTopology {
    pub fn new(world_size: usize, model_parallel_size: usize) -> Result<Self> {
        if world_size == 0 || model_parallel_size == 0 || !world_size.is_multiple_of(model_parallel_size) {
            return Err(Error::InvalidArgument(format!(
                "model-parallel group size {model_parallel_size} does not divide world size {world_size}"
            )));
        }
        Ok(ProcessTopology {
            world_size,
            mp_size: model_parallel_size,
        })
    }

    /// Pure expert parallelism: one model-parallel group spanning the world.
    pub fn expert_parallel(world_size: usize) -> Result<Self> {
        Self::new(world_size, world_size)
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn model_parallel_size(&self) -> usize {
        self.mp_size
    }

    pub fn data_parallel_size(&self) -> usize {
        self.world_size / self.mp_size
    }

    pub fn model_parallel_group(&self, rank: usize) -> Vec<usize> {
        let start = rank / self.mp_size * self.mp_size;
        (start..start + self.mp_size).collect()
    }

    pub fn data_parallel_group(&self, rank: usize) -> Vec<usize> {
        let pos = rank % self.mp_size;
        (0..self.data_parallel_size()).map(|j| pos + j * self.mp_size).collect()
    }

    pub fn data_parallel_groups(&self) -> Vec<Vec<usize>> {
        (0..self.mp_size).map(|p| self.data_parallel_group(p)).collect()
    }
}

/// The ranks sharing a parameter tagged `tag`, or `None` if it is not synced.
pub fn resolve_group(tag: ParamTag, topology: &ProcessTopology, rank: usize) -> Option<Vec<usize>> {
    match tag {
        ParamTag::World => Some((0..topology.world_size).collect()),
        ParamTag::DataParallel => Some(topology.data_parallel_group(rank)),
        ParamTag::NoSync => None,
    }
}

/// One named gradient handed to [`sync_gradients`].
#[derive(Debug)]
pub struct TaggedGrad<'a> {
    pub name: String,
    pub tag: ParamTag,
    pub grad: &'a mut Matrix,
}

impl<'a> TaggedGrad<'a> {
    pub fn new(name: impl Into<String>, tag: ParamTag, grad: &'a mut Matrix) -> Self {
        TaggedGrad {
            name: name.into(),
            tag,
            grad,
        }
    }
}

type Signature<'a> = (&'a str, ParamTag, Option<(usize, usize)>);

/// Replaces every synced gradient with its mean over the tag's group.
///
/// Collective: all ranks pass the same names and tags in the same order, and
/// the same shapes for synced entries. A mismatch is a protocol error on
/// every rank, detected before any gradient moves.
pub fn sync_gradients(
    grads: &mut [TaggedGrad<'_>],
    topology: &ProcessTopology,
    comm: &mut Communicator,
) -> Result<()> {
    if topology.world_size != comm.world_size() {
        return Err(Error::InvalidArgument(format!(
            "topology for {} ranks used with a world of {}",
            topology.world_size,
            comm.world_size()
        )));
    }
    let signature: Vec<Signature> = grads
        .iter()
        .map(|g| {
            let synced = (g.tag != ParamTag::NoSync).then(|| g.grad.shape());
            (g.name.as_str(), g.tag, synced)
        })
        .collect();
    comm.agree(Communicator::fingerprint(&signature))?;

    let rank = comm.rank();
    for g in grads.iter_mut() {
        let Some(group) = resolve_group(g.tag, topology, rank) else {
            continue;
        };
        let n = group.len() as f64;
        let mut summed = comm.allreduce_sum(g.grad, &group)?;
        for v in summed.data_mut() {
            *v /= n;
        }
        *g.grad = summed;
    }
    Ok(())
}

/// `p <- p - lr * g`, elementwise.
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be finite and non-negative")));
    }
    if param.shape() != grad.shape() {
        return Err(Error::shape(
            "sgd_step",
            format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
        ));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}
