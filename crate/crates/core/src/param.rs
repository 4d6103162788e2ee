//! Named trainable parameters and buffers.
//!
//! A [`Param`] owns its storage between steps. During a forward pass it
//! is copied onto the active tape once and the node id is cached against
//! the tape generation, so repeated uses (tied embeddings, the replay
//! pass sharing weights with the main pass) hit the same leaf and their
//! gradients accumulate.

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use std::cell::Cell;

#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Optimizer updates this parameter. Frozen projections and the slow
    /// target copies keep their gradients off the tape entirely.
    pub trainable: bool,
    /// Whether decoupled weight decay applies; norms, gates, biases and
    /// the embedding table opt out.
    pub decay: bool,
    cache: Cell<(u64, usize)>,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Param {
            name: self.name.clone(),
            value: self.value.clone(),
            trainable: self.trainable,
            decay: self.decay,
            cache: Cell::new((0, 0)),
        }
    }
}

impl Param {
    pub fn new(name: impl Into<String>, mut value: Tensor, trainable: bool, decay: bool) -> Self {
        value.requires_grad = trainable;
        value.grad = None;
        value.tape_id = None;
        Param {
            name: name.into(),
            value,
            trainable,
            decay,
            cache: Cell::new((0, 0)),
        }
    }

    /// Projection init: uniform with scale 1/sqrt(fan_in).
    pub fn proj(name: impl Into<String>, rng: &mut Rng, rows: usize, cols: usize) -> Self {
        let bound = 1.0 / (rows as f64).sqrt();
        Param::new(name, Tensor::uniform(rng, vec![rows, cols], bound), true, true)
    }

    /// Vector init at a constant (biases at 0, norm scales at 1).
    pub fn vector(name: impl Into<String>, len: usize, fill: f64) -> Self {
        Param::new(name, Tensor::new(vec![len], vec![fill; len]), true, false)
    }

    /// Learned scalar initialized at `fill`; never weight-decayed.
    pub fn scalar(name: impl Into<String>, fill: f64) -> Self {
        Param::new(name, Tensor::scalar(fill), true, false)
    }

    /// Puts the parameter on the tape, reusing the node if this tape has
    /// already seen it.
    pub fn on_tape(&self, tape: &mut Tape) -> usize {
        let (gen, id) = self.cache.get();
        if gen == tape.generation() {
            return id;
        }
        let id = tape.leaf(&self.value);
        self.cache.set((tape.generation(), id));
        id
    }

    /// Forces the parameter to resolve to an existing tape node; the
    /// finite-difference harness uses this to substitute perturbed
    /// leaves for real storage.
    pub fn preset(&self, tape_gen: u64, id: usize) {
        self.cache.set((tape_gen, id));
    }

    /// The gradient this parameter received on `tape`, if it was used
    /// and anything flowed back into it.
    pub fn grad_on<'t>(&self, tape: &'t Tape) -> Option<&'t [f64]> {
        let (gen, id) = self.cache.get();
        if gen != tape.generation() {
            return None;
        }
        tape.grad(id)
    }

    /// Whether this parameter was placed on `tape` at all.
    pub fn used_on(&self, tape: &Tape) -> bool {
        self.cache.get().0 == tape.generation()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn on_tape_reuses_the_same_leaf_within_one_tape() {
        let mut rng = Rng::new(1);
        let p = Param::proj("w", &mut rng, 3, 3);
        let mut tape = Tape::new();
        let a = p.on_tape(&mut tape);
        let b = p.on_tape(&mut tape);
        assert_eq!(a, b);
        let mut tape2 = Tape::new();
        let c = p.on_tape(&mut tape2);
        let d = p.on_tape(&mut tape2);
        assert_eq!(c, d);
    }

    #[test]
    fn shared_leaf_accumulates_gradient_from_both_uses() {
        let mut rng = Rng::new(2);
        let p = Param::proj("w", &mut rng, 2, 2);
        let mut tape = Tape::new();
        let w = p.on_tape(&mut tape);
        let x = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y1 = tape.matmul(x, w).unwrap();
        let y2 = tape.matmul(x, w).unwrap();
        let s = tape.add(y1, y2);
        let loss = tape.mean_all(s);
        tape.backward(loss).unwrap();
        let g = p.grad_on(&tape).unwrap();
        // each element feeds the mean twice: grad = 2 * 1/4
        for &v in g {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_param_takes_no_gradient() {
        let mut rng = Rng::new(3);
        let mut p = Param::proj("w", &mut rng, 2, 2);
        p.trainable = false;
        p.value.requires_grad = false;
        let mut tape = Tape::new();
        let w = p.on_tape(&mut tape);
        let x = tape.constant(vec![2, 2], vec![1.0; 4]);
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.mean_all(y);
        tape.backward(loss).unwrap();
        assert!(p.grad_on(&tape).is_none());
    }
}
