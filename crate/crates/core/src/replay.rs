//! Raw-token replay stores: a recent ring and a long-term reservoir.
//!
//! Training batches are cut into fixed-length chunks and pushed into
//! both stores. The ring overwrites circularly; the reservoir keeps a
//! uniform sample over everything it has ever been offered. Within one
//! optimizer step the trainer must sample before it pushes, so the
//! current batch can never replay into its own update.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct ReplayStores {
    /// Ring of recent chunks, each exactly `chunk_len` tokens.
    pub ring: Vec<Vec<u32>>,
    pub ring_cap: usize,
    pub ring_ptr: usize,
    /// Uniform reservoir over all offered chunks.
    pub long: Vec<Vec<u32>>,
    pub long_cap: usize,
    /// Chunks ever offered to the reservoir.
    pub seen: u64,
    pub chunk_len: usize,
    rng: Rng,
    pushed_this_step: bool,
}

impl ReplayStores {
    pub fn new(chunk_len: usize, ring_cap: usize, long_cap: usize, rng: Rng) -> Self {
        ReplayStores {
            ring: Vec::new(),
            ring_cap,
            ring_ptr: 0,
            long: Vec::new(),
            long_cap,
            seen: 0,
            chunk_len,
            rng,
            pushed_this_step: false,
        }
    }

    /// Resets the per-step ordering guard; the trainer calls this at
    /// the top of every micro-step.
    pub fn begin_step(&mut self) {
        self.pushed_this_step = false;
    }

    pub fn ring_occupancy(&self) -> usize {
        self.ring.len()
    }

    pub fn long_occupancy(&self) -> usize {
        self.long.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty() && self.long.is_empty()
    }

    /// Cuts a [B, T] token block into rows of whole chunks, dropping
    /// each row's tail shorter than the chunk length.
    pub fn chunk_tokens(x: &[u32], batch: usize, time: usize, chunk_len: usize) -> Vec<Vec<u32>> {
        assert!(chunk_len >= 2, "replay chunks need at least one transition");
        assert_eq!(x.len(), batch * time, "token block shape mismatch");
        let m = time / chunk_len;
        let mut out = Vec::with_capacity(batch * m);
        for b in 0..batch {
            let row = &x[b * time..(b + 1) * time];
            for c in 0..m {
                out.push(row[c * chunk_len..(c + 1) * chunk_len].to_vec());
            }
        }
        out
    }

    /// Appends chunks to the ring and offers each to the reservoir.
    pub fn push_chunks(&mut self, chunks: Vec<Vec<u32>>) {
        self.pushed_this_step = true;
        for chunk in chunks {
            debug_assert_eq!(chunk.len(), self.chunk_len);
            if self.ring.len() < self.ring_cap {
                self.ring.push(chunk.clone());
            } else {
                self.ring[self.ring_ptr] = chunk.clone();
            }
            self.ring_ptr = (self.ring_ptr + 1) % self.ring_cap;

            // reservoir: offer number seen+1 draws a slot in [0, seen]
            // and lands whenever the slot is inside the buffer
            let r = self.rng.below(self.seen + 1) as usize;
            if self.long.len() < self.long_cap {
                self.long.push(chunk);
            } else if r < self.long_cap {
                self.long[r] = chunk;
            }
            self.seen += 1;
        }
    }

    /// Draws a replay batch, long-term rows first, with replacement.
    /// Empty stores fall back on each other; both empty yields an empty
    /// batch and the caller skips the replay loss.
    pub fn sample_replay(&mut self, b_r: usize, rho_long: f64) -> Result<Vec<Vec<u32>>> {
        if self.pushed_this_step {
            return Err(Error::Contract(
                "replay sampled after this step's push; sample must come first".into(),
            ));
        }
        if self.is_empty() || b_r == 0 {
            return Ok(Vec::new());
        }
        let mut b_long = (b_r as f64 * rho_long).round() as usize;
        b_long = b_long.min(b_r);
        let mut b_recent = b_r - b_long;
        if self.long.is_empty() {
            b_recent += b_long;
            b_long = 0;
        }
        if self.ring.is_empty() {
            b_long += b_recent;
            b_recent = 0;
        }
        let mut out = Vec::with_capacity(b_r);
        for _ in 0..b_long {
            let i = self.rng.below(self.long.len() as u64) as usize;
            out.push(self.long[i].clone());
        }
        for _ in 0..b_recent {
            let i = self.rng.below(self.ring.len() as u64) as usize;
            out.push(self.ring[i].clone());
        }
        Ok(out)
    }
}
