//! Chunked replay buffer.
//!
//! Every stored task appends two chunks: its labeled benign samples, then
//! its labeled malware samples. Retrieval ignores chunk boundaries and draws
//! from two logical pools (all benign, all malware) in a fixed proportion.
//!
//! Samples labeled under a delay policy wait in a queue and are admitted
//! `delta` tasks later with refreshed labels.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;

use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub task_id: usize,
    pub label: u8,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayedEntry {
    pub admit_at_task: usize,
    pub labeled_at_task: usize,
    pub samples: Vec<Sample>,
}

/// Number of tasks a labeled batch waits before entering the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DelayPolicy {
    pub delta_tasks: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferMemory {
    chunks: Vec<Chunk>,
    delay_queue: Vec<DelayedEntry>,
    stored_tasks: BTreeSet<usize>,
    clock: Option<usize>,
}

/// Snapshot of buffer occupancy for the run's memory report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occupancy {
    pub chunks: usize,
    pub benign: usize,
    pub malware: usize,
    pub queue_entries: usize,
    pub queued_samples: usize,
}

impl BufferMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn delay_queue(&self) -> &[DelayedEntry] {
        &self.delay_queue
    }

    pub fn len(&self) -> usize {
        self.chunks.iter().map(|c| c.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored samples of one class across all chunks, in chunk order.
    pub fn class_pool(&self, label: u8) -> impl Iterator<Item = &Sample> {
        self.chunks
            .iter()
            .filter(move |c| c.label == label)
            .flat_map(|c| c.samples.iter())
    }

    pub fn class_count(&self, label: u8) -> usize {
        self.class_pool(label).count()
    }

    /// All stored samples, in chunk order.
    pub fn exemplars(&self) -> impl Iterator<Item = &Sample> {
        self.chunks.iter().flat_map(|c| c.samples.iter())
    }

    pub fn occupancy(&self) -> Occupancy {
        Occupancy {
            chunks: self.chunks.len(),
            benign: self.class_count(0),
            malware: self.class_count(1),
            queue_entries: self.delay_queue.len(),
            queued_samples: self.delay_queue.iter().map(|e| e.samples.len()).sum(),
        }
    }

    /// Appends a benign chunk and a malware chunk holding the task's labeled
    /// samples, split by observed label.
    pub fn store_task_chunks(&mut self, task_id: usize, samples: Vec<Sample>) -> Result<()> {
        if self.stored_tasks.contains(&task_id) {
            return Err(Error::DuplicateTask(task_id));
        }
        let mut benign = Vec::new();
        let mut malware = Vec::new();
        for s in samples {
            match s.observed_label {
                Some(0) => benign.push(s),
                Some(1) => malware.push(s),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "sample {} has no binary label",
                        s.id
                    )))
                }
            }
        }
        self.stored_tasks.insert(task_id);
        self.chunks.push(Chunk {
            task_id,
            label: 0,
            samples: benign,
        });
        self.chunks.push(Chunk {
            task_id,
            label: 1,
            samples: malware,
        });
        Ok(())
    }

    /// Draws `round(bma * b_m)` malware and the rest benign, uniformly and
    /// without replacement. A short pool is topped up from the other one.
    pub fn retrieve_balanced<R: Rng + ?Sized>(
        &self,
        b_m: usize,
        bma: f64,
        rng: &mut R,
    ) -> Result<Vec<Sample>> {
        if !(0.0..=1.0).contains(&bma) {
            return Err(Error::InvalidArgument(format!("bma {bma} outside [0, 1]")));
        }
        if self.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let benign: Vec<&Sample> = self.class_pool(0).collect();
        let malware: Vec<&Sample> = self.class_pool(1).collect();
        let want_mal = (bma * b_m as f64).round() as usize;
        let want_ben = b_m - want_mal;
        let mal0 = want_mal.min(malware.len());
        let ben0 = want_ben.min(benign.len());
        let n_ben = (ben0 + (want_mal - mal0)).min(benign.len());
        let n_mal = (mal0 + (want_ben - ben0)).min(malware.len());
        let mut out = Vec::with_capacity(n_mal + n_ben);
        for i in index::sample(rng, malware.len(), n_mal) {
            out.push(malware[i].clone());
        }
        for i in index::sample(rng, benign.len(), n_ben) {
            out.push(benign[i].clone());
        }
        Ok(out)
    }

    /// Queues samples labeled at `labeled_at_task` for admission after the
    /// policy's delay. A zero delay stores them immediately.
    pub fn enqueue_delayed(
        &mut self,
        samples: Vec<Sample>,
        labeled_at_task: usize,
        policy: DelayPolicy,
    ) -> Result<()> {
        if policy.delta_tasks == 0 {
            return self.store_task_chunks(labeled_at_task, samples);
        }
        let admit_at_task = labeled_at_task + policy.delta_tasks;
        let pos = self
            .delay_queue
            .partition_point(|e| e.admit_at_task <= admit_at_task);
        self.delay_queue.insert(
            pos,
            DelayedEntry {
                admit_at_task,
                labeled_at_task,
                samples,
            },
        );
        Ok(())
    }

    /// Admits every queue entry due at or before `current_task`, relabeling
    /// each sample with `refresh`. Returns the number of admitted samples.
    pub fn advance_delay_queue<F>(&mut self, current_task: usize, refresh: F) -> Result<usize>
    where
        F: Fn(&Sample) -> u8,
    {
        if let Some(last) = self.clock {
            if current_task < last {
                return Err(Error::NonMonotonicClock {
                    last,
                    got: current_task,
                });
            }
        }
        self.clock = Some(current_task);
        let due = self
            .delay_queue
            .partition_point(|e| e.admit_at_task <= current_task);
        let mut admitted = 0;
        for entry in self.delay_queue.drain(..due).collect::<Vec<_>>() {
            let samples: Vec<Sample> = entry
                .samples
                .into_iter()
                .map(|mut s| {
                    s.observed_label = Some(refresh(&s));
                    s
                })
                .collect();
            admitted += samples.len();
            self.store_task_chunks(entry.labeled_at_task, samples)?;
        }
        Ok(admitted)
    }
}
