//! Threaded batch runner. Workers evaluate disjoint contiguous slices of the
//! batch and fill result slots by index, so the outcome order (and therefore
//! the in-order gradient reduction downstream) is identical to the
//! sequential runner, bit for bit.

use rpt_core::elem::Elem;
use rpt_core::model::RptSrModel;
use rpt_core::tensor::Tensor;
use rpt_core::train::{run_sample, SampleOutcome, SampleRunner};
use rpt_core::Result;

pub struct ThreadedRunner {
    pub threads: usize,
}

impl ThreadedRunner {
    /// `threads` = 0 picks the available parallelism.
    pub fn new(threads: usize) -> ThreadedRunner {
        let threads = if threads == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            threads
        };
        ThreadedRunner { threads }
    }
}

impl<E: Elem> SampleRunner<E> for ThreadedRunner {
    fn run_batch(&self, model: &RptSrModel<E>, batch: &[(Tensor<E>, Tensor<E>)]) -> Result<Vec<SampleOutcome<E>>> {
        let workers = self.threads.min(batch.len()).max(1);
        if workers == 1 {
            return batch.iter().map(|(lr, hr)| run_sample(model, lr, hr)).collect();
        }
        let chunk = batch.len().div_ceil(workers);
        let mut slots: Vec<Option<Result<SampleOutcome<E>>>> = Vec::new();
        slots.resize_with(batch.len(), || None);
        std::thread::scope(|scope| {
            for (slot_chunk, batch_chunk) in slots.chunks_mut(chunk).zip(batch.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, (lr, hr)) in slot_chunk.iter_mut().zip(batch_chunk) {
                        *slot = Some(run_sample(model, lr, hr));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("worker filled its slot")).collect()
    }
}
