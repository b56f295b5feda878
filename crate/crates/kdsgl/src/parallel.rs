use std::thread;

use kdsgl_core::trainer::{StudentOutcome, StudentStage};
use kdsgl_core::Result;

/// Trains every student on its own scoped thread. Each student draws from
/// its own seed stream, so the outcomes equal a sequential run.
pub fn parallel_students(stage: &StudentStage) -> Result<Vec<StudentOutcome>> {
    thread::scope(|scope| {
        let handles: Vec<_> = (0..stage.k())
            .map(|k| scope.spawn(move || stage.train_student(k)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|panic| std::panic::resume_unwind(panic))
            })
            .collect()
    })
}
