//! Optimizers: L-BFGS for input synthesis, Adam for network training.

mod adam;
mod lbfgs;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsResult, StopReason, TraceRow};

/// CSV rendering of an optimizer trace: `iteration,loss,grad_norm`.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,loss,grad_norm\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{:e}\n", r.iteration, r.loss, r.grad_norm));
    }
    out
}
