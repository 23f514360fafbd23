//! Data-free distillation: the teacher–student objective, teacher-driven
//! sample collection, the knowledge batch set, and the training strategies.

mod pool;
mod run;
mod teacher;

pub use pool::{pool_capacity, select_subset, KnowledgeBatchSet};
pub use run::{
    mix_dataset, run_distillation, synthesize_dataset, DataTrainer, DistillConfig, Distiller,
    StepRecord, Strategy,
};
pub use teacher::{dkdm_loss, generate_chain, shuffle_denoise, teacher_step, CountingDenoiser};
