//! Optimizer, teacher and student loops, checkpoints, logs and the epoch sweep.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod features;
pub mod log;
pub mod student;
pub mod sweep;
pub mod teacher;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
pub use config::{TrainConfig, Variant};
pub use features::Frozen;
pub use log::TrainLog;
pub use student::{distill_student, distill_student_with, load_student, StudentRun, StudentTrainer};
pub use sweep::{epoch_sweep, write_sweep_csv, SweepRow};
pub use teacher::{load_teacher, train_teacher, train_teacher_with, TeacherRun, TeacherTrainer};
