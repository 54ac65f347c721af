//! Prototype imprinting, the distillation teacher and the loss family.

mod losses;
mod prototype;
mod teacher;

pub use losses::{ce_loss, kd_old_loss, l2_feature_loss, mean_entropy, pd_loss, total_loss, DistillVariant, LossConfig, LossTerms};
pub use prototype::{imprint, map_prototype};
pub use teacher::{build_teacher, TeacherOutputs, TeacherSnapshot};
