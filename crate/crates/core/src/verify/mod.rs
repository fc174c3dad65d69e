//! Independent oracles, finite-difference gradient checks and the acceptance
//! checks shared by the test suite and the `verify` command.

mod ablation;
mod gradcheck;
mod oracles;
mod suite;

pub use ablation::{run_ablation, AblationConfig, AblationReport, AblationRun};
pub use gradcheck::{
    finite_diff_grad, reduced_model_config, rel_error, FnTarget, GradCheckReport, GradTarget, GroupReport,
    InteractionTarget, LossTarget, ModelTarget, ProjectionTarget, REL_FLOOR,
};
pub use oracles::{mat_to_array, max_abs_diff, naive_interact, naive_project, NaiveGraph};
pub use suite::{
    check_ablation, check_determinism, check_f1_reference, check_gradients, check_oracles, check_param_count,
    check_projection_invariants, check_render_colors, format_table, projection_violations, run_quick_suite,
    CheckOutcome, PARAM_ANCHOR,
};
