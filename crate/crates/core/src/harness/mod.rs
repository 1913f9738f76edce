//! Training, evaluation, scoring, routing pictures and size reports.

mod eval;
mod report;
mod train;
mod viz;

pub use eval::{edit_distance, evaluate, EditStats, EvalReport, RoutingScore, SubsetScore};
pub use report::{report, SizeReport, SizeRow};
pub use train::{clip_global_norm, train, utterance_grads, Adam, TrainConfig, TrainLogRecord};
pub use viz::{render_ppm, route_viz, RouteViz};
