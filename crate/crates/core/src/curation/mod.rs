//! Human curation loop: zero-population candidate sampling, the decision
//! store, and the HTTP API used by the review UI.

mod api;
mod sampler;
mod store;

pub use api::{router, serve, DecisionRequest, ProgressResponse, TileDetail, TilePage, ZeroCandidateRequest};
pub use sampler::sample_zero_candidates;
pub use store::{read_decision_log, CurationStore, SurveyPoint};
